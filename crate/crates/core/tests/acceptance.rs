//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs every criterion by default. Pass criterion numbers to run a subset,
//! e.g. `cargo test --test acceptance -- 2 4`.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use common::*;
use vqacoin::attention::{bilinear_attend, si_branch, AttentionMap, BilinearGlimpse, SelfAttentionHead};
use vqacoin::data::{gen_split, load_dataset, Category, SplitPaths, SynthConfig};
use vqacoin::diffmath::{GradBuffer, Graph, ParamStore, Tensor};
use vqacoin::eval::{
    dump_attention, export_results, parse_export, scaling_experiment, soft_accuracy, AccuracyMode, AttentionDump,
    EvalReport, ExportRecord, ScalingConfig,
};
use vqacoin::model::{Checkpoint, Mode, ModelConfig, ModelInput, Target, VqaCoin};
use vqacoin::textprep::{dedup_captions, normalize_tokens, similarity, AnswerSet, Vocabulary, DEDUP_THRESHOLD};
use vqacoin::train::{fit, AdamaxState, EpochRecord, TrainConfig, TrainSchedule};

/// Outcome of one criterion: pass flag and a one-line summary.
type Verdict = (bool, String);
type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let only: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 11] = [
        ("gradient correctness", gradients),
        ("attention normalization", normalization),
        ("caption dedup", dedup),
        ("schedule golden table", schedule),
        ("adamax oracle", adamax),
        ("overfit", overfit),
        ("scaling harness", scaling),
        ("metric suite", metrics),
        ("full-size smoke test", full_size),
        ("reproducibility", reproducibility),
        ("format conformance", formats),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        println!("[{}] {id:>2} {name}: {detail} ({secs:.1} s)", if pass { "PASS" } else { "FAIL" });
        failed += usize::from(!pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn within(start: Instant, budget: Duration) -> bool {
    start.elapsed() < budget
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut cases = op_cases(4, 11);
    cases.extend(layer_cases(4, 12));
    cases.extend(model_cases(3, 13));
    let worst = cases
        .iter()
        .max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
        .expect("cases");
    let ops: BTreeSet<&str> = cases.iter().map(|c| c.name.as_str()).collect();
    let pass = cases.len() >= 100 && worst.max_rel <= 1e-4 && within(start, Duration::from_secs(60));
    (
        pass,
        format!(
            "{} cases over {} ops/layers, max rel err {:.2e} ({})",
            cases.len(),
            ops.len(),
            worst.max_rel,
            worst.name
        ),
    )
}

fn random_mask(len: usize, r: &mut impl Rng) -> Vec<bool> {
    let mut m: Vec<bool> = (0..len).map(|_| r.random_bool(0.3)).collect();
    let keep = r.random_range(0..len);
    m[keep] = false;
    m
}

/// Worst deviation of the total from one, and whether every masked cell is exactly zero.
fn check_map(w: &Tensor, rows: &[bool], cols: &[bool]) -> (f64, bool) {
    let m = cols.len();
    let zeros = w
        .data()
        .iter()
        .enumerate()
        .all(|(k, &v)| !(rows[k / m] || cols[k % m]) || v == 0.0);
    ((w.data().iter().sum::<f64>() - 1.0).abs(), zeros)
}

fn normalization() -> Verdict {
    let start = Instant::now();
    let mut r = rng(2);
    let (mut worst, mut zeros, mut maps) = (0.0f64, true, 0usize);
    for case in 0..1000u64 {
        let n = r.random_range(1..=14);
        let objects = r.random_range(1..=100);
        let si_len = r.random_range(1..=40);
        let (d_q, d_v, d_h) = (r.random_range(2..6), r.random_range(2..6), r.random_range(2..5));
        let mut store = ParamStore::new();
        let head = SelfAttentionHead::new(&mut store, "sa", d_q, &mut r);
        let image = BilinearGlimpse::new(&mut store, "img", d_v, d_q, d_h, d_q, &mut r);
        let si = BilinearGlimpse::new(&mut store, "si", d_q, d_q, d_h, d_q, &mut r);
        let q_mask = random_mask(n, &mut r);
        let v_mask = random_mask(objects, &mut r);
        let s_mask = random_mask(si_len, &mut r);
        let mut g = Graph::new(&store);
        let q = g.input(rand_tensor(&[n, d_q], &mut r, -2.0, 2.0)).unwrap();
        let v = g.input(rand_tensor(&[objects, d_v], &mut r, -2.0, 2.0)).unwrap();
        let s = g.input(rand_tensor(&[si_len, d_q], &mut r, -2.0, 2.0)).unwrap();

        let sa = head.attend(&mut g, q, Some(&q_mask)).unwrap();
        let (dev, z) = check_map(g.value(sa.weights), &[false], &q_mask);
        let img = bilinear_attend(&mut g, v, q, &image, Some(&v_mask), Some(&q_mask)).unwrap();
        let (dev2, z2) = check_map(g.value(img.map), &v_mask, &q_mask);
        let (_, si_map) = si_branch(&mut g, s, q, &si, Some(&s_mask), Some(&q_mask)).unwrap();
        let (dev3, z3) = check_map(g.value(si_map), &s_mask, &q_mask);
        worst = worst.max(dev).max(dev2).max(dev3);
        zeros &= z && z2 && z3;
        maps += 3;
        if !(z && z2 && z3) {
            return (false, format!("masked entry is nonzero in case {case}"));
        }
    }
    let pass = worst <= 1e-6 && zeros && within(start, Duration::from_secs(30));
    (pass, format!("{maps} maps over 1000 shapes, max |sum - 1| {worst:.1e}, masked entries all zero"))
}

fn dedup() -> Verdict {
    let (a, b) = ("man wearing a hat", "a man wearing a hat");
    let sim = similarity(&normalize_tokens(a), &normalize_tokens(b));
    let survivors = dedup_captions(&[a, b], DEDUP_THRESHOLD);
    let pair_ok = (sim - 8.0 / 9.0).abs() < 1e-12 && survivors == [a];

    let words = ["a", "man", "woman", "dog", "red", "hat", "on", "the", "street", "bus", "wearing", "sitting"];
    let mut r = rng(3);
    let mut idempotent = 0;
    for _ in 0..1000 {
        let caps: Vec<String> = (0..r.random_range(0..15))
            .map(|_| {
                let len = r.random_range(1..7);
                (0..len).map(|_| words[r.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
            })
            .collect();
        let once = dedup_captions(&caps, DEDUP_THRESHOLD);
        if dedup_captions(&once, DEDUP_THRESHOLD) == once {
            idempotent += 1;
        }
    }
    (
        pair_ok && idempotent == 1000,
        format!("sim {sim:.3}, {} survivor(s), idempotent on {idempotent}/1000 sets", survivors.len()),
    )
}

fn schedule() -> Verdict {
    let golden = [
        0.05e-3, 0.1e-3, 0.15e-3, 0.2e-3, 0.2e-3, 0.2e-3, 0.2e-3, 0.2e-3, 0.2e-3, 0.2e-3, 0.2e-3, 5e-5, 5e-5,
        1.25e-5, 3.125e-6, 7.8125e-7, 1.953125e-7, 4.8828125e-8,
    ];
    let s = TrainSchedule::paper();
    let mismatches: Vec<usize> = (1..=18)
        .filter(|&e| s.lr_at_epoch(e).unwrap().to_bits() != f64::to_bits(golden[e - 1]))
        .collect();
    (
        mismatches.is_empty(),
        format!("18 epochs, bit mismatches at {mismatches:?}"),
    )
}

fn run_adamax(theta0: &[f64], grad: impl Fn(&[f64], usize) -> Vec<f64>, lr: f64, steps: usize) -> Vec<Vec<f64>> {
    let mut store = ParamStore::new();
    let id = store.add("theta", Tensor::vector(theta0.to_vec()));
    let mut state = AdamaxState::new(&store);
    let mut out = Vec::new();
    for t in 0..steps {
        let g = grad(store.get(id).data(), t);
        let mut buf = GradBuffer::zeros_like(&store);
        buf.get_mut(id).data_mut().copy_from_slice(&g);
        state.step(&mut store, &buf, lr, None).unwrap();
        out.push(store.get(id).data().to_vec());
    }
    out
}

fn adamax() -> Verdict {
    let grads: Vec<Vec<f64>> = ADAMAX_FIXTURE_GRADS.iter().map(|g| g.to_vec()).collect();
    let got = run_adamax(&[1.0, -2.0], |_, t| grads[t].clone(), 0.002, 3);
    let reference = adamax_reference(&[1.0, -2.0], &grads, 0.002);
    let mut fixture_err = 0.0f64;
    for t in 0..3 {
        for k in 0..2 {
            fixture_err = fixture_err
                .max((got[t][k] - ADAMAX_FIXTURE_THETA[t][k]).abs())
                .max((got[t][k] - reference[t][k]).abs());
        }
    }

    let a = [1.0, 2.0, 0.5];
    let path = run_adamax(&[1.0, -2.0, 0.5], |th, _| th.iter().zip(a).map(|(x, a)| a * x).collect(), 0.1, 200);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let reached = path.iter().position(|th| norm(th) < 1e-3).map(|i| i + 1);
    (
        fixture_err <= 1e-12 && reached.is_some(),
        format!("fixture max err {fixture_err:.1e}, bowl |theta| < 1e-3 at step {reached:?}"),
    )
}

fn overfit_run(train: &[vqacoin::data::VqaExample]) -> (Vec<EpochRecord>, VqaCoin) {
    let schedule = TrainSchedule {
        epochs: 50,
        warmup_epochs: 4,
        lr_start: 2.5e-3,
        lr_plateau: 1e-2,
        plateau_until_epoch: 50,
        decay_epochs: vec![],
        batch_size: 16,
        ..TrainSchedule::desk()
    };
    let config = TrainConfig {
        schedule,
        ..TrainConfig::default()
    };
    let f = fit(train, train, &ModelConfig::desk(), &config, 1, &mut |_| Ok(())).unwrap();
    (f.outcome.trace, f.model)
}

fn overfit() -> Verdict {
    let start = Instant::now();
    let synth = SynthConfig {
        noise_sigma: 0.0,
        annotator_noise: 0.0,
        ..SynthConfig::default()
    };
    let train = gen_split(&synth, 0, 256).unwrap();
    let (trace, model) = overfit_run(&train);
    let (again, model2) = overfit_run(&train);
    let bits = |t: &[EpochRecord]| -> Vec<(u64, u64, Option<u64>)> {
        t.iter()
            .map(|r| (r.lr.to_bits(), r.train_loss.to_bits(), r.val_accuracy.map(f64::to_bits)))
            .collect()
    };
    let deterministic = bits(&trace) == bits(&again) && model.params == model2.params;
    let reached = trace
        .iter()
        .find(|r| r.val_accuracy.unwrap_or(0.0) >= 0.95)
        .map(|r| r.epoch);
    let best = trace.iter().filter_map(|r| r.val_accuracy).fold(0.0, f64::max);
    let pass = reached.is_some() && deterministic && within(start, Duration::from_secs(300));
    (
        pass,
        format!(
            "train accuracy {:.1}% (>= 95% from epoch {reached:?}), two runs identical: {deterministic}",
            100.0 * best
        ),
    )
}

fn scaling() -> Verdict {
    let start = Instant::now();
    let synth = SynthConfig::default();
    let train = gen_split(&synth, 0, 5000).unwrap();
    let val = gen_split(&synth, 1, 1000).unwrap();
    let train_config = TrainConfig {
        val_every_epoch: false,
        ..TrainConfig::default()
    };
    let config = ScalingConfig::new(ModelConfig::desk(), train_config, vec![0, 1, 2]);
    let report = scaling_experiment(&train, &val, &config, &mut |row| {
        eprintln!(
            "  scaling fraction {} seed {}: {:.4} ({:.0} s)",
            row.fraction,
            row.seed,
            row.val_accuracy,
            start.elapsed().as_secs_f64()
        )
    })
    .unwrap();
    let table = report.table();
    eprint!("{table}");
    let (low, high) = (report.mean_for(0.25).unwrap(), report.mean_for(1.0).unwrap());
    let shaped = table.starts_with("| train split | examples | val accuracy | seeds |") && report.means.len() == 4;
    let pass = high - low >= 0.02 && shaped && within(start, Duration::from_secs(45 * 60));
    let means: Vec<String> = report.means.iter().map(|(f, m)| format!("{f}: {:.2}", 100.0 * m)).collect();
    (
        pass,
        format!("means {}, gain {:.2} points", means.join(", "), 100.0 * (high - low)),
    )
}

fn metrics() -> Verdict {
    let ten = |matches: usize| -> Vec<String> {
        (0..10).map(|i| if i < matches { "red" } else { "blue" }.to_owned()).collect()
    };
    let fixtures = [(0, 0.0), (1, 1.0 / 3.0), (2, 2.0 / 3.0), (3, 1.0), (10, 1.0)];
    let fixtures_ok = fixtures
        .iter()
        .all(|&(m, want)| soft_accuracy("red", &ten(m), AccuracyMode::Direct).unwrap() == want);

    let mut r = rng(8);
    let pool = ["red", "blue", "2", "yes", "no"];
    let mut invariant = true;
    for _ in 0..500 {
        let mut answers: Vec<String> = (0..10).map(|_| pool[r.random_range(0..5)].to_owned()).collect();
        let pred = pool[r.random_range(0..5)];
        for mode in [AccuracyMode::Direct, AccuracyMode::Exact] {
            let before = soft_accuracy(pred, &answers, mode).unwrap();
            answers.shuffle(&mut r);
            invariant &= soft_accuracy(pred, &answers, mode).unwrap() == before;
        }
    }

    let mut identity = 0.0f64;
    for _ in 0..200 {
        let scores: Vec<(f64, Category)> = (0..r.random_range(1..300))
            .map(|_| (r.random_range(0..4) as f64 / 3.0, Category::ALL[r.random_range(0..3)]))
            .collect();
        let rep = EvalReport::from_scores(&scores).unwrap();
        let weighted: f64 = rep.categories.values().map(|c| c.accuracy * c.n as f64).sum::<f64>() / rep.n as f64;
        identity = identity.max((weighted - rep.overall).abs());
    }
    (
        fixtures_ok && invariant && identity <= 1e-9,
        format!("fixtures {fixtures_ok}, permutation invariant {invariant}, max category/overall gap {identity:.1e}"),
    )
}

fn full_size() -> Verdict {
    let start = Instant::now();
    let config = ModelConfig::paper();
    let mut tokens = vec!["<pad>".to_owned(), "<unk>".to_owned()];
    tokens.extend((0..5000).map(|i| format!("w{i}")));
    let answers = AnswerSet::from((0..config.answer_count).map(|i| format!("a{i}")).collect::<Vec<_>>());
    let model = VqaCoin::new(&config, Vocabulary::from(tokens), answers, 0).unwrap();
    let count = model.parameter_count();

    let mut r = rng(9);
    let mut buf = GradBuffer::zeros_like(&model.params);
    let mut losses = Vec::new();
    for _ in 0..2 {
        let objects = r.random_range(10..=36);
        let feats = rand_tensor(&[objects, config.d_image], &mut r, 0.0, 1.0);
        let q: Vec<usize> = (0..config.n_q_max).map(|_| r.random_range(2..5002)).collect();
        let si: Vec<usize> = (0..config.si_max).map(|_| r.random_range(2..5002)).collect();
        let mut target = vec![0.0; config.answer_count];
        target[r.random_range(0..config.answer_count)] = 1.0;
        let mut g = Graph::new(&model.params);
        let mut drop = rng(r.random());
        let out = model
            .forward(&mut g, &ModelInput::new(&feats, &q, &si), &mut Mode::Train(&mut drop))
            .unwrap();
        let loss = model.loss(&mut g, out.logits, &Target::Soft(target)).unwrap().unwrap();
        losses.push(g.value(loss).item());
        buf.accumulate(&g.backward(loss).unwrap(), 0.5).unwrap();
    }
    let norm = buf.global_norm();
    let pass = norm.is_finite() && norm > 0.0 && losses.iter().all(|l| l.is_finite()) && within(start, Duration::from_secs(120));
    (
        pass,
        format!("{count} parameters, batch-2 loss {:.4}, gradient norm {norm:.3e}", (losses[0] + losses[1]) / 2.0),
    )
}

fn vqacoin(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vqacoin"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

const CORPUS: [&str; 8] = [
    "--set",
    "data.train_examples=300",
    "--set",
    "data.val_examples=100",
    "--set",
    "train.min_answer_occurrences=1",
    "--set",
    "schedule.epochs=3",
];

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_twice(dir: &Path) -> Result<(), String> {
    let data = dir.join("data");
    let mut gen = vec!["gen-data", "--out", s(&data)];
    gen.extend(CORPUS);
    vqacoin(&gen)?;
    for run in ["a", "b"] {
        let out = dir.join(run);
        let mut train = vec!["train", "--data", s(&data), "--out", s(&out)];
        train.extend(CORPUS);
        vqacoin(&train)?;
    }
    Ok(())
}

fn reproducibility() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    if let Err(e) = train_twice(dir.path()) {
        return (false, e);
    }
    let files = ["metrics.jsonl", "last.ckpt", "best.ckpt", "manifest.json", "config.json"];
    let same: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(dir.path().join("a").join(f)).unwrap() == std::fs::read(dir.path().join("b").join(f)).unwrap())
        .collect();

    let ck = Checkpoint::from_bytes(&std::fs::read(dir.path().join("a/best.ckpt")).unwrap(), None).unwrap();
    let reloaded = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), None).unwrap();
    let val = load_dataset(&SplitPaths::in_dir(&dir.path().join("data/val"))).unwrap().examples;
    let mut identical = ck.model.params == reloaded.model.params;
    for ex in &val {
        let enc = vqacoin::data::encode_example(
            ex,
            &ck.model.vocab,
            &ck.model.answers,
            ck.model.config.loss,
            ck.model.config.n_q_max,
            ck.model.config.si_max,
        )
        .unwrap();
        let a = ck.model.logits(&enc.input()).unwrap();
        let b = reloaded.model.logits(&enc.input()).unwrap();
        identical &= a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits()));
    }
    (
        same.len() == files.len() && identical,
        format!(
            "byte-identical across runs: {}/{} artifacts, round-trip logits bit-identical on {} questions: {identical}",
            same.len(),
            files.len(),
            val.len()
        ),
    )
}

fn map_ok(map: &AttentionMap, rows: &[String], cols: &[String]) -> bool {
    map.rows == rows
        && map.cols == cols
        && map.weights.len() == rows.len()
        && map.weights.iter().all(|r| r.len() == cols.len() && r.iter().all(|&w| w >= 0.0))
        && (map.total() - 1.0).abs() <= 1e-6
}

fn formats() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut gen = vec!["gen-data", "--out", s(&data)];
    gen.extend(CORPUS);
    let run = dir.path().join("run");
    let mut train = vec!["train", "--data", s(&data), "--out", s(&run)];
    train.extend(CORPUS);
    let val = data.join("val");
    let preds = dir.path().join("preds.json");
    let ckpt = run.join("best.ckpt");
    let steps = vqacoin(&gen).and_then(|_| vqacoin(&train)).and_then(|_| {
        vqacoin(&[
            "predict",
            "--checkpoint",
            s(&ckpt),
            "--questions",
            s(&val.join("questions.json")),
            "--features",
            s(&val.join("features.json")),
            "--si",
            s(&val.join("si.json")),
            "--out",
            s(&preds),
        ])
    });
    if let Err(e) = steps {
        return (false, e);
    }

    let bytes = std::fs::read(&preds).unwrap();
    let raw: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    let shape_ok = raw.as_array().is_some_and(|a| {
        a.iter().all(|r| {
            let o = r.as_object().unwrap();
            o.len() == 2 && o["question_id"].is_u64() && o["answer"].is_string()
        })
    });
    let records: Vec<ExportRecord> = parse_export(&bytes).unwrap();
    let round_trip = export_results(&records, None).unwrap() == bytes;

    let examples = load_dataset(&SplitPaths::in_dir(&val)).unwrap().examples;
    let example = &examples[0];
    let dump_path = dir.path().join("attn.json");
    let qid = example.question_id.to_string();
    if let Err(e) = vqacoin(&["attn-dump", "--checkpoint", s(&ckpt), "--data", s(&data), "--question-id", &qid, "--out", s(&dump_path)]) {
        return (false, e);
    }
    let dump: AttentionDump = serde_json::from_slice(&std::fs::read(&dump_path).unwrap()).unwrap();
    let model = Checkpoint::from_bytes(&std::fs::read(&ckpt).unwrap(), None).unwrap().model;
    let expected = dump_attention(&model, example).unwrap();
    let q_tokens: Vec<String> = dump.question_weights.iter().map(|(t, _)| t.clone()).collect();
    let objects: Vec<String> = (0..example.image_feats.rows()).map(|i| format!("object {i}")).collect();
    let mut si_rows: Vec<String> = example.si_words.iter().flat_map(|w| normalize_tokens(w)).collect();
    si_rows.truncate(model.config.si_max);
    if si_rows.is_empty() {
        si_rows.push(vqacoin::textprep::PAD_TOKEN.to_owned());
    }
    let labels_ok = q_tokens == vqacoin::textprep::tokenize_question(&example.question, model.config.n_q_max).unwrap()
        && dump.image_maps.len() == model.config.glimpses_image
        && dump.image_maps.iter().all(|m| map_ok(m, &objects, &q_tokens))
        && map_ok(&dump.si_map, &si_rows, &q_tokens)
        && (dump.question_weights.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() <= 1e-6
        && dump == expected;
    (
        shape_ok && round_trip && labels_ok,
        format!(
            "{} records, array of {{question_id, answer}}: {shape_ok}, byte round-trip: {round_trip}, attention labels and sums: {labels_ok}",
            records.len()
        ),
    )
}
