//! The `vqacoin` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.

mod config;
mod manifest;

pub use config::{DataOptions, RunConfig, RunOptions, TrainOptions};
pub use manifest::{hash_file, Manifest};

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    gen_corpus, load_dataset, save_split, scale_split, write_json, EncodedExample, SplitPaths, VqaExample,
};
use crate::eval::{
    dump_attention, evaluate, export_results, predict_answer, scaling_experiment, ExportRecord, ScalingConfig,
};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, VqaCoin};
use crate::textprep::{prep_caption_map, Wordlists};
use crate::train::{train_loop, EpochRecord, TrainState};
use crate::Error;

#[derive(Debug, Parser)]
#[command(name = "vqacoin", version, about = "Co-attention VQA with semantic information: data, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON file of flat dotted keys, overlaid on the desk defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set schedule.epochs=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/val corpus.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn an image → captions JSON map into semantic-information words.
    Prep {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on DIR/train, validating on DIR/val when present.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Initial word vectors, one `word v1 v2 ...` line each; fresh runs only.
        #[arg(long, conflicts_with = "resume")]
        embeddings: Option<PathBuf>,
    },
    /// Score a checkpoint on an annotated split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A split directory, or a corpus directory whose `val` split is used.
        #[arg(long)]
        data: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Average over the ten leave-one-out annotator subsets.
        #[arg(long)]
        exact: bool,
    },
    /// Answer test questions and write the challenge export.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        si: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on growing shares of the train split and report validation accuracy.
    Scale {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 0.5, 0.75, 1.0])]
        fractions: Vec<f64>,
        /// Number of seeds, counted up from `train.seed`.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write labelled attention maps for one question.
    AttnDump {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A split directory, or a corpus directory whose `val` split is used.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        question_id: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Prep { captions, out } => prep(&captions, &out),
        Command::Train {
            config,
            data,
            out,
            resume,
            embeddings,
        } => train(&config, &data, &out, resume.as_deref(), embeddings.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            out,
            exact,
        } => eval(&checkpoint, &data, out.as_deref(), exact),
        Command::Predict {
            checkpoint,
            questions,
            features,
            si,
            out,
        } => predict(
            &checkpoint,
            &SplitPaths {
                questions,
                annotations: None,
                features,
                si,
            },
            &out,
        ),
        Command::Scale {
            config,
            data,
            fractions,
            seeds,
            out,
        } => scale(&config, data.as_deref(), fractions, seeds, out.as_deref()),
        Command::AttnDump {
            checkpoint,
            data,
            question_id,
            out,
        } => attn_dump(&checkpoint, &data, question_id, &out),
    }
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig, Error> {
    RunConfig::resolve(args.config.as_deref(), &args.overrides)
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `DIR/val` when it exists, otherwise `DIR` itself.
fn split_dir(dir: &Path, preferred: &str) -> PathBuf {
    let sub = dir.join(preferred);
    if sub.join("questions.json").exists() {
        sub
    } else {
        dir.to_path_buf()
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn gen_data(args: &ConfigArgs, out: &Path) -> Result<(), Error> {
    let config = resolve(args)?;
    let corpus = gen_corpus(&config.synth_config())?;
    create_dir(out)?;
    save_split(&out.join("train"), &corpus.train, config.data.binary_features)?;
    save_split(&out.join("val"), &corpus.val, config.data.binary_features)?;
    log::info!(
        "wrote {} train and {} val examples to {}",
        corpus.train.len(),
        corpus.val.len(),
        out.display()
    );
    let mut m = Manifest::new("gen-data", Some(&config));
    m.seed("data.seed", config.data.seed);
    m.outputs_in(out, out)?;
    m.write(&out.join("manifest.json"))
}

fn prep(captions: &Path, out: &Path) -> Result<(), Error> {
    let map: BTreeMap<String, Vec<String>> = crate::data::read_json(captions)?;
    let si = prep_caption_map(&map, &Wordlists::shipped());
    write_json(out, &si)?;
    let mut m = Manifest::new("prep", None);
    m.input(captions)?;
    m.output(out, out.parent().unwrap_or(Path::new("")))?;
    m.write(&manifest_path(out))
}

fn load_split(dir: &Path) -> Result<Vec<VqaExample>, Error> {
    let loaded = load_dataset(&SplitPaths::in_dir(dir))?;
    if loaded.missing_si > 0 {
        log::warn!("{}: {} images without semantic information", dir.display(), loaded.missing_si);
    }
    Ok(loaded.examples)
}

fn encode_with(model: &VqaCoin, examples: &[VqaExample]) -> Result<Vec<EncodedExample>, Error> {
    let c = &model.config;
    Ok(crate::data::encode_examples(
        examples,
        &model.vocab,
        &model.answers,
        c.loss,
        c.n_q_max,
        c.si_max,
    )?)
}

/// Writes `metrics.jsonl` (deterministic) and `timing.jsonl` (wall clock).
fn write_trace(dir: &Path, trace: &[EpochRecord]) -> Result<(), Error> {
    let mut metrics = Vec::new();
    let mut timing = Vec::new();
    let ser = |e: serde_json::Error| Error::Config(e.to_string());
    for r in trace {
        serde_json::to_writer(&mut metrics, r).map_err(ser)?;
        metrics.push(b'\n');
        let t = serde_json::json!({ "epoch": r.epoch, "wall_time": r.wall_time });
        serde_json::to_writer(&mut timing, &t).map_err(ser)?;
        timing.push(b'\n');
    }
    write_bytes(&dir.join("metrics.jsonl"), &metrics)?;
    write_bytes(&dir.join("timing.jsonl"), &timing)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("{}: {e}", path.display()))))
        .collect()
}

/// The trace of an earlier run in `dir`, with wall times when recorded.
fn read_trace(dir: &Path) -> Result<Vec<EpochRecord>, Error> {
    let mut trace: Vec<EpochRecord> = read_jsonl(&dir.join("metrics.jsonl"))?;
    let timing = dir.join("timing.jsonl");
    if timing.exists() {
        #[derive(serde::Deserialize)]
        struct Timing {
            epoch: usize,
            wall_time: f64,
        }
        for t in read_jsonl::<Timing>(&timing)? {
            if let Some(r) = trace.iter_mut().find(|r| r.epoch == t.epoch) {
                r.wall_time = t.wall_time;
            }
        }
    }
    Ok(trace)
}

fn train(
    args: &ConfigArgs,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    embeddings: Option<&Path>,
) -> Result<(), Error> {
    let config = resolve(args)?;
    let train_dir = split_dir(data, "train");
    let val_dir = data.join("val");
    let mut train_set = load_split(&train_dir)?;
    if config.train.train_fraction < 1.0 {
        train_set = scale_split(&train_set, config.train.train_fraction, config.train.seed)?;
    }
    let val_set = if val_dir.join("questions.json").exists() && train_dir != data {
        load_split(&val_dir)?
    } else {
        Vec::new()
    };
    create_dir(out)?;
    let train_config = config.train_config();

    let (mut model, state, mut trace) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path, Some(&config.model))?;
            let state = TrainState::from_checkpoint(&ck)?;
            let trace = if out.join("metrics.jsonl").exists() {
                read_trace(out)?
                    .into_iter()
                    .filter(|r| r.epoch <= state.epoch)
                    .collect()
            } else {
                Vec::new()
            };
            (ck.model, Some(state), trace)
        }
        None => {
            let (nq, ns) = (config.model.n_q_max, config.model.si_max);
            let vocab = crate::data::build_vocabulary(&train_set, nq, ns)?;
            let answers = crate::data::build_answer_set(&train_set, config.train.min_answer_occurrences)?;
            let mut model = VqaCoin::new(&config.model, vocab, answers, config.train.seed)?;
            if let Some(path) = embeddings {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let rows = model.load_embeddings(&text)?;
                log::info!("loaded {rows} word vectors from {}", path.display());
            }
            (model, None, Vec::new())
        }
    };
    let train_enc = encode_with(&model, &train_set)?;
    let val_enc = encode_with(&model, &val_set)?;
    log::info!(
        "training on {} examples ({} val), {} answers, {} parameters",
        train_enc.len(),
        val_enc.len(),
        model.answers.len(),
        model.parameter_count()
    );

    let metrics = out.join("metrics.jsonl");
    let last = out.join("last.ckpt");
    let best = out.join("best.ckpt");
    let mut io_error: Option<Error> = None;
    let outcome = train_loop(&mut model, &train_enc, &val_enc, &train_config, state, &mut |snap| {
        let result = (|| {
            trace.push(snap.record.clone());
            write_trace(out, &trace)?;
            save_checkpoint(&snap.state.to_checkpoint(snap.model), &last)?;
            if snap.improved {
                save_checkpoint(&best_checkpoint(snap.model, snap.state), &best)?;
            }
            Ok::<(), Error>(())
        })();
        result.map_err(|e| {
            let msg = e.to_string();
            io_error = Some(e);
            crate::train::TrainError::Callback(msg)
        })
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    let outcome = outcome?;
    if val_enc.is_empty() {
        save_checkpoint(&best_checkpoint(&model, &outcome.state), &best)?;
    }
    write_json(&out.join("config.json"), &config.to_flat())?;

    // timing.jsonl is left out: wall-clock times differ between equal runs.
    let mut m = Manifest::new("train", Some(&config));
    m.seed("train.seed", config.train.seed);
    m.inputs_in(&train_dir)?;
    if !val_set.is_empty() {
        m.inputs_in(&val_dir)?;
    }
    for p in resume.iter().chain(embeddings.iter()) {
        m.input(p)?;
    }
    for f in [&metrics, &last, &best, &out.join("config.json")] {
        m.output(f, out)?;
    }
    m.write(&out.join("manifest.json"))?;
    if let Some(r) = trace.last() {
        println!(
            "epoch {} train_loss {:.6} val_accuracy {}",
            r.epoch,
            r.train_loss,
            r.val_accuracy.map_or("n/a".into(), |v| format!("{:.4}", v))
        );
    }
    Ok(())
}

fn best_checkpoint(model: &VqaCoin, state: &TrainState) -> Checkpoint {
    let mut ck = Checkpoint::from_model(model.clone());
    ck.meta = serde_json::json!({
        "epoch": state.epoch,
        "val_accuracy": state.best_val_accuracy,
    });
    ck
}

fn eval(checkpoint: &Path, data: &Path, out: Option<&Path>, exact: bool) -> Result<(), Error> {
    let ck = load_checkpoint(checkpoint, None)?;
    let dir = split_dir(data, "val");
    let examples = encode_with(&ck.model, &load_split(&dir)?)?;
    let mode = if exact {
        crate::eval::AccuracyMode::Exact
    } else {
        crate::eval::AccuracyMode::Direct
    };
    let mut report = evaluate(&ck.model, &examples, mode)?;
    report
        .provenance
        .insert("checkpoint".into(), checkpoint.display().to_string());
    report.provenance.insert("checkpoint_sha256".into(), hash_file(checkpoint)?);
    report.provenance.insert("data".into(), dir.display().to_string());
    print!("{}", report.table());
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    println!("{json}");
    if let Some(out) = out {
        write_bytes(out, json.as_bytes())?;
        let mut m = Manifest::new("eval", None);
        m.input(checkpoint)?;
        m.inputs_in(&dir)?;
        m.output(out, out.parent().unwrap_or(Path::new("")))?;
        m.write(&manifest_path(out))?;
    }
    Ok(())
}

fn predict(checkpoint: &Path, paths: &SplitPaths, out: &Path) -> Result<(), Error> {
    let ck = load_checkpoint(checkpoint, None)?;
    let loaded = load_dataset(paths)?;
    let examples = encode_with(&ck.model, &loaded.examples)?;
    let mut records = Vec::with_capacity(examples.len());
    for ex in &examples {
        records.push(ExportRecord {
            question_id: ex.question_id,
            answer: predict_answer(&ck.model, ex)?,
        });
    }
    let ids: Vec<u64> = loaded.examples.iter().map(|e| e.question_id).collect();
    let bytes = export_results(&records, Some(&ids))?;
    write_bytes(out, &bytes)?;
    log::info!("wrote {} predictions to {}", records.len(), out.display());
    let mut m = Manifest::new("predict", None);
    for p in [checkpoint, &paths.questions, &paths.features, &paths.si] {
        m.input(p)?;
    }
    m.output(out, out.parent().unwrap_or(Path::new("")))?;
    m.write(&manifest_path(out))
}

fn scale(args: &ConfigArgs, data: Option<&Path>, fractions: Vec<f64>, seeds: u64, out: Option<&Path>) -> Result<(), Error> {
    let config = resolve(args)?;
    if seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let (train_set, val_set) = match data {
        Some(dir) => (load_split(&dir.join("train"))?, load_split(&dir.join("val"))?),
        None => {
            let c = gen_corpus(&config.synth_config())?;
            (c.train, c.val)
        }
    };
    let mut sc = ScalingConfig::new(
        config.model.clone(),
        config.train_config(),
        (0..seeds).map(|i| config.train.seed + i).collect(),
    );
    sc.fractions = fractions;
    sc.min_answer_occurrences = config.train.min_answer_occurrences;
    let report = scaling_experiment(&train_set, &val_set, &sc, &mut |row| {
        log::info!(
            "fraction {} seed {}: val accuracy {:.4}",
            row.fraction,
            row.seed,
            row.val_accuracy
        );
    })?;
    print!("{}", report.table());
    let _ = std::io::stdout().flush();
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = dir.join("scaling_report.json");
        write_json(&path, &report)?;
        let mut m = Manifest::new("scale", Some(&config));
        for s in &sc.seeds {
            m.seed(&format!("seed.{s}"), *s);
        }
        if let Some(d) = data {
            m.inputs_in(d)?;
        }
        m.output(&path, dir)?;
        m.write(&dir.join("manifest.json"))?;
    }
    Ok(())
}

fn attn_dump(checkpoint: &Path, data: &Path, question_id: u64, out: &Path) -> Result<(), Error> {
    let ck = load_checkpoint(checkpoint, None)?;
    let dir = split_dir(data, "val");
    let examples = load_split(&dir)?;
    let example = examples
        .iter()
        .find(|e| e.question_id == question_id)
        .ok_or_else(|| Error::Data(crate::data::DataError::Dangling(format!("no question {question_id} in {}", dir.display()))))?;
    let dump = dump_attention(&ck.model, example)?;
    write_json(out, &dump)?;
    let mut m = Manifest::new("attn-dump", None);
    m.input(checkpoint)?;
    m.inputs_in(&dir)?;
    m.output(out, out.parent().unwrap_or(Path::new("")))?;
    m.write(&manifest_path(out))
}
