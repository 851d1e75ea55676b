//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vqacoin::attention::{bilinear_attend, glimpse_stack, si_branch, BilinearGlimpse, NoHook, SelfAttentionHead};
use vqacoin::diffmath::{DiffError, Gradients, Graph, ParamStore, Tensor, Var, MASK_VALUE};
use vqacoin::layers::{dropout, EmbeddingTable, GruCell, Linear, WeightNormLinear};
use vqacoin::model::{LossKind, Mode, ModelConfig, ModelInput, Target, VqaCoin};
use vqacoin::textprep::{AnswerSet, Vocabulary};

/// Central-difference step.
pub const H: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely.
pub const FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values at least 0.05 away from zero, for inputs that pass through a kink.
pub fn rand_away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let mut t = rand_tensor(shape, rng, 0.05, 1.5);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Reduces any output to a scalar through a fixed random projection so that
/// every output component is exercised.
fn project(g: &mut Graph, out: Var, weights: &Option<Tensor>) -> Result<Var, DiffError> {
    match weights {
        None => Ok(out),
        Some(w) => {
            let p = g.mul_const(out, w)?;
            g.sum(p)
        }
    }
}

pub type LeafBuild<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var, DiffError> + 'a;

/// Largest relative error between backprop and central differences over every
/// coordinate of every input.
pub fn check_leaves(inputs: &[Tensor], build: &LeafBuild, seed: u64) -> f64 {
    let shape = {
        let mut g = Graph::detached();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone()).unwrap()).collect();
        let out = build(&mut g, &vars).expect("forward");
        g.shape(out).to_vec()
    };
    let weights = (!shape.is_empty()).then(|| rand_tensor(&shape, &mut rng(seed), -1.0, 1.0));
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::detached();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone()).unwrap()).collect();
        let out = build(&mut g, &vars).unwrap();
        let loss = project(&mut g, out, &weights).unwrap();
        g.value(loss).item()
    };

    let mut g = Graph::detached();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone()).unwrap()).collect();
    let out = build(&mut g, &vars).unwrap();
    let loss = project(&mut g, out, &weights).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for k in 0..inputs[i].len() {
            let x0 = inputs[i].data()[k];
            xs[i].data_mut()[k] = x0 + H;
            let up = eval(&xs);
            xs[i].data_mut()[k] = x0 - H;
            let down = eval(&xs);
            xs[i].data_mut()[k] = x0;
            worst = worst.max(rel_err(analytic.data()[k], (up - down) / (2.0 * H)));
        }
    }
    worst
}

/// Largest relative error over up to `per_param` sampled coordinates of every
/// parameter reached by `eval`, which returns the scalar loss and, when asked,
/// its gradients.
pub fn check_params<M>(
    owner: &mut M,
    store: fn(&mut M) -> &mut ParamStore,
    eval: &dyn Fn(&M, bool) -> (f64, Option<Gradients>),
    per_param: usize,
    seed: u64,
) -> f64 {
    let (_, grads) = eval(owner, true);
    let grads = grads.expect("gradients requested");
    let mut pick = rng(seed);
    let mut worst = 0.0f64;
    let ids: Vec<_> = store(owner).ids().collect();
    for id in ids {
        let len = store(owner).get(id).len();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store(owner).get(id).shape()));
        let coords: Vec<usize> = if len <= per_param {
            (0..len).collect()
        } else {
            (0..per_param).map(|_| pick.random_range(0..len)).collect()
        };
        for k in coords {
            let x0 = store(owner).get(id).data()[k];
            store(owner).get_mut(id).data_mut()[k] = x0 + H;
            let up = eval(owner, false).0;
            store(owner).get_mut(id).data_mut()[k] = x0 - H;
            let down = eval(owner, false).0;
            store(owner).get_mut(id).data_mut()[k] = x0;
            worst = worst.max(rel_err(analytic.data()[k], (up - down) / (2.0 * H)));
        }
    }
    worst
}

/// One named finite-difference case.
#[derive(Debug)]
pub struct Case {
    pub name: String,
    pub max_rel: f64,
}

fn mask(len: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut m: Vec<bool> = (0..len).map(|_| rng.random_bool(0.3)).collect();
    let keep = rng.random_range(0..len);
    m[keep] = false;
    m
}

fn mask_bias(m: &[bool]) -> Tensor {
    Tensor::vector(m.iter().map(|&p| if p { MASK_VALUE } else { 0.0 }).collect())
}

/// Every differentiable graph op on `reps` random shapes each.
pub fn op_cases(reps: usize, seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    let mut cases = Vec::new();
    let mut push = |name: &str, inputs: Vec<Tensor>, build: &LeafBuild, s: u64| {
        cases.push(Case {
            name: name.into(),
            max_rel: check_leaves(&inputs, build, s),
        });
    };
    for rep in 0..reps {
        let s = seed.wrapping_mul(1000) + rep as u64;
        let (n, k, m) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        let t = |shape: &[usize], r: &mut ChaCha8Rng| rand_tensor(shape, r, -1.0, 1.0);
        push("matmul", vec![t(&[n, k], &mut r), t(&[k, m], &mut r)], &|g, v| g.matmul(v[0], v[1]), s);
        push("add", vec![t(&[n, k], &mut r), t(&[n, k], &mut r)], &|g, v| g.add(v[0], v[1]), s);
        push("hadamard", vec![t(&[n, k], &mut r), t(&[n, k], &mut r)], &|g, v| g.hadamard(v[0], v[1]), s);
        push("broadcast_add", vec![t(&[n, k], &mut r), t(&[k], &mut r)], &|g, v| g.broadcast_add(v[0], v[1]), s);
        push("broadcast_mul", vec![t(&[n, k], &mut r), t(&[k], &mut r)], &|g, v| g.broadcast_mul(v[0], v[1]), s);
        push("scale_rows", vec![t(&[n, k], &mut r), t(&[n], &mut r)], &|g, v| g.scale_rows(v[0], v[1]), s);
        push("transpose", vec![t(&[n, k], &mut r)], &|g, v| g.transpose(v[0]), s);
        let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        push("affine", vec![t(&[n, k], &mut r)], &move |g, v| g.affine(v[0], a, b), s);
        let c = t(&[n, k], &mut r);
        let c2 = c.clone();
        push("mul_const", vec![t(&[n, k], &mut r)], &move |g, v| g.mul_const(v[0], &c), s);
        push("add_const", vec![t(&[n, k], &mut r)], &move |g, v| g.add_const(v[0], &c2), s);
        push("relu", vec![rand_away_from_zero(&[n, k], &mut r)], &|g, v| g.relu(v[0]), s);
        push("sigmoid", vec![rand_tensor(&[n, k], &mut r, -4.0, 4.0)], &|g, v| g.sigmoid(v[0]), s);
        push("tanh", vec![rand_tensor(&[n, k], &mut r, -3.0, 3.0)], &|g, v| g.tanh(v[0]), s);
        push("ln", vec![rand_tensor(&[n, k], &mut r, 0.2, 3.0)], &|g, v| g.ln(v[0]), s);
        let axis = r.random_range(0..2);
        push("softmax", vec![rand_tensor(&[n, k], &mut r, -3.0, 3.0)], &move |g, v| g.softmax(v[0], axis), s);
        let len = n * k + 1;
        let bias = mask_bias(&mask(len, &mut r));
        push(
            "masked_softmax",
            vec![rand_tensor(&[len], &mut r, -3.0, 3.0)],
            &move |g, v| {
                let x = g.add_const(v[0], &bias)?;
                g.softmax(x, 0)
            },
            s,
        );
        push("reduce_sum", vec![t(&[n, k], &mut r)], &move |g, v| g.reduce_sum(v[0], axis), s);
        push("sum", vec![t(&[n, k], &mut r)], &|g, v| g.sum(v[0]), s);
        push(
            "concat_rows",
            vec![t(&[n, k], &mut r), t(&[m, k], &mut r)],
            &|g, v| g.concat(&[v[0], v[1]], 0),
            s,
        );
        push(
            "concat_cols",
            vec![t(&[n, k], &mut r), t(&[n, m], &mut r)],
            &|g, v| g.concat(&[v[0], v[1]], 1),
            s,
        );
        push(
            "concat_vectors",
            vec![t(&[n], &mut r), t(&[k], &mut r), t(&[m], &mut r)],
            &|g, v| g.concat(&[v[0], v[1], v[2]], 0),
            s,
        );
        push("reshape", vec![t(&[n, k], &mut r)], &move |g, v| g.reshape(v[0], &[k * n]), s);
        let ids: Vec<usize> = (0..r.random_range(1..6)).map(|_| r.random_range(0..n + 1)).collect();
        push(
            "gather_rows",
            vec![t(&[n + 1, k], &mut r)],
            &move |g, v| g.gather_rows(v[0], &ids, None),
            s,
        );
        let row = r.random_range(0..n);
        push("row", vec![t(&[n, k], &mut r)], &move |g, v| g.row(v[0], row), s);
        push(
            "weight_norm",
            vec![rand_away_from_zero(&[n + 1, k], &mut r), t(&[k], &mut r)],
            &|g, v| g.weight_norm(v[0], v[1]),
            s,
        );
        let targets: Vec<f64> = (0..k).map(|_| r.random_range(0.0..1.0)).collect();
        push(
            "bce_with_logits",
            vec![rand_tensor(&[k], &mut r, -4.0, 4.0)],
            &move |g, v| g.bce_with_logits(v[0], &targets),
            s,
        );
        let class = r.random_range(0..k);
        push(
            "softmax_cross_entropy",
            vec![rand_tensor(&[k], &mut r, -4.0, 4.0)],
            &move |g, v| g.softmax_cross_entropy(v[0], class),
            s,
        );
    }
    cases
}

type LayerEval<'a> = Box<dyn for<'p> Fn(&'p ParamStore) -> Result<(Graph<'p>, Var), DiffError> + 'a>;

fn ev<'a, F>(f: F) -> LayerEval<'a>
where
    F: for<'p> Fn(&'p ParamStore) -> Result<(Graph<'p>, Var), DiffError> + 'a,
{
    Box::new(f)
}

fn sum_proj(g: &mut Graph, out: Var, w: &Tensor) -> Var {
    let p = g.mul_const(out, w).unwrap();
    g.sum(p).unwrap()
}

/// Parameter-level checks of each layer, on random sizes.
pub fn layer_cases(reps: usize, seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    let mut cases = Vec::new();
    for rep in 0..reps {
        let s = seed.wrapping_mul(1000) + rep as u64;
        let (n, d_in, d_out) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        let x = rand_tensor(&[n, d_in], &mut r, -1.0, 1.0);
        let w_out = rand_tensor(&[n, d_out], &mut r, -1.0, 1.0);

        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", d_in, d_out, &mut r);
        let wn = WeightNormLinear::new(&mut store, "wn", d_in, d_out, &mut r);
        let gru = GruCell::new(&mut store, "gru", d_in, d_out, &mut r);
        let vocab = r.random_range(2..6);
        let emb = EmbeddingTable::new(&mut store, "emb", vocab, d_in, &mut r);
        let ids: Vec<usize> = (0..n).map(|_| r.random_range(1..vocab)).collect();
        let head = SelfAttentionHead::new(&mut store, "sa", d_in, &mut r);
        let d_y = r.random_range(1..5);
        let m = r.random_range(1..5);
        let y = rand_tensor(&[m, d_y], &mut r, -1.0, 1.0);
        let glimpses: Vec<BilinearGlimpse> = (0..2)
            .map(|i| BilinearGlimpse::new(&mut store, &format!("bl.{i}"), d_in, d_y, 3, d_y, &mut r))
            .collect();
        let si_glimpse = BilinearGlimpse::new(&mut store, "si", d_out, d_in, 3, d_in, &mut r);
        let x_mask = mask(n, &mut r);
        let y_mask = mask(m, &mut r);
        let si = rand_tensor(&[m, d_out], &mut r, -1.0, 1.0);
        let w_nd = rand_tensor(&[n, d_in], &mut r, -1.0, 1.0);
        let w_nm = rand_tensor(&[n, m], &mut r, -1.0, 1.0);
        let w_my = rand_tensor(&[m, d_y], &mut r, -1.0, 1.0);
        let w_y = rand_tensor(&[d_y], &mut r, -1.0, 1.0);
        let w_si = rand_tensor(&[n, d_in], &mut r, -1.0, 1.0);
        let w_mn = rand_tensor(&[m, n], &mut r, -1.0, 1.0);
        let w_n = rand_tensor(&[n], &mut r, -1.0, 1.0);
        let drop_seed = r.next_u64();

        let evals: Vec<(&str, LayerEval)> = vec![
            (
                "linear",
                ev(|p: &ParamStore| {
                    let mut g = Graph::new(p);
                    let xi = g.input(x.clone())?;
                    let out = lin.forward(&mut g, xi).map_err(layer)?;
                    let l = sum_proj(&mut g, out, &w_out);
                    Ok((g, l))
                }),
            ),
            (
                "weight_norm_linear",
                ev(|p: &ParamStore| {
                    let mut g = Graph::new(p);
                    let xi = g.input(x.clone())?;
                    let out = wn.forward(&mut g, xi).map_err(layer)?;
                    let l = sum_proj(&mut g, out, &w_out);
                    Ok((g, l))
                }),
            ),
            (
                "gru",
                ev(|p: &ParamStore| {
                    let mut g = Graph::new(p);
                    let xi = g.input(x.clone())?;
                    let out = gru.scan(&mut g, xi, None).map_err(layer)?;
                    let l = sum_proj(&mut g, out, &w_out);
                    Ok((g, l))
                }),
            ),
            (
                "embedding",
                ev(|p: &ParamStore| {
                    let mut g = Graph::new(p);
                    let out = emb.embed(&mut g, &ids).map_err(layer)?;
                    let l = sum_proj(&mut g, out, &w_nd);
                    Ok((g, l))
                }),
            ),
            (
                "dropout",
                ev(|p: &ParamStore| {
                    let mut g = Graph::new(p);
                    let xi = g.input(x.clone())?;
                    let h = wn.forward(&mut g, xi).map_err(layer)?;
                    let out = dropout(&mut g, h, 0.5, true, &mut rng(drop_seed)).map_err(layer)?;
                    let l = sum_proj(&mut g, out, &w_out);
                    Ok((g, l))
                }),
            ),
            (
                "self_attention",
                ev(|p: &ParamStore| {
                    let mut g = Graph::new(p);
                    let xi = g.input(x.clone())?;
                    let a = head.attend(&mut g, xi, Some(&x_mask)).map_err(layer)?;
                    let l1 = sum_proj(&mut g, a.context, &w_nd);
                    let l2 = sum_proj(&mut g, a.weights, &w_n);
                    let l = g.add(l1, l2)?;
                    Ok((g, l))
                }),
            ),
            (
                "bilinear_attention",
                ev(|p: &ParamStore| {
                    let mut g = Graph::new(p);
                    let xi = g.input(x.clone())?;
                    let yi = g.input(y.clone())?;
                    let o = bilinear_attend(&mut g, xi, yi, &glimpses[0], Some(&x_mask), Some(&y_mask)).map_err(layer)?;
                    let l1 = sum_proj(&mut g, o.joint, &w_y);
                    let l2 = sum_proj(&mut g, o.map, &w_nm);
                    let l = g.add(l1, l2)?;
                    Ok((g, l))
                }),
            ),
            (
                "glimpse_stack",
                ev(|p: &ParamStore| {
                    let mut g = Graph::new(p);
                    let xi = g.input(x.clone())?;
                    let yi = g.input(y.clone())?;
                    let (q, maps) =
                        glimpse_stack(&mut g, xi, yi, &glimpses, Some(&x_mask), Some(&y_mask), &mut NoHook).map_err(layer)?;
                    let l1 = sum_proj(&mut g, q, &w_my);
                    let l2 = sum_proj(&mut g, maps[1], &w_nm);
                    let l = g.add(l1, l2)?;
                    Ok((g, l))
                }),
            ),
            (
                "si_branch",
                ev(|p: &ParamStore| {
                    let mut g = Graph::new(p);
                    let si_v = g.input(si.clone())?;
                    let c = g.input(x.clone())?;
                    let (fused, map) = si_branch(&mut g, si_v, c, &si_glimpse, Some(&y_mask), Some(&x_mask)).map_err(layer)?;
                    let l1 = sum_proj(&mut g, fused, &w_si);
                    let l2 = sum_proj(&mut g, map, &w_mn);
                    let l = g.add(l1, l2)?;
                    Ok((g, l))
                }),
            ),
        ];
        for (name, f) in evals {
            let mut owner = store.clone();
            let eval = |o: &ParamStore, want: bool| {
                let (g, l) = f(o).unwrap();
                let v = g.value(l).item();
                (v, want.then(|| g.backward(l).unwrap()))
            };
            cases.push(Case {
                name: name.into(),
                max_rel: check_params(&mut owner, |o| o, &eval, 12, s),
            });
        }
    }
    cases
}

fn layer(e: vqacoin::layers::LayerError) -> DiffError {
    DiffError::Contract(e.to_string())
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_image: 8,
        d_q_large: 6,
        d_q_small: 4,
        d_si: 4,
        embed_dim: 5,
        d_h: 3,
        d_h_si: 3,
        glimpses_image: 2,
        classifier_hidden: 7,
        ..ModelConfig::desk()
    }
}

pub fn tiny_model(config: &ModelConfig, seed: u64) -> VqaCoin {
    let vocab = Vocabulary::from(
        ["<pad>", "<unk>", "is", "there", "a", "red", "circle", "how", "many"]
            .map(String::from)
            .to_vec(),
    );
    let answers = AnswerSet::from(["yes", "no", "2", "red"].map(String::from).to_vec());
    VqaCoin::new(config, vocab, answers, seed).unwrap()
}

/// The composed model: every parameter, both losses, dropout active with a
/// fixed mask, and padded inputs with masks.
pub fn model_cases(reps: usize, seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    let mut cases = Vec::new();
    for rep in 0..reps {
        let s = seed.wrapping_mul(1000) + rep as u64;
        for loss in [LossKind::Bce, LossKind::Softmax] {
            let config = ModelConfig { loss, ..tiny_config() };
            let mut model = tiny_model(&config, s);
            let objects = r.random_range(1..5);
            let feats = rand_tensor(&[objects, 8], &mut r, -1.0, 1.0);
            let q: Vec<usize> = (0..r.random_range(1..6)).map(|_| r.random_range(1..9)).collect();
            let si: Vec<usize> = (0..r.random_range(1..6)).map(|_| r.random_range(1..9)).collect();
            let target = match loss {
                LossKind::Bce => Target::Soft((0..4).map(|_| r.random_range(0.0..1.0)).collect()),
                LossKind::Softmax => Target::Class(Some(r.random_range(0..4))),
            };
            let drop_seed = r.next_u64();
            let eval = |m: &VqaCoin, want: bool| {
                let mut g = Graph::new(&m.params);
                let mut dr = rng(drop_seed);
                let mut mode = Mode::Train(&mut dr);
                let input = ModelInput::new(&feats, &q, &si);
                let out = m.forward(&mut g, &input, &mut mode).unwrap();
                let l = m.loss(&mut g, out.logits, &target).unwrap().unwrap();
                (g.value(l).item(), want.then(|| g.backward(l).unwrap()))
            };
            let name = format!("model_{}", if loss == LossKind::Bce { "bce" } else { "softmax" });
            cases.push(Case {
                name,
                max_rel: check_params(&mut model, |m| &mut m.params, &eval, 6, s),
            });
        }
    }
    cases
}

/// Independent Adamax: `(theta, m, u)` after each step, on plain vectors.
pub fn adamax_reference(theta0: &[f64], grads: &[Vec<f64>], lr: f64) -> Vec<Vec<f64>> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut theta = theta0.to_vec();
    let mut m = vec![0.0; theta.len()];
    let mut u = vec![0.0; theta.len()];
    let mut out = Vec::new();
    for (t, g) in grads.iter().enumerate() {
        let step = lr / (1.0 - b1.powi(t as i32 + 1));
        for k in 0..theta.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            u[k] = f64::max(b2 * u[k], g[k].abs());
            theta[k] -= step * m[k] / (u[k] + eps);
        }
        out.push(theta.clone());
    }
    out
}

/// The three-step fixture: `theta0 = [1, -2]`, lr 0.002, gradients below.
/// Expected parameters were computed in exact rational arithmetic and
/// rounded once.
pub const ADAMAX_FIXTURE_GRADS: [[f64; 2]; 3] = [[0.5, -1.0], [-0.25, 2.0], [1.0, 0.5]];
pub const ADAMAX_FIXTURE_THETA: [[f64; 2]; 3] = [
    [0.99800000004, -1.99800000002],
    [0.9975785259427533, -1.9985789473855262],
    [0.9967076772429747, -1.9991293132467907],
];
