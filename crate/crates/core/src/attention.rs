//! Self-attention over question hidden states and multi-glimpse low-rank
//! bilinear attention with residual fusion.
//!
//! Masks are `&[bool]` slices where `true` marks a padded position. Masked
//! positions receive an additive [`MASK_VALUE`] before the softmax and come out
//! with weight exactly zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{DiffError, Graph, ParamId, ParamStore, Tensor, Var, MASK_VALUE};
use crate::layers::{uniform_matrix, LayerError, Linear, WeightNormLinear};

/// Per-word importance weights from the question's own hidden states:
///
/// ```text
/// q = ReLU(WN_q(H)),  v = ReLU(WN_v(H))
/// y = q ∘ v
/// l = Linear(ReLU(y))            one score per word
/// w = softmax(l)                 over unmasked words
/// C[i] = w[i] · H[i]
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttentionHead {
    pub fc_q: WeightNormLinear,
    pub fc_v: WeightNormLinear,
    pub fc_score: Linear,
    pub dim: usize,
}

/// Result of [`SelfAttentionHead::attend`].
#[derive(Clone, Copy, Debug)]
pub struct SelfAttention {
    /// Reweighted sequence `n×d`; its row sum is the weighted context vector.
    pub context: Var,
    /// Weights over word positions, shape `[n]`.
    pub weights: Var,
}

fn check_mask(len: usize, mask: Option<&[bool]>, op: &'static str) -> Result<(), DiffError> {
    match mask {
        Some(m) if m.len() != len => Err(DiffError::Shape {
            op,
            left: vec![len],
            right: vec![m.len()],
        }),
        _ => Ok(()),
    }
}

fn is_pad(mask: Option<&[bool]>, i: usize) -> bool {
    mask.is_some_and(|m| m[i])
}

impl SelfAttentionHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            fc_q: WeightNormLinear::new(store, &format!("{name}.fc_q"), dim, dim, rng),
            fc_v: WeightNormLinear::new(store, &format!("{name}.fc_v"), dim, dim, rng),
            fc_score: Linear::new(store, &format!("{name}.fc_score"), dim, 1, rng),
            dim,
        }
    }

    pub fn attend(&self, g: &mut Graph, hidden: Var, mask: Option<&[bool]>) -> Result<SelfAttention, LayerError> {
        let n = g.shape(hidden)[0];
        check_mask(n, mask, "self_attend")?;
        let q_pre = self.fc_q.forward(g, hidden)?;
        let q = g.relu(q_pre)?;
        let v_pre = self.fc_v.forward(g, hidden)?;
        let v = g.relu(v_pre)?;
        let y = g.hadamard(q, v)?;
        let y = g.relu(y)?;
        let scores = self.fc_score.forward(g, y)?;
        let mut scores = g.reshape(scores, &[n])?;
        if let Some(m) = mask {
            let bias = Tensor::vector(m.iter().map(|&p| if p { MASK_VALUE } else { 0.0 }).collect());
            scores = g.add_const(scores, &bias)?;
        }
        let weights = g.softmax(scores, 0)?;
        let context = g.scale_rows(hidden, weights)?;
        Ok(SelfAttention { context, weights })
    }
}

/// One bilinear attention glimpse between `X[N×d_x]` and `Y[M×d_y]`.
///
/// Attention path: `L[i,j] = p · (ReLU(X[i] U) ∘ ReLU(Y[j] V))`, normalized by a
/// single softmax over all unmasked `(i, j)` pairs.
/// Joint path: `f_k = Σ_{i,j} A[i,j] · ReLU(X[i] U′)_k · ReLU(Y[j] V′)_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearGlimpse {
    pub u: WeightNormLinear,
    pub v: WeightNormLinear,
    pub p: ParamId,
    pub u_joint: WeightNormLinear,
    pub v_joint: WeightNormLinear,
    pub d_x: usize,
    pub d_y: usize,
    pub d_h: usize,
    pub d_out: usize,
}

impl BilinearGlimpse {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_x: usize,
        d_y: usize,
        d_h: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let u = WeightNormLinear::new(store, &format!("{name}.u"), d_x, d_h, rng);
        let v = WeightNormLinear::new(store, &format!("{name}.v"), d_y, d_h, rng);
        let p_init = uniform_matrix(1, d_h, rng).reshaped(vec![d_h]).expect("same length");
        let p = store.add(format!("{name}.p"), p_init);
        let u_joint = WeightNormLinear::new(store, &format!("{name}.u_joint"), d_x, d_out, rng);
        let v_joint = WeightNormLinear::new(store, &format!("{name}.v_joint"), d_y, d_out, rng);
        Self {
            u,
            v,
            p,
            u_joint,
            v_joint,
            d_x,
            d_y,
            d_h,
            d_out,
        }
    }
}

/// Result of [`bilinear_attend`].
#[derive(Clone, Copy, Debug)]
pub struct BilinearOutput {
    /// Joint feature vector `[d_out]`.
    pub joint: Var,
    /// Attention map `N×M`, summing to one over all pairs.
    pub map: Var,
}

pub fn bilinear_attend(
    g: &mut Graph,
    x: Var,
    y: Var,
    glimpse: &BilinearGlimpse,
    x_mask: Option<&[bool]>,
    y_mask: Option<&[bool]>,
) -> Result<BilinearOutput, LayerError> {
    let (n, m) = (g.shape(x)[0], g.shape(y)[0]);
    check_mask(n, x_mask, "bilinear_attend")?;
    check_mask(m, y_mask, "bilinear_attend")?;

    let xu = glimpse.u.forward(g, x)?;
    let xu = g.relu(xu)?;
    let yv = glimpse.v.forward(g, y)?;
    let yv = g.relu(yv)?;
    let p = g.param(glimpse.p);
    let xup = g.broadcast_mul(xu, p)?;
    let yv_t = g.transpose(yv)?;
    let mut logits = g.matmul(xup, yv_t)?;
    if x_mask.is_some() || y_mask.is_some() {
        let bias = (0..n * m)
            .map(|k| {
                if is_pad(x_mask, k / m) || is_pad(y_mask, k % m) {
                    MASK_VALUE
                } else {
                    0.0
                }
            })
            .collect();
        logits = g.add_const(logits, &Tensor::matrix(n, m, bias)?)?;
    }
    let flat = g.reshape(logits, &[n * m])?;
    let flat = g.softmax(flat, 0)?;
    let map = g.reshape(flat, &[n, m])?;

    let xj = glimpse.u_joint.forward(g, x)?;
    let xj = g.relu(xj)?;
    let yj = glimpse.v_joint.forward(g, y)?;
    let yj = g.relu(yj)?;
    let attended = g.matmul(map, yj)?;
    let prod = g.hadamard(xj, attended)?;
    let joint = g.reduce_sum(prod, 0)?;
    Ok(BilinearOutput { joint, map })
}

/// Extension point run after each glimpse of [`glimpse_stack`]. It may
/// replace the joint vector before the residual update, e.g. to add a count
/// feature derived from the attention map.
pub trait GlimpseHook {
    fn after_glimpse(&mut self, g: &mut Graph, index: usize, joint: Var, map: Var) -> Result<Var, LayerError>;
}

/// Leaves the joint vector untouched.
pub struct NoHook;

impl GlimpseHook for NoHook {
    fn after_glimpse(&mut self, _g: &mut Graph, _index: usize, joint: Var, _map: Var) -> Result<Var, LayerError> {
        Ok(joint)
    }
}

/// Runs `glimpses` in sequence, adding each glimpse's joint vector to every
/// row of the question sequence: `Q_g = Q_{g-1} + f_g`. Returns `Q_G` and the maps.
pub fn glimpse_stack(
    g: &mut Graph,
    x: Var,
    q0: Var,
    glimpses: &[BilinearGlimpse],
    x_mask: Option<&[bool]>,
    q_mask: Option<&[bool]>,
    hook: &mut dyn GlimpseHook,
) -> Result<(Var, Vec<Var>), LayerError> {
    if glimpses.is_empty() {
        return Err(LayerError::Config("glimpse stack needs at least one glimpse".into()));
    }
    let mut q = q0;
    let mut maps = Vec::with_capacity(glimpses.len());
    for (i, glimpse) in glimpses.iter().enumerate() {
        let out = bilinear_attend(g, x, q, glimpse, x_mask, q_mask)?;
        let joint = hook.after_glimpse(g, i, out.joint, out.map)?;
        q = g.broadcast_add(q, joint)?;
        maps.push(out.map);
    }
    Ok((q, maps))
}

/// Semantic-information branch: one glimpse between the SI states `S` and the
/// self-attended question sequence `C`, then `C + f` broadcast over rows.
/// Returns the fused sequence and the `L×n` map.
pub fn si_branch(
    g: &mut Graph,
    si: Var,
    context: Var,
    glimpse: &BilinearGlimpse,
    si_mask: Option<&[bool]>,
    q_mask: Option<&[bool]>,
) -> Result<(Var, Var), LayerError> {
    let out = bilinear_attend(g, si, context, glimpse, si_mask, q_mask)?;
    let fused = g.broadcast_add(context, out.joint)?;
    Ok((fused, out.map))
}

/// A normalized attention map with axis labels, as dumped for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub weights: Vec<Vec<f64>>,
}

impl AttentionMap {
    pub fn new(rows: Vec<String>, cols: Vec<String>, weights: &Tensor) -> Result<Self, DiffError> {
        let (r, c) = (weights.rows(), weights.cols());
        if rows.len() != r || cols.len() != c {
            return Err(DiffError::Shape {
                op: "attention_map",
                left: vec![rows.len(), cols.len()],
                right: vec![r, c],
            });
        }
        Ok(Self {
            rows,
            cols,
            weights: weights.to_rows(),
        })
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().flatten().sum()
    }

    /// Divides every entry by the total mass.
    pub fn renormalize(&mut self) {
        let total = self.total();
        if total > 0.0 {
            self.weights.iter_mut().flatten().for_each(|w| *w /= total);
        }
    }

    /// Row and column of the largest weight.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for (i, row) in self.weights.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                if w > best.2 {
                    best = (i, j, w);
                }
            }
        }
        (best.0, best.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng(seed);
        let data = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn zero_params(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn self_attention_singleton_is_identity() {
        let mut store = ParamStore::new();
        let head = SelfAttentionHead::new(&mut store, "sa", 4, &mut rng(1));
        let mut g = Graph::new(&store);
        let h = g.input(random(1, 4, 2)).unwrap();
        let out = head.attend(&mut g, h, None).unwrap();
        assert_eq!(g.value(out.weights).data(), &[1.0]);
        assert_eq!(g.value(out.context), g.value(h));
    }

    #[test]
    fn self_attention_identical_rows_split_evenly() {
        let mut store = ParamStore::new();
        let head = SelfAttentionHead::new(&mut store, "sa", 3, &mut rng(1));
        let row = random(1, 3, 5);
        let mut both = row.data().to_vec();
        both.extend_from_slice(row.data());
        let mut g = Graph::new(&store);
        let h = g.input(Tensor::matrix(2, 3, both).unwrap()).unwrap();
        let out = head.attend(&mut g, h, None).unwrap();
        assert_eq!(g.value(out.weights).data(), &[0.5, 0.5]);
    }

    #[test]
    fn self_attention_masked_row_gets_no_weight_or_gradient() {
        let mut store = ParamStore::new();
        let head = SelfAttentionHead::new(&mut store, "sa", 3, &mut rng(1));
        let mut g = Graph::new(&store);
        let h = g.leaf(random(3, 3, 9)).unwrap();
        let mask = [false, true, false];
        let out = head.attend(&mut g, h, Some(&mask)).unwrap();
        assert_eq!(g.value(out.weights).data()[1], 0.0);
        let pooled = g.reduce_sum(out.context, 0).unwrap();
        let l = g.sum(pooled).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(h).unwrap().row(1).iter().all(|&v| v == 0.0));
        assert!(matches!(
            head.attend(&mut g, h, Some(&[true, true, true])),
            Err(LayerError::Diff(DiffError::DegenerateMask { .. }))
        ));
    }

    #[test]
    fn bilinear_singleton_map() {
        let mut store = ParamStore::new();
        let gl = BilinearGlimpse::new(&mut store, "b", 5, 4, 3, 6, &mut rng(3));
        let mut g = Graph::new(&store);
        let x = g.input(random(1, 5, 1)).unwrap();
        let y = g.input(random(1, 4, 2)).unwrap();
        let out = bilinear_attend(&mut g, x, y, &gl, None, None).unwrap();
        assert_eq!(g.value(out.map).data(), &[1.0]);
        // f = ReLU(x U′) ∘ ReLU(y V′)
        let xu = gl.u_joint.forward(&mut g, x).unwrap();
        let xu = g.relu(xu).unwrap();
        let yv = gl.v_joint.forward(&mut g, y).unwrap();
        let yv = g.relu(yv).unwrap();
        let expect = g.hadamard(xu, yv).unwrap();
        for (a, b) in g.value(out.joint).data().iter().zip(g.value(expect).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn bilinear_map_is_normalized_and_masked() {
        let mut store = ParamStore::new();
        let gl = BilinearGlimpse::new(&mut store, "b", 6, 4, 3, 5, &mut rng(3));
        let mut g = Graph::new(&store);
        let x = g.input(random(7, 6, 1)).unwrap();
        let y = g.input(random(5, 4, 2)).unwrap();
        let xm = [false, false, true, false, false, false, false];
        let ym = [false, false, false, false, true];
        let out = bilinear_attend(&mut g, x, y, &gl, Some(&xm), Some(&ym)).unwrap();
        let map = g.value(out.map);
        assert_eq!(map.shape(), &[7, 5]);
        assert!((map.sum() - 1.0).abs() < 1e-12);
        for i in 0..7 {
            for j in 0..5 {
                let w = map.at(i, j);
                assert!(w >= 0.0);
                if xm[i] || ym[j] {
                    assert_eq!(w, 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_glimpse_is_a_zero_residual() {
        let mut store = ParamStore::new();
        let gl = BilinearGlimpse::new(&mut store, "b", 6, 4, 3, 4, &mut rng(3));
        zero_params(&mut store);
        let mut g = Graph::new(&store);
        let x = g.input(random(3, 6, 1)).unwrap();
        let q0 = g.input(random(2, 4, 2)).unwrap();
        let (q1, maps) = glimpse_stack(&mut g, x, q0, std::slice::from_ref(&gl), None, None, &mut NoHook).unwrap();
        assert_eq!(g.value(q1), g.value(q0));
        assert_eq!(maps.len(), 1);
        let (fused, _) = si_branch(&mut g, x, q0, &gl, None, None).unwrap();
        assert_eq!(g.value(fused), g.value(q0));
    }

    #[test]
    fn glimpse_stack_shapes_at_paper_extents() {
        let mut store = ParamStore::new();
        let mut r = rng(4);
        let glimpses: Vec<_> = (0..8)
            .map(|i| BilinearGlimpse::new(&mut store, &format!("g{i}"), 10, 6, 4, 6, &mut r))
            .collect();
        let mut g = Graph::new(&store);
        let x = g.input(random(36, 10, 1)).unwrap();
        let q0 = g.input(random(14, 6, 2)).unwrap();
        let (q, maps) = glimpse_stack(&mut g, x, q0, &glimpses, None, None, &mut NoHook).unwrap();
        assert_eq!(g.shape(q), &[14, 6]);
        assert_eq!(maps.len(), 8);
        assert!(maps.iter().all(|m| g.shape(*m) == [36, 14]));
    }

    #[test]
    fn si_branch_residual_is_rank_one() {
        let mut store = ParamStore::new();
        let gl = BilinearGlimpse::new(&mut store, "si", 5, 5, 4, 5, &mut rng(8));
        let mut g = Graph::new(&store);
        let s = g.input(random(40, 5, 1)).unwrap();
        let c = g.input(random(14, 5, 2)).unwrap();
        let (fused, map) = si_branch(&mut g, s, c, &gl, None, None).unwrap();
        assert_eq!(g.shape(map), &[40, 14]);
        let (fv, cv) = (g.value(fused), g.value(c));
        let first: Vec<f64> = (0..5).map(|k| fv.at(0, k) - cv.at(0, k)).collect();
        for i in 1..14 {
            for k in 0..5 {
                assert!((fv.at(i, k) - cv.at(i, k) - first[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hook_can_rewrite_the_joint_vector() {
        struct Doubler(usize);
        impl GlimpseHook for Doubler {
            fn after_glimpse(&mut self, g: &mut Graph, _i: usize, joint: Var, _m: Var) -> Result<Var, LayerError> {
                self.0 += 1;
                Ok(g.affine(joint, 2.0, 0.0)?)
            }
        }
        let mut store = ParamStore::new();
        let gl = BilinearGlimpse::new(&mut store, "b", 3, 3, 2, 3, &mut rng(3));
        let mut g = Graph::new(&store);
        let x = g.input(random(2, 3, 1)).unwrap();
        let q0 = g.input(random(2, 3, 2)).unwrap();
        let mut hook = Doubler(0);
        let glimpses = [gl.clone(), gl];
        glimpse_stack(&mut g, x, q0, &glimpses, None, None, &mut hook).unwrap();
        assert_eq!(hook.0, 2);
    }

    #[test]
    fn attention_map_renormalizes_and_checks_labels() {
        let t = Tensor::matrix(2, 2, vec![1.0, 1.0, 2.0, 0.0]).unwrap();
        let mut m = AttentionMap::new(vec!["a".into(), "b".into()], vec!["x".into(), "y".into()], &t).unwrap();
        m.renormalize();
        assert!((m.total() - 1.0).abs() < 1e-15);
        assert_eq!(m.argmax(), (1, 0));
        assert!(AttentionMap::new(vec!["a".into()], vec!["x".into(), "y".into()], &t).is_err());
    }
}
