//! Trainable building blocks: embedding table, weight-normalized and plain
//! linear layers, inverted dropout and the GRU cell.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::diffmath::{DiffError, Graph, ParamId, ParamStore, Tensor, Var};

/// Token id reserved for padding in every vocabulary.
pub const PAD_ID: usize = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    Vocabulary { id: usize, vocab_size: usize },
    #[error("recurrent scan over an empty sequence")]
    EmptySequence,
    #[error("invalid layer configuration: {0}")]
    Config(String),
    #[error("embedding file line {line}: {message}")]
    EmbeddingFile { line: usize, message: String },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// `a = sqrt(6 / (fan_in + fan_out))`.
fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let a = xavier_bound(rows, cols);
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

/// Square matrix with orthonormal columns (Gram-Schmidt on a Gaussian draw).
pub(crate) fn orthogonal_matrix<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for j in 0..n {
            for k in 0..j {
                let dot: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
                let (head, tail) = cols.split_at_mut(j);
                for (x, y) in tail[0].iter_mut().zip(&head[k]) {
                    *x -= dot * y;
                }
            }
            let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols[j].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            let mut data = vec![0.0; n * n];
            for (j, col) in cols.iter().enumerate() {
                for (i, v) in col.iter().enumerate() {
                    data[i * n + j] = *v;
                }
            }
            return Tensor::matrix(n, n, data).expect("positive extents");
        }
    }
}

/// Trainable word vectors. Row [`PAD_ID`] stays at zero: it is initialized
/// to zero and never receives gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        let mut t = uniform_matrix(vocab_size, dim, rng);
        t.data_mut()[..dim].fill(0.0);
        let table = store.add(name, t);
        Self { table, vocab_size, dim }
    }

    pub fn embed(&self, g: &mut Graph, ids: &[usize]) -> Result<Var, LayerError> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(LayerError::Vocabulary {
                id,
                vocab_size: self.vocab_size,
            });
        }
        if ids.is_empty() {
            return Err(LayerError::EmptySequence);
        }
        let t = g.param(self.table);
        Ok(g.gather_rows(t, ids, Some(PAD_ID))?)
    }

    /// Overwrites rows from a text file of `word v1 v2 ...` lines. Words for
    /// which `lookup` returns `None` are skipped; rows not mentioned keep their
    /// initialization. Returns the number of rows written.
    pub fn load_text(
        &self,
        store: &mut ParamStore,
        text: &str,
        lookup: impl Fn(&str) -> Option<usize>,
    ) -> Result<usize, LayerError> {
        let mut written = 0;
        let table = store.get_mut(self.table);
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| LayerError::EmbeddingFile {
                    line: lineno + 1,
                    message: format!("{e}"),
                })?;
            if values.len() != self.dim {
                return Err(LayerError::EmbeddingFile {
                    line: lineno + 1,
                    message: format!("expected {} values, found {}", self.dim, values.len()),
                });
            }
            match lookup(word) {
                Some(id) if id != PAD_ID && id < self.vocab_size => {
                    table.data_mut()[id * self.dim..(id + 1) * self.dim].copy_from_slice(&values);
                    written += 1;
                }
                _ => {}
            }
        }
        Ok(written)
    }
}

/// Fully connected layer with weight normalization: column `j` of the
/// effective weight is `gain[j] * direction[:, j] / ‖direction[:, j]‖`,
/// recomputed on every forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightNormLinear {
    pub direction: ParamId,
    pub gain: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl WeightNormLinear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let dir = uniform_matrix(in_dim, out_dim, rng);
        // gains start at the column norms so the effective weight equals the raw draw
        let gains = (0..out_dim)
            .map(|j| (0..in_dim).map(|i| dir.at(i, j).powi(2)).sum::<f64>().sqrt())
            .collect();
        let direction = store.add(format!("{name}.direction"), dir);
        let gain = store.add(format!("{name}.gain"), Tensor::vector(gains));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            direction,
            gain,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, LayerError> {
        let d = g.param(self.direction);
        let s = g.param(self.gain);
        let b = g.param(self.bias);
        let w = g.weight_norm(d, s)?;
        let xw = g.matmul(x, w)?;
        Ok(g.broadcast_add(xw, b)?)
    }

    pub fn effective_weight(&self, store: &ParamStore) -> Tensor {
        let mut g = Graph::new(store);
        let d = g.param(self.direction);
        let s = g.param(self.gain);
        let w = g.weight_norm(d, s).expect("shapes fixed at construction");
        g.value(w).clone()
    }
}

/// Plain affine layer `x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_matrix(in_dim, out_dim, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, LayerError> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w)?;
        Ok(g.broadcast_add(xw, b)?)
    }
}

/// Inverted dropout. Identity in eval mode or at rate 0.
pub fn dropout<R: Rng + ?Sized>(g: &mut Graph, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var, LayerError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(LayerError::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::new(shape, mask)?;
    Ok(g.mul_const(x, &mask)?)
}

/// Gated recurrent unit:
///
/// ```text
/// z  = σ(x W_z + h U_z + b_z)
/// r  = σ(x W_r + h U_r + b_r)
/// h̃  = tanh(x W_h + (r ∘ h) U_h + b_h)
/// h' = (1 − z) ∘ h + z ∘ h̃
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let mut gate = |gate: &str, store: &mut ParamStore| {
            let w = store.add(format!("{name}.w_{gate}"), uniform_matrix(input_dim, hidden_dim, rng));
            let u = store.add(format!("{name}.u_{gate}"), orthogonal_matrix(hidden_dim, rng));
            let b = store.add(format!("{name}.b_{gate}"), Tensor::zeros(&[hidden_dim]));
            (w, u, b)
        };
        let (w_z, u_z, b_z) = gate("z", store);
        let (w_r, u_r, b_r) = gate("r", store);
        let (w_h, u_h, b_h) = gate("h", store);
        Self {
            input_dim,
            hidden_dim,
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 9] {
        [
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h, self.b_h,
        ]
    }

    /// Runs the cell over every row of `inputs[n×input_dim]` and returns all
    /// hidden states `h_1..h_n` as an `n×hidden_dim` matrix. `h0` defaults to zeros.
    pub fn scan(&self, g: &mut Graph, inputs: Var, h0: Option<Var>) -> Result<Var, LayerError> {
        let shape = g.shape(inputs).to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(DiffError::Shape {
                op: "gru_scan",
                left: shape,
                right: vec![self.input_dim, self.hidden_dim],
            }
            .into());
        }
        let n = shape[0];
        if n == 0 {
            return Err(LayerError::EmptySequence);
        }
        let project = |g: &mut Graph, w: ParamId, b: ParamId| -> Result<Var, DiffError> {
            let w = g.param(w);
            let b = g.param(b);
            let xw = g.matmul(inputs, w)?;
            g.broadcast_add(xw, b)
        };
        let xz = project(g, self.w_z, self.b_z)?;
        let xr = project(g, self.w_r, self.b_r)?;
        let xh = project(g, self.w_h, self.b_h)?;
        let (u_z, u_r, u_h) = (g.param(self.u_z), g.param(self.u_r), g.param(self.u_h));

        let mut h = match h0 {
            Some(h0) => {
                if g.value(h0).len() != self.hidden_dim {
                    return Err(DiffError::Shape {
                        op: "gru_scan",
                        left: g.shape(h0).to_vec(),
                        right: vec![self.hidden_dim],
                    }
                    .into());
                }
                g.reshape(h0, &[1, self.hidden_dim])?
            }
            None => g.input(Tensor::zeros(&[1, self.hidden_dim]))?,
        };
        let mut states = Vec::with_capacity(n);
        for t in 0..n {
            let gate = |g: &mut Graph, xp: Var, u: Var, h: Var| -> Result<Var, DiffError> {
                let x_t = g.row(xp, t)?;
                let hu = g.matmul(h, u)?;
                g.add(x_t, hu)
            };
            let z_pre = gate(g, xz, u_z, h)?;
            let z = g.sigmoid(z_pre)?;
            let r_pre = gate(g, xr, u_r, h)?;
            let r = g.sigmoid(r_pre)?;
            let rh = g.hadamard(r, h)?;
            let cand_pre = gate(g, xh, u_h, rh)?;
            let cand = g.tanh(cand_pre)?;
            let keep = g.affine(z, -1.0, 1.0)?;
            let kept = g.hadamard(keep, h)?;
            let fresh = g.hadamard(z, cand)?;
            h = g.add(kept, fresh)?;
            states.push(h);
        }
        Ok(g.concat(&states, 0)?)
    }
}
