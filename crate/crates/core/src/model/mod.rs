//! The end-to-end network.
//!
//! ```text
//! question ──embed──┬─ GRU_l ─ H_l ──────────────┐
//!                   └─ GRU_s ─ H_s ─ self-attn ─ C ──────────────┐
//! image features ─────────────── glimpse stack (G) ─ b_c_v seq   │
//! SI words ─embed─ GRU_si ─ S ─── SI glimpse with C ─ b_c_si seq │
//!                                                                │
//! classifier: [Σ b_c_v ; Σ b_c_si ; Σ C] → dropout → WN-FC → ReLU → dropout → FC
//! ```

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, read_header, save_checkpoint, sha256_hex, Checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC};
pub use config::{LossKind, ModelConfig};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{glimpse_stack, si_branch, BilinearGlimpse, NoHook, SelfAttentionHead};
use crate::diffmath::{DiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::layers::{dropout, EmbeddingTable, GruCell, LayerError, Linear, WeightNormLinear, PAD_ID};
use crate::textprep::{AnswerSet, Vocabulary};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("question has no tokens")]
    EmptyQuestion,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

impl ModelError {
    /// The op that produced a NaN or infinity, when that is the cause.
    pub fn non_finite_op(&self) -> Option<&'static str> {
        match self {
            ModelError::Diff(DiffError::NonFinite { op }) | ModelError::Layer(LayerError::Diff(DiffError::NonFinite { op })) => {
                Some(op)
            }
            _ => None,
        }
    }
}

/// Whether dropout is active. Training mode carries the dropout RNG.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// One example's encoded inputs. Masks (`true` = padding) are optional and
/// only needed when the caller pads sequences to a common length.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub image_feats: &'a Tensor,
    pub question_ids: &'a [usize],
    pub si_ids: &'a [usize],
    pub object_mask: Option<&'a [bool]>,
    pub question_mask: Option<&'a [bool]>,
    pub si_mask: Option<&'a [bool]>,
}

impl<'a> ModelInput<'a> {
    pub fn new(image_feats: &'a Tensor, question_ids: &'a [usize], si_ids: &'a [usize]) -> Self {
        Self {
            image_feats,
            question_ids,
            si_ids,
            object_mask: None,
            question_mask: None,
            si_mask: None,
        }
    }
}

/// Graph handles produced by [`VqaCoin::forward`].
#[derive(Clone, Debug)]
pub struct ModelOutputs {
    /// Answer logits `[answer_count]`.
    pub logits: Var,
    /// Sum-pooled image-question vector.
    pub b_c_v: Var,
    /// Sum-pooled SI-question vector.
    pub b_c_si: Var,
    /// Sum-pooled self-attended question vector.
    pub c_q_s: Var,
    /// Self-attention weights over question words `[n]`.
    pub question_weights: Var,
    /// One `objects × words` map per image glimpse.
    pub image_maps: Vec<Var>,
    /// The `si words × question words` map.
    pub si_map: Var,
}

/// Supervision for one example.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Soft score per answer class.
    Soft(Vec<f64>),
    /// Canonical answer class, if it is in the answer set.
    Class(Option<usize>),
}

#[derive(Clone, Debug)]
pub struct VqaCoin {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub answers: AnswerSet,
    pub params: ParamStore,
    embedding: EmbeddingTable,
    gru_large: GruCell,
    gru_small: GruCell,
    gru_si: GruCell,
    self_attn: SelfAttentionHead,
    image_glimpses: Vec<BilinearGlimpse>,
    si_glimpse: BilinearGlimpse,
    classifier_hidden: WeightNormLinear,
    classifier_out: Linear,
}

impl VqaCoin {
    /// Builds a freshly initialized network. Parameters are registered in a
    /// fixed order, so equal `(config, vocab, answers, seed)` give equal weights.
    pub fn new(config: &ModelConfig, vocab: Vocabulary, answers: AnswerSet, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if config.answer_count != 0 && config.answer_count != answers.len() {
            return Err(ModelError::ConfigMismatch(format!(
                "answer_count {} but answer set has {} entries",
                config.answer_count,
                answers.len()
            )));
        }
        if vocab.len() < 2 {
            return Err(ModelError::Config("vocabulary lacks pad/unknown entries".into()));
        }
        let mut config = config.clone();
        config.answer_count = answers.len();
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let p = &mut params;
        let embedding = EmbeddingTable::new(p, "embedding", vocab.len(), c.embed_dim, &mut rng);
        let gru_large = GruCell::new(p, "gru_l", c.embed_dim, c.d_q_large, &mut rng);
        let gru_small = GruCell::new(p, "gru_s", c.embed_dim, c.d_q_small, &mut rng);
        let gru_si = GruCell::new(p, "gru_si", c.embed_dim, c.d_si, &mut rng);
        let self_attn = SelfAttentionHead::new(p, "self_attn", c.d_q_small, &mut rng);
        let image_glimpses = (0..c.glimpses_image)
            .map(|i| {
                BilinearGlimpse::new(
                    p,
                    &format!("glimpse_image.{i}"),
                    c.d_image,
                    c.d_q_large,
                    c.d_h,
                    c.d_q_large,
                    &mut rng,
                )
            })
            .collect();
        let si_glimpse = BilinearGlimpse::new(p, "glimpse_si", c.d_si, c.d_q_small, c.d_h_si, c.d_q_small, &mut rng);
        let classifier_hidden = WeightNormLinear::new(p, "classifier.hidden", c.classifier_input(), c.classifier_hidden, &mut rng);
        let classifier_out = Linear::new(p, "classifier.out", c.classifier_hidden, c.answer_count, &mut rng);
        Ok(Self {
            config,
            vocab,
            answers,
            params,
            embedding,
            gru_large,
            gru_small,
            gru_si,
            self_attn,
            image_glimpses,
            si_glimpse,
            classifier_hidden,
            classifier_out,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Overwrites embedding rows from `word v1 v2 ...` lines for words in the
    /// vocabulary. Returns the number of rows written.
    pub fn load_embeddings(&mut self, text: &str) -> Result<usize, ModelError> {
        let vocab = &self.vocab;
        Ok(self.embedding.load_text(&mut self.params, text, |w| vocab.get(w))?)
    }

    /// Parameter ids grouped by block name (embedding, gru_l, glimpse_image.3, ...).
    pub fn parameter_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups: Vec<(String, Vec<ParamId>)> = Vec::new();
        for (id, p) in self.params.iter() {
            let group = group_name(&p.name);
            match groups.iter_mut().find(|(g, _)| *g == group) {
                Some((_, ids)) => ids.push(id),
                None => groups.push((group, vec![id])),
            }
        }
        groups
    }

    /// Ids of classifier parameters (for classifier-only optimization).
    pub fn classifier_params(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with("classifier."))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, input: &ModelInput, mode: &mut Mode) -> Result<ModelOutputs, ModelError> {
        let c = &self.config;
        if input.question_ids.is_empty() {
            return Err(ModelError::EmptyQuestion);
        }
        let feats = input.image_feats;
        if feats.rank() != 2 || feats.cols() != c.d_image {
            return Err(ModelError::ConfigMismatch(format!(
                "image features {:?}, expected rows × {}",
                feats.shape(),
                c.d_image
            )));
        }

        let q_emb = self.embedding.embed(g, input.question_ids)?;
        let h_large = self.gru_large.scan(g, q_emb, None)?;
        let h_small = self.gru_small.scan(g, q_emb, None)?;
        let sa = self.self_attn.attend(g, h_small, input.question_mask)?;

        let x = g.input(feats.clone())?;
        let (b_c_v_seq, image_maps) = glimpse_stack(
            g,
            x,
            h_large,
            &self.image_glimpses,
            input.object_mask,
            input.question_mask,
            &mut NoHook,
        )?;

        // an image without semantic information reads a single padding token
        let pad_only = [PAD_ID];
        let (si_ids, si_mask) = if input.si_ids.is_empty() {
            (&pad_only[..], None)
        } else {
            (input.si_ids, input.si_mask)
        };
        let si_emb = self.embedding.embed(g, si_ids)?;
        let s = self.gru_si.scan(g, si_emb, None)?;
        let (b_c_si_seq, si_map) = si_branch(g, s, sa.context, &self.si_glimpse, si_mask, input.question_mask)?;

        let b_c_v = sum_pool(g, b_c_v_seq, input.question_mask)?;
        let b_c_si = sum_pool(g, b_c_si_seq, input.question_mask)?;
        let c_q_s = sum_pool(g, sa.context, input.question_mask)?;
        let logits = self.classify(g, b_c_v, b_c_si, c_q_s, mode)?;
        Ok(ModelOutputs {
            logits,
            b_c_v,
            b_c_si,
            c_q_s,
            question_weights: sa.weights,
            image_maps,
            si_map,
        })
    }

    /// Concatenates the three pooled vectors and runs the two-layer classifier.
    pub fn classify(&self, g: &mut Graph, b_c_v: Var, b_c_si: Var, c_q_s: Var, mode: &mut Mode) -> Result<Var, ModelError> {
        let c = &self.config;
        let z = g.concat(&[b_c_v, b_c_si, c_q_s], 0)?;
        if g.value(z).len() != c.classifier_input() {
            return Err(ModelError::ConfigMismatch(format!(
                "classifier input {} != {}",
                g.value(z).len(),
                c.classifier_input()
            )));
        }
        let z = g.reshape(z, &[1, c.classifier_input()])?;
        let z = apply_dropout(g, z, c.dropout_classifier, mode)?;
        let h = self.classifier_hidden.forward(g, z)?;
        let h = g.relu(h)?;
        let h = apply_dropout(g, h, c.dropout_fc, mode)?;
        let logits = self.classifier_out.forward(g, h)?;
        Ok(g.reshape(logits, &[c.answer_count])?)
    }

    /// Scalar training loss for one example, or `None` when the target gives no signal.
    pub fn loss(&self, g: &mut Graph, logits: Var, target: &Target) -> Result<Option<Var>, ModelError> {
        match target {
            Target::Soft(scores) => Ok(Some(g.bce_with_logits(logits, scores)?)),
            Target::Class(Some(class)) => Ok(Some(g.softmax_cross_entropy(logits, *class)?)),
            Target::Class(None) => Ok(None),
        }
    }

    /// Eval-mode forward returning answer logits as plain numbers.
    pub fn logits(&self, input: &ModelInput) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, input, &mut Mode::Eval)?;
        Ok(g.value(out.logits).data().to_vec())
    }

    /// Class id and answer string with the highest logit (lowest id on ties).
    pub fn predict(&self, input: &ModelInput) -> Result<(usize, String), ModelError> {
        let logits = self.logits(input)?;
        let class = argmax(&logits);
        let answer = self.answers.answer(class).unwrap_or_default().to_owned();
        Ok((class, answer))
    }

    /// Encodes text tokens with the model vocabulary (unknown → 1).
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        self.vocab.encode(tokens)
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn group_name(param: &str) -> String {
    let parts: Vec<&str> = param.split('.').collect();
    match parts.as_slice() {
        ["glimpse_image", idx, ..] => format!("glimpse_image.{idx}"),
        ["self_attn", sub, ..] => format!("self_attn.{sub}"),
        [head, ..] => (*head).to_owned(),
        [] => String::new(),
    }
}

fn apply_dropout(g: &mut Graph, x: Var, rate: f64, mode: &mut Mode) -> Result<Var, LayerError> {
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train(rng) => dropout(g, x, rate, true, &mut **rng),
    }
}

/// Sum over rows, skipping padded rows.
fn sum_pool(g: &mut Graph, seq: Var, mask: Option<&[bool]>) -> Result<Var, DiffError> {
    match mask {
        None => g.reduce_sum(seq, 0),
        Some(m) => {
            let keep = g.input(Tensor::vector(m.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect()))?;
            let kept = g.scale_rows(seq, keep)?;
            g.reduce_sum(kept, 0)
        }
    }
}
