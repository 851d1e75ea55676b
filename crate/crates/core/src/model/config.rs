use serde::{Deserialize, Serialize};

use super::ModelError;

/// Training objective on the answer logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean binary cross-entropy against soft scores `min(count / 3, 1)`.
    #[default]
    Bce,
    /// Softmax cross-entropy on the canonical answer.
    Softmax,
}

/// Network dimensions and regularization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Image feature width per object.
    pub d_image: usize,
    /// Hidden width of the question GRU that attends the image.
    pub d_q_large: usize,
    /// Hidden width of the question GRU used for self-attention and the SI branch.
    pub d_q_small: usize,
    /// Hidden width of the semantic-information GRU; must equal `d_q_small`.
    pub d_si: usize,
    pub embed_dim: usize,
    /// Low-rank width of the image-question glimpses.
    pub d_h: usize,
    /// Low-rank width of the SI-question glimpse.
    pub d_h_si: usize,
    pub n_q_max: usize,
    pub si_max: usize,
    pub glimpses_image: usize,
    pub glimpses_si: usize,
    /// Number of answer classes; 0 means "take it from the answer set".
    pub answer_count: usize,
    pub classifier_hidden: usize,
    pub dropout_classifier: f64,
    pub dropout_fc: f64,
    pub loss: LossKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small dimensions for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            d_image: 64,
            d_q_large: 64,
            d_q_small: 32,
            d_si: 32,
            embed_dim: 32,
            d_h: 32,
            d_h_si: 32,
            n_q_max: 14,
            si_max: 40,
            glimpses_image: 2,
            glimpses_si: 1,
            answer_count: 0,
            classifier_hidden: 128,
            dropout_classifier: 0.5,
            dropout_fc: 0.2,
            loss: LossKind::Bce,
        }
    }

    /// Full-size dimensions: 2048-d image features, 1024/512 question GRUs,
    /// 300-d embeddings, eight image glimpses and 3129 answers.
    pub fn paper() -> Self {
        Self {
            d_image: 2048,
            d_q_large: 1024,
            d_q_small: 512,
            d_si: 512,
            embed_dim: 300,
            d_h: 1024,
            d_h_si: 512,
            n_q_max: 14,
            si_max: 40,
            glimpses_image: 8,
            glimpses_si: 1,
            answer_count: 3129,
            classifier_hidden: 2048,
            dropout_classifier: 0.5,
            dropout_fc: 0.2,
            loss: LossKind::Bce,
        }
    }

    /// Width of the classifier input: three sum-pooled vectors.
    pub fn classifier_input(&self) -> usize {
        self.d_q_large + self.d_si + self.d_q_small
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let extents = [
            ("d_image", self.d_image),
            ("d_q_large", self.d_q_large),
            ("d_q_small", self.d_q_small),
            ("d_si", self.d_si),
            ("embed_dim", self.embed_dim),
            ("d_h", self.d_h),
            ("d_h_si", self.d_h_si),
            ("n_q_max", self.n_q_max),
            ("si_max", self.si_max),
            ("glimpses_image", self.glimpses_image),
            ("classifier_hidden", self.classifier_hidden),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.glimpses_si != 1 {
            return Err(ModelError::Config("glimpses_si must be 1".into()));
        }
        if self.d_q_small != self.d_si {
            return Err(ModelError::Config(format!(
                "d_q_small ({}) must equal d_si ({})",
                self.d_q_small, self.d_si
            )));
        }
        for (name, rate) in [("dropout_classifier", self.dropout_classifier), ("dropout_fc", self.dropout_fc)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(ModelError::Config(format!("{name} {rate} outside [0, 1)")));
            }
        }
        Ok(())
    }
}
