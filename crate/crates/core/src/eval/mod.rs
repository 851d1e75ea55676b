//! Soft accuracy, evaluation reports, challenge-format export, the data
//! scaling experiment and attention dumps.

mod scaling;

pub use scaling::{scaling_experiment, ScalingConfig, ScalingReport, ScalingRow};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::AttentionMap;
use crate::data::{Category, EncodedExample, VqaExample};
use crate::diffmath::{DiffError, Graph};
use crate::model::{argmax, ModelError, Mode, VqaCoin};
use crate::textprep::{normalize_tokens, tokenize_question, PAD_TOKEN};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("expected {expected} annotator answers, got {got}")]
    AnnotatorCount { expected: usize, got: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("question {0} has no annotations")]
    Unannotated(u64),
    #[error("duplicate prediction for question {0}")]
    DuplicateQuestion(u64),
    #[error("no prediction for questions {0:?}")]
    MissingQuestions(Vec<u64>),
    #[error("export parse error: {0}")]
    ExportFormat(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Text(#[from] crate::textprep::TextError),
}

pub const ANNOTATOR_COUNT: usize = 10;

/// How annotator agreement becomes a score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// `min(matches / 3, 1)`.
    #[default]
    Direct,
    /// The same formula averaged over the ten leave-one-out subsets of nine annotators.
    Exact,
}

/// Score of a normalized prediction against ten normalized annotator answers.
pub fn soft_accuracy(predicted: &str, annotators: &[String], mode: AccuracyMode) -> Result<f64, EvalError> {
    if annotators.len() != ANNOTATOR_COUNT {
        return Err(EvalError::AnnotatorCount {
            expected: ANNOTATOR_COUNT,
            got: annotators.len(),
        });
    }
    let matches = annotators.iter().filter(|a| *a == predicted).count();
    Ok(match mode {
        AccuracyMode::Direct => (matches as f64 / 3.0).min(1.0),
        AccuracyMode::Exact => {
            // Leaving out a matching annotator removes one match; the sum is
            // grouped by that case so the result does not depend on order.
            let score = |m: usize| (m as f64 / 3.0).min(1.0);
            let kept = matches.saturating_sub(1);
            (matches as f64 * score(kept) + (ANNOTATOR_COUNT - matches) as f64 * score(matches))
                / ANNOTATOR_COUNT as f64
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: f64,
    pub n: usize,
    /// Keyed by category label ("yes/no", "number", "other").
    pub categories: BTreeMap<String, CategoryScore>,
    pub provenance: BTreeMap<String, String>,
}

impl EvalReport {
    /// Aggregates `(score, category)` pairs.
    pub fn from_scores(scores: &[(f64, Category)]) -> Result<Self, EvalError> {
        if scores.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut sums: BTreeMap<Category, (f64, usize)> = BTreeMap::new();
        for &(s, c) in scores {
            let e = sums.entry(c).or_default();
            e.0 += s;
            e.1 += 1;
        }
        let total: f64 = scores.iter().map(|(s, _)| s).sum();
        Ok(Self {
            overall: total / scores.len() as f64,
            n: scores.len(),
            categories: sums
                .into_iter()
                .map(|(c, (s, n))| {
                    (
                        c.as_str().to_owned(),
                        CategoryScore {
                            accuracy: s / n as f64,
                            n,
                        },
                    )
                })
                .collect(),
            provenance: BTreeMap::new(),
        })
    }

    /// Fixed-layout table with percentages, in the order yes/no, number, other, overall.
    pub fn table(&self) -> String {
        let mut out = String::from("| yes/no | number | other | overall |\n|---|---|---|---|\n");
        let cell = |c: Category| {
            self.categories
                .get(c.as_str())
                .map(|s| format!("{:.2}", 100.0 * s.accuracy))
                .unwrap_or_else(|| "-".into())
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {:.2} |",
            cell(Category::YesNo),
            cell(Category::Number),
            cell(Category::Other),
            100.0 * self.overall
        );
        out
    }
}

/// Answer string the model predicts for an encoded example.
pub fn predict_answer(model: &VqaCoin, ex: &EncodedExample) -> Result<String, EvalError> {
    Ok(model.predict(&ex.input())?.1)
}

/// Answers one raw question about `image_feats` (`[objects, d_image]`)
/// given the image's semantic-information words.
pub fn answer_question(
    model: &VqaCoin,
    image_feats: crate::diffmath::Tensor,
    question: &str,
    si_words: &[String],
) -> Result<String, EvalError> {
    let example = VqaExample {
        question_id: 0,
        image_id: 0,
        question: question.to_owned(),
        image_feats,
        si_words: si_words.to_vec(),
        answers: Vec::new(),
        canonical_answer: None,
        category: None,
    };
    let c = &model.config;
    let encoded = crate::data::encode_example(&example, &model.vocab, &model.answers, c.loss, c.n_q_max, c.si_max)?;
    predict_answer(model, &encoded)
}

/// Mean soft accuracy over annotated examples, overall and per category.
pub fn evaluate(model: &VqaCoin, examples: &[EncodedExample], mode: AccuracyMode) -> Result<EvalReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut scores = Vec::with_capacity(examples.len());
    for ex in examples {
        let category = match (ex.category, ex.annotators.is_empty()) {
            (Some(c), false) => c,
            _ => return Err(EvalError::Unannotated(ex.question_id)),
        };
        let pred = predict_answer(model, ex)?;
        scores.push((soft_accuracy(&pred, &ex.annotators, mode)?, category));
    }
    EvalReport::from_scores(&scores)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportRecord {
    pub question_id: u64,
    pub answer: String,
}

/// Challenge-format JSON: `[{"question_id": int, "answer": string}]`,
/// sorted by question id. When `expected` is given, every id in it must
/// have a prediction.
pub fn export_results(predictions: &[ExportRecord], expected: Option<&[u64]>) -> Result<Vec<u8>, EvalError> {
    let mut sorted = predictions.to_vec();
    sorted.sort_by_key(|r| r.question_id);
    if let Some(dup) = sorted.windows(2).find(|w| w[0].question_id == w[1].question_id) {
        return Err(EvalError::DuplicateQuestion(dup[0].question_id));
    }
    if let Some(ids) = expected {
        let have: BTreeSet<u64> = sorted.iter().map(|r| r.question_id).collect();
        let missing: Vec<u64> = ids.iter().filter(|id| !have.contains(id)).copied().collect();
        if !missing.is_empty() {
            return Err(EvalError::MissingQuestions(missing));
        }
    }
    serde_json::to_vec(&sorted).map_err(|e| EvalError::ExportFormat(e.to_string()))
}

pub fn parse_export(bytes: &[u8]) -> Result<Vec<ExportRecord>, EvalError> {
    serde_json::from_slice(bytes).map_err(|e| EvalError::ExportFormat(e.to_string()))
}

/// Labelled attention maps for one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub question_id: u64,
    pub question: String,
    pub answer: String,
    /// Self-attention weight per question token.
    pub question_weights: Vec<(String, f64)>,
    /// SI tokens × question tokens.
    pub si_map: AttentionMap,
    /// Objects × question tokens, one per image glimpse.
    pub image_maps: Vec<AttentionMap>,
}

/// Runs the model in eval mode and collects its maps, each renormalized to sum to one.
pub fn dump_attention(model: &VqaCoin, example: &VqaExample) -> Result<AttentionDump, EvalError> {
    let c = &model.config;
    let q_tokens = tokenize_question(&example.question, c.n_q_max)?;
    let si_tokens: Vec<String> = example
        .si_words
        .iter()
        .flat_map(|w| normalize_tokens(w))
        .take(c.si_max)
        .collect();
    let q_ids = model.encode(&q_tokens);
    let si_ids = model.encode(&si_tokens);
    let input = crate::model::ModelInput::new(&example.image_feats, &q_ids, &si_ids);

    let mut g = Graph::new(&model.params);
    let out = model.forward(&mut g, &input, &mut Mode::Eval)?;
    let class = argmax(g.value(out.logits).data());
    let si_rows = if si_tokens.is_empty() {
        vec![PAD_TOKEN.to_owned()]
    } else {
        si_tokens
    };
    let mut si_map = AttentionMap::new(si_rows, q_tokens.clone(), g.value(out.si_map))?;
    si_map.renormalize();
    let objects: Vec<String> = (0..example.image_feats.rows()).map(|i| format!("object {i}")).collect();
    let image_maps = out
        .image_maps
        .iter()
        .map(|&m| {
            let mut map = AttentionMap::new(objects.clone(), q_tokens.clone(), g.value(m))?;
            map.renormalize();
            Ok(map)
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let question_weights = q_tokens
        .iter()
        .cloned()
        .zip(g.value(out.question_weights).data().iter().copied())
        .collect();
    Ok(AttentionDump {
        question_id: example.question_id,
        question: example.question.clone(),
        answer: model.answers.answer(class).unwrap_or_default().to_owned(),
        question_weights,
        si_map,
        image_maps,
    })
}
