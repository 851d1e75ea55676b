//! Turning examples into model inputs and training targets.

use super::{Category, VqaExample};
use crate::diffmath::Tensor;
use crate::model::{LossKind, ModelInput, Target};
use crate::textprep::{normalize_answer, normalize_tokens, tokenize_question, AnswerSet, TextError, Vocabulary};

/// An example in id space, ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub question_id: u64,
    pub image_feats: Tensor,
    pub question_ids: Vec<usize>,
    pub si_ids: Vec<usize>,
    /// Normalized annotator answers; empty for unannotated examples.
    pub annotators: Vec<String>,
    pub category: Option<Category>,
    pub target: Target,
}

impl EncodedExample {
    pub fn input(&self) -> ModelInput<'_> {
        ModelInput::new(&self.image_feats, &self.question_ids, &self.si_ids)
    }
}

/// Question tokens and SI words of `examples`, for building a vocabulary.
pub fn token_sequences(examples: &[VqaExample], n_q_max: usize, si_max: usize) -> Result<Vec<Vec<String>>, TextError> {
    let mut out = Vec::with_capacity(examples.len() * 2);
    for e in examples {
        out.push(tokenize_question(&e.question, n_q_max)?);
        out.push(si_tokens(e, si_max));
    }
    Ok(out)
}

fn si_tokens(e: &VqaExample, si_max: usize) -> Vec<String> {
    e.si_words
        .iter()
        .flat_map(|w| normalize_tokens(w))
        .take(si_max)
        .collect()
}

/// Vocabulary over training questions and SI words.
pub fn build_vocabulary(train: &[VqaExample], n_q_max: usize, si_max: usize) -> Result<Vocabulary, TextError> {
    Ok(Vocabulary::build(token_sequences(train, n_q_max, si_max)?))
}

/// Answer set over the canonical answers of annotated training examples.
pub fn build_answer_set(train: &[VqaExample], min_occurrences: usize) -> Result<AnswerSet, TextError> {
    let canon: Vec<&str> = train.iter().filter_map(|e| e.canonical_answer.as_deref()).collect();
    AnswerSet::build(&canon, min_occurrences)
}

/// Per-class soft scores `min(matching annotators / 3, 1)`.
pub fn soft_scores(annotators: &[String], answers: &AnswerSet) -> Vec<f64> {
    let mut scores = vec![0.0f64; answers.len()];
    for a in annotators {
        if let Some(id) = answers.id(a) {
            scores[id] += 1.0;
        }
    }
    scores.iter().map(|c| (c / 3.0).min(1.0)).collect()
}

pub fn encode_example(
    e: &VqaExample,
    vocab: &Vocabulary,
    answers: &AnswerSet,
    loss: LossKind,
    n_q_max: usize,
    si_max: usize,
) -> Result<EncodedExample, TextError> {
    let q = tokenize_question(&e.question, n_q_max)?;
    let annotators: Vec<String> = e.answers.iter().map(|a| normalize_answer(a)).collect();
    let target = match loss {
        LossKind::Bce => Target::Soft(soft_scores(&annotators, answers)),
        LossKind::Softmax => Target::Class(
            e.canonical_answer
                .as_deref()
                .and_then(|c| answers.id(&normalize_answer(c))),
        ),
    };
    Ok(EncodedExample {
        question_id: e.question_id,
        image_feats: e.image_feats.clone(),
        question_ids: vocab.encode(&q),
        si_ids: vocab.encode(&si_tokens(e, si_max)),
        annotators,
        category: e.category,
        target,
    })
}

pub fn encode_examples(
    examples: &[VqaExample],
    vocab: &Vocabulary,
    answers: &AnswerSet,
    loss: LossKind,
    n_q_max: usize,
    si_max: usize,
) -> Result<Vec<EncodedExample>, TextError> {
    examples
        .iter()
        .map(|e| encode_example(e, vocab, answers, loss, n_q_max, si_max))
        .collect()
}
