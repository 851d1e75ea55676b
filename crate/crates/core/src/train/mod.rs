//! Optimizer, learning-rate schedule and the training loop.

mod adamax;
mod schedule;

pub use adamax::{AdamaxState, BETA1, BETA2, EPSILON};
pub use schedule::TrainSchedule;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{build_answer_set, build_vocabulary, encode_examples, EncodedExample, VqaExample};
use crate::diffmath::{GradBuffer, Graph};
use crate::eval::{evaluate, AccuracyMode, EvalError};
use crate::model::{Checkpoint, ModelConfig, ModelError, Mode, VqaCoin};
use crate::textprep::TextError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("numeric abort at epoch {epoch}, batch {batch}: {detail}")]
    NumericAbort { epoch: usize, batch: usize, detail: String },
    #[error("training set is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Callback(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub seed: u64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Update only the classifier layers.
    pub classifier_only: bool,
    pub accuracy: AccuracyMode,
    /// Evaluate on the validation set after every epoch rather than only the last.
    pub val_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: TrainSchedule::desk(),
            seed: 0,
            clip_norm: 0.25,
            classifier_only: false,
            accuracy: AccuracyMode::Direct,
            val_every_epoch: true,
        }
    }
}

/// One line of the metrics trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    /// Seconds spent on the epoch. Not serialized, so that traces of equal
    /// runs are byte-identical.
    #[serde(skip)]
    pub wall_time: f64,
}

/// Everything needed to continue a run after `epoch` completed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub optimizer: AdamaxState,
    pub best_val_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl TrainState {
    pub fn fresh(model: &VqaCoin) -> Self {
        Self {
            epoch: 0,
            optimizer: AdamaxState::new(&model.params),
            best_val_accuracy: None,
            best_epoch: None,
        }
    }

    /// Model plus optimizer moments and progress, for resuming.
    pub fn to_checkpoint(&self, model: &VqaCoin) -> Checkpoint {
        let mut ck = Checkpoint::from_model(model.clone());
        ck.extras = self.optimizer.to_extras(&model.params);
        ck.meta = serde_json::json!({
            "epoch": self.epoch,
            "adamax_step": self.optimizer.t,
            "best_val_accuracy": self.best_val_accuracy,
            "best_epoch": self.best_epoch,
        });
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TrainError> {
        let meta = &ck.meta;
        let epoch = meta["epoch"]
            .as_u64()
            .ok_or_else(|| TrainError::Config("checkpoint has no training progress".into()))?;
        let t = meta["adamax_step"]
            .as_u64()
            .ok_or_else(|| TrainError::Config("checkpoint has no optimizer step".into()))?;
        Ok(Self {
            epoch: epoch as usize,
            optimizer: AdamaxState::from_extras(&ck.model.params, &ck.extras, t)?,
            best_val_accuracy: meta["best_val_accuracy"].as_f64(),
            best_epoch: meta["best_epoch"].as_u64().map(|e| e as usize),
        })
    }
}

/// Result of [`train_loop`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trace: Vec<EpochRecord>,
    pub state: TrainState,
    /// Weights from the epoch with the best validation accuracy.
    pub best: Option<VqaCoin>,
}

/// What a callback sees after each epoch.
pub struct EpochSnapshot<'a> {
    pub record: &'a EpochRecord,
    pub model: &'a VqaCoin,
    pub state: &'a TrainState,
    pub improved: bool,
}

fn numeric(epoch: usize, batch: usize) -> impl Fn(ModelError) -> TrainError {
    move |e| match e.non_finite_op() {
        Some(op) => TrainError::NumericAbort {
            epoch,
            batch,
            detail: format!("non-finite value in {op}"),
        },
        None => TrainError::Model(e),
    }
}

/// Runs the mini-batch loop from `state.epoch + 1` through the last epoch.
///
/// Each epoch shuffles with a generator keyed by `(seed, epoch)`; dropout
/// draws come from a second generator keyed the same way. Per batch the
/// example gradients are averaged, clipped to `clip_norm` and applied with
/// Adamax at the epoch's rate.
pub fn train_loop(
    model: &mut VqaCoin,
    train: &[EncodedExample],
    val: &[EncodedExample],
    config: &TrainConfig,
    state: Option<TrainState>,
    callback: &mut dyn FnMut(EpochSnapshot) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    config.schedule.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if config.clip_norm.is_nan() || config.clip_norm <= 0.0 {
        return Err(TrainError::Config(format!("clip_norm {} must be positive", config.clip_norm)));
    }
    let mut state = state.unwrap_or_else(|| TrainState::fresh(model));
    let only = config.classifier_only.then(|| model.classifier_params());
    let mut grads = GradBuffer::zeros_like(&model.params);
    let mut trace = Vec::new();
    let mut best = None;
    let started = Instant::now();

    for epoch in state.epoch + 1..=config.schedule.epochs {
        let lr = config.schedule.lr_at_epoch(epoch)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(2 * epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
        dropout_rng.set_stream(2 * epoch as u64 + 1);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (batch, chunk) in order.chunks(config.schedule.batch_size).enumerate() {
            grads.clear();
            let mut in_batch = 0usize;
            for &i in chunk {
                let ex = &train[i];
                let mut g = Graph::new(&model.params);
                let out = model
                    .forward(&mut g, &ex.input(), &mut Mode::Train(&mut dropout_rng))
                    .map_err(numeric(epoch, batch))?;
                let Some(loss) = model.loss(&mut g, out.logits, &ex.target).map_err(numeric(epoch, batch))? else {
                    continue;
                };
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(TrainError::NumericAbort {
                        epoch,
                        batch,
                        detail: format!("loss {value}"),
                    });
                }
                let gr = g.backward(loss).map_err(|e| numeric(epoch, batch)(e.into()))?;
                grads
                    .accumulate(&gr, 1.0)
                    .map_err(|e| TrainError::Model(ModelError::Diff(e)))?;
                loss_sum += value;
                loss_count += 1;
                in_batch += 1;
            }
            if in_batch == 0 {
                continue;
            }
            grads.scale(1.0 / in_batch as f64);
            grads.clip_global_norm(config.clip_norm);
            state
                .optimizer
                .step(&mut model.params, &grads, lr, only.as_deref())
                .map_err(|e| match e {
                    TrainError::NonFiniteGradient { param } => TrainError::NumericAbort {
                        epoch,
                        batch,
                        detail: format!("non-finite gradient for {param}"),
                    },
                    other => other,
                })?;
        }

        let last = epoch == config.schedule.epochs;
        let val_accuracy = if val.is_empty() || !(config.val_every_epoch || last) {
            None
        } else {
            Some(evaluate(model, val, config.accuracy)?.overall)
        };
        let improved = match (val_accuracy, state.best_val_accuracy) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            state.best_val_accuracy = val_accuracy;
            state.best_epoch = Some(epoch);
            best = Some(model.clone());
        }
        state.epoch = epoch;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: if loss_count == 0 { 0.0 } else { loss_sum / loss_count as f64 },
            val_accuracy,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} loss {:.5} val {}",
            record.train_loss,
            record.val_accuracy.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
        callback(EpochSnapshot {
            record: &record,
            model,
            state: &state,
            improved,
        })?;
        trace.push(record);
    }
    Ok(TrainOutcome { trace, state, best })
}

/// A trained model together with the encoded splits it saw.
#[derive(Clone, Debug)]
pub struct Fit {
    pub model: VqaCoin,
    pub outcome: TrainOutcome,
    pub train: Vec<EncodedExample>,
    pub val: Vec<EncodedExample>,
}

/// Builds vocabulary and answer set from `train`, encodes both splits,
/// initializes the network from `config.seed` and trains it.
pub fn fit(
    train: &[VqaExample],
    val: &[VqaExample],
    model_config: &ModelConfig,
    config: &TrainConfig,
    min_answer_occurrences: usize,
    callback: &mut dyn FnMut(EpochSnapshot) -> Result<(), TrainError>,
) -> Result<Fit, TrainError> {
    let text = |e: TextError| TrainError::Config(e.to_string());
    let (nq, ns) = (model_config.n_q_max, model_config.si_max);
    let vocab = build_vocabulary(train, nq, ns).map_err(text)?;
    let answers = build_answer_set(train, min_answer_occurrences).map_err(text)?;
    let train_enc = encode_examples(train, &vocab, &answers, model_config.loss, nq, ns).map_err(text)?;
    let val_enc = encode_examples(val, &vocab, &answers, model_config.loss, nq, ns).map_err(text)?;
    let mut model = VqaCoin::new(model_config, vocab, answers, config.seed)?;
    let outcome = train_loop(&mut model, &train_enc, &val_enc, config, None, callback)?;
    Ok(Fit {
        model,
        outcome,
        train: train_enc,
        val: val_enc,
    })
}
