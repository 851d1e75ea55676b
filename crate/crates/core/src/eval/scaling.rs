use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{scale_split, VqaExample, SCALE_FRACTIONS};
use crate::model::ModelConfig;
use crate::train::{fit, TrainConfig, TrainError};

/// Settings of a scaling experiment. Each seed drives the subset draw, the
/// weight initialization and the training order of its runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub min_answer_occurrences: usize,
}

impl ScalingConfig {
    pub fn new(model: ModelConfig, train: TrainConfig, seeds: Vec<u64>) -> Self {
        Self {
            model,
            train,
            fractions: SCALE_FRACTIONS.to_vec(),
            seeds,
            min_answer_occurrences: crate::textprep::MIN_ANSWER_OCCURRENCES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub fraction: f64,
    pub seed: u64,
    pub train_examples: usize,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// `(fraction, mean val accuracy over seeds)`.
    pub means: Vec<(f64, f64)>,
}

impl ScalingReport {
    pub fn mean_for(&self, fraction: f64) -> Option<f64> {
        self.means.iter().find(|(f, _)| *f == fraction).map(|(_, m)| *m)
    }

    /// One line per fraction: share of the train split, example count and mean accuracy.
    pub fn table(&self) -> String {
        let mut out = String::from("| train split | examples | val accuracy | seeds |\n|---|---|---|---|\n");
        for (f, mean) in &self.means {
            let rows: Vec<&ScalingRow> = self.rows.iter().filter(|r| r.fraction == *f).collect();
            let _ = writeln!(
                out,
                "| {:.0}% | {} | {:.2} | {} |",
                100.0 * f,
                rows.first().map_or(0, |r| r.train_examples),
                100.0 * mean,
                rows.len()
            );
        }
        out
    }
}

/// Trains one model per `(fraction, seed)` on the scaled train split and
/// scores the last epoch on the fixed validation split.
pub fn scaling_experiment(
    train: &[VqaExample],
    val: &[VqaExample],
    config: &ScalingConfig,
    progress: &mut dyn FnMut(&ScalingRow),
) -> Result<ScalingReport, TrainError> {
    if config.seeds.is_empty() || config.fractions.is_empty() {
        return Err(TrainError::Config("scaling needs at least one seed and one fraction".into()));
    }
    if val.is_empty() {
        return Err(TrainError::Config("scaling needs a validation split".into()));
    }
    let mut rows = Vec::new();
    for &fraction in &config.fractions {
        for &seed in &config.seeds {
            let subset = scale_split(train, fraction, seed).map_err(|e| TrainError::Config(e.to_string()))?;
            let train_config = TrainConfig {
                seed,
                ..config.train.clone()
            };
            let result = fit(
                &subset,
                val,
                &config.model,
                &train_config,
                config.min_answer_occurrences,
                &mut |_| Ok(()),
            )?;
            let last = result.outcome.trace.last().and_then(|r| r.val_accuracy);
            let row = ScalingRow {
                fraction,
                seed,
                train_examples: subset.len(),
                val_accuracy: last.ok_or_else(|| TrainError::Config("run produced no validation score".into()))?,
            };
            progress(&row);
            rows.push(row);
        }
    }
    let means = config
        .fractions
        .iter()
        .map(|&f| {
            let accs: Vec<f64> = rows.iter().filter(|r| r.fraction == f).map(|r| r.val_accuracy).collect();
            (f, accs.iter().sum::<f64>() / accs.len() as f64)
        })
        .collect();
    Ok(ScalingReport { rows, means })
}
