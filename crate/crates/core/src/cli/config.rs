//! Run configuration as flat dotted keys.
//!
//! Every setting has a key such as `model.d_image` or `schedule.epochs`.
//! Resolution starts from the desk defaults, overlays the keys of the config
//! file, then `--set key=value` overrides. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::SynthConfig;
use crate::eval::AccuracyMode;
use crate::model::ModelConfig;
use crate::train::{TrainConfig, TrainSchedule};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub seed: u64,
    pub clip_norm: f64,
    pub classifier_only: bool,
    pub accuracy: AccuracyMode,
    pub val_every_epoch: bool,
    pub min_answer_occurrences: usize,
    /// Share of the train split used, drawn with `seed`.
    pub train_fraction: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            clip_norm: t.clip_norm,
            classifier_only: t.classifier_only,
            accuracy: t.accuracy,
            val_every_epoch: t.val_every_epoch,
            min_answer_occurrences: crate::textprep::MIN_ANSWER_OCCURRENCES,
            train_fraction: 1.0,
        }
    }
}

/// Synthetic corpus settings; feature width comes from `model.d_image`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataOptions {
    pub seed: u64,
    pub train_examples: usize,
    pub val_examples: usize,
    pub noise_sigma: f64,
    pub annotator_noise: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub binary_features: bool,
}

impl Default for DataOptions {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            seed: s.seed,
            train_examples: s.train_examples,
            val_examples: s.val_examples,
            noise_sigma: s.noise_sigma,
            annotator_noise: s.annotator_noise,
            min_objects: s.min_objects,
            max_objects: s.max_objects,
            binary_features: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    /// Worker count. Only 1 is supported; it is recorded for provenance.
    pub parallelism: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { parallelism: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub train: TrainOptions,
    pub data: DataOptions,
    pub run: RunOptions,
}

impl RunConfig {
    /// Desk defaults for every key.
    pub fn desk() -> Self {
        Self {
            schedule: TrainSchedule::desk(),
            ..Self::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: self.schedule.clone(),
            seed: self.train.seed,
            clip_norm: self.train.clip_norm,
            classifier_only: self.train.classifier_only,
            accuracy: self.train.accuracy,
            val_every_epoch: self.train.val_every_epoch,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.data.seed,
            train_examples: self.data.train_examples,
            val_examples: self.data.val_examples,
            d_image: self.model.d_image,
            noise_sigma: self.data.noise_sigma,
            annotator_noise: self.data.annotator_noise,
            min_objects: self.data.min_objects,
            max_objects: self.data.max_objects,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.model.validate()?;
        self.schedule.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.train.clip_norm.is_nan() || self.train.clip_norm <= 0.0 {
            return fail(format!("train.clip_norm {} must be positive", self.train.clip_norm));
        }
        if !(self.train.train_fraction > 0.0 && self.train.train_fraction <= 1.0) {
            return fail(format!("train.train_fraction {} outside (0, 1]", self.train.train_fraction));
        }
        if self.train.min_answer_occurrences == 0 {
            return fail("train.min_answer_occurrences must be positive".into());
        }
        if self.run.parallelism != 1 {
            return fail(format!("run.parallelism {} unsupported; only 1 is implemented", self.run.parallelism));
        }
        if !(0.0..=1.0).contains(&self.data.annotator_noise) || self.data.noise_sigma.is_nan() || self.data.noise_sigma < 0.0 {
            return fail("data.annotator_noise must lie in [0, 1] and data.noise_sigma be non-negative".into());
        }
        Ok(())
    }

    /// Flat `key → value` view.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self, Error> {
        let mut root = Map::new();
        for (key, value) in flat {
            let mut node = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            for part in &parts[..parts.len() - 1] {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("key {key} conflicts with a value")))?;
            }
            node.insert(parts[parts.len() - 1].to_owned(), value.clone());
        }
        serde_json::from_value(Value::Object(root)).map_err(|e| Error::Config(e.to_string()))
    }

    /// Desk defaults, then `file`, then `overrides` (`key=value`, value as JSON or bare string).
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, Error> {
        let mut flat = Self::desk().to_flat();
        if let Some(path) = file {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let map: BTreeMap<String, Value> = serde_json::from_slice(&bytes)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            for (k, v) in map {
                set_key(&mut flat, &k, v)?;
            }
        }
        for item in overrides {
            let (k, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
            set_key(&mut flat, k.trim(), v)?;
        }
        let config = Self::from_flat(&flat)?;
        config.validate()?;
        Ok(config)
    }
}

fn set_key(flat: &mut BTreeMap<String, Value>, key: &str, value: Value) -> Result<(), Error> {
    match flat.get_mut(key) {
        Some(slot) => {
            *slot = value;
            Ok(())
        }
        None => Err(Error::Config(format!("unknown config key {key:?}"))),
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_owned(), other.clone());
        }
    }
}
