use serde::{Deserialize, Serialize};

use super::TrainError;

/// Warmup, plateau and step-decay learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_start: f64,
    pub lr_plateau: f64,
    pub plateau_until_epoch: usize,
    pub decay: f64,
    /// Epochs at whose start the rate is multiplied by `decay`.
    pub decay_epochs: Vec<usize>,
    pub batch_size: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainSchedule {
    /// 18 epochs, warmup 0.05e-3 → 0.2e-3 over four epochs, plateau to
    /// epoch 10, ×0.25 at epochs 12, 14, 15, 16, 17 and 18, batch 180.
    pub fn paper() -> Self {
        Self {
            epochs: 18,
            warmup_epochs: 4,
            lr_start: 0.05e-3,
            lr_plateau: 0.2e-3,
            plateau_until_epoch: 10,
            decay: 0.25,
            decay_epochs: vec![12, 14, 15, 16, 17, 18],
            batch_size: 180,
        }
    }

    /// The same shape with a larger rate and batch 16, for small corpora.
    pub fn desk() -> Self {
        Self {
            lr_start: 1.25e-3,
            lr_plateau: 5e-3,
            batch_size: 16,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.warmup_epochs == 0 || self.warmup_epochs > self.plateau_until_epoch {
            return bad(format!(
                "warmup_epochs {} must lie in [1, plateau_until_epoch {}]",
                self.warmup_epochs, self.plateau_until_epoch
            ));
        }
        if !(self.lr_start > 0.0 && self.lr_plateau > 0.0 && self.lr_start.is_finite() && self.lr_plateau.is_finite()) {
            return bad("learning rates must be positive and finite".into());
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay {} outside (0, 1]", self.decay));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay_epochs must be strictly increasing".into());
        }
        if let Some(e) = self.decay_epochs.iter().find(|&&e| e <= self.plateau_until_epoch) {
            return bad(format!("decay epoch {e} falls inside warmup or plateau"));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch.
    ///
    /// Warmup values are interpolated in decimal so that printed rates such
    /// as 0.15e-3 come out as the nearest double rather than one ulp off.
    pub fn lr_at_epoch(&self, epoch: usize) -> Result<f64, TrainError> {
        if epoch == 0 || epoch > self.epochs {
            return Err(TrainError::Config(format!("epoch {epoch} outside [1, {}]", self.epochs)));
        }
        if epoch <= self.warmup_epochs {
            return Ok(interpolate(self.lr_start, self.lr_plateau, epoch - 1, self.warmup_epochs - 1));
        }
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        Ok(self.lr_plateau * self.decay.powi(decays as i32))
    }

    /// The full per-epoch table.
    pub fn table(&self) -> Vec<(usize, f64)> {
        (1..=self.epochs)
            .map(|e| (e, self.lr_at_epoch(e).expect("epoch in range")))
            .collect()
    }
}

/// `a + (b − a)·k/n`, computed exactly on decimal representations of `a`
/// and `b` when they have one, then rounded once.
fn interpolate(a: f64, b: f64, k: usize, n: usize) -> f64 {
    if n == 0 {
        return b;
    }
    if let (Some((ma, ea)), Some((mb, eb))) = (decimal(a), decimal(b)) {
        let e = ea.max(eb);
        let ma = ma * 10i128.pow(e - ea);
        let mb = mb * 10i128.pow(e - eb);
        let num = ma * (n - k) as i128 + mb * k as i128;
        let den = n as i128 * 10i128.pow(e);
        if num.unsigned_abs() < 1 << 53 && den < 1 << 53 {
            return num as f64 / den as f64;
        }
    }
    a + (b - a) * k as f64 / n as f64
}

/// `(m, e)` with `x == m / 10^e` exactly after rounding, for short decimals.
fn decimal(x: f64) -> Option<(i128, u32)> {
    (0..=15u32).find_map(|e| {
        let scaled = x * 10f64.powi(e as i32);
        let m = scaled.round();
        (m.abs() < 1e15 && m / 10f64.powi(e as i32) == x).then_some((m as i128, e))
    })
}
