//! Discrete noise schedule `alphas_bar[t]`, `t = 0..=T`.
//!
//! `t = 0` is clean data and `t = T` is the fully noised end of the chain.
//! The schedule lives directly on the sampling grid; there is no separate
//! training grid to stride over.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest per-step retention ratio `alphas_bar[t] / alphas_bar[t-1]`
/// (equivalently the usual `beta <= 0.999` clip).
const MIN_STEP_RETENTION: f64 = 1e-3;

/// Serializable description, as it appears in config files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScheduleSpec {
    Cosine { steps: usize, offset: f64 },
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Cosine {
            steps: 50,
            offset: 0.008,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match *self {
            ScheduleSpec::Cosine { steps, offset } => NoiseSchedule::cosine(steps, offset),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alphas_bar: Vec<f64>,
    spec: Option<ScheduleSpec>,
}

impl NoiseSchedule {
    /// Cosine schedule `alphas_bar[t] = f(t) / f(0)` with
    /// `f(u) = cos^2(((u/T + s) / (1 + s)) * pi/2)`.
    ///
    /// The last step would otherwise reach `cos(pi/2)^2 ~ 1e-33`, so each
    /// step keeps at least `1e-3` of the previous signal level.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!(
                "cosine schedule needs at least 2 steps, got {steps}"
            )));
        }
        if !(offset > 0.0 && offset < 0.1) {
            return Err(Error::Config(format!(
                "cosine offset must lie in (0, 0.1), got {offset}"
            )));
        }
        let total = steps as f64;
        let f = |u: f64| {
            let arg = ((u / total + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
            arg.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut alphas_bar = Vec::with_capacity(steps + 1);
        alphas_bar.push(1.0);
        for t in 1..=steps {
            let prev = alphas_bar[t - 1];
            alphas_bar.push((f(t as f64) / f0).max(prev * MIN_STEP_RETENTION));
        }
        Ok(Self {
            alphas_bar,
            spec: Some(ScheduleSpec::Cosine { steps, offset }),
        })
    }

    /// Hand-specified levels for unit tests of the step algebra; skips the
    /// monotonicity and terminal-level checks.
    #[cfg(test)]
    pub(crate) fn from_raw(alphas_bar: Vec<f64>) -> Self {
        assert!(alphas_bar.len() >= 2 && alphas_bar[0] == 1.0);
        Self {
            alphas_bar,
            spec: None,
        }
    }

    /// Number of sampling steps `T`.
    pub fn steps(&self) -> usize {
        self.alphas_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_bar.get(t).copied().ok_or(Error::Index {
            t,
            max: self.steps(),
        })
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    /// The config-file description; `None` only for hand-built test schedules.
    pub fn spec(&self) -> Option<ScheduleSpec> {
        self.spec
    }
}
