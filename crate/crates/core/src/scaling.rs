//! Concept scaling sampler.
//!
//! Starting from the inverted latent `x_T`, every denoising step evaluates two
//! branches: the removal branch `eps_null` (null or helper condition) and the
//! reconstruction branch `eps_rec` (the concept used during inversion). The
//! step direction is their affine combination with weight `omega_t`:
//! `omega_t = 1` reconstructs, `< 1` suppresses and `> 1` enhances the concept.
//! An optional regularization term pulls the sample back toward the
//! inversion trajectory during the high-noise steps (`t >= t_exit`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::{check_trajectory, ddim_step, guarded_noise, invert, InversionTrajectory};
use crate::schedule::NoiseSchedule;
use crate::world::{Condition, NoisePredictor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    Off,
    Full,
    EarlyExit,
}

/// How the regularization estimate `eps_bar` combines the current latent with
/// the memory-bank latent `x_inv` at the same level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegularizationEstimate {
    /// Average of `eps_rec` and the noise that explains `x_t` given the clean
    /// estimate recovered from `x_inv`:
    /// `eps_anchor = eps(x_inv) + (x_t - x_inv) / sqrt(1 - ab_t)`.
    #[default]
    Anchored,
    /// `eps((x_t + x_inv) / 2)`.
    Midpoint,
    /// `(eps(x_t) + eps(x_inv)) / 2`.
    NoiseAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub omega_base: f64,
    pub gamma: f64,
    pub t_exit: usize,
    pub regularization: Regularization,
    pub refine_iters: usize,
    pub removal_condition: Condition,
    #[serde(default)]
    pub estimate: RegularizationEstimate,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            omega_base: 5.0,
            gamma: 3.0,
            t_exit: 35,
            regularization: Regularization::EarlyExit,
            refine_iters: 5,
            removal_condition: Condition::Null,
            estimate: RegularizationEstimate::Anchored,
        }
    }
}

impl ScalingConfig {
    /// Plain reconstruction: `omega_t = 1` at every step, no regularization.
    pub fn reconstruction() -> Self {
        Self {
            omega_base: 1.0,
            gamma: 0.0,
            regularization: Regularization::Off,
            ..Self::default()
        }
    }

    /// True when every `omega_t` is exactly 1 and nothing else is added.
    pub fn is_reconstruction(&self) -> bool {
        self.omega_base == 1.0 && self.gamma == 0.0
    }

    pub fn validate(&self, steps: usize, concept: &Condition) -> Result<()> {
        if !self.omega_base.is_finite() {
            return Err(Error::Config("omega_base must be finite".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if self.t_exit > steps {
            return Err(Error::Config(format!(
                "t_exit = {} exceeds T = {steps}",
                self.t_exit
            )));
        }
        if self.removal_condition == *concept {
            return Err(Error::Config(
                "removal condition must differ from the scaled concept".into(),
            ));
        }
        Ok(())
    }

    /// Whether the regularization term is evaluated at level `t`.
    pub fn regularizes_at(&self, t: usize) -> bool {
        match self.regularization {
            Regularization::Off => false,
            Regularization::Full => true,
            Regularization::EarlyExit => t >= self.t_exit,
        }
    }
}

/// `omega_t = omega_base * (t / T)^gamma`.
pub fn omega_at(config: &ScalingConfig, t: usize, total: usize) -> f64 {
    config.omega_base * schedule_weight(t, total, config.gamma)
}

/// `beta(t) = (t / T)^gamma`; exactly 1 at `t = T` and for `gamma = 0`.
pub fn schedule_weight(t: usize, total: usize, gamma: f64) -> f64 {
    (t as f64 / total as f64).powf(gamma)
}

/// Regularization weight `omega'_t`: `omega_t` where the term is active, else 0.
pub fn regularization_weight(config: &ScalingConfig, omega_t: f64, t: usize) -> f64 {
    if config.regularizes_at(t) {
        omega_t
    } else {
        0.0
    }
}

/// `eps_null + omega (eps_rec - eps_null)`, evaluated as
/// `(1 - omega) eps_null + omega eps_rec` so both endpoints are exact.
pub fn scaled_noise(eps_null: &[f64], eps_rec: &[f64], omega_t: f64) -> Vec<f64> {
    eps_null
        .iter()
        .zip(eps_rec)
        .map(|(n, r)| (1.0 - omega_t) * n + omega_t * r)
        .collect()
}

/// The noise predictions evaluated at one sampling step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchNoises {
    pub eps_null: Vec<f64>,
    pub eps_rec: Vec<f64>,
    pub eps_bar: Option<Vec<f64>>,
    pub eps_hat: Vec<f64>,
}

/// Combined prediction
/// `eps_null + omega_t (eps_rec - eps_null) + omega'_t (eps_bar - eps_rec)`.
pub fn regularized_noise(
    eps_null: &[f64],
    eps_rec: &[f64],
    eps_bar: Option<&[f64]>,
    omega_t: f64,
    t: usize,
    config: &ScalingConfig,
) -> Result<Vec<f64>> {
    let scaled = scaled_noise(eps_null, eps_rec, omega_t);
    let weight = regularization_weight(config, omega_t, t);
    if weight == 0.0 {
        return Ok(scaled);
    }
    let eps_bar = eps_bar.ok_or_else(|| {
        Error::Contract(format!(
            "regularization is active at t = {t} but eps_bar is missing"
        ))
    })?;
    Ok(scaled
        .iter()
        .zip(eps_bar.iter().zip(eps_rec))
        .map(|(s, (b, r))| s + weight * (b - r))
        .collect())
}

/// Regularization estimate `eps_bar` at level `t` from the current latent and
/// the memory-bank latent of the same level.
pub fn regularization_estimate<P: NoisePredictor + ?Sized>(
    trajectory: &InversionTrajectory,
    x_t: &[f64],
    eps_rec: &[f64],
    t: usize,
    predictor: &P,
    schedule: &NoiseSchedule,
    estimate: RegularizationEstimate,
) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::Domain("no regularization estimate at t = 0".into()));
    }
    let x_inv = trajectory.latent(t)?;
    if x_inv.len() != x_t.len() {
        return Err(Error::Contract(
            "trajectory and latent dimensions differ".into(),
        ));
    }
    let condition = trajectory.condition();
    match estimate {
        RegularizationEstimate::Midpoint => {
            let mid: Vec<f64> = x_t.iter().zip(x_inv).map(|(a, b)| 0.5 * (a + b)).collect();
            guarded_noise(predictor, &mid, condition, t, t)
        }
        RegularizationEstimate::NoiseAverage => {
            let eps_inv = guarded_noise(predictor, x_inv, condition, t, t)?;
            Ok(eps_rec
                .iter()
                .zip(&eps_inv)
                .map(|(a, b)| 0.5 * (a + b))
                .collect())
        }
        RegularizationEstimate::Anchored => {
            let eps_inv = guarded_noise(predictor, x_inv, condition, t, t)?;
            let noise_scale = (1.0 - schedule.alpha_bar(t)?).sqrt();
            Ok(eps_rec
                .iter()
                .zip(eps_inv.iter().zip(x_t.iter().zip(x_inv)))
                .map(|(r, (e, (x, xi)))| {
                    let anchor = e + (x - xi) / noise_scale;
                    0.5 * (r + anchor)
                })
                .collect())
        }
    }
}

/// One sampling step of the trace; `latent` is `x_t` before the step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub omega: f64,
    pub omega_reg: f64,
    pub latent: Vec<f64>,
    pub branches: BranchNoises,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleOutcome {
    pub output: Vec<f64>,
    pub trajectory: InversionTrajectory,
    /// Ordered from `t = T` down to `t = 1`.
    pub trace: Vec<StepRecord>,
}

/// Inverts `x0` under `concept`, then samples back with scaled branch noises.
pub fn scale_concept<P: NoisePredictor + ?Sized>(
    x0: &[f64],
    concept: &Condition,
    config: &ScalingConfig,
    predictor: &P,
    schedule: &NoiseSchedule,
) -> Result<ScaleOutcome> {
    config.validate(schedule.steps(), concept)?;
    let trajectory = invert(x0, concept, predictor, schedule, config.refine_iters)?;
    scale_from_trajectory(trajectory, config, predictor, schedule)
}

/// The sampling half of [`scale_concept`] for an existing trajectory; the
/// concept is the trajectory's own condition.
pub fn scale_from_trajectory<P: NoisePredictor + ?Sized>(
    trajectory: InversionTrajectory,
    config: &ScalingConfig,
    predictor: &P,
    schedule: &NoiseSchedule,
) -> Result<ScaleOutcome> {
    check_trajectory(&trajectory, schedule)?;
    let steps = schedule.steps();
    let concept = trajectory.condition().clone();
    config.validate(steps, &concept)?;

    let mut x = trajectory.end().to_vec();
    let mut trace = Vec::with_capacity(steps);
    for t in (1..=steps).rev() {
        let omega = omega_at(config, t, steps);
        let eps_null = guarded_noise(predictor, &x, &config.removal_condition, t, t)?;
        let eps_rec = guarded_noise(predictor, &x, &concept, t, t)?;
        let eps_bar = if config.regularizes_at(t) {
            Some(regularization_estimate(
                &trajectory,
                &x,
                &eps_rec,
                t,
                predictor,
                schedule,
                config.estimate,
            )?)
        } else {
            None
        };
        let eps_hat = regularized_noise(&eps_null, &eps_rec, eps_bar.as_deref(), omega, t, config)?;
        if eps_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                step: t,
                message: "non-finite combined noise".into(),
            });
        }
        let next = ddim_step(&x, &eps_hat, t, schedule)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                step: t,
                message: "non-finite latent".into(),
            });
        }
        trace.push(StepRecord {
            t,
            omega,
            omega_reg: regularization_weight(config, omega, t),
            latent: std::mem::replace(&mut x, next),
            branches: BranchNoises {
                eps_null,
                eps_rec,
                eps_bar,
                eps_hat,
            },
        });
    }
    Ok(ScaleOutcome {
        output: x,
        trajectory,
        trace,
    })
}
