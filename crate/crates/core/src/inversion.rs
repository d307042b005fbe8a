//! Deterministic DDIM stepping in both directions and fixed-point refined
//! inversion.
//!
//! Both directions are the same affine map: recover the clean estimate
//! `x0 = (x - sqrt(1 - ab_from) eps) / sqrt(ab_from)` and re-noise it to
//! `sqrt(ab_to) x0 + sqrt(1 - ab_to) eps`. Under a fixed `eps` a forward step
//! undoes an inverse step exactly (up to rounding).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::world::{Condition, NoisePredictor};

/// Moves `x` from noise level `ab_from` to `ab_to` along the DDIM direction `eps`.
pub fn ddim_transfer(x: &[f64], eps: &[f64], ab_from: f64, ab_to: f64) -> Vec<f64> {
    if ab_from == ab_to {
        return x.to_vec();
    }
    let s_from = (1.0 - ab_from).sqrt();
    let a_from = ab_from.sqrt();
    let s_to = (1.0 - ab_to).sqrt();
    let a_to = ab_to.sqrt();
    x.iter()
        .zip(eps)
        .map(|(xi, ei)| {
            let x0 = (xi - s_from * ei) / a_from;
            a_to * x0 + s_to * ei
        })
        .collect()
}

/// One denoising step `t -> t - 1`.
pub fn ddim_step(x: &[f64], eps: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::Domain("ddim_step needs t >= 1".into()));
    }
    check_pair(x, eps)?;
    Ok(ddim_transfer(
        x,
        eps,
        schedule.alpha_bar(t)?,
        schedule.alpha_bar(t - 1)?,
    ))
}

/// One inversion step `t -> t + 1`.
pub fn ddim_inverse_step(
    x: &[f64],
    eps: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if t >= schedule.steps() {
        return Err(Error::Domain(format!(
            "ddim_inverse_step needs t < T = {}, got {t}",
            schedule.steps()
        )));
    }
    check_pair(x, eps)?;
    Ok(ddim_transfer(
        x,
        eps,
        schedule.alpha_bar(t)?,
        schedule.alpha_bar(t + 1)?,
    ))
}

fn check_pair(x: &[f64], eps: &[f64]) -> Result<()> {
    if x.len() != eps.len() {
        return Err(Error::Contract(format!(
            "latent has dimension {}, noise has {}",
            x.len(),
            eps.len()
        )));
    }
    if x.iter().chain(eps).any(|v| !v.is_finite()) {
        return Err(Error::Contract("non-finite latent or noise".into()));
    }
    Ok(())
}

/// Queries the predictor and rejects blow-ups: non-finite output or
/// `|eps| > 1e3 sqrt(d)`.
pub(crate) fn guarded_noise<P: NoisePredictor + ?Sized>(
    predictor: &P,
    x: &[f64],
    condition: &Condition,
    t: usize,
    step: usize,
) -> Result<Vec<f64>> {
    let eps = predictor.predict(x, condition, t)?;
    let norm = eps.iter().map(|e| e * e).sum::<f64>().sqrt();
    let limit = 1e3 * (x.len() as f64).sqrt();
    if !norm.is_finite() || norm > limit {
        return Err(Error::Numeric {
            step,
            message: format!("noise norm {norm:e} exceeds {limit:e}"),
        });
    }
    Ok(eps)
}

/// The inversion memory bank: `latents[t]` is the inverted latent at level `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionTrajectory {
    condition: Condition,
    steps: usize,
    schedule: Option<ScheduleSpec>,
    latents: Vec<Vec<f64>>,
}

impl InversionTrajectory {
    /// Validates a trajectory loaded from disk.
    pub fn validate(&self) -> Result<()> {
        if self.latents.len() != self.steps + 1 {
            return Err(Error::Contract(format!(
                "trajectory has {} latents for T = {}",
                self.latents.len(),
                self.steps
            )));
        }
        let d = self.latents.first().map(Vec::len).unwrap_or(0);
        if d == 0 || self.latents.iter().any(|l| l.len() != d) {
            return Err(Error::Contract(
                "trajectory latents have inconsistent dimension".into(),
            ));
        }
        if self.latents.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract("trajectory has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn condition(&self) -> &Condition {
        &self.condition
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn schedule(&self) -> Option<ScheduleSpec> {
        self.schedule
    }

    pub fn latents(&self) -> &[Vec<f64>] {
        &self.latents
    }

    pub fn latent(&self, t: usize) -> Result<&[f64]> {
        self.latents
            .get(t)
            .map(Vec::as_slice)
            .ok_or(Error::Index { t, max: self.steps })
    }

    /// The input the trajectory started from.
    pub fn start(&self) -> &[f64] {
        &self.latents[0]
    }

    /// The scaling start point `x_T`.
    pub fn end(&self) -> &[f64] {
        &self.latents[self.steps]
    }

    fn check_schedule(&self, schedule: &NoiseSchedule) -> Result<()> {
        if schedule.steps() != self.steps {
            return Err(Error::Contract(format!(
                "trajectory has T = {}, schedule has T = {}",
                self.steps,
                schedule.steps()
            )));
        }
        if let (Some(mine), Some(theirs)) = (self.schedule, schedule.spec()) {
            if mine != theirs {
                return Err(Error::Contract(
                    "trajectory was built under a different schedule".into(),
                ));
            }
        }
        Ok(())
    }
}

/// DDIM inversion of `x0` under `condition`, with `refine_iters` fixed-point
/// refinements of the noise estimate per step (`0` is plain DDIM inversion).
pub fn invert<P: NoisePredictor + ?Sized>(
    x0: &[f64],
    condition: &Condition,
    predictor: &P,
    schedule: &NoiseSchedule,
    refine_iters: usize,
) -> Result<InversionTrajectory> {
    if x0.is_empty() || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract(
            "inversion input must be finite and non-empty".into(),
        ));
    }
    let steps = schedule.steps();
    let mut latents = Vec::with_capacity(steps + 1);
    latents.push(x0.to_vec());
    for t in 0..steps {
        let x = &latents[t];
        // No noise is defined at t = 0; the level-1 prediction at x_0 seeds the iteration.
        let mut eps = guarded_noise(predictor, x, condition, t.max(1), t)?;
        for _ in 0..refine_iters {
            let candidate = ddim_inverse_step(x, &eps, t, schedule)?;
            eps = guarded_noise(predictor, &candidate, condition, t + 1, t + 1)?;
        }
        let next = ddim_inverse_step(x, &eps, t, schedule)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                step: t + 1,
                message: "non-finite inverted latent".into(),
            });
        }
        latents.push(next);
    }
    Ok(InversionTrajectory {
        condition: condition.clone(),
        steps,
        schedule: schedule.spec(),
        latents,
    })
}

/// Samples back from `x_T` under the trajectory's own condition.
pub fn reconstruct<P: NoisePredictor + ?Sized>(
    trajectory: &InversionTrajectory,
    predictor: &P,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    trajectory.validate()?;
    trajectory.check_schedule(schedule)?;
    let mut x = trajectory.end().to_vec();
    for t in (1..=trajectory.steps).rev() {
        let eps = guarded_noise(predictor, &x, &trajectory.condition, t, t)?;
        x = ddim_step(&x, &eps, t, schedule)?;
    }
    Ok(x)
}

pub(crate) fn check_trajectory(
    trajectory: &InversionTrajectory,
    schedule: &NoiseSchedule,
) -> Result<()> {
    trajectory.validate()?;
    trajectory.check_schedule(schedule)
}

/// Relative reconstruction error `|x_hat - x0| / |x0|`.
pub fn relative_error(reconstructed: &[f64], original: &[f64]) -> f64 {
    let diff: f64 = reconstructed
        .iter()
        .zip(original)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = original.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm
}
