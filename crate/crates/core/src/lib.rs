//! Concept scaling for diffusion sampling over an exact Gaussian-mixture world.
//!
//! A concept present in an input is enhanced or suppressed by inverting the
//! input under that concept and sampling back with a weighted difference
//! between a concept-conditioned and a null-conditioned noise prediction.
//! The world is a Gaussian mixture whose noise predictor is available in
//! closed form, so every step of the method can be checked exactly.

pub mod cli;
pub mod error;
pub mod eval;
pub mod inversion;
pub mod plot;
pub mod rng;
pub mod scaling;
pub mod schedule;
pub mod world;

pub use error::{Error, Result};
pub use eval::{
    ablation_run, concept_presence, concept_score, energy_distance, fidelity_distance,
    frechet_distance, omega_sweep, removal_study, weak_gen, ExperimentResult, StudyOptions,
};
pub use inversion::{ddim_inverse_step, ddim_step, invert, reconstruct, InversionTrajectory};
pub use scaling::{
    omega_at, regularized_noise, scale_concept, scaled_noise, Regularization,
    RegularizationEstimate, ScaleOutcome, ScalingConfig,
};
pub use schedule::{NoiseSchedule, ScheduleSpec};
pub use world::{
    AnalyticPredictor, ConceptLabel, Condition, GaussianMixture, LabelId, LatentPoint,
    NoisePredictor, WeakConcept,
};
