//! Gaussian-mixture data world.
//!
//! The world plays the part of a trained conditional diffusion model: its
//! forward marginals are available in closed form, so the noise predictor is
//! the exact minimizer of the denoising objective rather than a network.
//! Conditioning on a concept restricts the mixture to the components carrying
//! that label.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded_rng;
use crate::schedule::NoiseSchedule;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelId(pub u32);

impl std::fmt::Display for LabelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptLabel {
    pub id: LabelId,
    pub name: String,
}

/// What a text prompt selects: nothing, one concept, or a set of concepts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Null,
    Single(LabelId),
    Subset(BTreeSet<LabelId>),
}

impl Condition {
    pub fn matches(&self, label: LabelId) -> bool {
        match self {
            Condition::Null => true,
            Condition::Single(id) => *id == label,
            Condition::Subset(ids) => ids.contains(&label),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal of the covariance.
    pub variances: Vec<f64>,
    pub label: LabelId,
}

/// A point in latent space together with the noise level it lives at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPoint {
    pub coords: Vec<f64>,
    pub t: usize,
}

/// On-disk form of a world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldFile {
    pub dimension: usize,
    pub components: Vec<ComponentSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
    pub label: String,
}

/// Parameters of the weak-concept generator: component means are pulled
/// toward the global mean and variances are inflated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakConcept {
    pub pull: f64,
    pub inflate: f64,
}

impl Default for WeakConcept {
    fn default() -> Self {
        Self {
            pull: 0.5,
            inflate: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    dimension: usize,
    components: Vec<Component>,
    labels: Vec<ConceptLabel>,
}

impl GaussianMixture {
    /// Builds a world. Labels get ids in order of first appearance.
    pub fn from_parts(dimension: usize, specs: Vec<ComponentSpec>) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Config("world dimension must be positive".into()));
        }
        if specs.is_empty() {
            return Err(Error::Config("world has no components".into()));
        }
        let mut labels: Vec<ConceptLabel> = Vec::new();
        let mut components = Vec::with_capacity(specs.len());
        for (k, spec) in specs.into_iter().enumerate() {
            if spec.label.trim().is_empty() {
                return Err(Error::Config(format!("component {k} has an empty label")));
            }
            if spec.mean.len() != dimension || spec.variances.len() != dimension {
                return Err(Error::Config(format!(
                    "component {k}: mean/variances must have length {dimension}"
                )));
            }
            if !(spec.weight > 0.0 && spec.weight.is_finite()) {
                return Err(Error::Config(format!(
                    "component {k}: weight must be positive"
                )));
            }
            if spec.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::Config(format!("component {k}: non-finite mean")));
            }
            if spec.variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Config(format!(
                    "component {k}: variances must be strictly positive"
                )));
            }
            let id = match labels.iter().find(|l| l.name == spec.label) {
                Some(l) => l.id,
                None => {
                    let id = LabelId(labels.len() as u32);
                    labels.push(ConceptLabel {
                        id,
                        name: spec.label.clone(),
                    });
                    id
                }
            };
            components.push(Component {
                weight: spec.weight,
                mean: spec.mean,
                variances: spec.variances,
                label: id,
            });
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "component weights sum to {total}, expected 1"
            )));
        }
        if labels.len() < 2 {
            return Err(Error::Config(
                "a world needs at least two distinct labels".into(),
            ));
        }
        Ok(Self {
            dimension,
            components,
            labels,
        })
    }

    /// Like [`from_parts`](Self::from_parts) but divides the weights by their sum first.
    pub fn from_unnormalized(dimension: usize, mut specs: Vec<ComponentSpec>) -> Result<Self> {
        let total: f64 = specs.iter().map(|c| c.weight).sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Config(
                "weights must have a positive finite sum".into(),
            ));
        }
        for spec in &mut specs {
            spec.weight /= total;
        }
        Self::from_parts(dimension, specs)
    }

    pub fn from_file(file: WorldFile) -> Result<Self> {
        Self::from_parts(file.dimension, file.components)
    }

    pub fn to_file(&self) -> WorldFile {
        WorldFile {
            dimension: self.dimension,
            components: self
                .components
                .iter()
                .map(|c| ComponentSpec {
                    weight: c.weight,
                    mean: c.mean.clone(),
                    variances: c.variances.clone(),
                    label: self.label_name(c.label).unwrap_or_default().to_string(),
                })
                .collect(),
        }
    }

    /// d = 2, four unit-variance components at (±4, ±4) with equal weights,
    /// labelled A..D counter-clockwise from the positive quadrant.
    pub fn reference() -> Self {
        let means = [[4.0, 4.0], [-4.0, 4.0], [-4.0, -4.0], [4.0, -4.0]];
        let specs = means
            .iter()
            .zip(["A", "B", "C", "D"])
            .map(|(m, name)| ComponentSpec {
                weight: 0.25,
                mean: m.to_vec(),
                variances: vec![1.0, 1.0],
                label: name.to_string(),
            })
            .collect();
        Self::from_parts(2, specs).expect("reference world is valid")
    }

    /// A randomized world: one component per label, means uniform in
    /// `[-6, 6]^d`, variances in `[0.5, 1.5]`, weights drawn then normalized.
    pub fn random(dimension: usize, n_labels: usize, seed: u64) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Config("world dimension must be positive".into()));
        }
        if n_labels < 2 {
            return Err(Error::Config("a world needs at least two labels".into()));
        }
        let mut rng = seeded_rng(seed);
        let specs = (0..n_labels)
            .map(|k| ComponentSpec {
                weight: rng.random_range(0.5..1.5),
                mean: (0..dimension)
                    .map(|_| rng.random_range(-6.0..6.0))
                    .collect(),
                variances: (0..dimension).map(|_| rng.random_range(0.5..1.5)).collect(),
                label: format!("c{k}"),
            })
            .collect();
        Self::from_unnormalized(dimension, specs)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn labels(&self) -> &[ConceptLabel] {
        &self.labels
    }

    pub fn label_by_name(&self, name: &str) -> Result<LabelId> {
        self.labels
            .iter()
            .find(|l| l.name == name)
            .map(|l| l.id)
            .ok_or_else(|| Error::Condition(format!("unknown label `{name}`")))
    }

    pub fn label_name(&self, id: LabelId) -> Result<&str> {
        self.labels
            .iter()
            .find(|l| l.id == id)
            .map(|l| l.name.as_str())
            .ok_or_else(|| Error::Condition(format!("unknown label {id}")))
    }

    /// Checks that every label the condition names exists here.
    pub fn check_condition(&self, condition: &Condition) -> Result<()> {
        let known = |id: &LabelId| self.labels.iter().any(|l| l.id == *id);
        match condition {
            Condition::Null => Ok(()),
            Condition::Single(id) if known(id) => Ok(()),
            Condition::Single(id) => Err(Error::Condition(format!("unknown label {id}"))),
            Condition::Subset(ids) if ids.is_empty() => {
                Err(Error::Condition("subset condition is empty".into()))
            }
            Condition::Subset(ids) => match ids.iter().find(|id| !known(id)) {
                Some(id) => Err(Error::Condition(format!("unknown label {id}"))),
                None => Ok(()),
            },
        }
    }

    /// Sub-mixture of the components matching `condition`, weights renormalized.
    pub fn restrict(&self, condition: &Condition) -> Result<GaussianMixture> {
        self.check_condition(condition)?;
        if *condition == Condition::Null {
            return Ok(self.clone());
        }
        let kept: Vec<Component> = self
            .components
            .iter()
            .filter(|c| condition.matches(c.label))
            .cloned()
            .collect();
        if kept.is_empty() {
            return Err(Error::Condition(format!(
                "condition {condition:?} selects no components"
            )));
        }
        let total: f64 = kept.iter().map(|c| c.weight).sum();
        let components = kept
            .into_iter()
            .map(|c| Component {
                weight: c.weight / total,
                ..c
            })
            .collect();
        Ok(GaussianMixture {
            dimension: self.dimension,
            components,
            labels: self.labels.clone(),
        })
    }

    /// Global mean `sum_k w_k mu_k`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dimension];
        for c in &self.components {
            for (mi, mu) in m.iter_mut().zip(&c.mean) {
                *mi += c.weight * mu;
            }
        }
        m
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dimension {
            return Err(Error::Contract(format!(
                "point has dimension {}, world has {}",
                x.len(),
                self.dimension
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("point has non-finite coordinates".into()));
        }
        Ok(())
    }

    /// `(component index, log w_k + log N(x; sqrt(ab) mu_k, ab S_k + (1 - ab) I))`
    /// for the components selected by `condition`; weights are not renormalized.
    fn log_terms(&self, condition: &Condition, x: &[f64], alpha_bar: f64) -> Vec<(usize, f64)> {
        let signal = alpha_bar.sqrt();
        self.components
            .iter()
            .enumerate()
            .filter(|(_, c)| condition.matches(c.label))
            .map(|(k, c)| {
                let mut quad = 0.0;
                let mut log_det = 0.0;
                for ((xi, mu), var) in x.iter().zip(&c.mean).zip(&c.variances) {
                    let v = alpha_bar * var + (1.0 - alpha_bar);
                    let r = xi - signal * mu;
                    quad += r * r / v;
                    log_det += v.ln();
                }
                let ll = -0.5 * (quad + log_det + self.dimension as f64 * LN_2PI);
                (k, c.weight.ln() + ll)
            })
            .collect()
    }

    fn condition_mass(&self, condition: &Condition) -> f64 {
        self.components
            .iter()
            .filter(|c| condition.matches(c.label))
            .map(|c| c.weight)
            .sum()
    }

    /// `log p_t(x | condition)` of the forward-noised restricted mixture.
    pub fn marginal_log_density(
        &self,
        condition: &Condition,
        x: &[f64],
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<f64> {
        self.check_condition(condition)?;
        self.check_point(x)?;
        let alpha_bar = schedule.alpha_bar(t)?;
        let terms = self.log_terms(condition, x, alpha_bar);
        if terms.is_empty() {
            return Err(Error::Condition(format!(
                "condition {condition:?} selects no components"
            )));
        }
        let lse = log_sum_exp(terms.iter().map(|(_, l)| *l));
        Ok(lse - self.condition_mass(condition).ln())
    }

    /// Mixture log density of clean data, `t = 0` and no condition.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        let terms = self.log_terms(&Condition::Null, x, 1.0);
        Ok(log_sum_exp(terms.iter().map(|(_, l)| *l)) - self.condition_mass(&Condition::Null).ln())
    }

    /// Exact conditional noise prediction
    /// `eps*(x, c, t) = -sqrt(1 - ab_t) * grad_x log p_t(x | c)`.
    pub fn analytic_noise(
        &self,
        condition: &Condition,
        x: &[f64],
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        if t == 0 {
            return Err(Error::Domain("no noise to predict at t = 0".into()));
        }
        self.check_condition(condition)?;
        self.check_point(x)?;
        let alpha_bar = schedule.alpha_bar(t)?;
        let terms = self.log_terms(condition, x, alpha_bar);
        if terms.is_empty() {
            return Err(Error::Condition(format!(
                "condition {condition:?} selects no components"
            )));
        }
        let lse = log_sum_exp(terms.iter().map(|(_, l)| *l));
        let signal = alpha_bar.sqrt();
        let mut score = vec![0.0; self.dimension];
        for (k, log_term) in terms {
            let resp = (log_term - lse).exp();
            if resp == 0.0 {
                continue;
            }
            let c = &self.components[k];
            for (((s, xi), mu), var) in score.iter_mut().zip(x).zip(&c.mean).zip(&c.variances) {
                let v = alpha_bar * var + (1.0 - alpha_bar);
                *s -= resp * (xi - signal * mu) / v;
            }
        }
        let noise_scale = (1.0 - alpha_bar).sqrt();
        Ok(score.into_iter().map(|s| -noise_scale * s).collect())
    }

    /// Draws a clean point: a component by restricted weight, then a Gaussian draw.
    pub fn sample_data(&self, condition: &Condition, seed: u64) -> Result<LatentPoint> {
        self.check_condition(condition)?;
        let mut rng = seeded_rng(seed);
        let picked: Vec<&Component> = self
            .components
            .iter()
            .filter(|c| condition.matches(c.label))
            .collect();
        let c = pick_weighted(&picked, &mut rng)?;
        let coords = c
            .mean
            .iter()
            .zip(&c.variances)
            .map(|(mu, var)| {
                let z: f64 = rng.sample(StandardNormal);
                mu + var.sqrt() * z
            })
            .collect();
        Ok(LatentPoint { coords, t: 0 })
    }

    /// Clean-data Bayes posterior over labels in log space.
    pub fn log_posterior(&self, x: &[f64]) -> Result<BTreeMap<LabelId, f64>> {
        self.check_point(x)?;
        let terms = self.log_terms(&Condition::Null, x, 1.0);
        let total = log_sum_exp(terms.iter().map(|(_, l)| *l));
        Ok(self
            .labels
            .iter()
            .map(|label| {
                let lse = log_sum_exp(
                    terms
                        .iter()
                        .filter(|(k, _)| self.components[*k].label == label.id)
                        .map(|(_, l)| *l),
                );
                (label.id, lse - total)
            })
            .collect())
    }

    /// `P(label | x)` at `t = 0`.
    pub fn posterior(&self, x: &[f64]) -> Result<BTreeMap<LabelId, f64>> {
        Ok(self
            .log_posterior(x)?
            .into_iter()
            .map(|(id, lp)| (id, lp.exp()))
            .collect())
    }

    /// Draws an indistinct instance of `label`: the label's sub-mixture with
    /// means pulled toward the global mean and variances inflated by `inflate^2`.
    pub fn weak_concept_sample(
        &self,
        label: LabelId,
        weak: WeakConcept,
        seed: u64,
    ) -> Result<LatentPoint> {
        self.weak_concept_mixture(label, weak)?
            .sample_data(&Condition::Single(label), seed)
    }

    /// The distribution weak-concept samples of `label` are drawn from.
    pub fn weak_concept_mixture(
        &self,
        label: LabelId,
        weak: WeakConcept,
    ) -> Result<GaussianMixture> {
        if !(0.0..=1.0).contains(&weak.pull) {
            return Err(Error::Config(format!(
                "pull must lie in [0, 1], got {}",
                weak.pull
            )));
        }
        if !(weak.inflate >= 1.0 && weak.inflate.is_finite()) {
            return Err(Error::Config(format!(
                "inflate must be >= 1, got {}",
                weak.inflate
            )));
        }
        let global = self.mean();
        let mut restricted = self.restrict(&Condition::Single(label))?;
        let scale = weak.inflate * weak.inflate;
        for c in &mut restricted.components {
            for (mu, g) in c.mean.iter_mut().zip(&global) {
                *mu = (1.0 - weak.pull) * *mu + weak.pull * g;
            }
            for v in &mut c.variances {
                *v *= scale;
            }
        }
        Ok(restricted)
    }
}

fn pick_weighted<'a, R: Rng>(components: &[&'a Component], rng: &mut R) -> Result<&'a Component> {
    let total: f64 = components.iter().map(|c| c.weight).sum();
    if components.is_empty() || total.is_nan() || total <= 0.0 {
        return Err(Error::Condition("no components to sample from".into()));
    }
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for c in components {
        acc += c.weight;
        if u < acc {
            return Ok(c);
        }
    }
    Ok(components[components.len() - 1])
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Something that predicts the noise in a latent under a condition.
pub trait NoisePredictor: Sync {
    fn predict(&self, x: &[f64], condition: &Condition, t: usize) -> Result<Vec<f64>>;
}

/// The world's exact predictor bound to a schedule.
#[derive(Clone, Copy, Debug)]
pub struct AnalyticPredictor<'a> {
    pub world: &'a GaussianMixture,
    pub schedule: &'a NoiseSchedule,
}

impl<'a> AnalyticPredictor<'a> {
    pub fn new(world: &'a GaussianMixture, schedule: &'a NoiseSchedule) -> Self {
        Self { world, schedule }
    }
}

impl NoisePredictor for AnalyticPredictor<'_> {
    fn predict(&self, x: &[f64], condition: &Condition, t: usize) -> Result<Vec<f64>> {
        self.world.analytic_noise(condition, x, t, self.schedule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn spec(weight: f64, mean: &[f64], var: &[f64], label: &str) -> ComponentSpec {
        ComponentSpec {
            weight,
            mean: mean.to_vec(),
            variances: var.to_vec(),
            label: label.into(),
        }
    }

    fn two_symmetric() -> GaussianMixture {
        GaussianMixture::from_parts(
            1,
            vec![
                spec(0.5, &[-3.0], &[1.0], "A"),
                spec(0.5, &[3.0], &[1.0], "B"),
            ],
        )
        .unwrap()
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::cosine(50, 0.008).unwrap()
    }

    #[test]
    fn standard_normal_noise_is_scaled_identity() {
        let world = GaussianMixture::from_parts(
            1,
            vec![
                spec(0.5, &[0.0], &[1.0], "A"),
                spec(0.5, &[0.0], &[1.0], "B"),
            ],
        )
        .unwrap();
        let half = NoiseSchedule::from_raw(vec![1.0, 0.5]);
        let eps = world
            .analytic_noise(&Condition::Null, &[2.0], 1, &half)
            .unwrap();
        assert!((eps[0] - std::f64::consts::SQRT_2).abs() < 1e-5);

        let s = sched();
        for t in [1, 10, 25, 50] {
            let ab = s.alpha_bar(t).unwrap();
            let eps = world
                .analytic_noise(&Condition::Null, &[2.0], t, &s)
                .unwrap();
            assert!((eps[0] - (1.0 - ab).sqrt() * 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn symmetric_mixture_has_zero_noise_at_origin() {
        let w = two_symmetric();
        let eps = w
            .analytic_noise(&Condition::Null, &[0.0], 20, &sched())
            .unwrap();
        assert_eq!(eps, vec![0.0]);
    }

    #[test]
    fn noise_at_t0_is_a_domain_error() {
        let w = two_symmetric();
        assert!(matches!(
            w.analytic_noise(&Condition::Null, &[0.0], 0, &sched()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn restrict_cases() {
        let w = two_symmetric();
        assert_eq!(w.restrict(&Condition::Null).unwrap(), w);
        let a = w.restrict(&Condition::Single(LabelId(0))).unwrap();
        assert_eq!(a.components().len(), 1);
        assert_eq!(a.components()[0].weight, 1.0);

        let w3 = GaussianMixture::from_parts(
            1,
            vec![
                spec(0.5, &[0.0], &[1.0], "A"),
                spec(0.3, &[1.0], &[1.0], "A"),
                spec(0.2, &[5.0], &[1.0], "B"),
            ],
        )
        .unwrap();
        let r = w3.restrict(&Condition::Single(LabelId(0))).unwrap();
        let weights: Vec<f64> = r.components().iter().map(|c| c.weight).collect();
        assert!((weights[0] - 0.625).abs() < 1e-15);
        assert!((weights[1] - 0.375).abs() < 1e-15);
        // idempotent
        assert_eq!(r.restrict(&Condition::Single(LabelId(0))).unwrap(), r);
    }

    #[test]
    fn restrict_rejects_unknown_and_empty() {
        let w = two_symmetric();
        assert!(w.restrict(&Condition::Single(LabelId(9))).is_err());
        assert!(w.restrict(&Condition::Subset(BTreeSet::new())).is_err());
    }

    #[test]
    fn construction_validates() {
        let bad_sum = GaussianMixture::from_parts(
            1,
            vec![
                spec(0.5, &[0.0], &[1.0], "A"),
                spec(0.4, &[1.0], &[1.0], "B"),
            ],
        );
        assert!(bad_sum.is_err());
        let one_label = GaussianMixture::from_parts(
            1,
            vec![
                spec(0.5, &[0.0], &[1.0], "A"),
                spec(0.5, &[1.0], &[1.0], "A"),
            ],
        );
        assert!(one_label.is_err());
        let zero_var = GaussianMixture::from_parts(
            1,
            vec![
                spec(0.5, &[0.0], &[0.0], "A"),
                spec(0.5, &[1.0], &[1.0], "B"),
            ],
        );
        assert!(zero_var.is_err());
        assert!(GaussianMixture::from_parts(0, vec![]).is_err());
    }

    #[test]
    fn standard_normal_marginal_is_invariant() {
        let w = GaussianMixture::from_parts(
            2,
            vec![
                spec(0.5, &[0.0, 0.0], &[1.0, 1.0], "A"),
                spec(0.5, &[0.0, 0.0], &[1.0, 1.0], "B"),
            ],
        )
        .unwrap();
        let x = [0.3, -1.2];
        let expected = -0.5 * (0.09 + 1.44) - LN_2PI;
        for t in [0, 7, 25, 50] {
            let lp = w
                .marginal_log_density(&Condition::Null, &x, t, &sched())
                .unwrap();
            assert!((lp - expected).abs() < 1e-13);
        }
    }

    #[test]
    fn t0_null_marginal_is_data_density() {
        let w = GaussianMixture::reference();
        let x = [1.5, -0.5];
        let a = w
            .marginal_log_density(&Condition::Null, &x, 0, &sched())
            .unwrap();
        let b = w.log_density(&x).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    /// Oracle: p_t(x) = E_{x0 ~ data}[ N(x; sqrt(ab) x0, (1 - ab) I) ],
    /// estimated from forward-noising independent data draws.
    #[test]
    fn marginal_matches_monte_carlo() {
        let w = GaussianMixture::from_parts(
            2,
            vec![
                spec(0.3, &[1.0, -0.5], &[0.4, 1.3], "A"),
                spec(0.7, &[-1.5, 0.8], &[1.1, 0.6], "B"),
            ],
        )
        .unwrap();
        let s = sched();
        let t = 25;
        let ab = s.alpha_bar(t).unwrap();
        let x = [0.2, 0.1];
        let n = 1_000_000u64;
        let mut rng = seeded_rng(99);
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let comp = if rng.random::<f64>() < 0.3 {
                &w.components()[0]
            } else {
                &w.components()[1]
            };
            let mut log_k = -LN_2PI - (1.0 - ab).ln();
            for ((xi, mu), var) in x.iter().zip(&comp.mean).zip(&comp.variances) {
                let z: f64 = rng.sample(StandardNormal);
                let x0 = mu + var.sqrt() * z;
                let r = xi - ab.sqrt() * x0;
                log_k -= 0.5 * r * r / (1.0 - ab);
            }
            let k = log_k.exp();
            sum += k;
            sum_sq += k * k;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = w
            .marginal_log_density(&Condition::Null, &x, t, &s)
            .unwrap()
            .exp();
        assert!(
            (exact - mean).abs() < 3.0 * se,
            "exact {exact}, mc {mean} ± {se}"
        );
    }

    /// Oracle: central finite differences of the marginal log density.
    fn fd_noise(
        w: &GaussianMixture,
        c: &Condition,
        x: &[f64],
        t: usize,
        s: &NoiseSchedule,
    ) -> Vec<f64> {
        let h = 1e-5;
        let ab = s.alpha_bar(t).unwrap();
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                let g = (w.marginal_log_density(c, &xp, t, s).unwrap()
                    - w.marginal_log_density(c, &xm, t, s).unwrap())
                    / (2.0 * h);
                -(1.0 - ab).sqrt() * g
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn noise_matches_finite_differences(
            m1 in prop::collection::vec(-4.0f64..4.0, 2),
            m2 in prop::collection::vec(-4.0f64..4.0, 2),
            v1 in prop::collection::vec(0.3f64..2.0, 2),
            v2 in prop::collection::vec(0.3f64..2.0, 2),
            w1 in 0.1f64..0.9,
            x in prop::collection::vec(-5.0f64..5.0, 2),
            cond in 0usize..3,
        ) {
            let w = GaussianMixture::from_parts(2, vec![
                spec(w1, &m1, &v1, "A"), spec(1.0 - w1, &m2, &v2, "B"),
            ]).unwrap();
            let c = [Condition::Null, Condition::Single(LabelId(0)), Condition::Single(LabelId(1))][cond].clone();
            let s = sched();
            let t = 10;
            let eps = w.analytic_noise(&c, &x, t, &s).unwrap();
            let fd = fd_noise(&w, &c, &x, t, &s);
            let diff: f64 = eps.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(diff / norm.max(1e-8) < 1e-4, "rel err {}", diff / norm);
        }

        #[test]
        fn posterior_invariant_under_weight_rescaling(
            scale in 0.01f64..100.0,
            x in prop::collection::vec(-6.0f64..6.0, 2),
        ) {
            let base = GaussianMixture::reference();
            let specs: Vec<ComponentSpec> = base.to_file().components.into_iter()
                .map(|mut c| { c.weight *= scale; c }).collect();
            let scaled = GaussianMixture::from_unnormalized(2, specs).unwrap();
            let a = base.posterior(&x).unwrap();
            let b = scaled.posterior(&x).unwrap();
            for (pa, pb) in a.values().zip(b.values()) {
                prop_assert!((pa - pb).abs() < 1e-12);
            }
            prop_assert!((a.values().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn restrict_is_idempotent(mask in 1u8..16) {
            let w = GaussianMixture::reference();
            let ids: BTreeSet<LabelId> = (0..4).filter(|i| mask & (1 << i) != 0).map(LabelId).collect();
            let c = Condition::Subset(ids);
            let once = w.restrict(&c).unwrap();
            prop_assert_eq!(once.restrict(&c).unwrap(), once);
        }
    }

    #[test]
    fn posterior_cases() {
        let w = two_symmetric();
        let p = w.posterior(&[0.0]).unwrap();
        assert!((p[&LabelId(0)] - 0.5).abs() < 1e-15);
        assert!((p[&LabelId(1)] - 0.5).abs() < 1e-15);

        // 10 sigma apart: P(A | mu_A) = 1 / (1 + exp(-50))
        let far = GaussianMixture::from_parts(
            1,
            vec![
                spec(0.5, &[0.0], &[1.0], "A"),
                spec(0.5, &[10.0], &[1.0], "B"),
            ],
        )
        .unwrap();
        let p = far.posterior(&[0.0]).unwrap();
        assert!(p[&LabelId(0)] > 0.999);
        assert!((p[&LabelId(1)] - (-50.0f64).exp() / (1.0 + (-50.0f64).exp())).abs() < 1e-30);
    }

    #[test]
    fn sampling_is_deterministic_and_degenerate_draw_returns_mean() {
        let w = GaussianMixture::from_parts(
            2,
            vec![
                spec(0.5, &[3.0, -2.0], &[1e-40, 1e-40], "A"),
                spec(0.5, &[0.0, 0.0], &[1.0, 1.0], "B"),
            ],
        )
        .unwrap();
        let p = w.sample_data(&Condition::Single(LabelId(0)), 5).unwrap();
        assert_eq!(p.coords, vec![3.0, -2.0]);
        assert_eq!(p.t, 0);
        let a = w.sample_data(&Condition::Null, 11).unwrap();
        let b = w.sample_data(&Condition::Null, 11).unwrap();
        assert_eq!(a, b);
    }

    /// Multinomial oracle: component frequencies within 3 standard errors.
    #[test]
    fn component_frequencies_match_weights() {
        let w = GaussianMixture::from_parts(
            1,
            vec![
                spec(0.2, &[-100.0], &[1.0], "A"),
                spec(0.5, &[0.0], &[1.0], "B"),
                spec(0.3, &[100.0], &[1.0], "C"),
            ],
        )
        .unwrap();
        let n = 100_000;
        let mut counts = [0usize; 3];
        for i in 0..n {
            let x = w
                .sample_data(&Condition::Null, crate::rng::derive_seed(3, i))
                .unwrap()
                .coords[0];
            counts[if x < -50.0 {
                0
            } else if x > 50.0 {
                2
            } else {
                1
            }] += 1;
        }
        for (count, p) in counts.iter().zip([0.2, 0.5, 0.3]) {
            let freq = *count as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() < 3.0 * se, "freq {freq} vs {p}");
        }
    }

    #[test]
    fn weak_concept_identity_and_endpoints() {
        let w = GaussianMixture::reference();
        let a = LabelId(0);
        let ident = w
            .weak_concept_mixture(
                a,
                WeakConcept {
                    pull: 0.0,
                    inflate: 1.0,
                },
            )
            .unwrap();
        assert_eq!(ident, w.restrict(&Condition::Single(a)).unwrap());
        for seed in 0..5 {
            assert_eq!(
                w.weak_concept_sample(
                    a,
                    WeakConcept {
                        pull: 0.0,
                        inflate: 1.0
                    },
                    seed
                )
                .unwrap(),
                w.sample_data(&Condition::Single(a), seed).unwrap()
            );
        }
        let full = w
            .weak_concept_mixture(
                a,
                WeakConcept {
                    pull: 1.0,
                    inflate: 2.0,
                },
            )
            .unwrap();
        for c in full.components() {
            assert_eq!(c.mean, w.mean());
            assert_eq!(c.variances, vec![4.0, 4.0]);
        }
        assert!(w
            .weak_concept_sample(
                a,
                WeakConcept {
                    pull: 1.5,
                    inflate: 1.0
                },
                0
            )
            .is_err());
        assert!(w
            .weak_concept_sample(
                a,
                WeakConcept {
                    pull: 0.5,
                    inflate: 0.5
                },
                0
            )
            .is_err());
    }

    /// Monte-Carlo oracle: mu_A = (4, 0), global mean 0, pull 0.5 gives (2, 0).
    #[test]
    fn weak_concept_sample_mean() {
        let w = GaussianMixture::from_parts(
            2,
            vec![
                spec(0.5, &[4.0, 0.0], &[1.0, 1.0], "A"),
                spec(0.5, &[-4.0, 0.0], &[1.0, 1.0], "B"),
            ],
        )
        .unwrap();
        let weak = WeakConcept::default();
        let n = 10_000;
        let mut mean = [0.0, 0.0];
        for i in 0..n {
            let p = w
                .weak_concept_sample(LabelId(0), weak, crate::rng::derive_seed(17, i))
                .unwrap();
            mean[0] += p.coords[0] / n as f64;
            mean[1] += p.coords[1] / n as f64;
        }
        let se = weak.inflate / (n as f64).sqrt();
        assert!((mean[0] - 2.0).abs() < 3.0 * se, "{mean:?}");
        assert!(mean[1].abs() < 3.0 * se, "{mean:?}");
    }

    #[test]
    fn world_file_round_trip() {
        let w = GaussianMixture::reference();
        let text = serde_json::to_string(&w.to_file()).unwrap();
        let back = GaussianMixture::from_file(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, w);
    }
}
