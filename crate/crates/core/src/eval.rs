//! Metrics and study drivers.
//!
//! The Bayes posterior of the world stands in for a concept detector or
//! text-image similarity, Euclidean distance to the input stands in for a
//! perceptual distance, and the energy distance to clean concept data stands
//! in for a distribution-quality score.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::scaling::{scale_concept, Regularization, ScalingConfig};
use crate::schedule::NoiseSchedule;
use crate::world::{AnalyticPredictor, Condition, GaussianMixture, LabelId, WeakConcept};

/// Floor applied to probabilities before taking logs.
pub const PROBABILITY_FLOOR: f64 = 1e-300;

/// Fraction of failed samples above which a study is rejected.
pub const MAX_FAILURE_RATE: f64 = 0.1;

/// Slack under which a posterior counts as tied with the threshold.
const TIE_TOLERANCE: f64 = 1e-12;

/// `P(label | x) >= threshold`; a tie counts as present.
pub fn concept_presence(
    world: &GaussianMixture,
    x: &[f64],
    label: LabelId,
    threshold: f64,
) -> Result<bool> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "presence threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let posterior = world.posterior(x)?;
    let p = posterior
        .get(&label)
        .ok_or_else(|| Error::Condition(format!("unknown label {label}")))?;
    Ok(*p >= threshold - TIE_TOLERANCE)
}

/// `log P(label | x)`, floored at `log(1e-300)`.
pub fn concept_score(world: &GaussianMixture, x: &[f64], label: LabelId) -> Result<f64> {
    let log_post = world.log_posterior(x)?;
    let lp = log_post
        .get(&label)
        .ok_or_else(|| Error::Condition(format!("unknown label {label}")))?;
    Ok(lp.max(PROBABILITY_FLOOR.ln()))
}

pub fn fidelity_distance(x0: &[f64], x_out: &[f64]) -> Result<f64> {
    if x0.len() != x_out.len() {
        return Err(Error::Contract(format!(
            "fidelity between dimensions {} and {}",
            x0.len(),
            x_out.len()
        )));
    }
    Ok(euclidean(x0, x_out))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn mean_pairwise(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let total: f64 = a
        .iter()
        .map(|x| b.iter().map(|y| euclidean(x, y)).sum::<f64>())
        .sum();
    total / (a.len() * b.len()) as f64
}

fn check_samples(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract(
            "two-sample metric needs non-empty samples".into(),
        ));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|x| x.len() != d) {
        return Err(Error::Contract("samples have mixed dimensions".into()));
    }
    Ok(())
}

/// Energy distance, V-statistic form:
/// `2 E|a - b| - E|a - a'| - E|b - b'|` over all pairs, diagonal included.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_samples(a, b)?;
    Ok(2.0 * mean_pairwise(a, b) - mean_pairwise(a, a) - mean_pairwise(b, b))
}

/// Per-sample terms `h_i = 2 mean_j |a_i - b_j| - mean_j |a_i - a_j|`, so that
/// `energy_distance(a, b) = mean(h) - E|b - b'|`. Comparing two output sets
/// against the same reference reduces to comparing their `h` values.
pub fn energy_contributions(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_samples(a, b)?;
    Ok(a.iter()
        .map(|x| {
            let cross = b.iter().map(|y| euclidean(x, y)).sum::<f64>() / b.len() as f64;
            let within = a.iter().map(|y| euclidean(x, y)).sum::<f64>() / a.len() as f64;
            2.0 * cross - within
        })
        .collect())
}

/// Fréchet distance between Gaussians fitted to the two samples.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_samples(a, b)?;
    let (mean_a, cov_a) = moments(a);
    let (mean_b, cov_b) = moments(b);
    let mean_term: f64 = mean_a
        .iter()
        .zip(&mean_b)
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    let root_a = psd_sqrt(&cov_a);
    let cross = psd_sqrt(&(&root_a * &cov_b * &root_a));
    let trace = cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok(mean_term + trace.max(0.0))
}

fn moments(samples: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = samples.len();
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for x in samples {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for x in samples {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]) / (n - 1) as f64;
                }
            }
        }
    }
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// One-sided paired sign test that `first` exceeds `second`. Ties are dropped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

pub fn sign_test_greater(first: &[f64], second: &[f64]) -> Result<SignTest> {
    if first.len() != second.len() {
        return Err(Error::Contract("sign test needs paired samples".into()));
    }
    let wins = first.iter().zip(second).filter(|(a, b)| a > b).count();
    let losses = first.iter().zip(second).filter(|(a, b)| a < b).count();
    let ties = first.len() - wins - losses;
    Ok(SignTest {
        wins,
        losses,
        ties,
        p_value: binomial_upper_tail(wins, wins + losses),
    })
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_upper_tail(k: usize, n: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if n == 0 || k > n {
        return 0.0;
    }
    let dist = Binomial::new(0.5, n as u64).expect("valid binomial");
    dist.sf(k as u64 - 1)
}

/// How study inputs are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputKind {
    Clean,
    Weak(WeakConcept),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub n_samples: usize,
    pub seed: u64,
    /// Fixed concept; `None` cycles through the world's labels.
    pub label: Option<LabelId>,
    pub threshold: f64,
    /// Clean draws of the sample's concept added to the quality reference set.
    pub reference_per_sample: usize,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            n_samples: 100,
            seed: 0,
            label: None,
            threshold: 0.5,
            reference_per_sample: 10,
        }
    }
}

impl StudyOptions {
    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("a study needs at least one sample".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(
                "presence threshold must lie in (0, 1)".into(),
            ));
        }
        if self.reference_per_sample == 0 {
            return Err(Error::Config(
                "reference_per_sample must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn sample_label(&self, world: &GaussianMixture, index: usize) -> LabelId {
        self.label
            .unwrap_or_else(|| world.labels()[index % world.labels().len()].id)
    }

    pub fn sample_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, index as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub index: usize,
    pub seed: u64,
    pub label: String,
    pub input: Vec<f64>,
    pub output: Option<Vec<f64>>,
    pub concept_score_in: f64,
    pub concept_score_out: Option<f64>,
    pub fidelity: Option<f64>,
    pub present_in: bool,
    pub present_out: Option<bool>,
    pub removed: bool,
    pub error: Option<String>,
}

impl SampleRow {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n_samples: usize,
    pub n_failed: usize,
    pub removal_rate: f64,
    pub mean_concept_score_in: f64,
    pub mean_concept_score: f64,
    pub energy_distance: f64,
    pub frechet_distance: f64,
    pub mean_fidelity: f64,
}

impl Aggregates {
    /// Recomputes every aggregate from the rows and the reference set; only
    /// successful rows count.
    pub fn from_rows(rows: &[SampleRow], reference: &[Vec<f64>]) -> Result<Self> {
        let ok: Vec<&SampleRow> = rows.iter().filter(|r| r.succeeded()).collect();
        if ok.is_empty() {
            return Err(Error::Runtime("every sample failed".into()));
        }
        let n = ok.len() as f64;
        let outputs: Vec<Vec<f64>> = ok.iter().filter_map(|r| r.output.clone()).collect();
        let mean = |f: &dyn Fn(&SampleRow) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / n;
        Ok(Self {
            n_samples: rows.len(),
            n_failed: rows.len() - ok.len(),
            removal_rate: ok.iter().filter(|r| r.removed).count() as f64 / n,
            mean_concept_score_in: mean(&|r| r.concept_score_in),
            mean_concept_score: mean(&|r| r.concept_score_out.unwrap_or(f64::NAN)),
            energy_distance: energy_distance(&outputs, reference)?,
            frechet_distance: frechet_distance(&outputs, reference)?,
            mean_fidelity: mean(&|r| r.fidelity.unwrap_or(f64::NAN)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub run_id: String,
    pub config: ScalingConfig,
    pub inputs: InputKind,
    pub options: StudyOptions,
    pub aggregates: Aggregates,
    pub per_sample: Vec<SampleRow>,
    /// Clean concept draws the quality metrics compare against.
    pub reference: Vec<Vec<f64>>,
}

impl ExperimentResult {
    pub fn outputs(&self) -> Vec<Vec<f64>> {
        self.per_sample
            .iter()
            .filter_map(|r| r.output.clone())
            .collect()
    }

    pub fn column(&self, f: impl Fn(&SampleRow) -> Option<f64>) -> Vec<f64> {
        self.per_sample
            .iter()
            .map(|r| f(r).unwrap_or(f64::NAN))
            .collect()
    }

    pub fn fidelities(&self) -> Vec<f64> {
        self.column(|r| r.fidelity)
    }

    pub fn concept_scores(&self) -> Vec<f64> {
        self.column(|r| r.concept_score_out)
    }

    /// Energy-distance terms of each output against the shared reference.
    pub fn energy_terms(&self) -> Result<Vec<f64>> {
        energy_contributions(&self.outputs(), &self.reference)
    }
}

/// Draws the inputs of a study; identical for every config run with the same options.
pub fn study_inputs(
    world: &GaussianMixture,
    inputs: InputKind,
    options: &StudyOptions,
) -> Result<Vec<(LabelId, Vec<f64>)>> {
    options.validate()?;
    (0..options.n_samples)
        .map(|i| {
            let label = options.sample_label(world, i);
            let seed = options.sample_seed(i);
            let point = match inputs {
                InputKind::Clean => world.sample_data(&Condition::Single(label), seed)?,
                InputKind::Weak(weak) => world.weak_concept_sample(label, weak, seed)?,
            };
            Ok((label, point.coords))
        })
        .collect()
}

fn reference_set(world: &GaussianMixture, options: &StudyOptions) -> Result<Vec<Vec<f64>>> {
    let mut reference = Vec::with_capacity(options.n_samples * options.reference_per_sample);
    for i in 0..options.n_samples {
        let label = options.sample_label(world, i);
        for j in 0..options.reference_per_sample {
            let seed = derive_seed(options.sample_seed(i), j as u64 + 1);
            reference.push(world.sample_data(&Condition::Single(label), seed)?.coords);
        }
    }
    Ok(reference)
}

/// Runs the scaling pipeline once per input and assembles the result. Samples
/// run in parallel on the current rayon pool; rows come back in index order.
pub fn run_study(
    run_id: &str,
    world: &GaussianMixture,
    schedule: &NoiseSchedule,
    config: &ScalingConfig,
    inputs: InputKind,
    options: &StudyOptions,
) -> Result<ExperimentResult> {
    let drawn = study_inputs(world, inputs, options)?;
    // configuration errors are fatal, not per-sample
    if let Some((label, _)) = drawn.first() {
        config.validate(schedule.steps(), &Condition::Single(*label))?;
    }
    let predictor = AnalyticPredictor::new(world, schedule);
    let rows: Vec<SampleRow> = drawn
        .par_iter()
        .enumerate()
        .map(|(index, (label, x0))| {
            sample_row(
                world, schedule, &predictor, config, options, index, *label, x0,
            )
        })
        .collect::<Result<_>>()?;

    let failed = rows.iter().filter(|r| !r.succeeded()).count();
    if failed as f64 > MAX_FAILURE_RATE * rows.len() as f64 {
        let first = rows
            .iter()
            .find_map(|r| r.error.clone())
            .unwrap_or_default();
        return Err(Error::Runtime(format!(
            "{failed} of {} samples failed (first: {first})",
            rows.len()
        )));
    }
    let reference = reference_set(world, options)?;
    Ok(ExperimentResult {
        run_id: run_id.to_string(),
        config: config.clone(),
        inputs,
        options: options.clone(),
        aggregates: Aggregates::from_rows(&rows, &reference)?,
        per_sample: rows,
        reference,
    })
}

#[allow(clippy::too_many_arguments)]
fn sample_row(
    world: &GaussianMixture,
    schedule: &NoiseSchedule,
    predictor: &AnalyticPredictor<'_>,
    config: &ScalingConfig,
    options: &StudyOptions,
    index: usize,
    label: LabelId,
    x0: &[f64],
) -> Result<SampleRow> {
    let present_in = concept_presence(world, x0, label, options.threshold)?;
    let mut row = SampleRow {
        index,
        seed: options.sample_seed(index),
        label: world.label_name(label)?.to_string(),
        input: x0.to_vec(),
        output: None,
        concept_score_in: concept_score(world, x0, label)?,
        concept_score_out: None,
        fidelity: None,
        present_in,
        present_out: None,
        removed: false,
        error: None,
    };
    match scale_concept(x0, &Condition::Single(label), config, predictor, schedule) {
        Ok(outcome) => {
            let out = outcome.output;
            let present_out = concept_presence(world, &out, label, options.threshold)?;
            row.concept_score_out = Some(concept_score(world, &out, label)?);
            row.fidelity = Some(fidelity_distance(x0, &out)?);
            row.present_out = Some(present_out);
            row.removed = present_in && !present_out;
            row.output = Some(out);
        }
        Err(e) if e.is_numeric() => row.error = Some(e.to_string()),
        Err(e) => return Err(e),
    }
    Ok(row)
}

/// Suppression study: clean concept inputs, record whether the concept is
/// detected before and after scaling.
pub fn removal_study(
    world: &GaussianMixture,
    schedule: &NoiseSchedule,
    config: &ScalingConfig,
    options: &StudyOptions,
) -> Result<ExperimentResult> {
    run_study(
        "removal-study",
        world,
        schedule,
        config,
        InputKind::Clean,
        options,
    )
}

/// The settings a removal study runs with unless told otherwise: plain
/// removal-branch sampling (`omega_t = 0` everywhere), no regularization.
pub fn removal_config(omega_base: f64) -> ScalingConfig {
    ScalingConfig {
        omega_base,
        gamma: 0.0,
        regularization: Regularization::Off,
        ..ScalingConfig::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub gamma: f64,
    pub regularization: Regularization,
}

impl AblationCell {
    pub fn name(&self) -> String {
        let reg = match self.regularization {
            Regularization::Off => "off",
            Regularization::Full => "full",
            Regularization::EarlyExit => "early_exit",
        };
        format!("gamma={}_reg={reg}", self.gamma)
    }
}

/// Rows of the ablation table: four schedules without regularization, then
/// full regularization and early exit at `gamma = 3`.
pub fn table2_cells() -> Vec<AblationCell> {
    let mut cells: Vec<AblationCell> = [0.0, 0.5, 1.0, 3.0]
        .iter()
        .map(|&gamma| AblationCell {
            gamma,
            regularization: Regularization::Off,
        })
        .collect();
    cells.push(AblationCell {
        gamma: 3.0,
        regularization: Regularization::Full,
    });
    cells.push(AblationCell {
        gamma: 3.0,
        regularization: Regularization::EarlyExit,
    });
    cells
}

/// Every combination of the given schedules and regularization modes.
pub fn full_grid(gammas: &[f64], modes: &[Regularization]) -> Vec<AblationCell> {
    gammas
        .iter()
        .flat_map(|&gamma| {
            modes.iter().map(move |&regularization| AblationCell {
                gamma,
                regularization,
            })
        })
        .collect()
}

/// Enhancement ablation on weak-concept inputs. Every cell sees the same
/// inputs, so comparisons between cells are paired.
pub fn ablation_run(
    world: &GaussianMixture,
    schedule: &NoiseSchedule,
    base: &ScalingConfig,
    cells: &[AblationCell],
    weak: WeakConcept,
    options: &StudyOptions,
) -> Result<Vec<ExperimentResult>> {
    cells
        .iter()
        .map(|cell| {
            let config = ScalingConfig {
                gamma: cell.gamma,
                regularization: cell.regularization,
                ..base.clone()
            };
            run_study(
                &cell.name(),
                world,
                schedule,
                &config,
                InputKind::Weak(weak),
                options,
            )
        })
        .collect()
}

/// Enhancement runs over a list of `omega_base` values, paired inputs.
pub fn omega_sweep(
    world: &GaussianMixture,
    schedule: &NoiseSchedule,
    base: &ScalingConfig,
    omegas: &[f64],
    weak: WeakConcept,
    options: &StudyOptions,
) -> Result<Vec<ExperimentResult>> {
    omegas
        .iter()
        .map(|&omega_base| {
            let config = ScalingConfig {
                omega_base,
                ..base.clone()
            };
            run_study(
                &format!("omega_base={omega_base}"),
                world,
                schedule,
                &config,
                InputKind::Weak(weak),
                options,
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakSample {
    pub index: usize,
    pub seed: u64,
    pub label: String,
    pub coords: Vec<f64>,
    pub concept_score: f64,
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakGenResult {
    pub weak: WeakConcept,
    pub options: StudyOptions,
    pub samples: Vec<WeakSample>,
    pub mean_concept_score: f64,
    pub presence_rate: f64,
    /// Same statistics for clean draws under the same seeds, for comparison.
    pub clean_mean_concept_score: f64,
    pub clean_presence_rate: f64,
}

/// Generates weak-concept inputs and summarizes how strongly they carry their concept.
pub fn weak_gen(
    world: &GaussianMixture,
    weak: WeakConcept,
    options: &StudyOptions,
) -> Result<WeakGenResult> {
    let weak_inputs = study_inputs(world, InputKind::Weak(weak), options)?;
    let clean_inputs = study_inputs(world, InputKind::Clean, options)?;
    // per-sample (score, present), mean score, presence rate
    type Summary = (Vec<(f64, bool)>, f64, f64);
    let summarize = |inputs: &[(LabelId, Vec<f64>)]| -> Result<Summary> {
        let stats: Vec<(f64, bool)> = inputs
            .iter()
            .map(|(label, x)| {
                Ok((
                    concept_score(world, x, *label)?,
                    concept_presence(world, x, *label, options.threshold)?,
                ))
            })
            .collect::<Result<_>>()?;
        let n = stats.len() as f64;
        let mean = stats.iter().map(|s| s.0).sum::<f64>() / n;
        let rate = stats.iter().filter(|s| s.1).count() as f64 / n;
        Ok((stats, mean, rate))
    };
    let (stats, mean_concept_score, presence_rate) = summarize(&weak_inputs)?;
    let (_, clean_mean_concept_score, clean_presence_rate) = summarize(&clean_inputs)?;
    let samples = weak_inputs
        .into_iter()
        .zip(stats)
        .enumerate()
        .map(|(index, ((label, coords), (concept_score, present)))| {
            Ok(WeakSample {
                index,
                seed: options.sample_seed(index),
                label: world.label_name(label)?.to_string(),
                coords,
                concept_score,
                present,
            })
        })
        .collect::<Result<_>>()?;
    Ok(WeakGenResult {
        weak,
        options: options.clone(),
        samples,
        mean_concept_score,
        presence_rate,
        clean_mean_concept_score,
        clean_presence_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::ComponentSpec;
    use proptest::prelude::*;

    fn pts(v: &[&[f64]]) -> Vec<Vec<f64>> {
        v.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn presence_cases() {
        let w = GaussianMixture::reference();
        let a = LabelId(0);
        assert!(concept_presence(&w, &[4.0, 4.0], a, 0.5).unwrap());
        assert!(!concept_presence(&w, &[-4.0, -4.0], a, 0.5).unwrap());
        let two = GaussianMixture::from_parts(
            1,
            vec![
                ComponentSpec {
                    weight: 0.5,
                    mean: vec![-1.0],
                    variances: vec![1.0],
                    label: "A".into(),
                },
                ComponentSpec {
                    weight: 0.5,
                    mean: vec![1.0],
                    variances: vec![1.0],
                    label: "B".into(),
                },
            ],
        )
        .unwrap();
        assert!(concept_presence(&two, &[0.0], a, 0.5).unwrap());
        assert!(concept_presence(&w, &[0.0, 0.0], LabelId(7), 0.5).is_err());
        assert!(concept_presence(&w, &[0.0, 0.0], a, 1.0).is_err());
    }

    #[test]
    fn score_cases() {
        let w = GaussianMixture::reference();
        assert!(concept_score(&w, &[4.0, 4.0], LabelId(0)).unwrap().abs() < 1e-6);
        let two = GaussianMixture::from_parts(
            1,
            vec![
                ComponentSpec {
                    weight: 0.5,
                    mean: vec![-1.0],
                    variances: vec![1.0],
                    label: "A".into(),
                },
                ComponentSpec {
                    weight: 0.5,
                    mean: vec![1.0],
                    variances: vec![1.0],
                    label: "B".into(),
                },
            ],
        )
        .unwrap();
        assert!(
            (concept_score(&two, &[0.0], LabelId(0)).unwrap() + std::f64::consts::LN_2).abs()
                < 1e-12
        );
        // floor
        let far = concept_score(&w, &[-400.0, -400.0], LabelId(0)).unwrap();
        assert_eq!(far, PROBABILITY_FLOOR.ln());
    }

    #[test]
    fn score_is_monotone_along_segment_between_means() {
        let w = GaussianMixture::reference();
        let scores: Vec<f64> = (0..100)
            .map(|i| {
                let s = i as f64 / 99.0;
                // from mu_A = (4, 4) toward mu_B = (-4, 4)
                concept_score(&w, &[4.0 - 8.0 * s, 4.0], LabelId(0)).unwrap()
            })
            .collect();
        for pair in scores.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
    }

    #[test]
    fn fidelity_cases() {
        assert_eq!(fidelity_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(fidelity_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(
            fidelity_distance(&[1.0, -2.0], &[0.5, 3.0]).unwrap(),
            fidelity_distance(&[0.5, 3.0], &[1.0, -2.0]).unwrap()
        );
        assert!(fidelity_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn energy_distance_cases() {
        let a = pts(&[&[0.0, 1.0], &[2.0, -1.0], &[0.5, 0.5]]);
        assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(
            energy_distance(&pts(&[&[0.0]]), &pts(&[&[3.0]])).unwrap(),
            6.0
        );
        assert!(energy_distance(&[], &a).is_err());
    }

    #[test]
    fn energy_distance_same_gaussian_is_small() {
        let w = GaussianMixture::reference();
        let c = Condition::Single(LabelId(0));
        let draw = |base: u64| -> Vec<Vec<f64>> {
            (0..10_000u64)
                .map(|i| w.sample_data(&c, derive_seed(base, i)).unwrap().coords)
                .collect()
        };
        let ed = energy_distance(&draw(1), &draw(2)).unwrap();
        assert!(ed < 0.05, "{ed}");
    }

    #[test]
    fn contributions_reassemble_energy_distance() {
        let a = pts(&[&[0.0, 1.0], &[2.0, -1.0], &[0.5, 0.5], &[3.0, 3.0]]);
        let b = pts(&[&[1.0, 1.0], &[-2.0, 0.0]]);
        let h = energy_contributions(&a, &b).unwrap();
        let within_b = mean_pairwise(&b, &b);
        let rebuilt = h.iter().sum::<f64>() / h.len() as f64 - within_b;
        assert!((rebuilt - energy_distance(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn frechet_of_identical_samples_is_zero_and_shift_is_squared() {
        let a = pts(&[&[0.0, 1.0], &[2.0, -1.0], &[0.5, 0.5], &[3.0, 3.0]]);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
        let shifted: Vec<Vec<f64>> = a.iter().map(|p| vec![p[0] + 3.0, p[1] - 4.0]).collect();
        assert!((frechet_distance(&a, &shifted).unwrap() - 25.0).abs() < 1e-9);
    }

    #[test]
    fn sign_test_tail() {
        // P(X >= 63 | n = 100) is just under 0.01
        assert!(binomial_upper_tail(63, 100) < 0.01);
        assert!(binomial_upper_tail(62, 100) > 0.01);
        assert!((binomial_upper_tail(100, 100) - 0.5f64.powi(100)).abs() < 1e-40);
        assert_eq!(binomial_upper_tail(0, 10), 1.0);
        let t = sign_test_greater(&[2.0, 3.0, 1.0, 5.0], &[1.0, 3.0, 2.0, 0.0]).unwrap();
        assert_eq!((t.wins, t.losses, t.ties), (2, 1, 1));
        assert!((t.p_value - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn energy_distance_symmetric_non_negative(
            a in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..12),
            b in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..12),
        ) {
            let ab = energy_distance(&a, &b).unwrap();
            let ba = energy_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab >= -1e-12);
        }
    }

    fn small_options(n: usize) -> StudyOptions {
        StudyOptions {
            n_samples: n,
            seed: 3,
            reference_per_sample: 2,
            ..StudyOptions::default()
        }
    }

    fn short_removal() -> ScalingConfig {
        ScalingConfig {
            t_exit: 14,
            ..removal_config(0.0)
        }
    }

    #[test]
    fn aggregates_recompute_from_rows() {
        let w = GaussianMixture::reference();
        let s = NoiseSchedule::cosine(20, 0.008).unwrap();
        let r = removal_study(&w, &s, &short_removal(), &small_options(12)).unwrap();
        let again = Aggregates::from_rows(&r.per_sample, &r.reference).unwrap();
        assert_eq!(again, r.aggregates);
        assert!((0.0..=1.0).contains(&r.aggregates.removal_rate));
        let removed = r.per_sample.iter().filter(|row| row.removed).count() as f64;
        assert!((r.aggregates.removal_rate - removed / 12.0).abs() < 1e-12);
    }

    #[test]
    fn zero_samples_rejected() {
        let w = GaussianMixture::reference();
        let s = NoiseSchedule::cosine(20, 0.008).unwrap();
        assert!(matches!(
            removal_study(&w, &s, &removal_config(0.0), &small_options(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ablation_cells_share_inputs() {
        let w = GaussianMixture::reference();
        let s = NoiseSchedule::cosine(20, 0.008).unwrap();
        let base = ScalingConfig {
            t_exit: 14,
            ..ScalingConfig::default()
        };
        let results = ablation_run(
            &w,
            &s,
            &base,
            &table2_cells(),
            WeakConcept::default(),
            &small_options(6),
        )
        .unwrap();
        assert_eq!(results.len(), 6);
        for r in &results[1..] {
            let a: Vec<&Vec<f64>> = r.per_sample.iter().map(|row| &row.input).collect();
            let b: Vec<&Vec<f64>> = results[0].per_sample.iter().map(|row| &row.input).collect();
            assert_eq!(a, b);
        }
        assert_eq!(results[4].config.regularization, Regularization::Full);
        assert_eq!(results[5].config.regularization, Regularization::EarlyExit);
    }

    #[test]
    fn study_is_thread_count_independent() {
        let w = GaussianMixture::reference();
        let s = NoiseSchedule::cosine(20, 0.008).unwrap();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| removal_study(&w, &s, &short_removal(), &small_options(16)).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn weak_gen_identity_parameters_match_clean_data() {
        let w = GaussianMixture::reference();
        let opts = small_options(200);
        let r = weak_gen(
            &w,
            WeakConcept {
                pull: 0.0,
                inflate: 1.0,
            },
            &opts,
        )
        .unwrap();
        assert_eq!(r.mean_concept_score, r.clean_mean_concept_score);
        let default = weak_gen(&w, WeakConcept::default(), &opts).unwrap();
        assert!(default.mean_concept_score < default.clean_mean_concept_score);
    }

    #[test]
    fn full_grid_size() {
        let g = full_grid(
            &[0.0, 0.5, 1.0, 3.0],
            &[
                Regularization::Off,
                Regularization::Full,
                Regularization::EarlyExit,
            ],
        );
        assert_eq!(g.len(), 12);
    }
}
