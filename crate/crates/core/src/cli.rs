//! Command-line front end.
//!
//! Settings resolve as: command-line flag, then the `--config` TOML file,
//! then the built-in default of the subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    ablation_run, concept_presence, concept_score, fidelity_distance, full_grid, removal_config,
    removal_study, table2_cells, weak_gen, ExperimentResult, StudyOptions,
};
use crate::inversion::{invert, InversionTrajectory};
use crate::plot::{render_svg, Layer};
use crate::scaling::{
    scale_from_trajectory, Regularization, RegularizationEstimate, ScalingConfig, StepRecord,
};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::world::{AnalyticPredictor, Condition, GaussianMixture, LabelId, WeakConcept};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

const AFTER_HELP: &str = "Settings resolve in this order: command-line flag, then the --config \
TOML file, then the built-in default. Exit codes: 0 success, 2 configuration or validation \
error, 3 numeric or runtime failure.";

#[derive(Debug, Parser)]
#[command(name = "conscale", version, about = "Concept scaling on an exact Gaussian-mixture diffusion world", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a world file: the reference world, or a random one under --seed.
    GenWorld(GenWorldArgs),
    /// Invert one input and write its trajectory.
    Invert(InvertArgs),
    /// Scale the concept of one input.
    Scale(ScaleArgs),
    /// Measure how often suppression removes the concept from clean inputs.
    RemovalStudy(StudyArgs),
    /// Enhancement ablation over scaling schedules and regularization modes.
    Ablate(AblateArgs),
    /// Generate weak-concept inputs.
    WeakGen(StudyArgs),
}

#[derive(Debug, Args)]
pub struct GenWorldArgs {
    /// Output path for the world file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub dimension: usize,
    #[arg(long, default_value_t = 4)]
    pub labels: usize,
    /// Draw a random world under this seed instead of the reference world.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct CommonArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// World file; the reference world if absent.
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Number of diffusion steps T.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Cosine schedule offset.
    #[arg(long)]
    pub schedule_offset: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum RegArg {
    Off,
    Full,
    EarlyExit,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum EstimateArg {
    Anchored,
    Midpoint,
    NoiseAverage,
}

#[derive(Debug, Clone, Args, Default)]
pub struct ScalingArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub omega_base: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub t_exit: Option<usize>,
    #[arg(long, value_enum)]
    pub regularization: Option<RegArg>,
    /// Fixed-point refinement iterations per inversion step.
    #[arg(long)]
    pub refine_iters: Option<usize>,
    /// Helper concept for the removal branch instead of the null condition.
    #[arg(long)]
    pub removal_label: Option<String>,
    /// How the regularization term is estimated.
    #[arg(long, value_enum)]
    pub estimate: Option<EstimateArg>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct InputArgs {
    /// Concept label of the input.
    #[arg(long)]
    pub concept: Option<String>,
    /// Input coordinates, comma separated; otherwise a clean draw of the concept under --seed.
    #[arg(long, allow_hyphen_values = true)]
    pub point: Option<String>,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub refine_iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScaleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub scaling: ScalingArgs,
    /// Start from a trajectory written by `invert` instead of inverting an input.
    #[arg(long, conflicts_with_all = ["point", "concept"])]
    pub trajectory: Option<PathBuf>,
    /// Also write an SVG plot (2-d worlds only).
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub scaling: ScalingArgs,
    #[command(flatten)]
    pub study: StudyFlags,
}

#[derive(Debug, Clone, Args, Default)]
pub struct StudyFlags {
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// Use a single concept instead of cycling through all labels.
    #[arg(long)]
    pub label: Option<String>,
    /// Posterior threshold for concept presence.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Clean draws per sample in the quality reference set.
    #[arg(long)]
    pub reference_per_sample: Option<usize>,
    /// Weak-concept pull toward the global mean, in [0, 1].
    #[arg(long)]
    pub pull: Option<f64>,
    /// Weak-concept standard-deviation factor, at least 1.
    #[arg(long)]
    pub inflate: Option<f64>,
    /// Also write an SVG scatter of inputs and outputs.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub study: StudyArgs,
    /// Run every gamma and regularization combination instead of the six-row table.
    #[arg(long)]
    pub full_grid: bool,
}

/// Contents of the `--config` file; every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub world: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub plot: Option<bool>,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub scaling: ScalingSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: Option<usize>,
    pub offset: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSection {
    pub omega_base: Option<f64>,
    pub gamma: Option<f64>,
    pub t_exit: Option<usize>,
    pub regularization: Option<Regularization>,
    pub refine_iters: Option<usize>,
    pub removal_label: Option<String>,
    pub estimate: Option<RegularizationEstimate>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub n_samples: Option<usize>,
    pub seed: Option<u64>,
    pub label: Option<String>,
    pub threshold: Option<f64>,
    pub reference_per_sample: Option<usize>,
    pub pull: Option<f64>,
    pub inflate: Option<f64>,
    pub threads: Option<usize>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Everything a command needs after merging flags, file and defaults.
pub struct Resolved {
    pub world: GaussianMixture,
    pub schedule: NoiseSchedule,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub threads: Option<usize>,
    pub file: ConfigFile,
}

impl Resolved {
    fn from_common(common: &CommonArgs) -> Result<Self> {
        let file = match &common.config {
            Some(path) => ConfigFile::load(path)?,
            None => ConfigFile::default(),
        };
        let world = match common.world.as_ref().or(file.world.as_ref()) {
            Some(path) => GaussianMixture::from_file(read_json(path)?)?,
            None => GaussianMixture::reference(),
        };
        let default = ScheduleSpec::default();
        let (default_steps, default_offset) = match default {
            ScheduleSpec::Cosine { steps, offset } => (steps, offset),
        };
        let schedule = NoiseSchedule::cosine(
            common
                .steps
                .or(file.schedule.steps)
                .unwrap_or(default_steps),
            common
                .schedule_offset
                .or(file.schedule.offset)
                .unwrap_or(default_offset),
        )?;
        let threads = common.threads.or(file.experiment.threads);
        if threads == Some(0) {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        Ok(Self {
            world,
            schedule,
            seed: common.seed.or(file.experiment.seed).unwrap_or(0),
            output_dir: common
                .output_dir
                .clone()
                .or(file.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from(".")),
            threads,
            file,
        })
    }

    fn scaling(&self, args: &ScalingArgs, default: ScalingConfig) -> Result<ScalingConfig> {
        let s = &self.file.scaling;
        let removal_condition = match args.removal_label.as_ref().or(s.removal_label.as_ref()) {
            Some(name) => Condition::Single(self.world.label_by_name(name)?),
            None => default.removal_condition.clone(),
        };
        Ok(ScalingConfig {
            omega_base: args
                .omega_base
                .or(s.omega_base)
                .unwrap_or(default.omega_base),
            gamma: args.gamma.or(s.gamma).unwrap_or(default.gamma),
            t_exit: args.t_exit.or(s.t_exit).unwrap_or(default.t_exit),
            regularization: args
                .regularization
                .map(|r| match r {
                    RegArg::Off => Regularization::Off,
                    RegArg::Full => Regularization::Full,
                    RegArg::EarlyExit => Regularization::EarlyExit,
                })
                .or(s.regularization)
                .unwrap_or(default.regularization),
            refine_iters: args
                .refine_iters
                .or(s.refine_iters)
                .unwrap_or(default.refine_iters),
            removal_condition,
            estimate: args
                .estimate
                .map(|e| match e {
                    EstimateArg::Anchored => RegularizationEstimate::Anchored,
                    EstimateArg::Midpoint => RegularizationEstimate::Midpoint,
                    EstimateArg::NoiseAverage => RegularizationEstimate::NoiseAverage,
                })
                .or(s.estimate)
                .unwrap_or(default.estimate),
        })
    }

    fn study(&self, flags: &StudyFlags) -> Result<(StudyOptions, WeakConcept)> {
        let e = &self.file.experiment;
        let defaults = StudyOptions::default();
        let label = match flags.label.as_ref().or(e.label.as_ref()) {
            Some(name) => Some(self.world.label_by_name(name)?),
            None => None,
        };
        let options = StudyOptions {
            n_samples: flags
                .n_samples
                .or(e.n_samples)
                .unwrap_or(defaults.n_samples),
            seed: self.seed,
            label,
            threshold: flags
                .threshold
                .or(e.threshold)
                .unwrap_or(defaults.threshold),
            reference_per_sample: flags
                .reference_per_sample
                .or(e.reference_per_sample)
                .unwrap_or(defaults.reference_per_sample),
        };
        let weak_default = WeakConcept::default();
        let weak = WeakConcept {
            pull: flags.pull.or(e.pull).unwrap_or(weak_default.pull),
            inflate: flags.inflate.or(e.inflate).unwrap_or(weak_default.inflate),
        };
        Ok((options, weak))
    }

    fn plot(&self, flag: bool) -> bool {
        flag || self.file.plot.unwrap_or(false)
    }

    fn in_pool<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        match self.threads {
            None => f(),
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Runtime(format!("thread pool: {e}")))?
                .install(f),
        }
    }

    fn ensure_output_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.output_dir).map_err(|source| Error::Io {
            path: self.output_dir.display().to_string(),
            source,
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Runtime(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut record = |r: &[String]| {
        w.write_record(r)
            .map_err(|e| Error::Runtime(format!("writing {}: {e}", path.display())))
    };
    record(header)?;
    for row in rows {
        record(row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Runtime(format!("writing {}: {e}", path.display())))?;
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn num(v: f64) -> String {
    v.to_string()
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn coords_header(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|i| format!("{prefix}{i}")).collect()
}

fn coords(v: Option<&Vec<f64>>, d: usize) -> Vec<String> {
    match v {
        Some(v) => v.iter().map(|x| num(*x)).collect(),
        None => vec![String::new(); d],
    }
}

fn parse_point(text: &str, dimension: usize) -> Result<Vec<f64>> {
    let point: Vec<f64> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad coordinate {s:?} in --point")))
        })
        .collect::<Result<_>>()?;
    if point.len() != dimension {
        return Err(Error::Config(format!(
            "--point has {} coordinates, the world has dimension {dimension}",
            point.len()
        )));
    }
    if point.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("--point must be finite".into()));
    }
    Ok(point)
}

/// The input point and concept of `invert` and `scale`.
fn resolve_input(r: &Resolved, input: &InputArgs) -> Result<(LabelId, Vec<f64>)> {
    let name = input
        .concept
        .as_ref()
        .ok_or_else(|| Error::Config("--concept is required".into()))?;
    let label = r.world.label_by_name(name)?;
    let point = match &input.point {
        Some(text) => parse_point(text, r.world.dimension())?,
        None => {
            r.world
                .sample_data(&Condition::Single(label), r.seed)?
                .coords
        }
    };
    Ok((label, point))
}

/// Parses arguments and runs a command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_runtime() {
        EXIT_RUNTIME
    } else {
        EXIT_CONFIG
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenWorld(a) => cmd_gen_world(&a),
        Command::Invert(a) => cmd_invert(&a),
        Command::Scale(a) => cmd_scale(&a),
        Command::RemovalStudy(a) => cmd_removal_study(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::WeakGen(a) => cmd_weak_gen(&a),
    }
}

pub fn cmd_gen_world(args: &GenWorldArgs) -> Result<()> {
    if args.dimension == 0 {
        return Err(Error::Config("dimension must be at least 1".into()));
    }
    let world = match args.seed {
        None if args.dimension == 2 && args.labels == 4 => GaussianMixture::reference(),
        seed => GaussianMixture::random(args.dimension, args.labels, seed.unwrap_or(0))?,
    };
    write_json(&args.out, &world.to_file())
}

pub fn cmd_invert(args: &InvertArgs) -> Result<()> {
    let r = Resolved::from_common(&args.common)?;
    let (label, x0) = resolve_input(&r, &args.input)?;
    let refine = args
        .refine_iters
        .or(r.file.scaling.refine_iters)
        .unwrap_or(ScalingConfig::default().refine_iters);
    let predictor = AnalyticPredictor::new(&r.world, &r.schedule);
    let trajectory = invert(
        &x0,
        &Condition::Single(label),
        &predictor,
        &r.schedule,
        refine,
    )?;
    r.ensure_output_dir()?;
    write_json(&r.out("trajectory.json"), &trajectory)
}

#[derive(Debug, Serialize)]
struct Scores {
    concept_score_in: f64,
    concept_score_out: f64,
    present_in: bool,
    present_out: bool,
    fidelity: f64,
}

#[derive(Debug, Serialize)]
struct ScaleReport<'a> {
    run_id: &'a str,
    concept: &'a str,
    reconstruction_mode: bool,
    config: &'a ScalingConfig,
    schedule: Option<ScheduleSpec>,
    input: &'a [f64],
    output: &'a [f64],
    scores: Scores,
    trace: &'a [StepRecord],
}

pub fn cmd_scale(args: &ScaleArgs) -> Result<()> {
    let r = Resolved::from_common(&args.common)?;
    let config = r.scaling(&args.scaling, ScalingConfig::default())?;
    let predictor = AnalyticPredictor::new(&r.world, &r.schedule);
    let trajectory = match &args.trajectory {
        Some(path) => {
            let t: InversionTrajectory = read_json(path)?;
            t.validate()?;
            t
        }
        None => {
            let (label, x0) = resolve_input(&r, &args.input)?;
            config.validate(r.schedule.steps(), &Condition::Single(label))?;
            invert(
                &x0,
                &Condition::Single(label),
                &predictor,
                &r.schedule,
                config.refine_iters,
            )?
        }
    };
    let label = match trajectory.condition() {
        Condition::Single(label) => *label,
        other => {
            return Err(Error::Condition(format!(
                "scaling needs a single-concept trajectory, got {other:?}"
            )))
        }
    };
    let x0 = trajectory.start().to_vec();
    let outcome = scale_from_trajectory(trajectory, &config, &predictor, &r.schedule)?;
    let threshold = StudyOptions::default().threshold;
    let scores = Scores {
        concept_score_in: concept_score(&r.world, &x0, label)?,
        concept_score_out: concept_score(&r.world, &outcome.output, label)?,
        present_in: concept_presence(&r.world, &x0, label, threshold)?,
        present_out: concept_presence(&r.world, &outcome.output, label, threshold)?,
        fidelity: fidelity_distance(&x0, &outcome.output)?,
    };
    let report = ScaleReport {
        run_id: "scale",
        concept: r.world.label_name(label)?,
        reconstruction_mode: config.is_reconstruction(),
        config: &config,
        schedule: r.schedule.spec(),
        input: &x0,
        output: &outcome.output,
        scores,
        trace: &outcome.trace,
    };
    r.ensure_output_dir()?;
    write_json(&r.out("scale.json"), &report)?;
    write_trace_csv(&r.out("scale_trace.csv"), &outcome.trace)?;
    if r.plot(args.plot) && r.world.dimension() == 2 {
        let layers = [
            Layer::path(
                "inversion",
                "#ff7f0e",
                outcome.trajectory.latents().to_vec(),
            ),
            Layer::path(
                "sampling",
                "#2ca02c",
                outcome.trace.iter().map(|s| s.latent.clone()).collect(),
            ),
            Layer::points("input", "#1f77b4", vec![x0.clone()]),
            Layer::points("output", "#d62728", vec![outcome.output.clone()]),
        ];
        write_text(
            &r.out("scale.svg"),
            &render_svg(&r.world, &layers, "concept scaling")?,
        )?;
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn write_trace_csv(path: &Path, trace: &[StepRecord]) -> Result<()> {
    let d = trace.first().map_or(0, |s| s.latent.len());
    let mut header: Vec<String> = [
        "t",
        "omega",
        "omega_reg",
        "norm_eps_null",
        "norm_eps_rec",
        "norm_eps_bar",
        "norm_eps_hat",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(coords_header("x", d));
    let rows: Vec<Vec<String>> = trace
        .iter()
        .map(|s| {
            let b = &s.branches;
            let mut row = vec![
                s.t.to_string(),
                num(s.omega),
                num(s.omega_reg),
                num(norm(&b.eps_null)),
                num(norm(&b.eps_rec)),
                opt_num(b.eps_bar.as_deref().map(norm)),
                num(norm(&b.eps_hat)),
            ];
            row.extend(coords(Some(&s.latent), d));
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

fn write_samples_csv(path: &Path, results: &[ExperimentResult]) -> Result<()> {
    let d = results
        .first()
        .and_then(|r| r.per_sample.first())
        .map_or(0, |s| s.input.len());
    let mut header: Vec<String> = ["run_id", "index", "seed", "label"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(coords_header("in_", d));
    header.extend(coords_header("out_", d));
    header.extend(
        [
            "concept_score_in",
            "concept_score_out",
            "fidelity",
            "present_in",
            "present_out",
            "removed",
            "error",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    let mut rows = Vec::new();
    for r in results {
        for s in &r.per_sample {
            let mut row = vec![
                r.run_id.clone(),
                s.index.to_string(),
                s.seed.to_string(),
                s.label.clone(),
            ];
            row.extend(coords(Some(&s.input), d));
            row.extend(coords(s.output.as_ref(), d));
            row.extend([
                num(s.concept_score_in),
                opt_num(s.concept_score_out),
                opt_num(s.fidelity),
                s.present_in.to_string(),
                s.present_out.map(|p| p.to_string()).unwrap_or_default(),
                s.removed.to_string(),
                s.error.clone().unwrap_or_default(),
            ]);
            rows.push(row);
        }
    }
    write_csv(path, &header, &rows)
}

fn write_summary_csv(path: &Path, results: &[ExperimentResult]) -> Result<()> {
    let header: Vec<String> = [
        "run_id",
        "omega_base",
        "gamma",
        "regularization",
        "t_exit",
        "n_samples",
        "n_failed",
        "removal_rate",
        "mean_concept_score_in",
        "mean_concept_score",
        "energy_distance",
        "frechet_distance",
        "mean_fidelity",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows = results
        .iter()
        .map(|r| {
            let a = &r.aggregates;
            vec![
                r.run_id.clone(),
                num(r.config.omega_base),
                num(r.config.gamma),
                reg_name(r.config.regularization).into(),
                r.config.t_exit.to_string(),
                a.n_samples.to_string(),
                a.n_failed.to_string(),
                num(a.removal_rate),
                num(a.mean_concept_score_in),
                num(a.mean_concept_score),
                num(a.energy_distance),
                num(a.frechet_distance),
                num(a.mean_fidelity),
            ]
        })
        .collect::<Vec<_>>();
    write_csv(path, &header, &rows)
}

fn reg_name(r: Regularization) -> &'static str {
    match r {
        Regularization::Off => "off",
        Regularization::Full => "full",
        Regularization::EarlyExit => "early_exit",
    }
}

fn study_plot(r: &Resolved, result: &ExperimentResult, name: &str) -> Result<()> {
    if r.world.dimension() != 2 {
        return Ok(());
    }
    let inputs = result.per_sample.iter().map(|s| s.input.clone()).collect();
    let layers = [
        Layer::points("inputs", "#1f77b4", inputs),
        Layer::points("outputs", "#d62728", result.outputs()),
    ];
    write_text(
        &r.out(&format!("{name}.svg")),
        &render_svg(&r.world, &layers, &result.run_id)?,
    )
}

pub fn cmd_removal_study(args: &StudyArgs) -> Result<()> {
    let r = Resolved::from_common(&args.common)?;
    let config = r.scaling(&args.scaling, removal_config(0.0))?;
    let (options, _) = r.study(&args.study)?;
    let result = r.in_pool(|| removal_study(&r.world, &r.schedule, &config, &options))?;
    r.ensure_output_dir()?;
    write_json(&r.out("removal-study.json"), &result)?;
    write_samples_csv(
        &r.out("removal-study_samples.csv"),
        std::slice::from_ref(&result),
    )?;
    write_summary_csv(
        &r.out("removal-study_summary.csv"),
        std::slice::from_ref(&result),
    )?;
    if r.plot(args.study.plot) {
        study_plot(&r, &result, "removal-study")?;
    }
    Ok(())
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let a = &args.study;
    let r = Resolved::from_common(&a.common)?;
    let base = r.scaling(&a.scaling, ScalingConfig::default())?;
    let (options, weak) = r.study(&a.study)?;
    let cells = if args.full_grid {
        full_grid(
            &[0.0, 0.5, 1.0, 3.0],
            &[
                Regularization::Off,
                Regularization::Full,
                Regularization::EarlyExit,
            ],
        )
    } else {
        table2_cells()
    };
    let results =
        r.in_pool(|| ablation_run(&r.world, &r.schedule, &base, &cells, weak, &options))?;
    r.ensure_output_dir()?;
    write_json(&r.out("ablate.json"), &results)?;
    write_samples_csv(&r.out("ablate_samples.csv"), &results)?;
    write_summary_csv(&r.out("ablate_summary.csv"), &results)?;
    let header: Vec<String> = [
        "gamma",
        "regularization",
        "energy_distance",
        "mean_concept_score",
        "mean_fidelity",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|res| {
            vec![
                num(res.config.gamma),
                reg_name(res.config.regularization).into(),
                num(res.aggregates.energy_distance),
                num(res.aggregates.mean_concept_score),
                num(res.aggregates.mean_fidelity),
            ]
        })
        .collect();
    write_csv(&r.out("ablate_table.csv"), &header, &rows)?;
    if r.plot(a.study.plot) {
        for res in &results {
            study_plot(&r, res, &format!("ablate_{}", res.run_id))?;
        }
    }
    Ok(())
}

pub fn cmd_weak_gen(args: &StudyArgs) -> Result<()> {
    let r = Resolved::from_common(&args.common)?;
    let (options, weak) = r.study(&args.study)?;
    let result = weak_gen(&r.world, weak, &options)?;
    r.ensure_output_dir()?;
    write_json(&r.out("weak-gen.json"), &result)?;
    let d = r.world.dimension();
    let mut header: Vec<String> = ["index", "seed", "label"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(coords_header("x", d));
    header.extend(["concept_score".to_string(), "present".to_string()]);
    let rows: Vec<Vec<String>> = result
        .samples
        .iter()
        .map(|s| {
            let mut row = vec![s.index.to_string(), s.seed.to_string(), s.label.clone()];
            row.extend(coords(Some(&s.coords), d));
            row.extend([num(s.concept_score), s.present.to_string()]);
            row
        })
        .collect();
    write_csv(&r.out("weak-gen.csv"), &header, &rows)?;
    if r.plot(args.study.plot) && d == 2 {
        let pts = result.samples.iter().map(|s| s.coords.clone()).collect();
        let svg = render_svg(
            &r.world,
            &[Layer::points("weak inputs", "#1f77b4", pts)],
            "weak-concept inputs",
        )?;
        write_text(&r.out("weak-gen.svg"), &svg)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn point_parsing() {
        assert_eq!(parse_point("1.5, -2", 2).unwrap(), vec![1.5, -2.0]);
        assert!(parse_point("1", 2).is_err());
        assert!(parse_point("a,b", 2).is_err());
        assert!(parse_point("inf,0", 2).is_err());
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(
            &path,
            "[scaling]\nomega_base = 2.0\ngamma = 1.0\n[experiment]\nseed = 9\n",
        )
        .unwrap();
        let common = CommonArgs {
            config: Some(path),
            ..CommonArgs::default()
        };
        let r = Resolved::from_common(&common).unwrap();
        assert_eq!(r.seed, 9);
        let flags = ScalingArgs {
            gamma: Some(0.5),
            ..ScalingArgs::default()
        };
        let c = r.scaling(&flags, ScalingConfig::default()).unwrap();
        assert_eq!(c.omega_base, 2.0);
        assert_eq!(c.gamma, 0.5);
        assert_eq!(c.t_exit, 35);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[scaling]\nomega = 2.0\n").unwrap();
        assert!(matches!(ConfigFile::load(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(
            exit_code(&Error::Numeric {
                step: 3,
                message: "x".into()
            }),
            EXIT_RUNTIME
        );
        assert_eq!(exit_code(&Error::Runtime("x".into())), EXIT_RUNTIME);
        assert_eq!(run(["conscale", "gen-world"]), EXIT_CONFIG);
        assert_eq!(run(["conscale", "--help"]), EXIT_OK);
    }
}
