//! Command-line surface. Every subcommand's arguments are also its recorded
//! configuration: outputs embed them, and `--config` replays them.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use glucoloop::fit::{FitConfig, Optimizer, PipelineConfig};
use glucoloop::model::{ModelParams, Parameter, A3_DEFAULT, DEFAULT_DT};
use glucoloop::signal::{Column, CsvLayout, ExtractConfig, GlucoseUnit};
use glucoloop::stats::{DEFAULT_RESAMPLES, DEFAULT_SEED};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Parser)]
#[command(
    name = "glucoloop",
    version,
    about = "Closed-loop PI model of glucose homeostasis: simulation, stability, trapping bounds, CGM fitting and cohort statistics"
)]
pub struct Cli {
    /// Seed for all randomness (bootstrap resampling).
    #[arg(long, global = true, default_value_t = DEFAULT_SEED, help_heading = "Global options")]
    pub seed: u64,

    /// Worker threads for `fit` and `cohort` (default: all cores).
    #[arg(long, global = true, help_heading = "Global options")]
    pub jobs: Option<usize>,

    /// Replay the configuration embedded in a previous output (or a bare config JSON).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// With --config: write to this path instead of the recorded output.
    #[arg(long, value_name = "PATH", requires = "config")]
    pub replay_out: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count, help_heading = "Global options")]
    pub verbose: u8,

    /// Only log errors.
    #[arg(short, long, global = true, conflicts_with = "verbose", help_heading = "Global options")]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

/// The effective configuration of one run, as embedded in its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: Option<usize>,
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Simulate one trajectory and write it as CSV.
    Simulate(SimulateArgs),
    /// Equilibrium for a constant net input.
    Equilibrium(PointArgs),
    /// Linear stability of the equilibrium for a constant net input.
    Stability(PointArgs),
    /// Lyapunov trapping bound for constant or bounded variable input.
    Trap(TrapArgs),
    /// Smooth CGM traces and extract peaks and troughs as JSON lines.
    Extract(ExtractArgs),
    /// Fit the model to each excursion of CGM traces or extracted excursions.
    Fit(FitArgs),
    /// Bootstrap subject means, cohort table and normality tests from fits.
    Cohort(CohortArgs),
    /// Plot-ready tables and a text summary from fits and a cohort.
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Equilibrium(_) => "equilibrium",
            Command::Stability(_) => "stability",
            Command::Trap(_) => "trap",
            Command::Extract(_) => "extract",
            Command::Fit(_) => "fit",
            Command::Cohort(_) => "cohort",
            Command::Report(_) => "report",
        }
    }

    /// Points the primary output somewhere else (used when replaying).
    pub fn redirect(&mut self, path: PathBuf) {
        match self {
            Command::Simulate(a) => a.out = Some(path),
            Command::Equilibrium(a) | Command::Stability(a) => a.out = Some(path),
            Command::Trap(a) => a.out = Some(path),
            Command::Extract(a) => a.out = Some(path),
            Command::Fit(a) => a.out = Some(path),
            Command::Cohort(a) => a.out = Some(path),
            Command::Report(a) => a.out_dir = path,
        }
    }
}

/// Model parameters; defaults are the midpoints of the typical ranges.
#[derive(Debug, Clone, Copy, PartialEq, Args, Serialize, Deserialize)]
pub struct ParamArgs {
    /// Proportional gain A1, L/(min mmol).
    #[arg(long, default_value_t = Parameter::A1.midpoint())]
    pub a1: f64,
    /// Integral gain A2, L/(min mmol).
    #[arg(long, default_value_t = Parameter::A2.midpoint())]
    pub a2: f64,
    /// Basal metabolic rate A3, mmol/(L min).
    #[arg(long, default_value_t = A3_DEFAULT)]
    pub a3: f64,
    /// Inverse delay time scale lambda, 1/min.
    #[arg(long, default_value_t = Parameter::Lambda.midpoint())]
    pub lambda: f64,
    /// Set-point glucose, mmol/L.
    #[arg(long, default_value_t = Parameter::EBar.midpoint())]
    pub ebar: f64,
}

impl ParamArgs {
    pub fn params(&self) -> Result<ModelParams<f64>> {
        Ok(ModelParams::new(self.a1, self.a2, self.a3, self.lambda, self.ebar)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Formulation {
    /// du/dt, de/dt system.
    Planar,
    /// Original delay-integral form with constant pre-start history.
    Integral,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub params: ParamArgs,
    /// Constant net input G = F - A3, mmol/(L min). Default 0 when no pulse is given.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "amplitude")]
    pub g: Option<f64>,
    /// Gaussian input pulse amplitude, mmol/(L min).
    #[arg(long, allow_hyphen_values = true)]
    pub amplitude: Option<f64>,
    /// Pulse centre, min.
    #[arg(long, default_value_t = 60.0)]
    pub center: f64,
    /// Pulse width (standard deviation), min.
    #[arg(long, default_value_t = 20.0)]
    pub width: f64,
    /// Initial glucose deviation e0, mmol/L.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub e0: f64,
    /// Initial control u0 (planar form only); default A1 * e0.
    #[arg(long, allow_hyphen_values = true)]
    pub u0: Option<f64>,
    /// End time, min.
    #[arg(long, default_value_t = 600.0)]
    pub t_end: f64,
    /// Euler step, min.
    #[arg(long, default_value_t = DEFAULT_DT)]
    pub dt: f64,
    #[arg(long, value_enum, default_value_t = Formulation::Planar)]
    pub form: Formulation,
    /// Output CSV (default stdout).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PointArgs {
    #[command(flatten)]
    pub params: ParamArgs,
    /// Constant net input G, mmol/(L min).
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub g: f64,
    /// Output JSON (default stdout).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["g", "g_range", "sweep"])))]
pub struct TrapArgs {
    #[command(flatten)]
    pub params: ParamArgs,
    /// Constant net input G.
    #[arg(long, allow_hyphen_values = true)]
    pub g: Option<f64>,
    /// Variable input bounded by G_MIN:G_MAX.
    #[arg(long, value_name = "G_MIN:G_MAX", allow_hyphen_values = true)]
    pub g_range: Option<String>,
    /// CSV of (g, C, max glucose) on N points of G_MIN:G_MAX.
    #[arg(long, value_name = "G_MIN:G_MAX:N", allow_hyphen_values = true)]
    pub sweep: Option<String>,
    /// Output JSON, or CSV with --sweep (default stdout).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

/// Where traces come from and how to read them.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct InputArgs {
    /// CGM CSV files (one subject per file unless --subject-col is given).
    #[arg(long, short, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Study label carried into every record.
    #[arg(long, default_value = "study")]
    pub study: String,
    /// Time column, by header name or zero-based index.
    #[arg(long, default_value = "0", value_parser = parse_column)]
    pub time_col: Column,
    /// Glucose column, by header name or zero-based index.
    #[arg(long, default_value = "1", value_parser = parse_column)]
    pub glucose_col: Column,
    /// Subject-id column for files holding several subjects.
    #[arg(long, value_parser = parse_column)]
    pub subject_col: Option<Column>,
    /// Glucose unit of the file: mmol or mgdl.
    #[arg(long, default_value = "mmol")]
    pub unit: GlucoseUnit,
    /// Nominal sampling interval, min.
    #[arg(long, default_value_t = 15.0)]
    pub interval_min: f64,
}

impl InputArgs {
    pub fn layout(&self) -> CsvLayout {
        CsvLayout {
            time_col: self.time_col.clone(),
            glucose_col: self.glucose_col.clone(),
            unit: self.unit,
            nominal_interval: self.interval_min,
            subject_col: self.subject_col.clone(),
        }
    }
}

fn parse_column(s: &str) -> Result<Column, String> {
    if s.trim().is_empty() {
        return Err("column must be a header name or an index".into());
    }
    Ok(Column::from(s))
}

#[derive(Debug, Clone, Copy, PartialEq, Args, Serialize, Deserialize)]
pub struct SmoothingArgs {
    /// Gaussian smoothing width, min (default: the sampling interval).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Smallest |deviation| kept, mmol/L.
    #[arg(long, default_value_t = ExtractConfig::default().min_deviation)]
    pub min_dev: f64,
    /// Second derivatives within this band count as zero, mmol/(L min^2).
    #[arg(long, default_value_t = ExtractConfig::default().curvature_tolerance)]
    pub curvature_tol: f64,
    /// Turn-backs on a flank smaller than this are merged, mmol/L.
    #[arg(long, default_value_t = ExtractConfig::default().merge_tolerance)]
    pub merge_tol: f64,
}

impl SmoothingArgs {
    pub fn extract_config(&self) -> ExtractConfig {
        ExtractConfig {
            min_deviation: self.min_dev,
            curvature_tolerance: self.curvature_tol,
            merge_tolerance: self.merge_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
    /// Output JSON lines (default stdout).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Args, Serialize, Deserialize)]
pub struct OptimizerArgs {
    /// Euler step for fitting, min (default: a fifth of the sampling interval).
    #[arg(long)]
    pub dt: Option<f64>,
    /// levenberg-marquardt (lm) or gradient-descent (gd).
    #[arg(long, default_value = "lm")]
    pub optimizer: Optimizer,
    /// Iteration cap for each start.
    #[arg(long, default_value_t = FitConfig::default().max_iterations)]
    pub max_iter: usize,
    /// Stop when the projected gradient norm falls below this.
    #[arg(long, default_value_t = FitConfig::default().gradient_tolerance)]
    pub gradient_tol: f64,
    /// Stop when E falls below this.
    #[arg(long, default_value_t = FitConfig::default().error_tolerance)]
    pub error_tol: f64,
    /// Basal rate A3 held fixed during fitting.
    #[arg(long, default_value_t = A3_DEFAULT)]
    pub a3: f64,
    /// Only start from the data-driven initial pulse.
    #[arg(long)]
    pub no_multi_start: bool,
}

impl OptimizerArgs {
    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            optimizer: self.optimizer,
            max_iterations: self.max_iter,
            gradient_tolerance: self.gradient_tol,
            error_tolerance: self.error_tol,
            dt: self.dt,
            a3: self.a3,
            multi_start: !self.no_multi_start,
            ..FitConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FitArgs {
    /// CGM CSV files, or excursion JSON lines written by `extract`.
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    /// Output JSON lines (default stdout).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Also write observed-vs-model CSVs for every fit into this directory.
    #[arg(long, value_name = "DIR")]
    pub emit_curves: Option<PathBuf>,
    /// Also write per-fit wall times (CSV) here; kept apart so fits stay reproducible.
    #[arg(long, value_name = "FILE")]
    pub timings: Option<PathBuf>,
}

impl FitArgs {
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            sigma: self.smoothing.sigma,
            extract: self.smoothing.extract_config(),
            fit: self.optimizer.fit_config(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CohortArgs {
    /// Fit JSON lines written by `fit` (several studies may be combined).
    #[arg(long, required = true, num_args = 1..)]
    pub fits: Vec<PathBuf>,
    /// Bootstrap resamples per subject mean.
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub resamples: usize,
    /// Output JSON (default stdout).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Fit JSON lines written by `fit`.
    #[arg(long, required = true, num_args = 1..)]
    pub fits: Vec<PathBuf>,
    /// Cohort JSON written by `cohort`; enables histogram, Q-Q and scatter tables.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Histogram bins.
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Directory for all report files (created if missing).
    #[arg(long)]
    pub out_dir: PathBuf,
}
