//! Conformation of the model to extracted excursions.
//!
//! Each excursion gets its own `(a1, a2, lambda)` and Gaussian input pulse
//! `(amplitude, center, width)`, found by minimising the normalised squared
//! error
//!
//! ```text
//! E = sum_i (e~(t_i) - e(t_i))^2 / sum_i e~(t_i)^2
//! ```
//!
//! The model is run with [`simulate_integral`] from `e(t0) = e~(t0)` with a
//! constant pre-excursion history, and read off at the recorded times by
//! nearest Euler step. `a3` and `e_bar` are held fixed.
//!
//! Two box-constrained optimisers are provided, both with central-difference
//! derivatives and both monotone in `E`: a damped Gauss-Newton
//! (Levenberg-Marquardt) iteration, the default, and projected gradient
//! descent with a backtracking learning rate.

use std::time::Instant;

use nalgebra::{SMatrix, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{simulate_integral, InputPulse, ModelParams, Parameter, A3_DEFAULT};
use crate::signal::{extract_excursions, smooth, Excursion, ExcursionKind, ExtractConfig, GlucoseTrace};

/// Objective value reported when the model leaves its domain.
pub const ESCAPE_SENTINEL: f64 = 1e30;

/// Minimum number of samples in a fittable excursion.
pub const MIN_SAMPLES: usize = 4;

/// Damped Gauss-Newton stops once an accepted step lowers E by less than this fraction.
const RELATIVE_DECREASE_TOLERANCE: f64 = 1e-10;

/// ... or moves the scaled parameters by less than this fraction of their norm.
const STEP_TOLERANCE: f64 = 1e-10;

const NPARAM: usize = 6;
type Vec6 = SVector<f64, NPARAM>;
type Mat6 = SMatrix<f64, NPARAM, NPARAM>;

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Box constraints on the model gains and the pulse.
///
/// Pulse center and width bounds are set per excursion from its duration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub a1: Interval,
    pub a2: Interval,
    pub lambda: Interval,
    /// Largest pulse |amplitude|, mmol/(L min).
    pub max_amplitude: f64,
}

impl Default for ParamBounds {
    /// Typical ranges with the upper ends doubled; lower bounds 0 (1e-4 for lambda).
    fn default() -> Self {
        let widen = |p: Parameter| 2.0 * p.typical_range().1;
        ParamBounds {
            a1: Interval::new(0.0, widen(Parameter::A1)),
            a2: Interval::new(0.0, widen(Parameter::A2)),
            lambda: Interval::new(1e-4, widen(Parameter::Lambda)),
            max_amplitude: 1.0,
        }
    }
}

/// Starting `(a1, a2, lambda)` for one excursion kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub a1: f64,
    pub a2: f64,
    pub lambda: f64,
}

/// Initial-guess policy: gains from cohort means per kind; pulse from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialGuess {
    pub peak: Gains,
    pub trough: Gains,
}

impl Default for InitialGuess {
    fn default() -> Self {
        InitialGuess {
            peak: Gains {
                a1: 0.0073,
                a2: 0.0033,
                lambda: 0.0289,
            },
            trough: Gains {
                a1: 0.0208,
                a2: 0.0354,
                lambda: 0.0395,
            },
        }
    }
}

impl InitialGuess {
    pub fn for_kind(&self, kind: ExcursionKind) -> Gains {
        match kind {
            ExcursionKind::Peak => self.peak,
            ExcursionKind::Trough => self.trough,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Damped Gauss-Newton on the residual vector.
    #[default]
    LevenbergMarquardt,
    /// Projected gradient descent with backtracking.
    GradientDescent,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lm" | "levenberg-marquardt" => Ok(Optimizer::LevenbergMarquardt),
            "gd" | "gradient-descent" => Ok(Optimizer::GradientDescent),
            other => Err(Error::InvalidInput(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Step-size schedule for gradient descent: grow after an accepted step,
/// shrink (backtrack) after a rejected one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRate {
    pub initial: f64,
    pub growth: f64,
    pub shrink: f64,
}

impl Default for LearningRate {
    fn default() -> Self {
        LearningRate {
            initial: 0.1,
            growth: 1.25,
            shrink: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub optimizer: Optimizer,
    pub learning_rate: LearningRate,
    pub max_iterations: usize,
    /// Stop when the projected gradient norm (scaled coordinates) drops below this.
    pub gradient_tolerance: f64,
    /// Stop when E drops below this.
    pub error_tolerance: f64,
    /// Relative central-difference step.
    pub gradient_step: f64,
    pub bounds: ParamBounds,
    pub initial: InitialGuess,
    /// Simulation step in minutes; `None` uses one fifth of the sampling interval.
    pub dt: Option<f64>,
    pub a3: f64,
    /// Also start from a grid of earlier, narrower pulses and keep the lowest E.
    #[serde(default = "yes")]
    pub multi_start: bool,
}

fn yes() -> bool {
    true
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            optimizer: Optimizer::LevenbergMarquardt,
            learning_rate: LearningRate::default(),
            max_iterations: 5000,
            gradient_tolerance: 1e-8,
            error_tolerance: 1e-14,
            gradient_step: 1e-6,
            bounds: ParamBounds::default(),
            initial: InitialGuess::default(),
            dt: None,
            a3: A3_DEFAULT,
            multi_start: true,
        }
    }
}

impl FitConfig {
    pub fn dt_for(&self, excursion: &Excursion) -> f64 {
        self.dt.unwrap_or(excursion.nominal_interval / 5.0)
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.bounds;
        let ok = b.a1.lo >= 0.0
            && b.a2.lo >= 0.0
            && b.lambda.lo > 0.0
            && b.a1.lo <= b.a1.hi
            && b.a2.lo <= b.a2.hi
            && b.lambda.lo <= b.lambda.hi
            && b.max_amplitude > 0.0;
        if !ok {
            return Err(Error::InvalidParameter(
                "bounds must keep a1, a2 >= 0, lambda > 0 and a positive amplitude range".into(),
            ));
        }
        if self.max_iterations == 0 || !(self.gradient_step > 0.0) || !(self.a3 >= 0.0) {
            return Err(Error::InvalidParameter(
                "max_iterations, gradient_step must be positive and a3 nonnegative".into(),
            ));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) {
                return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
            }
        }
        let lr = &self.learning_rate;
        if !(lr.initial > 0.0 && lr.growth >= 1.0 && lr.shrink > 0.0 && lr.shrink < 1.0) {
            return Err(Error::InvalidParameter("invalid learning-rate schedule".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    GradientTolerance,
    ErrorTolerance,
    /// No further decrease is achievable at working precision.
    Stalled,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FitFlags {
    pub multimodal: bool,
    pub boundary_pinned: bool,
    /// The final model left the domain `e > -e_bar`.
    pub escaped: bool,
    pub baseline_atypical: bool,
    pub baseline_suspect: bool,
}

/// Conformed parameters for one excursion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub subject_id: String,
    pub excursion_index: usize,
    pub kind: ExcursionKind,
    pub t0: f64,
    pub n: usize,
    pub params: ModelParams<f64>,
    /// Pulse center is on the excursion's own clock (same origin as `t0`).
    pub pulse: InputPulse<f64>,
    pub error: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub flags: FitFlags,
}

/// Model output at the recorded times of an excursion.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub error: f64,
    pub model: Vec<f64>,
    pub escaped: bool,
}

/// E for two equally long series, normalised by the observed series.
pub fn normalized_error(observed: &[f64], model: &[f64]) -> f64 {
    let num: f64 = observed.iter().zip(model).map(|(o, m)| (o - m) * (o - m)).sum();
    let den: f64 = observed.iter().map(|o| o * o).sum();
    num / den
}

fn check_excursion(excursion: &Excursion) -> Result<()> {
    if excursion.len() < MIN_SAMPLES {
        return Err(Error::Degenerate(format!(
            "excursion has {} samples, need at least {MIN_SAMPLES}",
            excursion.len()
        )));
    }
    if excursion.deviation.len() != excursion.times.len() {
        return Err(Error::InvalidInput("deviation and time series differ in length".into()));
    }
    let den: f64 = excursion.deviation.iter().map(|d| d * d).sum();
    if !(den > 0.0) || !den.is_finite() {
        return Err(Error::Degenerate("excursion deviation is identically zero".into()));
    }
    Ok(())
}

/// Simulated deviation at the excursion's sample times, on the excursion clock
/// shifted to start at 0. `None` if the model leaves the domain before the end.
fn simulate_at_samples(
    rel_times: &[f64],
    initial_e: f64,
    params: &ModelParams<f64>,
    pulse: &InputPulse<f64>,
    dt: f64,
) -> Option<Vec<f64>> {
    let t_end = *rel_times.last()?;
    let traj = simulate_integral(params, pulse, initial_e, &[], 0.0, t_end, dt).ok()?;
    if traj.escaped {
        return None;
    }
    rel_times
        .iter()
        .map(|&t| {
            let k = (t / dt).round() as usize;
            traj.states.get(k).map(|s| s.e)
        })
        .collect()
}

/// Normalised squared error of the model against an excursion.
///
/// The pulse center is on the excursion clock. A run that leaves the model
/// domain evaluates to [`ESCAPE_SENTINEL`] with `escaped` set.
pub fn objective(
    excursion: &Excursion,
    params: &ModelParams<f64>,
    pulse: &InputPulse<f64>,
    dt: f64,
) -> Result<Evaluation> {
    check_excursion(excursion)?;
    params.validate()?;
    let t0 = excursion.times[0];
    let rel: Vec<f64> = excursion.times.iter().map(|t| t - t0).collect();
    let shifted = InputPulse {
        center: pulse.center - t0,
        ..*pulse
    };
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    Ok(
        match simulate_at_samples(&rel, excursion.deviation[0], params, &shifted, dt) {
            Some(model) => Evaluation {
                error: normalized_error(&excursion.deviation, &model),
                model,
                escaped: false,
            },
            None => Evaluation {
                error: ESCAPE_SENTINEL,
                model: Vec::new(),
                escaped: true,
            },
        },
    )
}

/// The fitting problem in scaled coordinates `x = theta / scale`.
struct Problem<'a> {
    observed: &'a [f64],
    rel_times: Vec<f64>,
    initial_e: f64,
    e_bar: f64,
    a3: f64,
    dt: f64,
    norm: f64,
    scale: Vec6,
    lo: Vec6,
    hi: Vec6,
    rel_step: f64,
    evaluations: std::cell::Cell<usize>,
}

impl Problem<'_> {
    fn theta(&self, x: &Vec6) -> Vec6 {
        x.component_mul(&self.scale)
    }

    fn project(&self, x: &Vec6) -> Vec6 {
        Vec6::from_fn(|i, _| x[i].clamp(self.lo[i], self.hi[i]))
    }

    /// Residuals `(e~ - e) / |e~|`, so that `E = |r|^2`.
    fn residuals(&self, x: &Vec6) -> Option<Vec<f64>> {
        self.evaluations.set(self.evaluations.get() + 1);
        let th = self.theta(x);
        let params = ModelParams {
            a1: th[0],
            a2: th[1],
            a3: self.a3,
            lambda: th[2],
            e_bar: self.e_bar,
        };
        params.validate().ok()?;
        let pulse = InputPulse {
            amplitude: th[3],
            center: th[4],
            width: th[5],
        };
        let model = simulate_at_samples(&self.rel_times, self.initial_e, &params, &pulse, self.dt)?;
        Some(
            self.observed
                .iter()
                .zip(&model)
                .map(|(o, m)| (o - m) / self.norm)
                .collect(),
        )
    }

    fn error(r: &[f64]) -> f64 {
        r.iter().map(|v| v * v).sum()
    }

    fn step_size(&self, x: &Vec6, i: usize) -> f64 {
        // relative step in the original units, floor at the parameter scale
        self.rel_step * x[i].abs().max(1.0)
    }

    /// Central-difference Jacobian of the residuals, one-sided at bounds or
    /// where one side leaves the domain. Columns that cannot be estimated are zero.
    fn jacobian(&self, x: &Vec6, r0: &[f64]) -> Vec<Vec6> {
        let n = r0.len();
        let mut rows = vec![Vec6::zeros(); n];
        for i in 0..NPARAM {
            let h = self.step_size(x, i);
            let mut plus = *x;
            let mut minus = *x;
            plus[i] = (x[i] + h).min(self.hi[i]);
            minus[i] = (x[i] - h).max(self.lo[i]);
            let rp = (plus[i] > x[i]).then(|| self.residuals(&plus)).flatten();
            let rm = (minus[i] < x[i]).then(|| self.residuals(&minus)).flatten();
            let column: Option<Vec<f64>> = match (rp, rm) {
                (Some(rp), Some(rm)) => {
                    let span = plus[i] - minus[i];
                    Some(rp.iter().zip(&rm).map(|(a, b)| (a - b) / span).collect())
                }
                (Some(rp), None) => {
                    let span = plus[i] - x[i];
                    Some(rp.iter().zip(r0).map(|(a, b)| (a - b) / span).collect())
                }
                (None, Some(rm)) => {
                    let span = x[i] - minus[i];
                    Some(r0.iter().zip(&rm).map(|(a, b)| (a - b) / span).collect())
                }
                (None, None) => None,
            };
            if let Some(col) = column {
                for (row, v) in rows.iter_mut().zip(col) {
                    row[i] = v;
                }
            }
        }
        rows
    }

    fn gradient(rows: &[Vec6], r: &[f64]) -> Vec6 {
        rows.iter().zip(r).fold(Vec6::zeros(), |acc, (row, ri)| acc + row * (2.0 * ri))
    }

    /// Norm of the projected-gradient step `P(x - g) - x`.
    fn projected_gradient_norm(&self, x: &Vec6, g: &Vec6) -> f64 {
        (self.project(&(x - g)) - x).norm()
    }

    /// Parameters on a bound with the descent direction pointing outward.
    fn active_set(&self, x: &Vec6, g: &Vec6) -> [bool; NPARAM] {
        std::array::from_fn(|i| {
            let tol = 1e-12 * (self.hi[i] - self.lo[i]).abs().max(1e-12);
            (x[i] <= self.lo[i] + tol && g[i] > 0.0) || (x[i] >= self.hi[i] - tol && g[i] < 0.0)
        })
    }

    fn pinned(&self, x: &Vec6) -> bool {
        (0..NPARAM).any(|i| {
            let tol = 1e-9 * (self.hi[i] - self.lo[i]).abs().max(1e-12);
            (x[i] - self.lo[i]).abs() <= tol || (self.hi[i] - x[i]).abs() <= tol
        })
    }
}

struct Outcome {
    x: Vec6,
    error: f64,
    iterations: usize,
    reason: StopReason,
    /// E after every accepted step, starting with the initial guess.
    history: Vec<f64>,
}

fn check_nan(e: f64, iteration: usize) -> Result<()> {
    if e.is_nan() {
        return Err(Error::NotANumber(format!("objective at iteration {iteration}")));
    }
    Ok(())
}

fn levenberg_marquardt(problem: &Problem, x0: Vec6, r0: Vec<f64>, config: &FitConfig) -> Result<Outcome> {
    let mut x = x0;
    let mut r = r0;
    let mut e = Problem::error(&r);
    let mut history = vec![e];
    let mut mu = 1e-3;
    let mut iterations = 0;
    let mut stalled = false;
    while iterations < config.max_iterations {
        if e <= config.error_tolerance {
            return Ok(Outcome { x, error: e, iterations, reason: StopReason::ErrorTolerance, history });
        }
        iterations += 1;
        let rows = problem.jacobian(&x, &r);
        let g = Problem::gradient(&rows, &r);
        if problem.projected_gradient_norm(&x, &g) < config.gradient_tolerance {
            return Ok(Outcome { x, error: e, iterations, reason: StopReason::GradientTolerance, history });
        }
        let active = problem.active_set(&x, &g);
        let mut jtj = rows.iter().fold(Mat6::zeros(), |acc, row| acc + row * row.transpose());
        let mut jtr = g * 0.5;
        // parameters held at a bound by the gradient drop out of this step
        for i in (0..NPARAM).filter(|&i| active[i]) {
            jtj.row_mut(i).fill(0.0);
            jtj.column_mut(i).fill(0.0);
            jtr[i] = 0.0;
        }
        let mut accepted = false;
        while mu < 1e12 {
            let mut a = jtj;
            for i in 0..NPARAM {
                a[(i, i)] += if active[i] { 1.0 } else { mu * jtj[(i, i)].max(1e-12) };
            }
            let Some(chol) = a.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let step = chol.solve(&(-jtr));
            let candidate = problem.project(&(x + step));
            if candidate == x {
                break;
            }
            match problem.residuals(&candidate) {
                Some(rc) => {
                    let ec = Problem::error(&rc);
                    check_nan(ec, iterations)?;
                    if ec < e {
                        let relative = (e - ec) / e.max(f64::MIN_POSITIVE);
                        let moved = (candidate - x).norm() / (x.norm() + 1e-12);
                        stalled = relative < RELATIVE_DECREASE_TOLERANCE || moved < STEP_TOLERANCE;
                        x = candidate;
                        r = rc;
                        e = ec;
                        history.push(e);
                        mu = (mu / 3.0).max(1e-12);
                        accepted = true;
                        break;
                    }
                    mu *= 4.0;
                }
                None => mu *= 4.0,
            }
        }
        if !accepted || stalled {
            return Ok(Outcome { x, error: e, iterations, reason: StopReason::Stalled, history });
        }
    }
    Ok(Outcome { x, error: e, iterations, reason: StopReason::MaxIterations, history })
}

fn gradient_descent(problem: &Problem, x0: Vec6, r0: Vec<f64>, config: &FitConfig) -> Result<Outcome> {
    let schedule = config.learning_rate;
    let mut x = x0;
    let mut r = r0;
    let mut e = Problem::error(&r);
    let mut history = vec![e];
    let mut rate = schedule.initial;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        if e <= config.error_tolerance {
            return Ok(Outcome { x, error: e, iterations, reason: StopReason::ErrorTolerance, history });
        }
        iterations += 1;
        let rows = problem.jacobian(&x, &r);
        let g = Problem::gradient(&rows, &r);
        if problem.projected_gradient_norm(&x, &g) < config.gradient_tolerance {
            return Ok(Outcome { x, error: e, iterations, reason: StopReason::GradientTolerance, history });
        }
        let mut accepted = false;
        while rate > 1e-16 {
            let candidate = problem.project(&(x - g * rate));
            if candidate == x {
                break;
            }
            if let Some(rc) = problem.residuals(&candidate) {
                let ec = Problem::error(&rc);
                check_nan(ec, iterations)?;
                if ec < e {
                    x = candidate;
                    r = rc;
                    e = ec;
                    history.push(e);
                    rate *= schedule.growth;
                    accepted = true;
                    break;
                }
            }
            rate *= schedule.shrink;
        }
        if !accepted {
            return Ok(Outcome { x, error: e, iterations, reason: StopReason::Stalled, history });
        }
    }
    Ok(Outcome { x, error: e, iterations, reason: StopReason::MaxIterations, history })
}

/// Data-driven starting pulse on the excursion clock (relative to `t0`).
fn initial_pulse(excursion: &Excursion, rel_times: &[f64], max_amplitude: f64) -> (f64, f64, f64) {
    let sign = excursion.kind.sign();
    let peak = excursion.extremum_index();
    let duration = *rel_times.last().unwrap_or(&0.0);
    // steepest two-point slope on the approach to the extremum
    let slope = (1..=peak.max(1).min(rel_times.len() - 1))
        .map(|i| {
            let d = &excursion.deviation;
            sign * (d[i] - d[i - 1]) / (rel_times[i] - rel_times[i - 1])
        })
        .fold(0.0f64, f64::max);
    let amplitude = sign * slope.max(1e-3).min(max_amplitude);
    let center = rel_times[peak] - excursion.nominal_interval;
    let width = duration / 4.0;
    (amplitude, center, width)
}

/// Extra starting `(center, width)` pairs tried after the data-driven one.
fn alternative_pulses(center: f64, width: f64) -> impl Iterator<Item = (f64, f64)> {
    [(center, width / 3.0), (0.5 * center, width), (0.5 * center, width / 3.0)].into_iter()
}

/// Fits one excursion. The excursion index defaults to 0; see [`fit_excursions`].
pub fn fit_excursion(excursion: &Excursion, config: &FitConfig) -> Result<FitResult> {
    fit_indexed(excursion, 0, config).map(|(fit, _)| fit)
}

/// Like [`fit_excursion`], also returning E after each accepted iteration.
pub fn fit_excursion_traced(excursion: &Excursion, config: &FitConfig) -> Result<(FitResult, Vec<f64>)> {
    fit_indexed(excursion, 0, config)
}

fn fit_indexed(excursion: &Excursion, index: usize, config: &FitConfig) -> Result<(FitResult, Vec<f64>)> {
    config.validate()?;
    check_excursion(excursion)?;
    let dt = config.dt_for(excursion);
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let t0 = excursion.times[0];
    let rel_times: Vec<f64> = excursion.times.iter().map(|t| t - t0).collect();
    let duration = *rel_times.last().unwrap_or(&0.0);
    let norm = excursion.deviation.iter().map(|d| d * d).sum::<f64>().sqrt();
    let b = &config.bounds;
    let (amp_lo, amp_hi) = match excursion.kind {
        ExcursionKind::Peak => (0.0, b.max_amplitude),
        ExcursionKind::Trough => (-b.max_amplitude, 0.0),
    };
    let theta_lo = Vec6::from([b.a1.lo, b.a2.lo, b.lambda.lo, amp_lo, -0.5 * duration, dt]);
    let theta_hi = Vec6::from([
        b.a1.hi,
        b.a2.hi,
        b.lambda.hi,
        amp_hi,
        duration,
        (2.0 * duration).max(dt),
    ]);
    let gains = config.initial.for_kind(excursion.kind);
    let (amp0, center0, width0) = initial_pulse(excursion, &rel_times, b.max_amplitude);
    let theta0 = Vec6::from([gains.a1, gains.a2, gains.lambda, amp0, center0, width0]);
    let scale = Vec6::from([0.01, 0.01, 0.01, amp0.abs().max(1e-3), duration, duration]);

    let problem = Problem {
        observed: &excursion.deviation,
        rel_times,
        initial_e: excursion.deviation[0],
        e_bar: excursion.e_bar,
        a3: config.a3,
        dt,
        norm,
        lo: theta_lo.component_div(&scale),
        hi: theta_hi.component_div(&scale),
        scale,
        rel_step: config.gradient_step,
        evaluations: std::cell::Cell::new(0),
    };
    let x0 = problem.project(&theta0.component_div(&scale));
    let r0 = problem.residuals(&x0).ok_or_else(|| {
        Error::Degenerate("model leaves its domain at the initial guess".into())
    })?;
    check_nan(Problem::error(&r0), 0)?;
    let run = |x0: Vec6, r0: Vec<f64>| match config.optimizer {
        Optimizer::LevenbergMarquardt => levenberg_marquardt(&problem, x0, r0, config),
        Optimizer::GradientDescent => gradient_descent(&problem, x0, r0, config),
    };
    let mut outcome = run(x0, r0)?;
    if config.multi_start {
        // Broad late pulses and narrow early ones with slow gains fit similarly
        // well at first; restarts keep the optimizer out of the wrong basin.
        for (center, width) in alternative_pulses(center0, width0) {
            if outcome.reason == StopReason::ErrorTolerance {
                break;
            }
            let theta = Vec6::from([gains.a1, gains.a2, gains.lambda, amp0, center, width]);
            let x = problem.project(&theta.component_div(&scale));
            let Some(r) = problem.residuals(&x) else { continue };
            let candidate = run(x, r)?;
            if candidate.error < outcome.error {
                outcome = candidate;
            }
        }
    }
    let th = problem.theta(&outcome.x);
    let flags = FitFlags {
        multimodal: excursion.flags.multimodal,
        boundary_pinned: problem.pinned(&outcome.x),
        escaped: false,
        baseline_atypical: excursion.flags.baseline_atypical,
        baseline_suspect: excursion.flags.baseline_suspect,
    };
    let fit = FitResult {
        subject_id: excursion.subject_id.clone(),
        excursion_index: index,
        kind: excursion.kind,
        t0,
        n: excursion.len(),
        params: ModelParams {
            a1: th[0],
            a2: th[1],
            a3: config.a3,
            lambda: th[2],
            e_bar: excursion.e_bar,
        },
        pulse: InputPulse {
            amplitude: th[3],
            center: t0 + th[4],
            width: th[5],
        },
        error: outcome.error,
        iterations: outcome.iterations,
        evaluations: problem.evaluations.get(),
        converged: outcome.reason != StopReason::MaxIterations,
        stop_reason: outcome.reason,
        flags,
    };
    Ok((fit, outcome.history))
}

/// Per-excursion failure in a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFailure {
    pub subject_id: String,
    pub excursion_index: usize,
    pub message: String,
}

/// Result of fitting a batch of excursions.
#[derive(Debug, Clone, Default)]
pub struct BatchFit {
    /// Sorted by excursion index.
    pub fits: Vec<FitResult>,
    /// Wall time of each fit in seconds, aligned with `fits`.
    pub seconds: Vec<f64>,
    pub failures: Vec<FitFailure>,
}

/// Fits excursions in parallel on the current rayon pool. Excursion `i` of
/// the slice gets excursion index `i`.
pub fn fit_excursions(excursions: &[Excursion], config: &FitConfig) -> Result<BatchFit> {
    config.validate()?;
    let mut outcomes: Vec<(usize, Result<FitResult>, f64)> = excursions
        .par_iter()
        .enumerate()
        .map(|(i, exc)| {
            let start = Instant::now();
            let res = fit_indexed(exc, i, config).map(|(fit, _)| fit);
            (i, res, start.elapsed().as_secs_f64())
        })
        .collect();
    outcomes.sort_by_key(|o| o.0);
    let mut batch = BatchFit::default();
    for (i, res, secs) in outcomes {
        match res {
            Ok(fit) => {
                batch.fits.push(fit);
                batch.seconds.push(secs);
            }
            Err(err) => {
                log::warn!("excursion {i} of {}: {err}", excursions[i].subject_id);
                batch.failures.push(FitFailure {
                    subject_id: excursions[i].subject_id.clone(),
                    excursion_index: i,
                    message: err.to_string(),
                });
            }
        }
    }
    Ok(batch)
}

/// Smoothing and extraction settings for a whole-trace fit.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Gaussian smoothing width in minutes; `None` uses the nominal interval.
    pub sigma: Option<f64>,
    pub extract: ExtractConfig,
    pub fit: FitConfig,
}

/// Smooths and extracts; the first half of [`fit_trace`].
pub fn prepare_excursions(trace: &GlucoseTrace, config: &PipelineConfig) -> Result<Vec<Excursion>> {
    let sigma = config.sigma.unwrap_or(trace.nominal_interval);
    let smoothed = smooth(trace, sigma)?;
    extract_excursions(&smoothed, &config.extract)
}

/// Smooth, extract and fit every excursion of a trace.
pub fn fit_trace(trace: &GlucoseTrace, config: &PipelineConfig) -> Result<(Vec<Excursion>, BatchFit)> {
    let excursions = prepare_excursions(trace, config)?;
    let batch = fit_excursions(&excursions, &config.fit)?;
    Ok((excursions, batch))
}

/// Observed and fitted deviation at each sample: `(t, observed_e, model_e)`.
pub fn fitted_curve(excursion: &Excursion, fit: &FitResult, dt: f64) -> Result<Vec<(f64, f64, f64)>> {
    let eval = objective(excursion, &fit.params, &fit.pulse, dt)?;
    if eval.escaped {
        return Err(Error::Invariant("fitted model leaves its domain".into()));
    }
    Ok(excursion
        .times
        .iter()
        .zip(&excursion.deviation)
        .zip(&eval.model)
        .map(|((&t, &o), &m)| (t, o, m))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_excursion(params: &ModelParams<f64>, pulse: &InputPulse<f64>, kind: ExcursionKind) -> Excursion {
        let interval = 5.0;
        let traj = simulate_integral(params, pulse, 0.0, &[], 0.0, 300.0, 1.0).unwrap();
        let times: Vec<f64> = (0..=60).map(|i| i as f64 * interval).collect();
        let dev: Vec<f64> = times.iter().map(|&t| traj.states[t as usize].e).collect();
        Excursion::with_baseline("syn", kind, times, dev, params.e_bar, interval).unwrap()
    }

    fn hyper() -> (ModelParams<f64>, InputPulse<f64>) {
        (
            ModelParams::<f64>::new(0.0073, 0.0033, 0.0003, 0.0289, 5.0).unwrap(),
            InputPulse::new(0.05, 60.0, 20.0).unwrap(),
        )
    }

    #[test]
    fn self_consistency() {
        let (p, pulse) = hyper();
        let exc = model_excursion(&p, &pulse, ExcursionKind::Peak);
        let ev = objective(&exc, &p, &pulse, 1.0).unwrap();
        assert!(ev.error < 1e-4, "E = {}", ev.error);
        assert!(!ev.escaped);
    }

    #[test]
    fn zero_pulse_mismatch_is_positive() {
        let (p, pulse) = hyper();
        let exc = model_excursion(&p, &pulse, ExcursionKind::Peak);
        let flat = InputPulse::new(0.0, 60.0, 20.0).unwrap();
        assert!(objective(&exc, &p, &flat, 1.0).unwrap().error > 0.0);
    }

    #[test]
    fn normalized_error_is_scale_free() {
        let obs = [0.1, 0.5, 1.2, 0.7, 0.2];
        let model = [0.0, 0.6, 1.0, 0.8, 0.1];
        let c = 3.7;
        let scaled_obs: Vec<f64> = obs.iter().map(|x| c * x).collect();
        let scaled_model: Vec<f64> = model.iter().map(|x| c * x).collect();
        let a = normalized_error(&obs, &model);
        let b = normalized_error(&scaled_obs, &scaled_model);
        assert!((a - b).abs() < 1e-12);
        assert_eq!(normalized_error(&obs, &obs), 0.0);
    }

    #[test]
    fn degenerate_excursions_rejected() {
        let exc = Excursion::from_samples("c", ExcursionKind::Peak, vec![0.0, 5.0, 10.0, 15.0, 20.0], vec![5.0; 5], 5.0)
            .unwrap();
        assert!(matches!(fit_excursion(&exc, &FitConfig::default()), Err(Error::Degenerate(_))));
        let short = Excursion::from_samples("c", ExcursionKind::Peak, vec![0.0, 5.0, 10.0], vec![5.0, 6.0, 5.0], 5.0)
            .unwrap();
        assert!(matches!(fit_excursion(&short, &FitConfig::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn noise_free_peak_recovered() {
        let (p, pulse) = hyper();
        let exc = model_excursion(&p, &pulse, ExcursionKind::Peak);
        let fit = fit_excursion(&exc, &FitConfig::default()).unwrap();
        assert!(fit.error < 1e-8, "E = {}", fit.error);
        for (got, want) in [(fit.params.a1, p.a1), (fit.params.a2, p.a2), (fit.params.lambda, p.lambda)] {
            assert!((got - want).abs() < 0.02 * want, "{got} vs {want}");
        }
        assert_eq!(fit.params.a3, 0.0003);
        assert!(fit.converged);
        assert!(fit.pulse.amplitude > 0.0);
    }

    #[test]
    fn trough_gets_negative_amplitude() {
        let p = ModelParams::<f64>::new(0.0208, 0.0354, 0.0003, 0.0395, 5.0).unwrap();
        let pulse = InputPulse::new(-0.05, 60.0, 20.0).unwrap();
        let exc = model_excursion(&p, &pulse, ExcursionKind::Trough);
        let fit = fit_excursion(&exc, &FitConfig::default()).unwrap();
        assert!(fit.pulse.amplitude < 0.0);
        assert!(fit.error < 0.05);
    }

    #[test]
    fn gradient_descent_is_monotone_and_improves() {
        let (p, pulse) = hyper();
        let exc = model_excursion(&p, &pulse, ExcursionKind::Peak);
        let config = FitConfig {
            optimizer: Optimizer::GradientDescent,
            max_iterations: 300,
            ..Default::default()
        };
        let start = {
            let g = config.initial.peak;
            let t = exc.times.iter().map(|t| t - exc.times[0]).collect::<Vec<_>>();
            let (a, c, w) = initial_pulse(&exc, &t, 1.0);
            let params = ModelParams::<f64>::new(g.a1, g.a2, 0.0003, g.lambda, 5.0).unwrap();
            objective(&exc, &params, &InputPulse::new(a, c, w).unwrap(), 1.0).unwrap().error
        };
        let fit = fit_excursion(&exc, &config).unwrap();
        assert!(fit.error < start);
    }

    #[test]
    fn fits_are_deterministic() {
        let (p, pulse) = hyper();
        let exc = model_excursion(&p, &pulse, ExcursionKind::Peak);
        let a = fit_excursion(&exc, &FitConfig::default()).unwrap();
        let b = fit_excursion(&exc, &FitConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_keeps_order_and_reports_failures() {
        let (p, pulse) = hyper();
        let good = model_excursion(&p, &pulse, ExcursionKind::Peak);
        let bad =
            Excursion::from_samples("c", ExcursionKind::Peak, vec![0.0, 5.0, 10.0, 15.0], vec![5.0; 4], 5.0).unwrap();
        let batch = fit_excursions(&[good.clone(), bad, good], &FitConfig::default()).unwrap();
        assert_eq!(batch.fits.iter().map(|f| f.excursion_index).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(batch.failures.len(), 1);
        assert_eq!(batch.failures[0].excursion_index, 1);
        assert_eq!(batch.seconds.len(), 2);
    }

    #[test]
    fn curve_matches_observed_length() {
        let (p, pulse) = hyper();
        let exc = model_excursion(&p, &pulse, ExcursionKind::Peak);
        let fit = fit_excursion(&exc, &FitConfig::default()).unwrap();
        let curve = fitted_curve(&exc, &fit, 1.0).unwrap();
        assert_eq!(curve.len(), exc.len());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = FitConfig::default();
        c.bounds.lambda.lo = 0.0;
        assert!(c.validate().is_err());
        let c = FitConfig {
            dt: Some(0.0),
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
