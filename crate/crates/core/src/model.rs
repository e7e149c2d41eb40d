//! The closed-loop glucose model.
//!
//! Glucose deviation `e` from the set point `e_bar` obeys
//!
//! ```text
//! de/dt = -A3 - u * phi(e, e_bar) + F(t)
//! u(t)  = A1 e(t) + A2 * integral_{-inf}^{t} lambda exp(-lambda (t - s)) e(s) ds
//! ```
//!
//! with `phi(e, e_bar) = max(e + e_bar, e_bar)`. Eliminating the integral with
//! `v = u - A1 e` gives the planar system
//!
//! ```text
//! du/dt = -lambda u + A1 f(u, e) + lambda (A1 + A2) e
//! de/dt = f(u, e),      f(u, e) = -A3 - u phi(e, e_bar) + F(t)
//! ```
//!
//! Both forms are integrated with forward Euler on a fixed step. The model is
//! only meaningful on the domain `e > -e_bar`; trajectories that leave it are
//! truncated and flagged rather than aborted.
//!
//! Units: glucose in mmol/litre, time in minutes. `u` carries whatever units
//! make `u * phi` a rate in mmol/(litre min).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;

/// Basal metabolic rate used throughout fitting, mmol/(min litre).
pub const A3_DEFAULT: f64 = 0.0003;

/// Pre-`t0` history is truncated once the exponential kernel has decayed by `exp(-10)`.
pub const HISTORY_CUTOFF_TIMESCALES: f64 = 10.0;

/// Default simulation step in minutes.
pub const DEFAULT_DT: f64 = 0.1;

/// Model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameter {
    A1,
    A2,
    A3,
    Lambda,
    EBar,
}

impl Parameter {
    pub const ALL: [Parameter; 5] = [
        Parameter::A1,
        Parameter::A2,
        Parameter::A3,
        Parameter::Lambda,
        Parameter::EBar,
    ];

    /// Expected range across healthy subjects.
    pub fn typical_range(self) -> (f64, f64) {
        match self {
            Parameter::A1 => (0.0, 0.03274),
            Parameter::A2 => (0.0, 0.04627),
            Parameter::A3 => (A3_DEFAULT, A3_DEFAULT),
            Parameter::Lambda => (0.02434, 0.05804),
            Parameter::EBar => (4.0, 5.9),
        }
    }

    pub fn midpoint(self) -> f64 {
        let (lo, hi) = self.typical_range();
        0.5 * (lo + hi)
    }

    pub fn name(self) -> &'static str {
        match self {
            Parameter::A1 => "a1",
            Parameter::A2 => "a2",
            Parameter::A3 => "a3",
            Parameter::Lambda => "lambda",
            Parameter::EBar => "e_bar",
        }
    }
}

/// A parameter value outside its typical range. Not an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeWarning {
    pub parameter: Parameter,
    pub value: f64,
    pub range: (f64, f64),
}

impl std::fmt::Display for RangeWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} = {} outside typical range [{}, {}]",
            self.parameter.name(),
            self.value,
            self.range.0,
            self.range.1
        )
    }
}

/// Physiological parameters of the model.
///
/// * `a1`: proportional gain, litre/(min mmol)
/// * `a2`: integral gain, litre/(min mmol)
/// * `a3`: basal metabolic rate, mmol/(min litre)
/// * `lambda`: inverse delay time scale, 1/min
/// * `e_bar`: set-point glucose, mmol/litre
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub a1: T,
    pub a2: T,
    pub a3: T,
    pub lambda: T,
    pub e_bar: T,
}

impl<T: Real> ModelParams<T> {
    pub fn new(a1: T, a2: T, a3: T, lambda: T, e_bar: T) -> Result<Self> {
        let p = ModelParams {
            a1,
            a2,
            a3,
            lambda,
            e_bar,
        };
        p.validate()?;
        Ok(p)
    }

    /// Every parameter at the arithmetic midpoint of its typical range.
    pub fn table_midpoint() -> Self {
        ModelParams {
            a1: T::lit(Parameter::A1.midpoint()),
            a2: T::lit(Parameter::A2.midpoint()),
            a3: T::lit(A3_DEFAULT),
            lambda: T::lit(Parameter::Lambda.midpoint()),
            e_bar: T::lit(Parameter::EBar.midpoint()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.a1, self.a2, self.a3, self.lambda, self.e_bar]
            .iter()
            .all(|x| x.is_finite());
        if !all_finite {
            return Err(Error::InvalidParameter("parameters must be finite".into()));
        }
        if self.a1 < T::zero() || self.a2 < T::zero() {
            return Err(Error::InvalidParameter(format!(
                "gains must be nonnegative (a1 = {}, a2 = {})",
                self.a1, self.a2
            )));
        }
        if self.a1 + self.a2 <= T::zero() {
            return Err(Error::InvalidParameter("a1 + a2 must be positive".into()));
        }
        if self.lambda <= T::zero() {
            return Err(Error::InvalidParameter(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.e_bar <= T::zero() {
            return Err(Error::InvalidParameter(format!(
                "e_bar must be positive, got {}",
                self.e_bar
            )));
        }
        if self.a3 < T::zero() {
            return Err(Error::InvalidParameter(format!(
                "a3 must be nonnegative, got {}",
                self.a3
            )));
        }
        Ok(())
    }

    pub fn get(&self, p: Parameter) -> T {
        match p {
            Parameter::A1 => self.a1,
            Parameter::A2 => self.a2,
            Parameter::A3 => self.a3,
            Parameter::Lambda => self.lambda,
            Parameter::EBar => self.e_bar,
        }
    }

    /// Values outside the typical ranges.
    pub fn range_warnings(&self) -> Vec<RangeWarning> {
        Parameter::ALL
            .iter()
            .filter_map(|&p| {
                let v = self.get(p).as_f64();
                let (lo, hi) = p.typical_range();
                // a3 is a single nominal value; allow rounding slack
                let slack = 1e-12 * hi.abs().max(1.0);
                (v < lo - slack || v > hi + slack).then_some(RangeWarning {
                    parameter: p,
                    value: v,
                    range: (lo, hi),
                })
            })
            .collect()
    }

    /// Total feedback gain `a1 + a2`.
    #[inline]
    pub fn gain(&self) -> T {
        self.a1 + self.a2
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            a1: U::lit(self.a1.as_f64()),
            a2: U::lit(self.a2.as_f64()),
            a3: U::lit(self.a3.as_f64()),
            lambda: U::lit(self.lambda.as_f64()),
            e_bar: U::lit(self.e_bar.as_f64()),
        }
    }
}

/// Gaussian external input `amplitude * exp(-(t - center)^2 / (2 width^2))`.
///
/// `width` is the standard deviation in minutes. Hyperglycemic excursions use
/// a positive amplitude, hypoglycemic ones a negative amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputPulse<T> {
    pub amplitude: T,
    pub center: T,
    pub width: T,
}

impl<T: Real> InputPulse<T> {
    pub fn new(amplitude: T, center: T, width: T) -> Result<Self> {
        if !(width > T::zero()) || !width.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "pulse width must be positive, got {width}"
            )));
        }
        if !amplitude.is_finite() || !center.is_finite() {
            return Err(Error::InvalidParameter("pulse must be finite".into()));
        }
        Ok(InputPulse {
            amplitude,
            center,
            width,
        })
    }

    #[inline]
    pub fn value(&self, t: T) -> T {
        input_f(self, t)
    }
}

/// Value of the Gaussian input pulse at time `t`.
#[inline]
pub fn input_f<T: Real>(pulse: &InputPulse<T>, t: T) -> T {
    let z = (t - pulse.center) / pulse.width;
    pulse.amplitude * (-(z * z) / T::lit(2.0)).exp()
}

/// A describable external input `F(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Forcing<T> {
    Constant(T),
    Pulse(InputPulse<T>),
}

impl<T: Real> Forcing<T> {
    /// Constant input giving net input `g = -a3 + F`.
    pub fn net(g: T, a3: T) -> Self {
        Forcing::Constant(g + a3)
    }
}

/// Anything that can supply the external input `F(t)`.
///
/// Closures `Fn(T) -> T` implement this, so arbitrary bounded signals can be
/// fed to the integrators.
pub trait InputSignal<T> {
    fn value(&self, t: T) -> T;

    /// Serializable description, when there is one.
    fn describe(&self) -> Option<Forcing<T>> {
        None
    }
}

impl<T: Real> InputSignal<T> for Forcing<T> {
    #[inline]
    fn value(&self, t: T) -> T {
        match self {
            Forcing::Constant(f) => *f,
            Forcing::Pulse(p) => p.value(t),
        }
    }

    fn describe(&self) -> Option<Forcing<T>> {
        Some(*self)
    }
}

impl<T: Real> InputSignal<T> for InputPulse<T> {
    #[inline]
    fn value(&self, t: T) -> T {
        input_f(self, t)
    }

    fn describe(&self) -> Option<Forcing<T>> {
        Some(Forcing::Pulse(*self))
    }
}

impl<T: Real, F: Fn(T) -> T> InputSignal<T> for F {
    #[inline]
    fn value(&self, t: T) -> T {
        self(t)
    }
}

/// State of the planar system at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelState<T> {
    pub t: T,
    pub u: T,
    pub e: T,
}

impl<T: Real> ModelState<T> {
    pub fn new(t: T, u: T, e: T) -> Self {
        ModelState { t, u, e }
    }

    /// State with no accumulated integral term, `u0 = a1 * e0`.
    pub fn at_rest(params: &ModelParams<T>, t: T, e: T) -> Self {
        ModelState {
            t,
            u: params.a1 * e,
            e,
        }
    }

    /// Planar state matching a constant pre-`t0` history `e(s) = e0`, as
    /// assumed by [`simulate_integral`] with an empty history.
    pub fn with_constant_history(params: &ModelParams<T>, t: T, e: T, dt: T) -> Self {
        ModelState {
            t,
            u: params.a1 * e + params.a2 * history_integral(params, e, &[], dt),
            e,
        }
    }

    pub fn in_domain(&self, e_bar: T) -> bool {
        self.e > -e_bar
    }
}

/// Fixed-step trajectory produced by either integrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<T> {
    pub states: Vec<ModelState<T>>,
    pub dt: T,
    pub params: ModelParams<T>,
    pub forcing: Option<Forcing<T>>,
    /// Set when the run was truncated because `e` reached `-e_bar` (or became non-finite).
    pub escaped: bool,
}

pub const TRAJECTORY_CSV_HEADER: &str = "t_min,e_mmol_per_l,u,glucose_mmol_per_l";

impl<T: Real> Trajectory<T> {
    pub fn last(&self) -> &ModelState<T> {
        // Trajectories always hold the initial state.
        self.states.last().expect("trajectory holds the initial state")
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn e_values(&self) -> impl Iterator<Item = T> + '_ {
        self.states.iter().map(|s| s.e)
    }

    /// Largest total glucose `e + e_bar` along the trajectory.
    pub fn max_glucose(&self) -> T {
        self.states
            .iter()
            .map(|s| s.e + self.params.e_bar)
            .fold(T::neg_infinity(), T::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{TRAJECTORY_CSV_HEADER}")?;
        for s in &self.states {
            writeln!(w, "{},{},{},{}", s.t, s.e, s.u, s.e + self.params.e_bar)?;
        }
        Ok(())
    }
}

/// Feedback nonlinearity `max(e + e_bar, e_bar)`.
pub fn phi<T: Real>(e: T, e_bar: T) -> Result<T> {
    if !(e > -e_bar) {
        return Err(Error::Domain {
            e: e.as_f64(),
            e_bar: e_bar.as_f64(),
        });
    }
    Ok(phi_unchecked(e, e_bar))
}

#[inline]
pub(crate) fn phi_unchecked<T: Real>(e: T, e_bar: T) -> T {
    if e > T::zero() {
        e + e_bar
    } else {
        e_bar
    }
}

/// Right-hand side of the glucose equation, `f(u, e) = -A3 - u phi(e) + F`.
#[inline]
pub fn glucose_rate<T: Real>(params: &ModelParams<T>, u: T, e: T, input: T) -> T {
    -params.a3 - u * phi_unchecked(e, params.e_bar) + input
}

/// Planar vector field `(du/dt, de/dt)` for external input value `input`.
#[inline]
pub fn planar_field<T: Real>(params: &ModelParams<T>, u: T, e: T, input: T) -> (T, T) {
    let f = glucose_rate(params, u, e, input);
    let du = -params.lambda * u + params.a1 * f + params.lambda * params.gain() * e;
    (du, f)
}

fn check_step<T: Real>(params: &ModelParams<T>, e0: T, t0: T, t_end: T, dt: T) -> Result<usize> {
    params.validate()?;
    if !(dt > T::zero()) || !dt.is_finite() {
        return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
    }
    if !(t_end >= t0) {
        return Err(Error::InvalidInput(format!(
            "end time {t_end} precedes start time {t0}"
        )));
    }
    if !(e0 > -params.e_bar) {
        return Err(Error::Domain {
            e: e0.as_f64(),
            e_bar: params.e_bar.as_f64(),
        });
    }
    let steps = ((t_end - t0) / dt).round();
    steps
        .to_usize()
        .ok_or_else(|| Error::InvalidInput("step count overflow".into()))
}

/// Forward-Euler integration of the planar system from `initial` to `t_end`.
pub fn simulate_planar<T: Real, I: InputSignal<T> + ?Sized>(
    params: &ModelParams<T>,
    input: &I,
    initial: ModelState<T>,
    t_end: T,
    dt: T,
) -> Result<Trajectory<T>> {
    let steps = check_step(params, initial.e, initial.t, t_end, dt)?;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(initial);
    let mut escaped = false;
    let (mut u, mut e) = (initial.u, initial.e);
    for n in 0..steps {
        let t = initial.t + T::lit(n as f64) * dt;
        let (du, de) = planar_field(params, u, e, input.value(t));
        u = u + dt * du;
        e = e + dt * de;
        if !(e > -params.e_bar) || !u.is_finite() {
            escaped = true;
            break;
        }
        states.push(ModelState {
            t: initial.t + T::lit((n + 1) as f64) * dt,
            u,
            e,
        });
    }
    Ok(Trajectory {
        states,
        dt,
        params: *params,
        forcing: input.describe(),
        escaped,
    })
}

fn history_window<T: Real>(params: &ModelParams<T>, dt: T) -> usize {
    (T::lit(HISTORY_CUTOFF_TIMESCALES) / (params.lambda * dt))
        .ceil()
        .to_usize()
        .unwrap_or(usize::MAX)
        .max(1)
}

/// Midpoint-rule value at `t0` of `integral lambda exp(-lambda (t0 - s)) e(s) ds`
/// over the pre-`t0` history.
///
/// `history` holds past deviations on the simulation grid in chronological
/// order, the last entry at `t0 - dt`. An empty history means `e(s) = initial_e`
/// for all `s < t0`. Either way the sum is truncated after
/// [`HISTORY_CUTOFF_TIMESCALES`]` / lambda` minutes; an explicit history
/// shorter than that contributes nothing before its first sample.
pub fn history_integral<T: Real>(params: &ModelParams<T>, initial_e: T, history: &[T], dt: T) -> T {
    let window = history_window(params, dt);
    let decay = (-params.lambda * dt).exp();
    let mut weight = dt * params.lambda * (-params.lambda * dt / T::lit(2.0)).exp();
    let half = T::lit(0.5);
    if history.is_empty() {
        // every midpoint term is `initial_e`: sum the geometric weights directly
        let n = T::lit(window as f64);
        let ratio = (-(-params.lambda * dt * n).exp_m1()) / (-(-params.lambda * dt).exp_m1());
        return initial_e * weight * ratio;
    }
    let intervals = window.min(history.len());
    let point = |k: usize| -> T {
        if k == 0 {
            initial_e
        } else {
            history[history.len() - k]
        }
    };
    let mut sum = T::zero();
    for k in 0..intervals {
        sum = sum + weight * half * (point(k) + point(k + 1));
        weight = weight * decay;
    }
    sum
}

/// Forward-Euler integration of the original delay-integral formulation.
///
/// The control variable is `u = a1 e + a2 S` where `S` is the midpoint-rule
/// approximation of the exponentially weighted integral of past deviations,
/// carried recursively from step to step.
pub fn simulate_integral<T: Real, I: InputSignal<T> + ?Sized>(
    params: &ModelParams<T>,
    input: &I,
    initial_e: T,
    history: &[T],
    t0: T,
    t_end: T,
    dt: T,
) -> Result<Trajectory<T>> {
    let steps = check_step(params, initial_e, t0, t_end, dt)?;
    let decay = (-params.lambda * dt).exp();
    let weight = dt * params.lambda * (-params.lambda * dt / T::lit(2.0)).exp();
    let half = T::lit(0.5);

    let mut integral = history_integral(params, initial_e, history, dt);
    let mut e = initial_e;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(ModelState {
        t: t0,
        u: params.a1 * e + params.a2 * integral,
        e,
    });
    let mut escaped = false;
    for n in 0..steps {
        let t = t0 + T::lit(n as f64) * dt;
        let u = params.a1 * e + params.a2 * integral;
        let next = e + dt * glucose_rate(params, u, e, input.value(t));
        if !(next > -params.e_bar) {
            escaped = true;
            break;
        }
        integral = integral * decay + weight * half * (e + next);
        e = next;
        states.push(ModelState {
            t: t0 + T::lit((n + 1) as f64) * dt,
            u: params.a1 * e + params.a2 * integral,
            e,
        });
    }
    Ok(Trajectory {
        states,
        dt,
        params: *params,
        forcing: input.describe(),
        escaped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper() -> ModelParams<f64> {
        ModelParams::<f64>::new(0.0073, 0.0033, 0.0003, 0.0289, 5.0).unwrap()
    }

    #[test]
    fn phi_examples() {
        assert_eq!(phi(0.0, 5.0).unwrap(), 5.0);
        assert_eq!(phi(2.0, 5.0).unwrap(), 7.0);
        assert_eq!(phi(-2.0, 5.0).unwrap(), 5.0);
        assert_eq!(phi(-4.9, 5.0).unwrap(), 5.0);
        assert!(matches!(phi(-5.0, 5.0), Err(Error::Domain { .. })));
        assert!(phi(-6.0f32, 5.0).is_err());
    }

    #[test]
    fn pulse_examples() {
        let p = InputPulse::new(0.1, 60.0, 20.0).unwrap();
        assert_eq!(input_f(&p, 60.0), 0.1);
        let one_sigma = 0.1 * (-0.5f64).exp();
        assert!((input_f(&p, 40.0) - one_sigma).abs() < 1e-15);
        assert!((input_f(&p, 80.0) - 0.06065).abs() < 1e-5);
        let hypo = InputPulse::new(-0.05, 30.0, 10.0).unwrap();
        assert_eq!(input_f(&hypo, 30.0), -0.05);
        assert!(InputPulse::new(0.1, 0.0, 0.0).is_err());
        assert!(InputPulse::new(0.1, 0.0, -1.0).is_err());
    }

    #[test]
    fn parameter_validation() {
        assert!(ModelParams::<f64>::new(0.0, 0.0, 0.0003, 0.03, 5.0).is_err());
        assert!(ModelParams::<f64>::new(-0.01, 0.02, 0.0003, 0.03, 5.0).is_err());
        assert!(ModelParams::<f64>::new(0.01, 0.02, 0.0003, 0.0, 5.0).is_err());
        assert!(ModelParams::<f64>::new(0.01, 0.02, 0.0003, 0.03, 0.0).is_err());
        assert!(ModelParams::<f64>::new(0.01, 0.02, -1.0, 0.03, 5.0).is_err());
        assert!(ModelParams::<f64>::new(0.0, 0.02, 0.0, 0.03, 5.0).is_ok());
    }

    #[test]
    fn range_warnings_flag_only_outliers() {
        assert!(hyper().range_warnings().is_empty());
        let mid = ModelParams::<f64>::table_midpoint();
        assert!(mid.range_warnings().is_empty());
        assert_eq!(mid.a1, 0.01637);
        assert_eq!(mid.a2, 0.023135);
        assert!((mid.lambda - 0.04119).abs() < 1e-15);
        assert!((mid.e_bar - 4.95).abs() < 1e-15);
        let odd = ModelParams::<f64>::new(0.05, 0.01, 0.0003, 0.2, 7.0).unwrap();
        let w: Vec<_> = odd.range_warnings().iter().map(|w| w.parameter).collect();
        assert_eq!(w, vec![Parameter::A1, Parameter::Lambda, Parameter::EBar]);
    }

    #[test]
    fn zero_input_at_rest_stays_at_rest() {
        let p = ModelParams::<f64>::new(0.0073, 0.0033, 0.0, 0.0289, 5.0).unwrap();
        let zero = Forcing::Constant(0.0);
        let tr = simulate_planar(&p, &zero, ModelState::new(0.0, 0.0, 0.0), 100.0, 0.1).unwrap();
        assert_eq!(tr.len(), 1001);
        assert!(tr.states.iter().all(|s| s.u == 0.0 && s.e == 0.0));
        let tr = simulate_integral(&p, &zero, 0.0, &[], 0.0, 100.0, 0.1).unwrap();
        assert!(tr.states.iter().all(|s| s.u == 0.0 && s.e == 0.0));
    }

    #[test]
    fn constant_history_sets_initial_control() {
        // The exponential kernel integrates to one, up to the truncation mass exp(-10).
        let p = hyper();
        for &c in &[1.5, -0.7, 3.0] {
            let tr = simulate_integral(&p, &Forcing::Constant(0.0), c, &[], 0.0, 0.0, 0.1).unwrap();
            let expected = p.gain() * c;
            assert!(
                (tr.states[0].u - expected).abs() < 1e-4 * expected.abs(),
                "{} vs {}",
                tr.states[0].u,
                expected
            );
        }
    }

    #[test]
    fn explicit_history_matches_constant_history() {
        let p = hyper();
        let dt = 0.5;
        let n = history_window(&p, dt);
        let hist = vec![2.0; n + 10];
        let a = history_integral(&p, 2.0, &hist, dt);
        let b = history_integral(&p, 2.0, &[], dt);
        assert!((a - b).abs() < 1e-14);
        // A short history stops contributing before its first sample.
        let short = history_integral(&p, 2.0, &[2.0; 3], dt);
        assert!(short < b);
    }

    #[test]
    fn planar_trajectory_leaving_domain_is_flagged() {
        let p = hyper();
        // Strong negative input drives the glucose to zero.
        let tr = simulate_planar(
            &p,
            &Forcing::Constant(-2.0),
            ModelState::at_rest(&p, 0.0, 0.0),
            600.0,
            0.1,
        )
        .unwrap();
        assert!(tr.escaped);
        assert!(tr.states.iter().all(|s| s.e > -p.e_bar));
        let tr = simulate_integral(&p, &Forcing::Constant(-2.0), 0.0, &[], 0.0, 600.0, 0.1).unwrap();
        assert!(tr.escaped);
        assert!(tr.states.len() < 6001);
    }

    #[test]
    fn invalid_steps_are_rejected() {
        let p = hyper();
        let f = Forcing::Constant(0.0);
        let s = ModelState::new(0.0, 0.0, 0.0);
        assert!(simulate_planar(&p, &f, s, 10.0, 0.0).is_err());
        assert!(simulate_planar(&p, &f, s, 10.0, -0.1).is_err());
        assert!(simulate_planar(&p, &f, ModelState::new(0.0, 0.0, -5.0), 10.0, 0.1).is_err());
        assert!(simulate_integral(&p, &f, -6.0, &[], 0.0, 10.0, 0.1).is_err());
    }

    #[test]
    fn csv_export_header_and_glucose_column() {
        let p = hyper();
        let tr = simulate_planar(
            &p,
            &Forcing::Constant(0.01),
            ModelState::new(0.0, 0.0, 0.5),
            1.0,
            0.5,
        )
        .unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRAJECTORY_CSV_HEADER);
        let first: Vec<f64> = lines
            .next()
            .unwrap()
            .split(',')
            .map(|x| x.parse().unwrap())
            .collect();
        assert_eq!(first, vec![0.0, 0.5, 0.0, 5.5]);
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn works_in_single_precision() {
        let p = ModelParams::<f32>::table_midpoint();
        let tr = simulate_planar(
            &p,
            &Forcing::net(0.05f32, p.a3),
            ModelState::at_rest(&p, 0.0, 0.0),
            2000.0,
            0.1,
        )
        .unwrap();
        assert!(!tr.escaped);
        let p64 = p.cast::<f64>();
        let tr64 = simulate_planar(
            &p64,
            &Forcing::net(0.05, p64.a3),
            ModelState::at_rest(&p64, 0.0, 0.0),
            2000.0,
            0.1,
        )
        .unwrap();
        assert!((tr.last().e as f64 - tr64.last().e).abs() < 1e-3);
    }
}
