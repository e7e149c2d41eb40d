//! Equilibria, linear stability and trapping regions of the planar system.
//!
//! With a constant net input `g = -A3 + F` the planar system has a unique
//! equilibrium. In the sheared coordinate `v = u - A1 e` the function
//!
//! ```text
//! L(u, e) = v^2 / (2 lambda A2) + e^2 / (2 e_bar) + e    (e <= 0)
//! L(u, e) = v^2 / (2 lambda A2) + e                      (e >  0)
//! ```
//!
//! decreases along trajectories outside an ellipse, so every sublevel set
//! `{L <= C}` enclosing that ellipse is a trapping region. [`trapping_bound`]
//! returns the explicit bound `C` for constant input, [`trapping_bound_variable`]
//! the bound for any input confined to `[g_min, g_max]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{planar_field, ModelParams, ModelState};
use crate::num::Real;

/// Which closed form the equilibrium comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// `g >= 0`, equilibrium at `e* >= 0` on the quadratic feedback branch.
    Positive,
    /// `g < 0`, equilibrium at `e* < 0` on the linear feedback branch.
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium<T> {
    pub e_star: T,
    pub u_star: T,
    pub g: T,
    pub branch: Branch,
}

impl<T: Real> Equilibrium<T> {
    /// `|g - (a1 + a2) e* phi(e*)|`, zero up to rounding.
    pub fn residual(&self, params: &ModelParams<T>) -> T {
        let phi = if self.e_star > T::zero() {
            self.e_star + params.e_bar
        } else {
            params.e_bar
        };
        (self.g - params.gain() * self.e_star * phi).abs()
    }

    /// Whether the equilibrium lies in the model domain `e > -e_bar`.
    pub fn in_domain(&self, params: &ModelParams<T>) -> bool {
        self.e_star > -params.e_bar
    }

    pub fn state(&self, t: T) -> ModelState<T> {
        ModelState::new(t, self.u_star, self.e_star)
    }
}

/// The unique equilibrium for constant net input `g`.
pub fn equilibrium<T: Real>(params: &ModelParams<T>, g: T) -> Result<Equilibrium<T>> {
    params.validate()?;
    if !g.is_finite() {
        return Err(Error::InvalidInput("net input must be finite".into()));
    }
    let k = params.gain();
    let ke = k * params.e_bar;
    let (e_star, branch) = if g >= T::zero() {
        // (-k e_bar + sqrt(k^2 e_bar^2 + 4 k g)) / (2k), rationalised to avoid cancellation
        let root = (ke * ke + T::lit(4.0) * k * g).sqrt();
        (T::lit(2.0) * g / (ke + root), Branch::Positive)
    } else {
        (g / ke, Branch::Negative)
    };
    Ok(Equilibrium {
        e_star,
        u_star: k * e_star,
        g,
        branch,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jacobian<T> {
    /// Row-major `[[du/du, du/de], [de/du, de/de]]`.
    pub matrix: [[T; 2]; 2],
    pub trace: T,
    pub determinant: T,
}

impl<T: Real> Jacobian<T> {
    /// `trace^2 - 4 det`; nonnegative for real eigenvalues.
    pub fn discriminant(&self) -> T {
        self.trace * self.trace - T::lit(4.0) * self.determinant
    }
}

/// Linearisation of the planar system at `eq`.
///
/// At the kink `e* = 0` the one-sided partials of the branch selected by the
/// sign of `g` are used.
pub fn jacobian<T: Real>(params: &ModelParams<T>, eq: &Equilibrium<T>) -> Jacobian<T> {
    let (df_du, df_de) = match eq.branch {
        Branch::Positive => (-(eq.e_star + params.e_bar), -eq.u_star),
        Branch::Negative => (-params.e_bar, T::zero()),
    };
    let a1 = params.a1;
    let lambda = params.lambda;
    let matrix = [
        [-lambda + a1 * df_du, lambda * params.gain() + a1 * df_de],
        [df_du, df_de],
    ];
    let trace = matrix[0][0] + matrix[1][1];
    let determinant = matrix[0][0] * matrix[1][1] - matrix[0][1] * matrix[1][0];
    Jacobian {
        matrix,
        trace,
        determinant,
    }
}

/// Central finite-difference Jacobian of the planar vector field at `(u, e)`.
pub fn numerical_jacobian<T: Real>(params: &ModelParams<T>, u: T, e: T, g: T) -> [[T; 2]; 2] {
    let input = g + params.a3;
    let hu = T::lit(1e-6) * u.abs().max(T::one());
    let he = T::lit(1e-6) * e.abs().max(T::one());
    let two = T::lit(2.0);
    let (dup, dep) = planar_field(params, u + hu, e, input);
    let (dum, dem) = planar_field(params, u - hu, e, input);
    let (dup2, dep2) = planar_field(params, u, e + he, input);
    let (dum2, dem2) = planar_field(params, u, e - he, input);
    [
        [(dup - dum) / (two * hu), (dup2 - dum2) / (two * he)],
        [(dep - dem) / (two * hu), (dep2 - dem2) / (two * he)],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    StableNode,
    StableFocus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport<T> {
    pub equilibrium: Equilibrium<T>,
    pub trace: T,
    pub determinant: T,
    pub classification: Classification,
}

/// Locates the equilibrium for constant `g` and classifies it.
///
/// Fails with [`Error::Invariant`] if the linearisation is not strictly stable,
/// which cannot happen for valid parameters.
pub fn classify_stability<T: Real>(params: &ModelParams<T>, g: T) -> Result<StabilityReport<T>> {
    let eq = equilibrium(params, g)?;
    let j = jacobian(params, &eq);
    if !(j.trace < T::zero() && j.determinant > T::zero()) {
        return Err(Error::Invariant(format!(
            "equilibrium not stable: trace {} determinant {}",
            j.trace, j.determinant
        )));
    }
    let classification = if j.discriminant() >= T::zero() {
        Classification::StableNode
    } else {
        Classification::StableFocus
    };
    Ok(StabilityReport {
        equilibrium: eq,
        trace: j.trace,
        determinant: j.determinant,
        classification,
    })
}

fn require_positive_gains<T: Real>(params: &ModelParams<T>) -> Result<()> {
    params.validate()?;
    if !(params.a1 > T::zero() && params.a2 > T::zero()) {
        return Err(Error::InvalidParameter(
            "trapping analysis requires a1 > 0 and a2 > 0".into(),
        ));
    }
    Ok(())
}

fn check_domain<T: Real>(params: &ModelParams<T>, e: T) -> Result<()> {
    if e > -params.e_bar {
        Ok(())
    } else {
        Err(Error::Domain {
            e: e.as_f64(),
            e_bar: params.e_bar.as_f64(),
        })
    }
}

/// `e`-dependent part of `L`: `e^2/(2 e_bar) + e` below the set point, `e` above.
#[inline]
fn level_e_part<T: Real>(e_bar: T, e: T) -> T {
    if e <= T::zero() {
        e * e / (T::lit(2.0) * e_bar) + e
    } else {
        e
    }
}

/// Lyapunov function `L(u, e)`.
pub fn lyapunov_level<T: Real>(params: &ModelParams<T>, u: T, e: T) -> Result<T> {
    require_positive_gains(params)?;
    check_domain(params, e)?;
    let v = u - params.a1 * e;
    Ok(v * v / (T::lit(2.0) * params.lambda * params.a2) + level_e_part(params.e_bar, e))
}

/// `dL/dt` along solutions with constant net input `g`, in completed-square form.
pub fn lyapunov_rate<T: Real>(params: &ModelParams<T>, u: T, e: T, g: T) -> Result<T> {
    require_positive_gains(params)?;
    check_domain(params, e)?;
    let ModelParams {
        a1, a2, e_bar, ..
    } = *params;
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    let v = u - a1 * e;
    let shear = v + a2 * e_bar / two;
    let common = -(shear * shear) / a2;
    let rate = if e <= T::zero() {
        let k = a1 * e_bar - g / e_bar;
        let s = e + k / (two * a1);
        common - a1 * s * s + a2 * e_bar * e_bar / four + k * k / (four * a1) + g
    } else {
        let s = e + e_bar / two;
        common - a1 * s * s + e_bar * e_bar / four * (a1 + a2) + g
    };
    Ok(rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovValue<T> {
    pub level: T,
    pub rate: T,
}

/// `L` and `dL/dt` at `state` for constant net input `g`.
pub fn lyapunov<T: Real>(params: &ModelParams<T>, state: &ModelState<T>, g: T) -> Result<LyapunovValue<T>> {
    Ok(LyapunovValue {
        level: lyapunov_level(params, state.u, state.e)?,
        rate: lyapunov_rate(params, state.u, state.e, g)?,
    })
}

/// Minimum of `L` over the closure of the domain, attained at `(u, e) = (-a1 e_bar, -e_bar)`.
pub fn lyapunov_minimum<T: Real>(params: &ModelParams<T>) -> T {
    -params.e_bar / T::lit(2.0)
}

/// Centre `(u, e)` of the ellipse `dL/dt = 0` built from the above-set-point branch.
pub fn rate_zero_center<T: Real>(params: &ModelParams<T>) -> (T, T) {
    let half = T::lit(0.5);
    (-params.gain() * params.e_bar * half, -params.e_bar * half)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `g <= -a2 e_bar^2 / 4`
    Minus,
    /// `g > -a2 e_bar^2 / 4`
    Plus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrappingBound<T> {
    /// Level `C` of the trapping curve `L = C`.
    pub c: T,
    pub regime: Regime,
    pub g_min: T,
    pub g_max: T,
    /// Largest total glucose `e + e_bar` on the curve `L = C`.
    pub max_glucose: T,
}

/// Net input separating the two closed forms, `-a2 e_bar^2 / 4`.
pub fn regime_threshold<T: Real>(params: &ModelParams<T>) -> T {
    -params.a2 * params.e_bar * params.e_bar / T::lit(4.0)
}

fn shared_root<T: Real>(params: &ModelParams<T>, g: T) -> T {
    let ModelParams { a1, a2, e_bar, .. } = *params;
    let e2 = e_bar * e_bar;
    let shifted = a1 * e2 + g;
    (a1 * a2 * e2 * e2 + shifted * shifted).sqrt()
}

/// The commonly quoted closed form for the `g <= -a2 e_bar^2 / 4` level.
///
/// It equals `L` at the bounding-rectangle corner with the quadratic part
/// of `h(e)` dropped, so it sits below the true corner level by
/// `e_max^2 / (2 e_bar)` and can even fall below `min L`. Kept for
/// comparison; [`c_minus`] is the level actually used.
pub fn c_minus_published<T: Real>(params: &ModelParams<T>, g: T) -> T {
    let ModelParams {
        a1,
        a2,
        lambda,
        e_bar,
        ..
    } = *params;
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    let e2 = e_bar * e_bar;
    let e3 = e2 * e_bar;
    let e4 = e2 * e2;
    let root = shared_root(params, g);
    let numerator = (two * e2 * (a1 * a2).sqrt() + four * e_bar * lambda) * root
        + a1 * (a1 + two * a2) * e4
        - four * a1 * e3 * lambda
        + two * a1 * g * e2
        + four * g * e_bar * lambda
        + g * g;
    numerator / (T::lit(8.0) * a1 * lambda * e2)
}

/// Largest `e` on the rectangle bounding `{dL/dt >= 0}` when `g <= -a2 e_bar^2 / 4`.
pub fn minus_corner_e<T: Real>(params: &ModelParams<T>, g: T) -> T {
    let ModelParams { a1, e_bar, .. } = *params;
    let two = T::lit(2.0);
    -e_bar / two + (g + shared_root(params, g)) / (two * a1 * e_bar)
}

/// Trapping level for `g <= -a2 e_bar^2 / 4`: `L` at the rectangle corner
/// `(v_min, e_max)`, where `e_max <= 0`.
pub fn c_minus<T: Real>(params: &ModelParams<T>, g: T) -> T {
    let e = minus_corner_e(params, g);
    c_minus_published(params, g) + e * e / (T::lit(2.0) * params.e_bar)
}

/// Trapping level for `g > -a2 e_bar^2 / 4`.
pub fn c_plus<T: Real>(params: &ModelParams<T>, g: T) -> Result<T> {
    let ModelParams {
        a1,
        a2,
        lambda,
        e_bar,
        ..
    } = *params;
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    let e2 = e_bar * e_bar;
    let e3 = e2 * e_bar;
    let e4 = e2 * e2;
    let radicand = a1 * (a1 + a2) * e2 + four * a1 * g;
    if radicand < T::zero() {
        return Err(Error::InvalidInput(format!(
            "net input {g} inconsistent with the parameters (negative radicand {radicand})"
        )));
    }
    let shifted = a1 * e2 + g;
    let numerator = two * (a1 * a2).sqrt() * e2 * shared_root(params, g)
        + shifted * shifted
        + four * lambda * e2 * radicand.sqrt()
        + two * a1 * a2 * e4
        - four * a1 * e3 * lambda;
    Ok(numerator / (T::lit(8.0) * a1 * lambda * e2))
}

/// Trapping level for constant net input `g`, and the regime it came from.
pub fn trapping_level<T: Real>(params: &ModelParams<T>, g: T) -> Result<(T, Regime)> {
    require_positive_gains(params)?;
    if !g.is_finite() {
        return Err(Error::InvalidInput("net input must be finite".into()));
    }
    if g <= regime_threshold(params) {
        Ok((c_minus(params, g), Regime::Minus))
    } else {
        Ok((c_plus(params, g)?, Regime::Plus))
    }
}

/// Largest `e` on the level set `L = c`, by bisection along `v = 0`.
///
/// `L` separates as `v^2/(2 lambda a2) + h(e)` with `h` increasing on the
/// domain, so the `e`-extent of the level set is maximal on `v = 0`.
pub fn level_set_max_e<T: Real>(params: &ModelParams<T>, c: T) -> Result<T> {
    require_positive_gains(params)?;
    let minimum = lyapunov_minimum(params);
    if !(c >= minimum) || !c.is_finite() {
        return Err(Error::InvalidInput(format!(
            "level {c} below the minimum {minimum} of L"
        )));
    }
    let tol = T::lit(1e-9).max(T::epsilon() * T::lit(8.0) * (c.abs() + params.e_bar));
    let mut lo = -params.e_bar;
    let mut hi = c.max(T::zero()) + T::one();
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = (lo + hi) / T::lit(2.0);
        if level_e_part(params.e_bar, mid) <= c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo + hi) / T::lit(2.0))
}

/// Trapping region for constant net input `g`.
pub fn trapping_bound<T: Real>(params: &ModelParams<T>, g: T) -> Result<TrappingBound<T>> {
    let (c, regime) = trapping_level(params, g)?;
    let e_max = level_set_max_e(params, c)?;
    Ok(TrappingBound {
        c,
        regime,
        g_min: g,
        g_max: g,
        max_glucose: e_max + params.e_bar,
    })
}

/// Trapping region valid for every input with `g_min <= g(t) <= g_max`, `g_max > 0`.
pub fn trapping_bound_variable<T: Real>(
    params: &ModelParams<T>,
    g_min: T,
    g_max: T,
) -> Result<TrappingBound<T>> {
    require_positive_gains(params)?;
    if !(g_max > T::zero()) {
        return Err(Error::InvalidInput(format!(
            "g_max must be positive, got {g_max}"
        )));
    }
    if !(g_min <= g_max) || !g_min.is_finite() || !g_max.is_finite() {
        return Err(Error::InvalidInput(format!(
            "need g_min <= g_max, got [{g_min}, {g_max}]"
        )));
    }
    let plus = c_plus(params, g_max)?;
    let (c, regime) = if g_min <= regime_threshold(params) {
        let minus = c_minus(params, g_min);
        if minus > plus {
            (minus, Regime::Minus)
        } else {
            (plus, Regime::Plus)
        }
    } else {
        (plus, Regime::Plus)
    };
    let e_max = level_set_max_e(params, c)?;
    Ok(TrappingBound {
        c,
        regime,
        g_min,
        g_max,
        max_glucose: e_max + params.e_bar,
    })
}

/// `(g, C, max_glucose)` on `n` evenly spaced inputs in `[g_min, g_max]`.
pub fn trapping_sweep<T: Real>(
    params: &ModelParams<T>,
    g_min: T,
    g_max: T,
    n: usize,
) -> Result<Vec<TrappingBound<T>>> {
    if n == 0 || !(g_min <= g_max) {
        return Err(Error::InvalidInput(format!(
            "sweep needs n >= 1 and g_min <= g_max, got {g_min}:{g_max}:{n}"
        )));
    }
    (0..n)
        .map(|i| {
            let g = if n == 1 {
                g_min
            } else {
                g_min + (g_max - g_min) * T::lit(i as f64) / T::lit((n - 1) as f64)
            };
            trapping_bound(params, g)
        })
        .collect()
}
