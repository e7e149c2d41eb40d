//! Shapiro-Wilk W test, using Royston's polynomial approximations for the
//! coefficients and for the null distribution of W (3 <= n <= 5000).

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

pub const MIN_N: usize = 3;
pub const MAX_N: usize = 5000;

const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
const C3: [f64; 4] = [0.5440, -0.39978, 0.025054, -6.714e-4];
const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
const G: [f64; 2] = [-2.273, 0.459];

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ShapiroWilk {
    pub w: f64,
    pub p_value: f64,
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

/// Coefficients for the lower half of the order statistics; `a[i]` weights
/// `x_(n-i) - x_(i+1)`. They are normalised so that the full antisymmetric
/// vector has unit length.
fn coefficients(n: usize) -> Vec<f64> {
    let half = n / 2;
    if n == 3 {
        return vec![std::f64::consts::FRAC_1_SQRT_2];
    }
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    let an = n as f64;
    let m: Vec<f64> = (1..=half)
        .map(|i| std_normal.inverse_cdf((i as f64 - 0.375) / (an + 0.25)))
        .collect();
    let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
    let ssumm2 = summ2.sqrt();
    let rsn = 1.0 / an.sqrt();
    let a1 = poly(&C1, rsn) - m[0] / ssumm2;
    let mut a = vec![0.0; half];
    a[0] = a1;
    let (first, fac) = if n > 5 {
        let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
        a[1] = a2;
        let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1])
            / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2))
            .sqrt();
        (2, fac)
    } else {
        let fac = ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt();
        (1, fac)
    };
    for i in first..half {
        a[i] = -m[i] / fac;
    }
    a
}

/// Upper-tail probability of W under normality.
fn p_value(w: f64, n: usize) -> f64 {
    let an = n as f64;
    if n == 3 {
        let p = 6.0 / std::f64::consts::PI * (w.sqrt().asin() - std::f64::consts::FRAC_PI_3);
        return p.clamp(0.0, 1.0);
    }
    let mut y = (1.0 - w).ln();
    let (m, s) = if n <= 11 {
        let gamma = poly(&G, an);
        if y >= gamma {
            return 1e-99;
        }
        y = -(gamma - y).ln();
        (poly(&C3, an), poly(&C4, an).exp())
    } else {
        let ln_n = an.ln();
        (poly(&C5, ln_n), poly(&C6, ln_n).exp())
    };
    0.5 * erfc((y - m) / s / std::f64::consts::SQRT_2)
}

/// Shapiro-Wilk test of normality.
///
/// Errors on fewer than 3 or more than 5000 values, non-finite values, or a
/// constant sample.
pub fn shapiro_wilk(sample: &[f64]) -> Result<ShapiroWilk> {
    let n = sample.len();
    if !(MIN_N..=MAX_N).contains(&n) {
        return Err(Error::SampleSize {
            given: n,
            min: MIN_N,
            max: MAX_N,
        });
    }
    if sample.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("sample contains non-finite values".into()));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let range = x[n - 1] - x[0];
    if !(range > 0.0) || range < 1e-19 * x[0].abs().max(x[n - 1].abs()) {
        return Err(Error::ConstantSample);
    }
    // work on a scaled copy; W is invariant under affine maps
    let x: Vec<f64> = x.iter().map(|v| (v - x[0]) / range).collect();
    let half = coefficients(n);
    let a: Vec<f64> = (0..n)
        .map(|i| {
            let j = n - 1 - i;
            match i.cmp(&j) {
                std::cmp::Ordering::Less => -half[i],
                std::cmp::Ordering::Greater => half[j],
                std::cmp::Ordering::Equal => 0.0,
            }
        })
        .collect();
    // W as the squared correlation between coefficients and order statistics
    let mean_a = a.iter().sum::<f64>() / n as f64;
    let mean_x = x.iter().sum::<f64>() / n as f64;
    let (mut ssa, mut ssx, mut sax) = (0.0, 0.0, 0.0);
    for (ai, xi) in a.iter().zip(&x) {
        let (da, dx) = (ai - mean_a, xi - mean_x);
        ssa += da * da;
        ssx += dx * dx;
        sax += da * dx;
    }
    let root = (ssa * ssx).sqrt();
    let w1 = (root - sax) * (root + sax) / (ssa * ssx);
    let w = (1.0 - w1).clamp(0.0, 1.0);
    Ok(ShapiroWilk {
        w,
        p_value: p_value(w, n),
    })
}
