//! Synthetic CGM data: model-generated excursions and multi-day traces with
//! planted excursions, for calibration and testing.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::Gains;
use crate::model::{simulate_integral, InputPulse, ModelParams, A3_DEFAULT};
use crate::signal::{Excursion, ExcursionKind, GlucoseTrace, Sample};
use crate::stats::SubjectMeans;

/// Simulation steps per sampling interval.
pub const STEPS_PER_SAMPLE: f64 = 5.0;

/// Recipe for one model-generated excursion starting at rest at `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExcursionRecipe {
    pub params: ModelParams<f64>,
    pub pulse: InputPulse<f64>,
    pub kind: ExcursionKind,
    /// Window length, minutes.
    pub duration: f64,
    /// Sampling interval, minutes.
    pub interval: f64,
    /// Relative standard deviation of multiplicative noise on the deviation.
    pub noise: f64,
}

impl ExcursionRecipe {
    /// A 300-minute window sampled every 5 minutes with the pulse centred at 60 minutes.
    pub fn new(params: ModelParams<f64>, amplitude: f64, width: f64, noise: f64) -> Result<Self> {
        let kind = if amplitude >= 0.0 {
            ExcursionKind::Peak
        } else {
            ExcursionKind::Trough
        };
        Ok(ExcursionRecipe {
            params,
            pulse: InputPulse::new(amplitude, 60.0, width)?,
            kind,
            duration: 300.0,
            interval: 5.0,
            noise,
        })
    }
}

/// Noise-free model deviation sampled every `interval` minutes on `[0, duration]`.
pub fn model_samples(
    params: &ModelParams<f64>,
    pulse: &InputPulse<f64>,
    duration: f64,
    interval: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(interval > 0.0) || !(duration >= interval) {
        return Err(Error::InvalidInput(
            "need 0 < interval <= duration for synthetic sampling".into(),
        ));
    }
    let dt = interval / STEPS_PER_SAMPLE;
    let traj = simulate_integral(params, pulse, 0.0, &[], 0.0, duration, dt)?;
    if traj.escaped {
        return Err(Error::InvalidInput("synthetic excursion leaves the model domain".into()));
    }
    let n = (duration / interval).round() as usize;
    let times: Vec<f64> = (0..=n).map(|i| i as f64 * interval).collect();
    let stride = STEPS_PER_SAMPLE as usize;
    let dev = (0..=n)
        .map(|i| traj.states.get(i * stride).map(|s| s.e))
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| Error::Invariant("trajectory shorter than the sampling window".into()))?;
    Ok((times, dev))
}

/// Generates one excursion with multiplicative noise `e (1 + noise z)`.
pub fn synthetic_excursion<R: Rng + ?Sized>(
    recipe: &ExcursionRecipe,
    subject_id: &str,
    rng: &mut R,
) -> Result<Excursion> {
    let (times, clean) = model_samples(&recipe.params, &recipe.pulse, recipe.duration, recipe.interval)?;
    let noisy = clean
        .iter()
        .map(|&e| {
            let z: f64 = StandardNormal.sample(rng);
            e * (1.0 + recipe.noise * z)
        })
        .collect();
    Excursion::with_baseline(
        subject_id,
        recipe.kind,
        times,
        noisy,
        recipe.params.e_bar,
        recipe.interval,
    )
}

/// Normal distribution of one gain, truncated to positive values by resampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainSpread {
    pub mean: Gains,
    pub sd: Gains,
}

impl GainSpread {
    /// Overall hyperglycemic cohort means and standard deviations.
    pub fn hyper() -> Self {
        GainSpread {
            mean: Gains {
                a1: 0.0073,
                a2: 0.0033,
                lambda: 0.0289,
            },
            sd: Gains {
                a1: 0.0022,
                a2: 0.0009,
                lambda: 0.0009,
            },
        }
    }

    /// Overall hypoglycemic cohort means and standard deviations.
    pub fn hypo() -> Self {
        GainSpread {
            mean: Gains {
                a1: 0.0208,
                a2: 0.0354,
                lambda: 0.0395,
            },
            sd: Gains {
                a1: 0.0048,
                a2: 0.0041,
                lambda: 0.0059,
            },
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Gains> {
        let draw = |mean: f64, sd: f64, rng: &mut R| -> Result<f64> {
            let dist = Normal::new(mean, sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            for _ in 0..1000 {
                let x = dist.sample(rng);
                if x > 0.0 {
                    return Ok(x);
                }
            }
            Err(Error::InvalidParameter(format!(
                "N({mean}, {sd}) yields no positive draws"
            )))
        };
        Ok(Gains {
            a1: draw(self.mean.a1, self.sd.a1, rng)?,
            a2: draw(self.mean.a2, self.sd.a2, rng)?,
            lambda: draw(self.mean.lambda, self.sd.lambda, rng)?,
        })
    }
}

/// Settings for a synthetic multi-day trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecipe {
    pub subject_id: String,
    pub days: f64,
    pub interval: f64,
    pub excursions: usize,
    pub e_bar: f64,
    /// Relative multiplicative noise on the deviation.
    pub noise: f64,
    /// Fraction of planted excursions that are peaks.
    pub peak_fraction: f64,
    pub peak_amplitude: (f64, f64),
    /// Trough amplitudes are negative; given as `(most negative, least negative)`.
    pub trough_amplitude: (f64, f64),
    pub width: (f64, f64),
    pub peak_gains: GainSpread,
    pub trough_gains: GainSpread,
}

impl Default for TraceRecipe {
    /// Two weeks of 15-minute readings with 40 planted excursions.
    fn default() -> Self {
        TraceRecipe {
            subject_id: "synthetic".into(),
            days: 14.0,
            interval: 15.0,
            excursions: 40,
            e_bar: 5.0,
            noise: 0.01,
            peak_fraction: 0.5,
            peak_amplitude: (0.04, 0.10),
            trough_amplitude: (-0.20, -0.10),
            width: (15.0, 30.0),
            peak_gains: GainSpread::hyper(),
            trough_gains: GainSpread::hypo(),
        }
    }
}

/// Ground truth for one planted excursion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedExcursion {
    pub kind: ExcursionKind,
    pub params: ModelParams<f64>,
    /// Pulse center on the trace clock.
    pub pulse: InputPulse<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrace {
    pub trace: GlucoseTrace,
    pub planted: Vec<PlantedExcursion>,
}

/// Builds a trace of equal-length slots, one planted excursion per slot,
/// each simulated from rest with its own gains and pulse.
pub fn synthetic_trace<R: Rng + ?Sized>(recipe: &TraceRecipe, rng: &mut R) -> Result<SyntheticTrace> {
    if recipe.excursions == 0 {
        return Err(Error::InvalidInput("need at least one planted excursion".into()));
    }
    let total = recipe.days * 24.0 * 60.0;
    let per_slot = (total / recipe.interval / recipe.excursions as f64).floor() as usize;
    if per_slot < 8 {
        return Err(Error::InvalidInput(format!(
            "{} excursions do not fit in {} days",
            recipe.excursions, recipe.days
        )));
    }
    let slot = per_slot as f64 * recipe.interval;
    let unit = Uniform::new(0.0f64, 1.0);
    let lerp = |(lo, hi): (f64, f64), u: f64| lo + (hi - lo) * u;

    let mut samples = Vec::with_capacity(per_slot * recipe.excursions);
    let mut planted = Vec::with_capacity(recipe.excursions);
    for k in 0..recipe.excursions {
        let is_peak = unit.sample(rng) < recipe.peak_fraction;
        let (kind, spread, amp_range) = if is_peak {
            (ExcursionKind::Peak, &recipe.peak_gains, recipe.peak_amplitude)
        } else {
            (ExcursionKind::Trough, &recipe.trough_gains, recipe.trough_amplitude)
        };
        let g = spread.sample(rng)?;
        let params = ModelParams::new(g.a1, g.a2, A3_DEFAULT, g.lambda, recipe.e_bar)?;
        let amplitude = lerp(amp_range, unit.sample(rng));
        let width = lerp(recipe.width, unit.sample(rng));
        // centre in the first third, leaving time to settle before the next slot
        let center = slot / 6.0 + unit.sample(rng) * slot / 6.0;
        let pulse = InputPulse::new(amplitude, center, width)?;
        // run a little past the slot so the last sample exists
        let (times, clean) = model_samples(&params, &pulse, slot, recipe.interval)?;
        let origin = k as f64 * slot;
        for (t, e) in times.iter().zip(&clean).take(per_slot) {
            let z: f64 = StandardNormal.sample(rng);
            samples.push(Sample {
                t: origin + t,
                glucose: recipe.e_bar + e * (1.0 + recipe.noise * z),
            });
        }
        planted.push(PlantedExcursion {
            kind,
            params,
            pulse: InputPulse {
                center: origin + center,
                ..pulse
            },
        });
    }
    let trace = GlucoseTrace::from_readings(recipe.subject_id.clone(), samples, recipe.interval)?;
    Ok(SyntheticTrace { trace, planted })
}

/// Settings for a synthetic cohort of per-subject gain means.
///
/// Peak gains and trough `a1`, `a2` are normal; trough `lambda` is
/// log-normal, with `log10 lambda ~ N(mean, sd)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRecipe {
    pub subjects: usize,
    /// Subjects are assigned to studies round-robin.
    pub studies: Vec<String>,
    pub peak: GainSpread,
    pub trough: GainSpread,
    pub trough_log10_lambda: (f64, f64),
}

impl Default for CohortRecipe {
    fn default() -> Self {
        CohortRecipe {
            subjects: 150,
            studies: vec!["Klick Pilot".into(), "Klick Follow-up".into(), "Stanford".into()],
            peak: GainSpread::hyper(),
            trough: GainSpread::hypo(),
            trough_log10_lambda: (-1.4078, 0.0649),
        }
    }
}

/// Draws per-subject means for both excursion kinds.
pub fn synthetic_cohort<R: Rng + ?Sized>(recipe: &CohortRecipe, rng: &mut R) -> Result<Vec<SubjectMeans>> {
    if recipe.subjects == 0 || recipe.studies.is_empty() {
        return Err(Error::InvalidInput("a cohort needs subjects and at least one study".into()));
    }
    let (mu, sigma) = recipe.trough_log10_lambda;
    let log_lambda = Normal::new(mu, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut out = Vec::with_capacity(2 * recipe.subjects);
    for i in 0..recipe.subjects {
        let study = &recipe.studies[i % recipe.studies.len()];
        let subject_id = format!("subject-{i:03}");
        let peak = recipe.peak.sample(rng)?;
        let trough = recipe.trough.sample(rng)?;
        for (kind, g) in [
            (ExcursionKind::Peak, peak),
            (
                ExcursionKind::Trough,
                Gains {
                    lambda: 10f64.powf(log_lambda.sample(rng)),
                    ..trough
                },
            ),
        ] {
            out.push(SubjectMeans {
                study: study.clone(),
                subject_id: subject_id.clone(),
                kind,
                excursions: 1,
                a1: g.a1,
                a2: g.a2,
                lambda: g.lambda,
            });
        }
    }
    Ok(out)
}
