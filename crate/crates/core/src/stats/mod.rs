//! Cohort statistics over fitted excursions: per-subject bootstrap means,
//! Shapiro-Wilk normality and the net-input range.

mod plot;
mod shapiro;

use std::collections::BTreeMap;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use plot::{histogram, normal_qq, HistogramBin, QqPoint};
pub use shapiro::{shapiro_wilk, ShapiroWilk, MAX_N as SW_MAX_N, MIN_N as SW_MIN_N};

use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::signal::ExcursionKind;

pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_SEED: u64 = 0x5eed;
pub const ALPHA: f64 = 0.05;
/// Study label of the pooled column.
pub const OVERALL: &str = "overall";

/// 64-bit FNV-1a, used to derive per-subject bootstrap streams.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// RNG seed for one resampling stream.
pub fn stream_seed(seed: u64, key: &str) -> u64 {
    seed ^ fnv1a(key.as_bytes())
}

/// How often each of `n` items is drawn over `resamples` bootstrap resamples of size `n`.
fn resample_counts(n: usize, resamples: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = Uniform::new(0, n);
    let mut counts = vec![0u64; n];
    for _ in 0..n * resamples {
        counts[index.sample(&mut rng)] += 1;
    }
    counts
}

/// Mean of `resamples` bootstrap resample means of `values`.
///
/// Values are sorted before resampling, so the result does not depend on
/// their order. `key` selects the resampling stream.
pub fn bootstrap_mean(values: &[f64], resamples: usize, seed: u64, key: &str) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientData("bootstrap of an empty sample".into()));
    }
    if resamples == 0 {
        return Err(Error::InvalidParameter("resamples must be positive".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let counts = resample_counts(sorted.len(), resamples, stream_seed(seed, key));
    let total = (sorted.len() * resamples) as f64;
    Ok(sorted
        .iter()
        .zip(&counts)
        .map(|(x, &c)| x * (c as f64 / total))
        .sum())
}

/// Fitted gains of one excursion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainSample {
    pub a1: f64,
    pub a2: f64,
    pub lambda: f64,
}

impl From<&FitResult> for GainSample {
    fn from(f: &FitResult) -> Self {
        GainSample {
            a1: f.params.a1,
            a2: f.params.a2,
            lambda: f.params.lambda,
        }
    }
}

/// All excursions of one kind for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectFits {
    pub study: String,
    pub subject_id: String,
    pub kind: ExcursionKind,
    pub samples: Vec<GainSample>,
}

/// Bootstrap means of one subject's gains for one excursion kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMeans {
    pub study: String,
    pub subject_id: String,
    pub kind: ExcursionKind,
    pub excursions: usize,
    pub a1: f64,
    pub a2: f64,
    pub lambda: f64,
}

impl SubjectMeans {
    pub fn get(&self, p: CohortParameter) -> f64 {
        match p {
            CohortParameter::A1 => self.a1,
            CohortParameter::A2 => self.a2,
            CohortParameter::Lambda => self.lambda,
            CohortParameter::Log10Lambda => self.lambda.log10(),
        }
    }
}

/// Groups fits by study, subject and kind. Input pairs are `(study, fits)`.
pub fn group_fits<'a>(studies: impl IntoIterator<Item = (&'a str, &'a [FitResult])>) -> Vec<SubjectFits> {
    let mut groups: BTreeMap<(String, String, ExcursionKind), Vec<GainSample>> = BTreeMap::new();
    for (study, fits) in studies {
        for f in fits {
            groups
                .entry((study.to_string(), f.subject_id.clone(), f.kind))
                .or_default()
                .push(GainSample::from(f));
        }
    }
    groups
        .into_iter()
        .map(|((study, subject_id, kind), samples)| SubjectFits {
            study,
            subject_id,
            kind,
            samples,
        })
        .collect()
}

/// Per-subject bootstrap means, resampling whole excursions with replacement.
///
/// Each subject gets its own stream keyed by study, subject id and kind, so
/// results do not depend on subject order or on the order of excursions.
pub fn bootstrap_subject_means(subjects: &[SubjectFits], resamples: usize, seed: u64) -> Result<Vec<SubjectMeans>> {
    if subjects.is_empty() {
        return Err(Error::InsufficientData("no subjects to bootstrap".into()));
    }
    if resamples == 0 {
        return Err(Error::InvalidParameter("resamples must be positive".into()));
    }
    subjects
        .par_iter()
        .map(|s| {
            if s.samples.is_empty() {
                return Err(Error::InsufficientData(format!(
                    "subject {} has no {} fits",
                    s.subject_id,
                    s.kind.label()
                )));
            }
            let mut sorted = s.samples.clone();
            sorted.sort_by(|x, y| {
                x.a1.total_cmp(&y.a1)
                    .then(x.a2.total_cmp(&y.a2))
                    .then(x.lambda.total_cmp(&y.lambda))
            });
            let key = format!("{}\u{1f}{}\u{1f}{}", s.study, s.subject_id, s.kind.label());
            let counts = resample_counts(sorted.len(), resamples, stream_seed(seed, &key));
            let total = (sorted.len() * resamples) as f64;
            let mean = |f: fn(&GainSample) -> f64| -> f64 {
                sorted.iter().zip(&counts).map(|(x, &c)| f(x) * (c as f64 / total)).sum()
            };
            Ok(SubjectMeans {
                study: s.study.clone(),
                subject_id: s.subject_id.clone(),
                kind: s.kind,
                excursions: sorted.len(),
                a1: mean(|x| x.a1),
                a2: mean(|x| x.a2),
                lambda: mean(|x| x.lambda),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortParameter {
    A1,
    A2,
    Lambda,
    Log10Lambda,
}

impl CohortParameter {
    pub const BASE: [CohortParameter; 3] = [CohortParameter::A1, CohortParameter::A2, CohortParameter::Lambda];

    pub fn name(self) -> &'static str {
        match self {
            CohortParameter::A1 => "a1",
            CohortParameter::A2 => "a2",
            CohortParameter::Lambda => "lambda",
            CohortParameter::Log10Lambda => "log10_lambda",
        }
    }

    /// Parameters tabulated for a kind; troughs also get `log10 lambda`.
    pub fn for_kind(kind: ExcursionKind) -> &'static [CohortParameter] {
        match kind {
            ExcursionKind::Peak => &Self::BASE,
            ExcursionKind::Trough => &[
                CohortParameter::A1,
                CohortParameter::A2,
                CohortParameter::Lambda,
                CohortParameter::Log10Lambda,
            ],
        }
    }
}

/// Sample mean and (n - 1) standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Zero-mean, unit-variance copy of a sample.
pub fn standardize(values: &[f64]) -> Result<Vec<f64>> {
    let (mean, sd) = mean_sd(values);
    if !(sd > 0.0) {
        return Err(Error::ConstantSample);
    }
    Ok(values.iter().map(|v| (v - mean) / sd).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortCell {
    pub study: String,
    pub kind: ExcursionKind,
    pub parameter: CohortParameter,
    pub mean: f64,
    pub sd: f64,
    /// Number of subjects.
    pub count: usize,
    /// Coefficient of variation `sd / |mean|`.
    pub cv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityRow {
    pub kind: ExcursionKind,
    pub parameter: CohortParameter,
    pub n: usize,
    pub w: f64,
    pub p_value: f64,
    /// `p > alpha`: normality not rejected.
    pub normal: bool,
}

/// Cohort table: per-study and pooled cells, subject means and normality tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortTable {
    pub cells: Vec<CohortCell>,
    pub subjects: Vec<SubjectMeans>,
    pub normality: Vec<NormalityRow>,
}

impl CohortTable {
    /// Cell lookup; `study` may be [`OVERALL`].
    pub fn cell(&self, study: &str, kind: ExcursionKind, parameter: CohortParameter) -> Option<&CohortCell> {
        self.cells
            .iter()
            .find(|c| c.study == study && c.kind == kind && c.parameter == parameter)
    }

    pub fn normality_for(&self, kind: ExcursionKind, parameter: CohortParameter) -> Option<&NormalityRow> {
        self.normality
            .iter()
            .find(|r| r.kind == kind && r.parameter == parameter)
    }

    pub fn studies(&self) -> Vec<String> {
        let mut s: Vec<String> = self.subjects.iter().map(|m| m.study.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn kinds(&self) -> Vec<ExcursionKind> {
        let mut k: Vec<ExcursionKind> = self.subjects.iter().map(|m| m.kind).collect();
        k.sort();
        k.dedup();
        k
    }

    /// Per-subject values of one parameter for one kind, across all studies.
    pub fn values(&self, kind: ExcursionKind, parameter: CohortParameter) -> Vec<f64> {
        self.subjects
            .iter()
            .filter(|s| s.kind == kind)
            .map(|s| s.get(parameter))
            .collect()
    }
}

fn make_cell(study: &str, kind: ExcursionKind, parameter: CohortParameter, values: &[f64]) -> CohortCell {
    let (mean, sd) = mean_sd(values);
    CohortCell {
        study: study.to_string(),
        kind,
        parameter,
        mean,
        sd,
        count: values.len(),
        cv: sd / mean.abs(),
    }
}

/// Tabulates subject means per study and pooled. Normality rows are added by
/// [`normality_report`] when every pooled cell has enough subjects.
pub fn cohort_table(subjects: Vec<SubjectMeans>) -> Result<CohortTable> {
    if subjects.is_empty() {
        return Err(Error::InsufficientData("no subject means".into()));
    }
    let mut table = CohortTable {
        cells: Vec::new(),
        subjects,
        normality: Vec::new(),
    };
    let studies = table.studies();
    for kind in table.kinds() {
        for &parameter in CohortParameter::for_kind(kind) {
            for study in &studies {
                let values: Vec<f64> = table
                    .subjects
                    .iter()
                    .filter(|s| &s.study == study && s.kind == kind)
                    .map(|s| s.get(parameter))
                    .collect();
                if !values.is_empty() {
                    table.cells.push(make_cell(study, kind, parameter, &values));
                }
            }
            let pooled = table.values(kind, parameter);
            table.cells.push(make_cell(OVERALL, kind, parameter, &pooled));
        }
    }
    Ok(table)
}

/// Shapiro-Wilk on the standardised per-subject means of each pooled cell,
/// including `log10 lambda` for troughs.
pub fn normality_report(table: &CohortTable) -> Result<Vec<NormalityRow>> {
    let mut rows = Vec::new();
    for kind in table.kinds() {
        for &parameter in CohortParameter::for_kind(kind) {
            let values = table.values(kind, parameter);
            if values.len() < SW_MIN_N {
                return Err(Error::InsufficientData(format!(
                    "{} {}: {} subjects, need at least {SW_MIN_N}",
                    kind.label(),
                    parameter.name(),
                    values.len()
                )));
            }
            let z = standardize(&values)?;
            let sw = shapiro_wilk(&z)?;
            rows.push(NormalityRow {
                kind,
                parameter,
                n: values.len(),
                w: sw.w,
                p_value: sw.p_value,
                normal: sw.p_value > ALPHA,
            });
        }
    }
    Ok(rows)
}

/// Bootstrap, tabulate and test in one go.
pub fn build_cohort(subjects: &[SubjectFits], resamples: usize, seed: u64) -> Result<CohortTable> {
    let means = bootstrap_subject_means(subjects, resamples, seed)?;
    let mut table = cohort_table(means)?;
    table.normality = normality_report(&table)?;
    Ok(table)
}

/// Extremes of the net input `G(t) = -a3 + F(t)` over all fitted pulses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GRange {
    pub g_min: f64,
    pub g_max: f64,
}

/// `F` ranges between 0 and the pulse amplitude, so each pulse contributes
/// `-a3 + min(amplitude, 0)` and `-a3 + max(amplitude, 0)`.
pub fn g_range(fits: &[FitResult]) -> Result<GRange> {
    if fits.is_empty() {
        return Err(Error::InsufficientData("no fits to take G extremes over".into()));
    }
    let mut range = GRange {
        g_min: f64::INFINITY,
        g_max: f64::NEG_INFINITY,
    };
    for f in fits {
        let amp = f.pulse.amplitude;
        range.g_min = range.g_min.min(-f.params.a3 + amp.min(0.0));
        range.g_max = range.g_max.max(-f.params.a3 + amp.max(0.0));
    }
    Ok(range)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(id: &str, study: &str, kind: ExcursionKind, a1: &[f64]) -> SubjectFits {
        SubjectFits {
            study: study.into(),
            subject_id: id.into(),
            kind,
            samples: a1
                .iter()
                .map(|&a| GainSample {
                    a1: a,
                    a2: 2.0 * a,
                    lambda: 0.03 + a,
                })
                .collect(),
        }
    }

    #[test]
    fn singleton_bootstrap_is_exact() {
        let v = 0.0073123;
        assert_eq!(bootstrap_mean(&[v], 1000, 1, "s").unwrap(), v);
        let m = bootstrap_subject_means(&[subject("s", "x", ExcursionKind::Peak, &[v])], 500, 3).unwrap();
        assert_eq!(m[0].a1, v);
        assert_eq!(m[0].a2, 2.0 * v);
    }

    #[test]
    fn bootstrap_converges_to_sample_mean() {
        let r = 100_000;
        let m = bootstrap_mean(&[1.0, 2.0, 3.0], r, 11, "lln").unwrap();
        // sd of a resample mean is sqrt(2/3)/sqrt(3); averaged over r resamples
        let se = ((2.0 / 3.0) / 3.0 / r as f64).sqrt();
        assert!((m - 2.0).abs() < 3.0 * se, "{m}");
    }

    #[test]
    fn bootstrap_is_deterministic_and_order_free() {
        let a = bootstrap_mean(&[1.0, 5.0, 2.0, 8.0], 2000, 9, "k").unwrap();
        let b = bootstrap_mean(&[8.0, 2.0, 1.0, 5.0], 2000, 9, "k").unwrap();
        assert_eq!(a, b);
        let c = bootstrap_mean(&[8.0, 2.0, 1.0, 5.0], 2000, 10, "k").unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bootstrap_rejects_empty() {
        assert!(bootstrap_mean(&[], 10, 0, "k").is_err());
        assert!(bootstrap_subject_means(&[], 10, 0).is_err());
        assert!(bootstrap_subject_means(&[subject("s", "x", ExcursionKind::Peak, &[])], 10, 0).is_err());
    }

    #[test]
    fn cells_count_subjects() {
        let subjects = vec![
            subject("a", "s1", ExcursionKind::Peak, &[0.007, 0.008, 0.006]),
            subject("b", "s1", ExcursionKind::Peak, &[0.009]),
            subject("c", "s2", ExcursionKind::Peak, &[0.005, 0.004]),
            subject("c", "s2", ExcursionKind::Trough, &[0.02, 0.03]),
        ];
        let means = bootstrap_subject_means(&subjects, 200, 1).unwrap();
        let table = cohort_table(means).unwrap();
        let cell = table.cell("s1", ExcursionKind::Peak, CohortParameter::A1).unwrap();
        assert_eq!(cell.count, 2);
        assert_eq!(table.cell(OVERALL, ExcursionKind::Peak, CohortParameter::A1).unwrap().count, 3);
        assert!(table.cell(OVERALL, ExcursionKind::Trough, CohortParameter::Log10Lambda).is_some());
        assert!(table.cell(OVERALL, ExcursionKind::Peak, CohortParameter::Log10Lambda).is_none());
        assert!(table.cells.iter().all(|c| c.sd >= 0.0));
        // one trough subject: too few for a normality test
        assert!(normality_report(&table).is_err());
    }

    #[test]
    fn identical_subjects_are_a_constant_sample() {
        let subjects: Vec<_> = (0..5)
            .map(|i| subject(&format!("s{i}"), "x", ExcursionKind::Peak, &[0.007]))
            .collect();
        let table = cohort_table(bootstrap_subject_means(&subjects, 10, 0).unwrap()).unwrap();
        assert!(matches!(normality_report(&table), Err(Error::ConstantSample)));
    }

    #[test]
    fn standardize_gives_unit_variance() {
        let z = standardize(&[1.0, 4.0, 2.0, 9.0]).unwrap();
        let (m, s) = mean_sd(&z);
        assert!(m.abs() < 1e-15);
        assert!((s - 1.0).abs() < 1e-15);
        assert!(standardize(&[3.0, 3.0]).is_err());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
