//! CGM ingestion, Gaussian smoothing and excursion extraction.
//!
//! A peak is built around a local maximum of the smoothed series (first
//! derivative turning from positive to negative). From there the segment is
//! grown outward through the concave core and the convex flanks; it ends
//! where the flank stops being convex or where the series turns back up.
//! The segment minimum becomes the excursion baseline `e_bar`. Troughs are the
//! same construction on the negated series, with the segment maximum as
//! baseline.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// mg/dL per mmol/L for glucose.
pub const MGDL_PER_MMOL: f64 = 18.016;

/// Readings outside `(0, GLUCOSE_CEILING)` mmol/L are quarantined.
pub const GLUCOSE_CEILING: f64 = 40.0;

/// A spacing above this multiple of the nominal interval is a gap.
pub const GAP_FACTOR: f64 = 1.5;

/// Fraction of unparseable rows tolerated before ingestion aborts.
pub const BAD_ROW_BUDGET: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GlucoseUnit {
    #[default]
    Mmol,
    Mgdl,
}

impl GlucoseUnit {
    pub fn to_mmol(self, value: f64) -> f64 {
        match self {
            GlucoseUnit::Mmol => value,
            GlucoseUnit::Mgdl => value / MGDL_PER_MMOL,
        }
    }
}

impl std::str::FromStr for GlucoseUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mmol" | "mmol/l" => Ok(GlucoseUnit::Mmol),
            "mgdl" | "mg/dl" => Ok(GlucoseUnit::Mgdl),
            other => Err(Error::InvalidInput(format!("unknown glucose unit '{other}'"))),
        }
    }
}

/// CSV column selected by header name or zero-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Column {
    Index(usize),
    Name(String),
}

impl Column {
    fn resolve(&self, headers: &csv::StringRecord) -> Result<usize> {
        match self {
            Column::Index(i) if *i < headers.len() => Ok(*i),
            Column::Index(i) => Err(Error::InvalidInput(format!(
                "column index {i} out of range ({} columns)",
                headers.len()
            ))),
            Column::Name(name) => headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::InvalidInput(format!("no column named '{name}'"))),
        }
    }
}

impl From<&str> for Column {
    fn from(s: &str) -> Self {
        match s.parse::<usize>() {
            Ok(i) => Column::Index(i),
            Err(_) => Column::Name(s.to_string()),
        }
    }
}

/// How to read a CGM export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvLayout {
    pub time_col: Column,
    pub glucose_col: Column,
    pub unit: GlucoseUnit,
    /// Nominal sampling interval in minutes (15 for Libre-like, 5 for Dexcom-like devices).
    pub nominal_interval: f64,
    /// Column holding a subject identifier, for multi-subject files.
    #[serde(default)]
    pub subject_col: Option<Column>,
}

impl Default for CsvLayout {
    fn default() -> Self {
        CsvLayout {
            time_col: Column::Index(0),
            glucose_col: Column::Index(1),
            unit: GlucoseUnit::Mmol,
            nominal_interval: 15.0,
            subject_col: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Minutes since the Unix epoch (or any fixed origin).
    pub t: f64,
    /// mmol/L
    pub glucose: f64,
}

/// Missing data between `samples[start_idx]` and `samples[end_idx]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub start_idx: usize,
    pub end_idx: usize,
    pub duration: f64,
}

/// A reading removed from the series because it is physiologically implausible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quarantined {
    pub t: f64,
    pub glucose: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlucoseTrace {
    pub subject_id: String,
    pub samples: Vec<Sample>,
    pub nominal_interval: f64,
    pub gaps: Vec<Gap>,
    pub quarantined: Vec<Quarantined>,
}

impl GlucoseTrace {
    /// Builds a trace from readings in any order.
    ///
    /// Readings are sorted by time, duplicate timestamps keep their first
    /// reading, out-of-range values are quarantined, and spacings wider than
    /// [`GAP_FACTOR`] nominal intervals are recorded as gaps.
    pub fn from_readings(
        subject_id: impl Into<String>,
        readings: impl IntoIterator<Item = Sample>,
        nominal_interval: f64,
    ) -> Result<Self> {
        if !(nominal_interval > 0.0) || !nominal_interval.is_finite() {
            return Err(Error::InvalidInput(format!(
                "nominal interval must be positive, got {nominal_interval}"
            )));
        }
        let mut all: Vec<Sample> = readings.into_iter().collect();
        if all.iter().any(|s| !s.t.is_finite()) {
            return Err(Error::InvalidInput("non-finite timestamp".into()));
        }
        // stable sort keeps the first of duplicated timestamps in front
        all.sort_by(|a, b| a.t.total_cmp(&b.t));
        let before = all.len();
        all.dedup_by(|later, earlier| later.t == earlier.t);
        if all.len() < before {
            log::debug!("dropped {} duplicate timestamps", before - all.len());
        }
        let (samples, quarantined): (Vec<_>, Vec<_>) = all
            .into_iter()
            .partition(|s| s.glucose > 0.0 && s.glucose < GLUCOSE_CEILING);
        let quarantined = quarantined
            .into_iter()
            .map(|s| Quarantined {
                t: s.t,
                glucose: s.glucose,
            })
            .collect();
        let gaps = find_gaps(&samples, nominal_interval);
        Ok(GlucoseTrace {
            subject_id: subject_id.into(),
            samples,
            nominal_interval,
            gaps,
            quarantined,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.glucose).collect()
    }

    /// Maximal index ranges free of gaps.
    pub fn runs(&self) -> Vec<Range<usize>> {
        let mut runs = Vec::with_capacity(self.gaps.len() + 1);
        let mut start = 0;
        for gap in &self.gaps {
            runs.push(start..gap.end_idx);
            start = gap.end_idx;
        }
        if start < self.samples.len() {
            runs.push(start..self.samples.len());
        }
        runs.retain(|r| !r.is_empty());
        runs
    }

    /// Same trace with every timestamp moved by `offset` minutes.
    pub fn shifted(&self, offset: f64) -> Self {
        let mut out = self.clone();
        for s in &mut out.samples {
            s.t += offset;
        }
        for q in &mut out.quarantined {
            q.t += offset;
        }
        out
    }

    /// Same trace with values mapped through `f` (gaps and quarantine unchanged).
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for s in &mut out.samples {
            s.glucose = f(s.glucose);
        }
        out
    }
}

fn find_gaps(samples: &[Sample], nominal_interval: f64) -> Vec<Gap> {
    samples
        .windows(2)
        .enumerate()
        .filter_map(|(i, w)| {
            let spacing = w[1].t - w[0].t;
            (spacing > GAP_FACTOR * nominal_interval).then_some(Gap {
                start_idx: i,
                end_idx: i + 1,
                duration: spacing,
            })
        })
        .collect()
}

const DATETIME_FORMATS: &[&str] = &[
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
    "%Y/%m/%d %H:%M:%S",
    "%Y/%m/%d %H:%M",
    "%m/%d/%Y %H:%M:%S",
    "%m/%d/%Y %H:%M",
    "%d-%m-%Y %H:%M:%S",
    "%d-%m-%Y %H:%M",
];

/// Parses a timestamp as minutes since the Unix epoch.
///
/// Plain numbers are taken to already be minutes. Date-times without an
/// offset are read as naive local clock time.
pub fn parse_timestamp(raw: &str) -> Option<f64> {
    let s = raw.trim();
    if s.is_empty() {
        return None;
    }
    if let Ok(x) = s.parse::<f64>() {
        return x.is_finite().then_some(x);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp() as f64 / 60.0 + f64::from(dt.timestamp_subsec_millis()) / 60_000.0);
    }
    DATETIME_FORMATS.iter().find_map(|fmt| {
        NaiveDateTime::parse_from_str(s, fmt).ok().map(|dt| {
            let utc = dt.and_utc();
            utc.timestamp() as f64 / 60.0 + f64::from(utc.timestamp_subsec_millis()) / 60_000.0
        })
    })
}

struct ParsedRows {
    readings: BTreeMap<String, Vec<Sample>>,
}

fn read_rows(path: &Path, layout: &CsvLayout, default_subject: &str) -> Result<ParsedRows> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::EmptyFile { path: path.into() });
    }
    let time_idx = layout.time_col.resolve(&headers)?;
    let glucose_idx = layout.glucose_col.resolve(&headers)?;
    let subject_idx = layout
        .subject_col
        .as_ref()
        .map(|c| c.resolve(&headers))
        .transpose()?;

    let mut readings: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    let mut bad: Vec<(u64, String)> = Vec::new();
    let mut total = 0usize;
    for (i, record) in reader.records().enumerate() {
        total += 1;
        // header is line 1
        let line = record
            .as_ref()
            .ok()
            .and_then(|r| r.position().map(|p| p.line()))
            .unwrap_or(i as u64 + 2);
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                bad.push((line, e.to_string()));
                continue;
            }
        };
        let t = record.get(time_idx).and_then(parse_timestamp);
        let g = record
            .get(glucose_idx)
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|v| v.is_finite());
        match (t, g) {
            (Some(t), Some(g)) => {
                let subject = subject_idx
                    .and_then(|k| record.get(k))
                    .filter(|s| !s.is_empty())
                    .unwrap_or(default_subject)
                    .to_string();
                readings.entry(subject).or_default().push(Sample {
                    t,
                    glucose: layout.unit.to_mmol(g),
                });
            }
            (t, _) => {
                let why = if t.is_none() {
                    format!("unparseable timestamp {:?}", record.get(time_idx).unwrap_or(""))
                } else {
                    format!("unparseable glucose {:?}", record.get(glucose_idx).unwrap_or(""))
                };
                bad.push((line, why));
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyFile { path: path.into() });
    }
    if bad.len() as f64 > BAD_ROW_BUDGET * total as f64 {
        let report = bad
            .iter()
            .take(20)
            .map(|(line, why)| format!("  line {line}: {why}"))
            .chain((bad.len() > 20).then(|| format!("  ... and {} more", bad.len() - 20)))
            .collect::<Vec<_>>()
            .join("\n");
        return Err(Error::TooManyBadRows {
            path: path.into(),
            bad: bad.len(),
            total,
            report,
        });
    }
    if !bad.is_empty() {
        log::warn!("{}: skipped {} unparseable rows", path.display(), bad.len());
    }
    Ok(ParsedRows { readings })
}

fn default_subject(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "subject".into())
}

/// Reads a single-subject CGM export. The subject id is the file stem.
pub fn ingest_csv(path: impl AsRef<Path>, layout: &CsvLayout) -> Result<GlucoseTrace> {
    let path = path.as_ref();
    let subject = default_subject(path);
    let layout = CsvLayout {
        subject_col: None,
        ..layout.clone()
    };
    let rows = read_rows(path, &layout, &subject)?;
    let readings = rows.readings.into_values().next().unwrap_or_default();
    if readings.is_empty() {
        return Err(Error::EmptyFile { path: path.into() });
    }
    GlucoseTrace::from_readings(subject, readings, layout.nominal_interval)
}

/// Reads a CGM export that may hold several subjects, split by `layout.subject_col`.
pub fn ingest_csv_subjects(path: impl AsRef<Path>, layout: &CsvLayout) -> Result<Vec<GlucoseTrace>> {
    let path = path.as_ref();
    if layout.subject_col.is_none() {
        return Ok(vec![ingest_csv(path, layout)?]);
    }
    let rows = read_rows(path, layout, &default_subject(path))?;
    rows.readings
        .into_iter()
        .map(|(id, readings)| GlucoseTrace::from_readings(id, readings, layout.nominal_interval))
        .collect()
}

/// Kernel support in standard deviations.
const KERNEL_HALF_WIDTH: f64 = 5.0;

/// Gaussian smoothing with standard deviation `sigma` minutes.
///
/// The kernel is evaluated on actual time differences, truncated at five
/// standard deviations and renormalised at run boundaries; it never reaches
/// across a gap.
pub fn smooth(trace: &GlucoseTrace, sigma: f64) -> Result<GlucoseTrace> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!(
            "smoothing sigma must be positive, got {sigma}"
        )));
    }
    let reach = KERNEL_HALF_WIDTH * sigma;
    let denom = 2.0 * sigma * sigma;
    let mut out = trace.clone();
    for run in trace.runs() {
        let run_samples = &trace.samples[run.clone()];
        let mut lo = 0;
        for (i, s) in run_samples.iter().enumerate() {
            while run_samples[lo].t < s.t - reach {
                lo += 1;
            }
            let mut weight_sum = 0.0;
            let mut acc = 0.0;
            for other in run_samples[lo..].iter().take_while(|o| o.t <= s.t + reach) {
                let d = other.t - s.t;
                let w = (-(d * d) / denom).exp();
                weight_sum += w;
                acc += w * other.glucose;
            }
            out.samples[run.start + i].glucose = acc / weight_sum;
        }
    }
    Ok(out)
}

/// Central-difference first and second derivatives; `None` where the
/// stencil would leave the gap-free run.
pub fn derivatives(trace: &GlucoseTrace) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    let n = trace.len();
    let mut d1 = vec![None; n];
    let mut d2 = vec![None; n];
    for run in trace.runs() {
        for i in run.start + 1..run.end.saturating_sub(1) {
            let (a, b, c) = (trace.samples[i - 1], trace.samples[i], trace.samples[i + 1]);
            let left = (b.glucose - a.glucose) / (b.t - a.t);
            let right = (c.glucose - b.glucose) / (c.t - b.t);
            d1[i] = Some((c.glucose - a.glucose) / (c.t - a.t));
            d2[i] = Some(2.0 * (right - left) / (c.t - a.t));
        }
    }
    (d1, d2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExcursionKind {
    Peak,
    Trough,
}

impl ExcursionKind {
    /// +1 for peaks, -1 for troughs.
    pub fn sign(self) -> f64 {
        match self {
            ExcursionKind::Peak => 1.0,
            ExcursionKind::Trough => -1.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ExcursionKind::Peak => "peak",
            ExcursionKind::Trough => "trough",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExcursionFlags {
    /// Segment absorbed one or more shallow secondary extrema.
    pub multimodal: bool,
    /// Baseline outside the typical set-point range [4.0, 5.9].
    pub baseline_atypical: bool,
    /// Baseline outside [3.0, 8.0]; likely a sensor artifact.
    pub baseline_suspect: bool,
}

/// An extracted peak or trough.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excursion {
    pub subject_id: String,
    pub kind: ExcursionKind,
    /// Indices into the parent trace, inclusive.
    pub start_idx: usize,
    pub end_idx: usize,
    /// Baseline glucose, mmol/L.
    pub e_bar: f64,
    pub times: Vec<f64>,
    pub glucose: Vec<f64>,
    /// `glucose - e_bar`
    pub deviation: Vec<f64>,
    pub nominal_interval: f64,
    pub flags: ExcursionFlags,
}

impl Excursion {
    /// Builds an excursion directly from samples; the baseline is the segment
    /// minimum (peak) or maximum (trough).
    pub fn from_samples(
        subject_id: impl Into<String>,
        kind: ExcursionKind,
        times: Vec<f64>,
        glucose: Vec<f64>,
        nominal_interval: f64,
    ) -> Result<Self> {
        if times.len() != glucose.len() || times.is_empty() {
            return Err(Error::InvalidInput(
                "excursion needs equally many, non-zero, times and values".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("excursion times must increase".into()));
        }
        let e_bar = match kind {
            ExcursionKind::Peak => glucose.iter().copied().fold(f64::INFINITY, f64::min),
            ExcursionKind::Trough => glucose.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        let n = times.len();
        Ok(Excursion {
            subject_id: subject_id.into(),
            kind,
            start_idx: 0,
            end_idx: n - 1,
            e_bar,
            deviation: glucose.iter().map(|g| g - e_bar).collect(),
            times,
            glucose,
            nominal_interval,
            flags: baseline_flags(e_bar),
        })
    }

    /// Builds an excursion around a known baseline (deviations may take either sign).
    pub fn with_baseline(
        subject_id: impl Into<String>,
        kind: ExcursionKind,
        times: Vec<f64>,
        deviation: Vec<f64>,
        e_bar: f64,
        nominal_interval: f64,
    ) -> Result<Self> {
        let glucose = deviation.iter().map(|d| e_bar + d).collect();
        let mut exc = Excursion::from_samples(subject_id, kind, times, glucose, nominal_interval)?;
        exc.e_bar = e_bar;
        exc.deviation = deviation;
        exc.flags = baseline_flags(e_bar);
        Ok(exc)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.times.last().unwrap_or(&0.0) - self.times.first().unwrap_or(&0.0)
    }

    /// Largest `|deviation|`.
    pub fn amplitude(&self) -> f64 {
        self.deviation.iter().fold(0.0f64, |m, d| m.max(d.abs()))
    }

    /// Index within the segment of the extremum.
    pub fn extremum_index(&self) -> usize {
        let sign = self.kind.sign();
        self.deviation
            .iter()
            .enumerate()
            .max_by(|a, b| (sign * a.1).total_cmp(&(sign * b.1)))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

fn baseline_flags(e_bar: f64) -> ExcursionFlags {
    ExcursionFlags {
        multimodal: false,
        baseline_atypical: !(4.0..=5.9).contains(&e_bar),
        baseline_suspect: !(3.0..=8.0).contains(&e_bar),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    /// Excursions whose largest |deviation| is below this are dropped, mmol/L.
    pub min_deviation: f64,
    /// Second derivatives within this band count as zero, mmol/(L min^2).
    pub curvature_tolerance: f64,
    /// A turn-back on a flank smaller than this is absorbed into the segment
    /// (and flagged as multimodal) instead of ending it, mmol/L.
    pub merge_tolerance: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            min_deviation: 0.5,
            curvature_tolerance: 1e-5,
            merge_tolerance: 0.1,
        }
    }
}

impl ExtractConfig {
    pub fn with_min_deviation(min_deviation: f64) -> Self {
        ExtractConfig {
            min_deviation,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Curvature {
    Convex,
    Flat,
    Concave,
}

struct Oriented<'a> {
    values: Vec<f64>,
    curvature: Vec<Option<Curvature>>,
    run: &'a Range<usize>,
}

/// Rises smaller than this (mmol/L) are rounding noise, not a turn back up.
const RISE_FLOOR: f64 = 1e-9;

impl Oriented<'_> {
    /// Walks from the extremum at `peak` in direction `step` (+1/-1).
    /// Returns the endpoint and whether a shallow extremum was absorbed, or
    /// `None` if the walk ran into the edge of the run.
    fn walk(&self, peak: usize, step: isize, merge_tolerance: f64) -> Option<(usize, bool)> {
        let inside = |k: isize| k >= self.run.start as isize && k < self.run.end as isize;
        let mut merged = false;
        let mut seen_convex = false;
        // a merge that never finds an end is undone: stop at its valley instead
        let mut fallback: Option<(usize, bool)> = None;
        let mut prev = peak as isize;
        loop {
            let k = prev + step;
            if !inside(k) {
                return fallback;
            }
            let (ku, pu) = (k as usize, prev as usize);
            if self.values[ku] > self.values[pu] + RISE_FLOOR {
                // Turning back up: a valley at `prev`. Absorb it only if the
                // following rebound stays shallow and below the main extremum.
                let mut top = ku;
                let mut j = k;
                while inside(j + step) && self.values[(j + step) as usize] >= self.values[j as usize] {
                    j += step;
                    top = j as usize;
                }
                let rebound = self.values[top] - self.values[pu];
                if inside(j + step) && rebound < merge_tolerance && self.values[top] < self.values[peak] {
                    fallback = Some((pu, merged));
                    merged = true;
                    seen_convex = false;
                    prev = j;
                    continue;
                }
                return Some((pu, merged));
            }
            match self.curvature[ku] {
                None => return fallback,
                Some(Curvature::Convex) => seen_convex = true,
                Some(_) if seen_convex => return Some((ku, merged)),
                Some(_) => {}
            }
            prev = k;
        }
    }
}

/// Extracts peaks and troughs from a (smoothed) trace.
///
/// Returned excursions are ordered by start index, peaks and troughs interleaved.
pub fn extract_excursions(trace: &GlucoseTrace, config: &ExtractConfig) -> Result<Vec<Excursion>> {
    if !(config.min_deviation > 0.0) {
        return Err(Error::InvalidInput(format!(
            "min_deviation must be positive, got {}",
            config.min_deviation
        )));
    }
    let (_, d2) = derivatives(trace);
    let mut out = Vec::new();
    for kind in [ExcursionKind::Peak, ExcursionKind::Trough] {
        out.extend(extract_kind(trace, &d2, kind, config));
    }
    out.sort_by_key(|x| (x.start_idx, x.kind));
    Ok(out)
}

fn extract_kind(
    trace: &GlucoseTrace,
    d2: &[Option<f64>],
    kind: ExcursionKind,
    config: &ExtractConfig,
) -> Vec<Excursion> {
    let sign = kind.sign();
    let tol = config.curvature_tolerance;
    let mut candidates: Vec<(f64, Excursion)> = Vec::new();
    for run in trace.runs() {
        let oriented = Oriented {
            values: trace.samples.iter().map(|s| sign * s.glucose).collect(),
            curvature: d2
                .iter()
                .map(|d| {
                    d.map(|x| {
                        let x = sign * x;
                        if x > tol {
                            Curvature::Convex
                        } else if x < -tol {
                            Curvature::Concave
                        } else {
                            Curvature::Flat
                        }
                    })
                })
                .collect(),
            run: &run,
        };
        let v = &oriented.values;
        for i in run.start + 1..run.end.saturating_sub(1) {
            // forward slope turns from positive to non-positive
            if !(v[i] > v[i - 1] && v[i] >= v[i + 1]) {
                continue;
            }
            // a genuine extremum sits on a curved core, not on rounding noise
            if oriented.curvature[i] != Some(Curvature::Concave) {
                continue;
            }
            let Some((end, merged_right)) = oriented.walk(i, 1, config.merge_tolerance) else {
                continue;
            };
            let Some((start, merged_left)) = oriented.walk(i, -1, config.merge_tolerance) else {
                continue;
            };
            let segment = &trace.samples[start..=end];
            let times: Vec<f64> = segment.iter().map(|s| s.t).collect();
            let glucose: Vec<f64> = segment.iter().map(|s| s.glucose).collect();
            // construction cannot fail: times increase within a trace
            let Ok(mut exc) =
                Excursion::from_samples(trace.subject_id.clone(), kind, times, glucose, trace.nominal_interval)
            else {
                continue;
            };
            if exc.amplitude() < config.min_deviation {
                continue;
            }
            exc.start_idx = start;
            exc.end_idx = end;
            exc.flags.multimodal = merged_left || merged_right;
            candidates.push((v[i], exc));
        }
    }
    // keep the most prominent of overlapping candidates; touching endpoints are fine
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.start_idx.cmp(&b.1.start_idx)));
    let mut kept: Vec<Excursion> = Vec::new();
    for (_, exc) in candidates {
        let overlaps = kept
            .iter()
            .any(|k| exc.start_idx < k.end_idx && k.start_idx < exc.end_idx);
        if !overlaps {
            kept.push(exc);
        }
    }
    kept
}
