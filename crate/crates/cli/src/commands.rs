use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use glucoloop::analysis::{classify_stability, equilibrium, trapping_bound, trapping_bound_variable, trapping_sweep, Regime};
use glucoloop::fit::{fit_excursions, fitted_curve, prepare_excursions, FitResult, PipelineConfig};
use glucoloop::model::{simulate_integral, simulate_planar, Forcing, InputPulse, InputSignal, ModelParams, ModelState, Trajectory};
use glucoloop::signal::{ingest_csv, ingest_csv_subjects, Excursion, ExcursionKind, GlucoseTrace};
use glucoloop::stats::{
    bootstrap_subject_means, cohort_table, g_range, group_fits, histogram, normal_qq, normality_report,
    standardize, CohortParameter, CohortTable, GRange, OVERALL,
};
use serde::{Deserialize, Serialize};

use crate::args::{
    CohortArgs, Command, ExtractArgs, FitArgs, Formulation, InputArgs, PointArgs, ReportArgs, RunConfig,
    SimulateArgs, TrapArgs,
};
use crate::error::{CliError, Result};
use crate::io::{self, ExcursionRecord, FitRecord, Meta, Sink};

/// Runs `command`, embedding `config` in every output.
pub fn execute(command: &Command, config: &RunConfig) -> Result<()> {
    match command {
        Command::Simulate(a) => simulate(a, config),
        Command::Equilibrium(a) => equilibrium_cmd(a, config),
        Command::Stability(a) => stability(a, config),
        Command::Trap(a) => trap(a, config),
        Command::Extract(a) => extract(a, config),
        Command::Fit(a) => fit(a, config),
        Command::Cohort(a) => cohort(a, config),
        Command::Report(a) => report(a, config),
    }
}

fn checked_params(a: &crate::args::ParamArgs) -> Result<ModelParams<f64>> {
    let p = a.params()?;
    for w in p.range_warnings() {
        log::warn!("{w}");
    }
    Ok(p)
}

#[derive(Serialize)]
struct TrajectoryRow {
    t_min: f64,
    e_mmol_per_l: f64,
    u: f64,
    glucose_mmol_per_l: f64,
}

fn integrate<I: InputSignal<f64>>(p: &ModelParams<f64>, input: &I, a: &SimulateArgs) -> Result<Trajectory<f64>> {
    let traj = match a.form {
        Formulation::Planar => {
            let initial = ModelState::new(0.0, a.u0.unwrap_or(p.a1 * a.e0), a.e0);
            simulate_planar(p, input, initial, a.t_end, a.dt)?
        }
        Formulation::Integral => {
            if a.u0.is_some() {
                return Err(CliError::Usage(
                    "--u0 applies to the planar form only; the integral form derives u from its history".into(),
                ));
            }
            simulate_integral(p, input, a.e0, &[], 0.0, a.t_end, a.dt)?
        }
    };
    Ok(traj)
}

fn simulate(a: &SimulateArgs, config: &RunConfig) -> Result<()> {
    let p = checked_params(&a.params)?;
    let traj = match a.amplitude {
        Some(amplitude) => integrate(&p, &InputPulse::new(amplitude, a.center, a.width)?, a)?,
        None => integrate(&p, &Forcing::net(a.g.unwrap_or(0.0), p.a3), a)?,
    };
    if traj.escaped {
        log::warn!(
            "trajectory left the domain e > -e_bar at t = {} min and was truncated",
            traj.last().t
        );
    }
    let last = traj.last();
    log::info!("{} steps; final e = {}, u = {}", traj.len() - 1, last.e, last.u);
    let rows = traj.states.iter().map(|s| TrajectoryRow {
        t_min: s.t,
        e_mmol_per_l: s.e,
        u: s.u,
        glucose_mmol_per_l: s.e + p.e_bar,
    });
    Sink::create(a.out.as_deref())?.csv(&Meta::new(io::TRAJECTORY, config), rows)
}

#[derive(Serialize)]
struct EquilibriumOut {
    g: f64,
    u_star: f64,
    e_star: f64,
    glucose_star: f64,
    residual: f64,
    in_domain: bool,
    equilibrium: glucoloop::Equilibrium,
}

fn equilibrium_cmd(a: &PointArgs, config: &RunConfig) -> Result<()> {
    let p = checked_params(&a.params)?;
    let eq = equilibrium(&p, a.g)?;
    let out = EquilibriumOut {
        g: a.g,
        u_star: eq.u_star,
        e_star: eq.e_star,
        glucose_star: eq.e_star + p.e_bar,
        residual: eq.residual(&p),
        in_domain: eq.in_domain(&p),
        equilibrium: eq,
    };
    if !out.in_domain {
        log::warn!("equilibrium e* = {} lies outside the domain e > -e_bar", out.e_star);
    }
    Sink::create(a.out.as_deref())?.json(Meta::new(io::EQUILIBRIUM, config), &out)
}

fn stability(a: &PointArgs, config: &RunConfig) -> Result<()> {
    let p = checked_params(&a.params)?;
    let report = classify_stability(&p, a.g)?;
    Sink::create(a.out.as_deref())?.json(Meta::new(io::STABILITY, config), &report)
}

fn parse_floats(spec: &str, flag: &str, count: usize) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || CliError::Usage(format!("{flag} expects {count} ':'-separated numbers, got '{spec}'"));
    if parts.len() != count {
        return Err(bad());
    }
    parts.iter().map(|s| s.trim().parse::<f64>().map_err(|_| bad())).collect()
}

#[derive(Serialize)]
struct SweepRow {
    g: f64,
    c: f64,
    regime: Regime,
    max_glucose: f64,
}

fn trap(a: &TrapArgs, config: &RunConfig) -> Result<()> {
    let p = checked_params(&a.params)?;
    let sink = Sink::create(a.out.as_deref())?;
    if let Some(g) = a.g {
        return sink.json(Meta::new(io::TRAP, config), &trapping_bound(&p, g)?);
    }
    if let Some(range) = &a.g_range {
        let v = parse_floats(range, "--g-range", 2)?;
        return sink.json(Meta::new(io::TRAP, config), &trapping_bound_variable(&p, v[0], v[1])?);
    }
    let spec = a.sweep.as_deref().unwrap_or_default();
    let parts: Vec<&str> = spec.rsplitn(2, ':').collect();
    let n: usize = parts[0]
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("--sweep expects G_MIN:G_MAX:N, got '{spec}'")))?;
    let v = parse_floats(parts.get(1).copied().unwrap_or(""), "--sweep", 2)?;
    let rows = trapping_sweep(&p, v[0], v[1], n)?.into_iter().map(|b| SweepRow {
        g: b.g_max,
        c: b.c,
        regime: b.regime,
        max_glucose: b.max_glucose,
    });
    sink.csv(&Meta::new(io::TRAP_SWEEP, config), rows)
}

fn load_traces(input: &InputArgs, path: &Path) -> Result<Vec<GlucoseTrace>> {
    let layout = input.layout();
    let traces = if layout.subject_col.is_some() {
        ingest_csv_subjects(path, &layout)?
    } else {
        vec![ingest_csv(path, &layout)?]
    };
    for t in &traces {
        log::info!(
            "{}: subject {}: {} readings, {} gaps, {} quarantined",
            path.display(),
            t.subject_id,
            t.len(),
            t.gaps.len(),
            t.quarantined.len()
        );
    }
    Ok(traces)
}

/// Excursions of every CSV input, in input order.
fn excursions_from_csv(input: &InputArgs, path: &Path, pipeline: &PipelineConfig) -> Result<Vec<ExcursionRecord>> {
    let mut out = Vec::new();
    for trace in load_traces(input, path)? {
        let found = prepare_excursions(&trace, pipeline)?;
        log::info!("subject {}: {} excursions", trace.subject_id, found.len());
        out.extend(found.into_iter().map(|excursion| ExcursionRecord {
            study: input.study.clone(),
            excursion,
        }));
    }
    Ok(out)
}

fn extract(a: &ExtractArgs, config: &RunConfig) -> Result<()> {
    let pipeline = PipelineConfig {
        sigma: a.smoothing.sigma,
        extract: a.smoothing.extract_config(),
        ..PipelineConfig::default()
    };
    let mut records = Vec::new();
    for path in &a.input.input {
        records.extend(excursions_from_csv(&a.input, path, &pipeline)?);
    }
    if records.is_empty() {
        log::warn!("no excursions found");
    }
    Sink::create(a.out.as_deref())?.jsonl(&Meta::new(io::EXCURSIONS, config), &records)
}

#[derive(Serialize)]
struct CurveRow {
    t_min: f64,
    observed_e: f64,
    model_e: f64,
    observed_glucose: f64,
    model_glucose: f64,
}

fn curve_name(record: &FitRecord) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect()
    };
    format!(
        "{}__{}__{:04}.csv",
        clean(&record.study),
        clean(&record.fit.subject_id),
        record.fit.excursion_index
    )
}

fn write_curve(dir: &Path, record: &FitRecord, config: &RunConfig) -> Result<PathBuf> {
    let curve = fitted_curve(&record.excursion, &record.fit, record.dt)?;
    let e_bar = record.excursion.e_bar;
    let rows = curve.into_iter().map(|(t, o, m)| CurveRow {
        t_min: t,
        observed_e: o,
        model_e: m,
        observed_glucose: o + e_bar,
        model_glucose: m + e_bar,
    });
    let path = dir.join(curve_name(record));
    Sink::create(Some(&path))?.csv(&Meta::new(io::CURVE, config), rows)?;
    Ok(path)
}

#[derive(Serialize)]
struct TimingRow<'a> {
    study: &'a str,
    subject_id: &'a str,
    excursion_index: usize,
    seconds: f64,
}

fn fit(a: &FitArgs, config: &RunConfig) -> Result<()> {
    let pipeline = a.pipeline();
    let mut inputs: Vec<ExcursionRecord> = Vec::new();
    for path in &a.input.input {
        if io::is_json(path)? {
            let (_, records) = io::read_jsonl::<ExcursionRecord>(path, io::EXCURSIONS)?;
            log::info!("{}: {} excursions", path.display(), records.len());
            inputs.extend(records);
        } else {
            inputs.extend(excursions_from_csv(&a.input, path, &pipeline)?);
        }
    }
    let excursions: Vec<Excursion> = inputs.iter().map(|r| r.excursion.clone()).collect();
    let batch = fit_excursions(&excursions, &pipeline.fit)?;
    log::info!(
        "{} of {} excursions fitted, {} failed",
        batch.fits.len(),
        excursions.len(),
        batch.failures.len()
    );
    let records: Vec<FitRecord> = batch
        .fits
        .iter()
        .map(|f| {
            let source = &inputs[f.excursion_index];
            FitRecord {
                study: source.study.clone(),
                dt: pipeline.fit.dt_for(&source.excursion),
                fit: f.clone(),
                excursion: source.excursion.clone(),
            }
        })
        .collect();
    Sink::create(a.out.as_deref())?.jsonl(&Meta::new(io::FITS, config), &records)?;
    if let Some(dir) = &a.emit_curves {
        for r in &records {
            write_curve(dir, r, config)?;
        }
    }
    if let Some(path) = &a.timings {
        let rows = records.iter().zip(&batch.seconds).map(|(r, &seconds)| TimingRow {
            study: &r.study,
            subject_id: &r.fit.subject_id,
            excursion_index: r.fit.excursion_index,
            seconds,
        });
        Sink::create(Some(path))?.csv(&Meta::new(io::TIMINGS, config), rows)?;
    }
    Ok(())
}

fn read_fits(paths: &[PathBuf]) -> Result<Vec<FitRecord>> {
    let mut all = Vec::new();
    for path in paths {
        let (_, records) = io::read_jsonl::<FitRecord>(path, io::FITS)?;
        log::info!("{}: {} fits", path.display(), records.len());
        all.extend(records);
    }
    Ok(all)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CohortOutput {
    pub fits: usize,
    pub g_range: GRange,
    pub table: CohortTable,
}

fn cohort(a: &CohortArgs, config: &RunConfig) -> Result<()> {
    let records = read_fits(&a.fits)?;
    if records.is_empty() {
        return Err(glucoloop::Error::InsufficientData("no fit records to build a cohort from".into()).into());
    }
    let mut by_study: BTreeMap<&str, Vec<FitResult>> = BTreeMap::new();
    for r in &records {
        by_study.entry(&r.study).or_default().push(r.fit.clone());
    }
    let subjects = group_fits(by_study.iter().map(|(s, f)| (*s, f.as_slice())));
    let means = bootstrap_subject_means(&subjects, a.resamples, config.seed)?;
    let mut table = cohort_table(means)?;
    match normality_report(&table) {
        Ok(rows) => table.normality = rows,
        Err(e @ (glucoloop::Error::InsufficientData(_) | glucoloop::Error::ConstantSample)) => {
            log::warn!("normality tests skipped: {e}");
        }
        Err(e) => return Err(e.into()),
    }
    let fits: Vec<FitResult> = records.into_iter().map(|r| r.fit).collect();
    let out = CohortOutput {
        fits: fits.len(),
        g_range: g_range(&fits)?,
        table,
    };
    Sink::create(a.out.as_deref())?.json(Meta::new(io::COHORT, config), &out)
}

/// Parameters plotted per kind; troughs use log10 lambda.
fn plotted(kind: ExcursionKind) -> [CohortParameter; 3] {
    match kind {
        ExcursionKind::Peak => [CohortParameter::A1, CohortParameter::A2, CohortParameter::Lambda],
        ExcursionKind::Trough => [CohortParameter::A1, CohortParameter::A2, CohortParameter::Log10Lambda],
    }
}

fn kind_name(kind: ExcursionKind) -> &'static str {
    match kind {
        ExcursionKind::Peak => "peak",
        ExcursionKind::Trough => "trough",
    }
}

#[derive(Serialize)]
struct ScatterRow<'a> {
    study: &'a str,
    subject_id: &'a str,
    kind: &'static str,
    excursions: usize,
    a1_mean: f64,
    a2_mean: f64,
}

fn report(a: &ReportArgs, config: &RunConfig) -> Result<()> {
    let records = read_fits(&a.fits)?;
    if records.is_empty() {
        return Err(glucoloop::Error::InsufficientData("fits file holds no fit records".into()).into());
    }
    let cohort = match &a.cohort {
        Some(path) => Some(io::read_json::<CohortOutput>(path, io::COHORT)?.result),
        None => None,
    };
    let dir = &a.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;

    let overlays = dir.join("overlays");
    for r in &records {
        write_curve(&overlays, r, config)?;
    }

    let mut tables = 0;
    if let Some(c) = &cohort {
        for kind in c.table.kinds() {
            for parameter in plotted(kind) {
                let stem = format!("{}_{}", kind_name(kind), parameter.name());
                let z = match standardize(&c.table.values(kind, parameter)) {
                    Ok(z) => z,
                    Err(e) => {
                        log::warn!("{stem}: no histogram or Q-Q table: {e}");
                        continue;
                    }
                };
                let hist = histogram(&z, a.bins)?;
                Sink::create(Some(&dir.join(format!("hist_{stem}.csv"))))?.csv(&Meta::new(io::HISTOGRAM, config), hist)?;
                let qq = normal_qq(&z)?;
                Sink::create(Some(&dir.join(format!("qq_{stem}.csv"))))?.csv(&Meta::new(io::QQ, config), qq)?;
                tables += 1;
            }
        }
        let rows = c.table.subjects.iter().map(|s| ScatterRow {
            study: &s.study,
            subject_id: &s.subject_id,
            kind: kind_name(s.kind),
            excursions: s.excursions,
            a1_mean: s.a1,
            a2_mean: s.a2,
        });
        Sink::create(Some(&dir.join("scatter.csv")))?.csv(&Meta::new(io::SCATTER, config), rows)?;
    }

    let text = summary(&records, cohort.as_ref());
    Sink::create(Some(&dir.join("summary.txt")))?.text(&Meta::new(io::SUMMARY, config), &text)?;
    log::info!(
        "{} overlays, {} histogram/Q-Q pairs in {}",
        records.len(),
        tables,
        dir.display()
    );
    Ok(())
}

fn summary(records: &[FitRecord], cohort: Option<&CohortOutput>) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(s, "fits: {}", records.len());
    for kind in [ExcursionKind::Peak, ExcursionKind::Trough] {
        let mut errors: Vec<f64> = records
            .iter()
            .filter(|r| r.fit.kind == kind)
            .map(|r| r.fit.error)
            .collect();
        if errors.is_empty() {
            continue;
        }
        errors.sort_by(f64::total_cmp);
        let n = errors.len();
        let good = errors.iter().filter(|&&e| e < 0.05).count();
        let converged = records.iter().filter(|r| r.fit.kind == kind && r.fit.converged).count();
        let pinned = records
            .iter()
            .filter(|r| r.fit.kind == kind && r.fit.flags.boundary_pinned)
            .count();
        let _ = writeln!(
            s,
            "  {:<6} n = {n:<5} median E = {:.3e}  E < 0.05: {good}/{n}  converged: {converged}/{n}  on a bound: {pinned}",
            kind_name(kind),
            errors[n / 2],
        );
    }
    let Some(c) = cohort else {
        return s;
    };
    let _ = writeln!(
        s,
        "\nnet input range over fitted pulses: G_min = {:.4}, G_max = {:.4}",
        c.g_range.g_min, c.g_range.g_max
    );
    let _ = writeln!(s, "\ncohort (subject bootstrap means)");
    let _ = writeln!(
        s,
        "  {:<16} {:<7} {:<13} {:>12} {:>12} {:>8} {:>5}",
        "study", "kind", "parameter", "mean", "sd", "cv", "n"
    );
    let mut studies = c.table.studies();
    studies.push(OVERALL.to_string());
    for study in &studies {
        for kind in c.table.kinds() {
            for &parameter in CohortParameter::for_kind(kind) {
                if let Some(cell) = c.table.cell(study, kind, parameter) {
                    let _ = writeln!(
                        s,
                        "  {:<16} {:<7} {:<13} {:>12.5} {:>12.5} {:>8.3} {:>5}",
                        study,
                        kind_name(kind),
                        parameter.name(),
                        cell.mean,
                        cell.sd,
                        cell.cv,
                        cell.count
                    );
                }
            }
        }
    }
    if c.table.normality.is_empty() {
        let _ = writeln!(s, "\nnormality: not tested (too few subjects)");
    } else {
        let _ = writeln!(s, "\nShapiro-Wilk on standardised subject means (alpha = 0.05)");
        for row in &c.table.normality {
            let _ = writeln!(
                s,
                "  {:<7} {:<13} n = {:<5} W = {:.4}  p = {:.4}  {}",
                kind_name(row.kind),
                row.parameter.name(),
                row.n,
                row.w,
                row.p_value,
                if row.normal { "normal" } else { "rejected" }
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_parse_with_negative_bounds() {
        assert_eq!(parse_floats("-0.1:0.25", "--g-range", 2).unwrap(), vec![-0.1, 0.25]);
        assert!(parse_floats("0.1", "--g-range", 2).is_err());
        assert!(parse_floats("a:b", "--g-range", 2).is_err());
    }

    #[test]
    fn summary_of_no_fits_is_just_the_count() {
        let records: Vec<FitRecord> = Vec::new();
        assert_eq!(summary(&records, None), "fits: 0\n");
    }
}
