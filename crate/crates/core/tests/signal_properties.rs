use std::io::Write;

use glucoloop::error::Error;
use glucoloop::signal::{
    extract_excursions, ingest_csv, ingest_csv_subjects, smooth, Column, CsvLayout, ExcursionKind,
    ExtractConfig, GlucoseTrace, GlucoseUnit, Sample,
};
use proptest::prelude::*;

const INTERVAL: f64 = 5.0;

fn trace_from(values: &[f64]) -> GlucoseTrace {
    GlucoseTrace::from_readings(
        "s",
        values.iter().enumerate().map(|(i, &g)| Sample {
            t: i as f64 * INTERVAL,
            glucose: g,
        }),
        INTERVAL,
    )
    .unwrap()
}

/// Baseline 5.0 plus a sum of Gaussian bumps `(center, width, height)`.
fn bumps(n: usize, list: &[(f64, f64, f64)]) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = i as f64 * INTERVAL;
            5.0 + list
                .iter()
                .map(|&(c, w, h)| h * (-0.5 * ((t - c) / w).powi(2)).exp())
                .sum::<f64>()
        })
        .collect()
}

fn bump_list() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec(
        (
            200.0f64..2800.0,
            15.0f64..60.0,
            prop_oneof![-2.5f64..-0.3, 0.3f64..3.0],
        ),
        1..6,
    )
}

fn extract(values: &[f64]) -> Vec<glucoloop::signal::Excursion> {
    let trace = smooth(&trace_from(values), INTERVAL).unwrap();
    extract_excursions(&trace, &ExtractConfig::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn time_shift_moves_excursions_rigidly(list in bump_list(), offset in -1.0e6f64..1.0e6) {
        // offsets that are exact in binary keep the stencils bit-identical
        let offset = (offset / INTERVAL).round() * INTERVAL;
        let trace = smooth(&trace_from(&bumps(600, &list)), INTERVAL).unwrap();
        let base = extract_excursions(&trace, &ExtractConfig::default()).unwrap();
        let moved = extract_excursions(&trace.shifted(offset), &ExtractConfig::default()).unwrap();
        prop_assert_eq!(base.len(), moved.len());
        for (a, b) in base.iter().zip(&moved) {
            prop_assert_eq!(a.kind, b.kind);
            prop_assert_eq!((a.start_idx, a.end_idx), (b.start_idx, b.end_idx));
            prop_assert_eq!(a.e_bar, b.e_bar);
            for (ta, tb) in a.times.iter().zip(&b.times) {
                prop_assert!((ta + offset - tb).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reflection_swaps_peaks_and_troughs(list in bump_list()) {
        let values = bumps(600, &list);
        // both the trace and its mirror image must stay clear of quarantine
        prop_assume!(values.iter().all(|&g| g > 0.5 && g < 19.5));
        let mirrored: Vec<f64> = values.iter().map(|g| 20.0 - g).collect();
        let a = extract(&values);
        let b = extract(&mirrored);
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_ne!(x.kind, y.kind);
            prop_assert_eq!((x.start_idx, x.end_idx), (y.start_idx, y.end_idx));
            prop_assert!((x.e_bar - (20.0 - y.e_bar)).abs() < 1e-9);
        }
    }

    #[test]
    fn segments_of_a_kind_do_not_overlap(list in bump_list()) {
        let ex = extract(&bumps(600, &list));
        for kind in [ExcursionKind::Peak, ExcursionKind::Trough] {
            let same: Vec<_> = ex.iter().filter(|e| e.kind == kind).collect();
            for w in same.windows(2) {
                // a shared endpoint is allowed, interiors are disjoint
                prop_assert!(w[1].start_idx >= w[0].end_idx);
            }
        }
    }

    #[test]
    fn deviations_carry_the_sign_of_their_kind(list in bump_list()) {
        let config = ExtractConfig::default();
        for exc in extract(&bumps(600, &list)) {
            let sign = exc.kind.sign();
            prop_assert!(exc.deviation.iter().all(|d| sign * d >= 0.0));
            prop_assert!(exc.amplitude() >= config.min_deviation);
            prop_assert_eq!(exc.len(), exc.end_idx - exc.start_idx + 1);
        }
    }
}

#[test]
fn excursions_never_span_a_gap() {
    let mut values = bumps(600, &[(600.0, 30.0, 2.0), (1500.0, 30.0, -1.5), (2400.0, 30.0, 2.0)]);
    // drop a stretch in the middle of the second bump
    let readings: Vec<Sample> = values
        .drain(..)
        .enumerate()
        .filter(|(i, _)| !(298..304).contains(i))
        .map(|(i, g)| Sample {
            t: i as f64 * INTERVAL,
            glucose: g,
        })
        .collect();
    let trace = GlucoseTrace::from_readings("s", readings, INTERVAL).unwrap();
    assert_eq!(trace.gaps.len(), 1);
    let trace = smooth(&trace, INTERVAL).unwrap();
    let ex = extract_excursions(&trace, &ExtractConfig::default()).unwrap();
    let gap = trace.gaps[0];
    assert_eq!(ex.len(), 2);
    for e in &ex {
        assert_eq!(e.kind, ExcursionKind::Peak);
        assert!(e.end_idx <= gap.start_idx || e.start_idx >= gap.end_idx);
    }
}

fn write_csv(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.path().join(name);
    let mut f = std::fs::File::create(&path).unwrap();
    f.write_all(body.as_bytes()).unwrap();
    path
}

fn layout(unit: GlucoseUnit) -> CsvLayout {
    CsvLayout {
        time_col: Column::from("time"),
        glucose_col: Column::from("glucose"),
        unit,
        nominal_interval: 15.0,
        subject_col: None,
    }
}

#[test]
fn four_well_formed_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_csv(
        &dir,
        "subject-7.csv",
        "time,glucose\n2024-03-01T08:00:00Z,5.1\n2024-03-01T08:15:00Z,5.3\n2024-03-01T08:30:00Z,5.6\n2024-03-01T08:45:00Z,5.2\n",
    );
    let trace = ingest_csv(&path, &layout(GlucoseUnit::Mmol)).unwrap();
    assert_eq!(trace.subject_id, "subject-7");
    assert_eq!(trace.len(), 4);
    assert!(trace.gaps.is_empty());
    assert_eq!(trace.times()[3] - trace.times()[0], 45.0);
}

#[test]
fn one_forty_five_minute_hole_is_one_gap() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_csv(&dir, "s.csv", "time,glucose\n0,5.1\n15,5.3\n60,5.6\n75,5.2\n90,5.0\n");
    let trace = ingest_csv(&path, &layout(GlucoseUnit::Mmol)).unwrap();
    assert_eq!(trace.gaps.len(), 1);
    assert_eq!(trace.gaps[0].duration, 45.0);
    assert_eq!((trace.gaps[0].start_idx, trace.gaps[0].end_idx), (1, 2));
}

#[test]
fn mgdl_is_converted() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_csv(&dir, "s.csv", "time,glucose\n0,90\n15,100\n");
    let trace = ingest_csv(&path, &layout(GlucoseUnit::Mgdl)).unwrap();
    assert!((trace.values()[0] - 4.996).abs() < 5e-4);
    assert!((trace.values()[0] - 90.0 / 18.016).abs() < 1e-12);
}

#[test]
fn unsorted_and_duplicated_rows_are_normalized() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_csv(&dir, "s.csv", "time,glucose\n30,5.5\n0,5.0\n15,5.2\n15,9.9\n45,55.0\n");
    let trace = ingest_csv(&path, &layout(GlucoseUnit::Mmol)).unwrap();
    assert_eq!(trace.times(), vec![0.0, 15.0, 30.0]);
    assert_eq!(trace.values()[1], 5.2);
    assert_eq!(trace.quarantined.len(), 1);
}

#[test]
fn bad_rows_within_budget_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = String::from("time,glucose\n");
    for i in 0..40 {
        body.push_str(&format!("{},{}\n", i * 15, 5.0 + 0.01 * i as f64));
    }
    body.push_str("oops,5.0\n");
    let path = write_csv(&dir, "s.csv", &body);
    let trace = ingest_csv(&path, &layout(GlucoseUnit::Mmol)).unwrap();
    assert_eq!(trace.len(), 40);
}

#[test]
fn bad_rows_beyond_budget_are_reported_by_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_csv(&dir, "s.csv", "time,glucose\n0,5.0\n15,n/a\n30,5.1\nlater,5.2\n60,5.3\n");
    match ingest_csv(&path, &layout(GlucoseUnit::Mmol)) {
        Err(Error::TooManyBadRows { bad, total, report, .. }) => {
            assert_eq!((bad, total), (2, 5));
            assert!(report.contains("line 3"), "{report}");
            assert!(report.contains("line 5"), "{report}");
        }
        other => panic!("expected a bad-row error, got {other:?}"),
    }
}

#[test]
fn empty_and_missing_files_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write_csv(&dir, "empty.csv", "");
    assert!(matches!(ingest_csv(&empty, &layout(GlucoseUnit::Mmol)), Err(Error::EmptyFile { .. })));
    let header_only = write_csv(&dir, "header.csv", "time,glucose\n");
    assert!(matches!(
        ingest_csv(&header_only, &layout(GlucoseUnit::Mmol)),
        Err(Error::EmptyFile { .. })
    ));
    assert!(matches!(
        ingest_csv(dir.path().join("missing.csv"), &layout(GlucoseUnit::Mmol)),
        Err(Error::Io { .. })
    ));
}

#[test]
fn multi_subject_files_split_by_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_csv(
        &dir,
        "cohort.csv",
        "id,time,glucose\nb,0,5.0\na,0,4.8\nb,15,5.1\na,15,4.9\na,30,5.0\n",
    );
    let layout = CsvLayout {
        subject_col: Some(Column::from("id")),
        ..layout(GlucoseUnit::Mmol)
    };
    let traces = ingest_csv_subjects(&path, &layout).unwrap();
    let ids: Vec<_> = traces.iter().map(|t| (t.subject_id.as_str(), t.len())).collect();
    assert_eq!(ids, vec![("a", 3), ("b", 2)]);
}
