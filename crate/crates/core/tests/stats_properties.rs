use glucoloop::error::Error;
use glucoloop::fit::{FitFlags, FitResult, StopReason};
use glucoloop::model::{InputPulse, ModelParams, A3_DEFAULT};
use glucoloop::signal::ExcursionKind;
use glucoloop::stats::{
    bootstrap_mean, bootstrap_subject_means, cohort_table, g_range, normality_report,
    shapiro_wilk, standardize, CohortParameter, GainSample, SubjectFits, SubjectMeans, OVERALL,
};
use glucoloop::synth::{synthetic_cohort, CohortRecipe};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Deserialize)]
struct Fixture {
    cases: Vec<Case>,
}

#[derive(Deserialize)]
struct Case {
    name: String,
    values: Vec<f64>,
    w: f64,
    p: f64,
}

fn fixture() -> Fixture {
    let raw = include_str!("fixtures/shapiro_wilk.json");
    serde_json::from_str(raw).expect("fixture parses")
}

#[test]
fn shapiro_wilk_matches_reference_table() {
    let fx = fixture();
    assert_eq!(fx.cases.len(), 20);
    for case in &fx.cases {
        let r = shapiro_wilk(&case.values).unwrap();
        assert!((r.w - case.w).abs() < 1e-3, "{}: W {} vs {}", case.name, r.w, case.w);
        assert!((r.p_value - case.p).abs() < 1e-3, "{}: p {} vs {}", case.name, r.p_value, case.p);
    }
}

#[test]
fn shapiro_wilk_flags_the_exponential_sample() {
    let fx = fixture();
    let exp = fx.cases.iter().find(|c| c.name == "exponential_100").unwrap();
    assert!(shapiro_wilk(&exp.values).unwrap().p_value < 0.05);
    let normal = fx.cases.iter().find(|c| c.name == "normal_100").unwrap();
    assert!(shapiro_wilk(&normal.values).unwrap().p_value > 0.05);
}

fn fit(subject: &str, kind: ExcursionKind, a1: f64, amplitude: f64) -> FitResult {
    FitResult {
        subject_id: subject.into(),
        excursion_index: 0,
        kind,
        t0: 0.0,
        n: 20,
        params: ModelParams::new(a1, 0.003, A3_DEFAULT, 0.03, 5.0).unwrap(),
        pulse: InputPulse::new(amplitude, 60.0, 20.0).unwrap(),
        error: 0.01,
        iterations: 10,
        evaluations: 100,
        converged: true,
        stop_reason: StopReason::GradientTolerance,
        flags: FitFlags::default(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bootstrap_ignores_excursion_order(
        values in prop::collection::vec(0.001f64..0.05, 1..30),
        seed in any::<u64>(),
        rotate in 0usize..30,
    ) {
        let mut other = values.clone();
        other.rotate_left(rotate % values.len());
        other.reverse();
        let a = bootstrap_mean(&values, 500, seed, "k").unwrap();
        let b = bootstrap_mean(&other, 500, seed, "k").unwrap();
        prop_assert_eq!(a, b);

        let subject = |vals: &[f64]| SubjectFits {
            study: "s".into(),
            subject_id: "x".into(),
            kind: ExcursionKind::Peak,
            samples: vals.iter().map(|&v| GainSample { a1: v, a2: 2.0 * v, lambda: 0.03 }).collect(),
        };
        let ma = bootstrap_subject_means(&[subject(&values)], 500, seed).unwrap();
        let mb = bootstrap_subject_means(&[subject(&other)], 500, seed).unwrap();
        prop_assert_eq!(ma, mb);
    }

    #[test]
    fn standardizing_leaves_w_unchanged(
        values in prop::collection::vec(-100.0f64..100.0, 3..200),
        scale in 0.01f64..100.0,
        shift in -1000.0f64..1000.0,
    ) {
        let raw = shapiro_wilk(&values);
        prop_assume!(raw.is_ok());
        let raw = raw.unwrap();
        let z = standardize(&values).unwrap();
        prop_assert!((shapiro_wilk(&z).unwrap().w - raw.w).abs() < 1e-10);
        let affine: Vec<f64> = values.iter().map(|v| scale * v + shift).collect();
        prop_assert!((shapiro_wilk(&affine).unwrap().w - raw.w).abs() < 1e-10);
    }

    #[test]
    fn overall_mean_is_the_count_weighted_study_mean(seed in any::<u64>(), subjects in 6usize..60) {
        let recipe = CohortRecipe { subjects, ..CohortRecipe::default() };
        let cohort = synthetic_cohort(&recipe, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let table = cohort_table(cohort).unwrap();
        for kind in table.kinds() {
            for &parameter in CohortParameter::for_kind(kind) {
                let overall = table.cell(OVERALL, kind, parameter).unwrap();
                let (mut weighted, mut count) = (0.0, 0usize);
                for study in table.studies() {
                    let c = table.cell(&study, kind, parameter).unwrap();
                    weighted += c.mean * c.count as f64;
                    count += c.count;
                }
                prop_assert_eq!(count, overall.count);
                prop_assert!((weighted / count as f64 - overall.mean).abs() <= 1e-12 * overall.mean.abs().max(1e-3));
                prop_assert!(overall.sd >= 0.0);
            }
        }
    }
}

#[test]
fn singleton_subject_mean_is_exact() {
    let m = bootstrap_mean(&[0.0123], 10_000, 7, "x").unwrap();
    assert_eq!(m, 0.0123);
}

#[test]
fn bootstrap_mean_converges_to_the_sample_mean() {
    // sd of the bootstrap mean of {1, 2, 3} at R resamples is sqrt(2/3 / 3 / R)
    let r = 100_000;
    let m = bootstrap_mean(&[1.0, 2.0, 3.0], r, 11, "lln").unwrap();
    let sigma = (2.0 / 3.0 / 3.0 / r as f64).sqrt();
    assert!((m - 2.0).abs() < 3.0 * sigma, "{m}");
}

#[test]
fn counts_are_subjects_not_excursions() {
    let mut fits = Vec::new();
    for (i, subject) in ["a", "b", "c", "d"].iter().enumerate() {
        for k in 0..=i {
            fits.push(fit(subject, ExcursionKind::Peak, 0.005 + 0.001 * (i + k) as f64, 0.05));
        }
    }
    let subjects = glucoloop::stats::group_fits([("study", fits.as_slice())]);
    let table = cohort_table(bootstrap_subject_means(&subjects, 1000, 1).unwrap()).unwrap();
    let cell = table.cell(OVERALL, ExcursionKind::Peak, CohortParameter::A1).unwrap();
    assert_eq!(cell.count, 4);
    assert_eq!(table.subjects.iter().map(|s| s.excursions).sum::<usize>(), 10);
}

#[test]
fn identical_subjects_cannot_be_tested_for_normality() {
    let same = |id: &str| SubjectMeans {
        study: "s".into(),
        subject_id: id.into(),
        kind: ExcursionKind::Peak,
        excursions: 3,
        a1: 0.007,
        a2: 0.003,
        lambda: 0.03,
    };
    let table = cohort_table(vec![same("a"), same("b"), same("c"), same("d")]).unwrap();
    assert!(matches!(normality_report(&table), Err(Error::ConstantSample)));
}

#[test]
fn too_few_subjects_is_an_error() {
    let one = SubjectMeans {
        study: "s".into(),
        subject_id: "a".into(),
        kind: ExcursionKind::Peak,
        excursions: 1,
        a1: 0.007,
        a2: 0.003,
        lambda: 0.03,
    };
    let table = cohort_table(vec![one]).unwrap();
    assert!(matches!(normality_report(&table), Err(Error::InsufficientData(_))));
    assert!(bootstrap_subject_means(&[], 10, 1).is_err());
}

#[test]
fn g_extremes_follow_the_pulse_amplitudes() {
    let r = g_range(&[fit("a", ExcursionKind::Peak, 0.007, 0.1)]).unwrap();
    assert!((r.g_max - 0.0997).abs() < 1e-15);
    assert!((r.g_min + 0.0003).abs() < 1e-15);

    let flat = g_range(&[fit("a", ExcursionKind::Peak, 0.007, 0.0)]).unwrap();
    assert_eq!(flat.g_min, -0.0003);
    assert_eq!(flat.g_max, -0.0003);

    let mixed = g_range(&[
        fit("a", ExcursionKind::Peak, 0.007, 0.08),
        fit("a", ExcursionKind::Trough, 0.02, -0.12),
        fit("b", ExcursionKind::Peak, 0.007, 0.11),
    ])
    .unwrap();
    assert!((mixed.g_max - 0.1097).abs() < 1e-15);
    assert!((mixed.g_min + 0.1203).abs() < 1e-15);

    assert!(g_range(&[]).is_err());
}
