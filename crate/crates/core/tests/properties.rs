mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use ttsa_core::analysis::{decompose, fit_rate, log_uniform_checkpoints, ErrorPanel};
use ttsa_core::gtd::{build_gtd, random_mdp, sample_noise, GtdVariant};
use ttsa_core::*;

fn vec_strategy(d: usize, scale: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-scale..scale, d).prop_map(DVector::from_vec)
}

/// 2×2 specs whose W₂ and X₁ are dominated by their diagonals.
fn spec_strategy() -> impl Strategy<Value = MatrixSpec> {
    let block = |diag: f64| prop::collection::vec(-0.3..0.3f64, 4).prop_map(move |x| {
        let mut m = DMatrix::from_row_slice(2, 2, &x);
        m[(0, 0)] += diag;
        m[(1, 1)] += diag;
        m
    });
    (block(3.0), block(0.0), vec_strategy(2, 1.0), block(0.5), block(2.0), vec_strategy(2, 1.0))
        .prop_map(|(g1, w1, v1, g2, w2, v2)| MatrixSpec::new(g1, w1, v1, g2, w2, v2).unwrap())
}

fn schedule_strategy() -> impl Strategy<Value = StepSchedule> {
    (0.05..0.95f64, 0.05..0.95f64)
        .prop_filter("distinct exponents", |(a, b)| (a - b).abs() > 0.01)
        .prop_map(|(a, b)| StepSchedule::new(a.max(b), a.min(b)).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn projection_is_idempotent_and_clips_norm(x in vec_strategy(3, 50.0), r in 0.01..40.0f64, k in 1usize..=15) {
        let n = sa::PROJECTION_INDICES[k - 1];
        let y = sparse_project(n, r, &x);
        prop_assert!((y.norm() - x.norm().min(r)).abs() <= 1e-12 * (1.0 + r));
        // Idempotent up to the rounding of the rescaled norm.
        let yy = sparse_project(n, r, &y);
        prop_assert!((yy - &y).norm() <= 4.0 * f64::EPSILON * y.norm());
        if x.norm() <= r {
            prop_assert_eq!(y, x);
        }
    }

    #[test]
    fn projection_is_identity_off_schedule(x in vec_strategy(3, 50.0), r in 0.01..40.0f64, n in 0u64..100_000) {
        prop_assume!(!is_projection_index(n));
        prop_assert_eq!(sparse_project(n, r, &x), x);
    }

    #[test]
    fn projection_index_matches_enumeration(n in 0u64..u64::MAX) {
        let brute = (1u32..=15).any(|k| (k as u64).checked_pow(k).map(|p| p - 1) == Some(n));
        prop_assert_eq!(is_projection_index(n), brute);
    }

    #[test]
    fn step_ratio_is_non_increasing(sch in schedule_strategy(), n in 0u64..1_000_000_000) {
        let (a0, b0) = sch.stepsizes(n);
        let (a1, b1) = sch.stepsizes(n + 1);
        prop_assert!(a1 / b1 <= a0 / b0);
        prop_assert!(a0 <= b0 && b0 <= 1.0 && a1 < a0 && b1 < b0);
    }

    #[test]
    fn fixed_point_residual(spec in spec_strategy()) {
        let sys = derive_system(&spec).unwrap();
        let r1 = spec.h1(&sys.theta_star, &sys.w_star).norm();
        let r2 = spec.h2(&sys.theta_star, &sys.w_star).norm();
        prop_assert!(r1 <= 1e-10 * (1.0 + spec.v1.norm()));
        prop_assert!(r2 <= 1e-10 * (1.0 + spec.v2.norm()));
    }

    #[test]
    fn disabled_projection_equals_infinite_radii(spec in spec_strategy(), seed in any::<u64>(), t0 in vec_strategy(2, 5.0)) {
        let sch = StepSchedule::new(0.8, 0.5).unwrap();
        let noise = SphereNoise { c: 0.5 };
        let opts = RunOptions::new(300, seed, vec![0, 1, 3, 26, 100, 300]).start_at(t0.clone(), t0);
        let off = run_trajectory(&spec, &sch, &ProjectionConfig::disabled(), &noise, &opts).unwrap();
        let inf = run_trajectory(&spec, &sch, &ProjectionConfig::radii(f64::INFINITY, f64::INFINITY), &noise, &opts).unwrap();
        prop_assert_eq!(off.states, inf.states);
        prop_assert!(inf.projections_applied.is_empty());
    }

    #[test]
    fn runs_are_deterministic(spec in spec_strategy(), seed in any::<u64>(), r in 0.1..5.0f64) {
        let sch = StepSchedule::new(0.7, 0.6).unwrap();
        let noise = SphereNoise { c: 0.3 };
        let opts = RunOptions::new(300, seed, vec![0, 10, 255, 300]);
        let proj = ProjectionConfig::radii(r, r);
        let a = run_trajectory(&spec, &sch, &proj, &noise, &opts).unwrap();
        let b = run_trajectory(&spec, &sch, &proj, &noise, &opts).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn projected_states_respect_the_radii(spec in spec_strategy(), seed in any::<u64>(), r in 0.1..3.0f64) {
        let sch = StepSchedule::new(0.8, 0.5).unwrap();
        let opts = RunOptions::new(300, seed, vec![3, 26, 255]).start_at(DVector::from_element(2, 20.0), DVector::from_element(2, -20.0));
        let t = run_trajectory(&spec, &sch, &ProjectionConfig::radii(r, 2.0 * r), &SphereNoise { c: 0.2 }, &opts).unwrap();
        for s in &t.states {
            prop_assert!(s.theta.norm() <= r * (1.0 + 1e-12));
            prop_assert!(s.w.norm() <= 2.0 * r * (1.0 + 1e-12));
        }
    }

    #[test]
    fn decomposition_reconstructs_random_systems(spec in spec_strategy(), seed in any::<u64>(), n0 in 0u64..200) {
        let sys = derive_system(&spec).unwrap();
        let sch = StepSchedule::new(0.8, 0.5).unwrap();
        let t = run_with_system(&sys, &sch, &ProjectionConfig::disabled(), &SphereNoise { c: 0.5 }, &RunOptions::full(300, seed)).unwrap();
        let dec = decompose(&t, &sys, n0).unwrap();
        let scale = dec.max_iterate_norm.max(1.0);
        prop_assert!(dec.residual_theta <= 1e-8 * scale);
        prop_assert!(dec.residual_w <= 1e-8 * scale);
        prop_assert!(dec.residual_telescoping <= 1e-8 * scale);
    }

    #[test]
    fn power_law_slope_is_recovered(c in 0.01..100.0f64, p in -2.0..-0.01f64) {
        let cps = log_uniform_checkpoints(10, 1_000_000, 25);
        let row: Vec<f64> = cps.iter().map(|&n| c * ((n + 1) as f64).powf(p)).collect();
        let panel = ErrorPanel {
            schedule: StepSchedule::new(0.8, 0.5).unwrap(),
            checkpoints: cps,
            seeds: vec![0],
            theta: vec![row.clone()],
            w: vec![row],
            diverged: vec![],
        };
        let r = fit_rate(&panel, (10, 1_000_000)).unwrap();
        prop_assert!((r.slope_theta - p).abs() <= 1e-12);
        prop_assert!((r.slope_w - p).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gtd_noise_is_dominated(mdp_seed in 0u64..50, seed in any::<u64>(), n in any::<u64>(), th in vec_strategy(2, 30.0), w in vec_strategy(2, 30.0)) {
        let mdp = random_mdp(5, 2, mdp_seed, true).unwrap();
        for variant in GtdVariant::ALL {
            let inst = build_gtd(variant, &mdp).unwrap();
            let rec = sample_noise(&inst, &th, &w, seed, n);
            prop_assert!(validate_noise_bound(&rec, &th, &w, inst.m1, inst.m2));
        }
    }

    #[test]
    fn ledger_thresholds_are_consistent(seed in 0u64..40, variant in prop::sample::select(vec![GtdVariant::Gtd2, GtdVariant::Tdc])) {
        let inst = gtd_instance(variant, 5, 2, seed);
        let sys = gtd_system(&inst);
        let built = ledger::build_ledger(&sys, &ledger::LedgerConfig::defaults(&sys, schedule(0.8, 0.5), inst.m1, inst.m2));
        // A very flat X₁ legitimately pushes the a_n scan past its cap.
        prop_assume!(!matches!(built, Err(Error::CapExceeded { .. })));
        let l = built.unwrap();
        prop_assert_eq!(l.c_r_theta, 3.0);
        prop_assert_eq!(l.a3, l.c_r_w * l.cfg.r_w);
        prop_assert!(l.n_thm2 >= l.n_thm3 && l.n_thm2 >= l.n_thm4);
        prop_assert!(l.ln_n_prime >= l.n_thm2.ln());
        prop_assert!(l.n_final.ln_plus_one() >= l.ln_n_prime);
        prop_assert!(l.q_min <= l.q1 && l.q_min <= l.q2 && l.q_min > 0.0);
    }
}
