use proptest::prelude::*;

use super::*;

fn two_batch(alpha: [f64; 2], b: f64) -> TheoryScenario {
    let m = |alpha| BatchMoments {
        alpha,
        rho: 0.1,
        sigma_c: 1.2,
        sigma_q: 0.7,
        sigma_y: 1.0,
    };
    TheoryScenario {
        a: 1.0,
        b,
        kappa: 0.8,
        batches: vec![m(alpha[0]), m(alpha[1])],
        rho_star: 0.8,
        batch_size: 16,
        theta: 1.0,
        var_eta: 0.5625,
    }
}

#[test]
fn predictor_without_context_has_the_intrinsic_correlation() {
    let s = random_scenario(1, 5, 0.7);
    for e in 0..5 {
        assert!((corr_closed_form(&s, e).unwrap() - 0.7).abs() < 1e-15);
    }
    let neg = TheoryScenario { a: -2.0, ..s.clone() };
    assert!((corr_closed_form(&neg, 0).unwrap() + 0.7).abs() < 1e-15);
    let q_only = TheoryScenario { a: 0.0, b: 3.0, ..s.clone() };
    assert!((corr_closed_form(&q_only, 2).unwrap() - s.batches[2].alpha).abs() < 1e-15);
}

#[test]
fn closed_form_matches_sampled_batches() {
    let s = TheoryScenario { b: 0.8, ..random_scenario(4, 3, 0.8) };
    for e in 0..3 {
        let mc = monte_carlo_corr(&s, e, 200_000, 9).unwrap();
        assert!((corr_closed_form(&s, e).unwrap() - mc).abs() < 0.01, "batch {e}");
    }
}

#[test]
fn sampled_moments_follow_the_scenario() {
    let s = random_scenario(2, 1, 0.6);
    let (c, q, y) = sample_batch(&s, 0, 200_000, 3).unwrap();
    let m = s.batches[0];
    assert!((crate::stats::std_dev(&q) - m.sigma_q).abs() < 0.01);
    assert!((crate::stats::pearson(&c, &y, 0.0) - 0.6).abs() < 0.01);
    assert!((crate::stats::pearson(&q, &y, 0.0) - m.alpha).abs() < 0.01);
    assert!((crate::stats::pearson(&c, &q, 0.0) - m.rho).abs() < 0.01);
}

#[test]
fn perfect_cancellation_is_degenerate() {
    let mut s = two_batch([0.8, 0.8], 0.0);
    s.batches[0].rho = 1.0;
    // a σ_c = −b σ_q with c and q perfectly correlated
    s.b = -1.2 / 0.7;
    assert_eq!(corr_closed_form(&s, 0), Err(TheoryError::Degenerate { batch: 0 }));
}

#[test]
fn invalid_structures_are_rejected() {
    let mut s = two_batch([0.8, 0.8], 0.0);
    s.batches[1].sigma_q = 0.0;
    assert!(matches!(s.validate(), Err(TheoryError::InvalidScenario(_))));
    let mut s = two_batch([-0.9, 0.2], 0.0);
    s.batches[0].rho = 0.9;
    assert!(matches!(s.validate(), Err(TheoryError::InvalidScenario(_))));
}

#[test]
fn sensitivity_matches_finite_differences() {
    let s = random_scenario(7, 6, 0.8);
    let h = 1e-5;
    for e in 0..6 {
        let fd = (corr_with(&s, e, 1.0, h).unwrap() - corr_with(&s, e, 1.0, -h).unwrap()) / (2.0 * h);
        assert!((sensitivity_at_invariant(&s, e).unwrap() - fd).abs() < 1e-6);
    }
    let off = TheoryScenario { b: 0.1, ..s.clone() };
    assert!(matches!(sensitivity_at_invariant(&off, 0), Err(TheoryError::NotAtInvariantPoint { .. })));
}

#[test]
fn collinear_context_exerts_no_pressure() {
    let mut s = two_batch([0.0, 0.0], 0.0);
    for m in &mut s.batches {
        m.alpha = s.kappa * m.rho;
    }
    assert_eq!(sensitivity_at_invariant(&s, 0).unwrap(), 0.0);
    assert_eq!(b_star(&s), Err(TheoryError::NoSensitivity));
}

#[test]
fn alpha_slope_matches_finite_differences() {
    let s = two_batch([0.3, 0.5], 0.6);
    let h = 1e-5;
    let at = |d: f64| {
        let mut t = s.clone();
        t.batches[0].alpha += d;
        corr_closed_form(&t, 0).unwrap()
    };
    assert!((alpha_slope(&s, 0).unwrap() - (at(h) - at(-h)) / (2.0 * h)).abs() < 1e-6);
}

#[test]
fn equal_moments_but_different_alpha_force_b_zero() {
    let c = |b| {
        let s = two_batch([0.1, 0.6], b);
        corr_closed_form(&s, 0).unwrap() - corr_closed_form(&s, 1).unwrap()
    };
    assert_eq!(c(0.0), 0.0);
    for b in [-0.5, -0.01, 0.01, 0.5] {
        assert!(c(b).abs() > 0.0);
    }
}

#[test]
fn surrogate_slope_is_twice_gap_times_total_sensitivity() {
    let s = TheoryScenario { rho_star: 0.9, ..random_scenario(3, 5, 0.8) };
    let h = 1e-5;
    let fd = (surrogate(&s, 1.0, h).unwrap() - surrogate(&s, 1.0, -h).unwrap()) / (2.0 * h);
    let gsum: f64 = (0..5).map(|e| sensitivity_at_invariant(&s, e).unwrap()).sum();
    assert!((fd - 2.0 * (0.8 - 0.9) * gsum).abs() < 1e-6);
    assert!((surrogate_slope_at_invariant(&s).unwrap() - fd).abs() < 1e-6);
}

#[test]
fn leakage_vanishes_at_kappa_and_grows_with_the_gap() {
    let s = random_scenario(11, 8, 0.8);
    assert!(b_star(&s).unwrap().abs() < 1e-15);
    let at = |g: f64| b_star(&TheoryScenario { rho_star: 0.8 + g, ..s.clone() }).unwrap();
    assert!((at(0.2) / at(0.1) - 2.0).abs() < 1e-12);
    for g in [0.002, 0.005] {
        let sg = TheoryScenario { rho_star: 0.8 + g, ..s.clone() };
        let bf = brute_force_b(&sg, -2.0, 2.0).unwrap();
        assert!((bf - at(g)).abs() < 0.1 * at(g).abs(), "gap {g}: {bf} vs {}", at(g));
    }
}

#[test]
fn gate_discards_context_at_the_invariant_target() {
    let s = TheoryScenario { b: 0.5, ..random_scenario(5, 8, 0.8) };
    let r = invariance_gate(&s, 5000).unwrap();
    assert!(r.identifiable);
    assert!(r.ratio < 0.02, "{r:?}");
    assert!(r.dispersion < 1e-6);

    // above κ the optimum recruits q, at the 1-D minimizer's ratio
    let pressured = TheoryScenario { rho_star: 0.95, ..s.clone() };
    let g = invariance_gate(&pressured, 5000).unwrap();
    let bf = brute_force_b(&pressured, -2.0, 2.0).unwrap() / pressured.a;
    assert!(g.ratio > 1e-3);
    assert!((g.ratio - bf.abs()).abs() < 0.05 * bf.abs(), "{} vs {bf}", g.ratio);
}

#[test]
fn gate_flags_context_with_constant_association() {
    let s = two_batch([0.4, 0.4], 0.5);
    let r = invariance_gate(&s, 100).unwrap();
    assert!(!r.identifiable);
    assert!(r.dispersion < 1e-20);
}

#[test]
fn planted_residual_bias_is_removed() {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let n = 100_000;
    let bins: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let x = [-1.0, 0.0, 1.0];
    let noise = Normal::new(0.0, 0.5).unwrap();
    let r: Vec<f64> = bins.iter().map(|&b| x[b] + noise.sample(&mut rng)).collect();
    let rep = residual_decomposition(&bins, &r).unwrap();
    // Var(x) = 2/3, Var(noise) = 1/4
    assert!((rep.risk_before - rep.risk_after - 2.0 / 3.0).abs() < 0.05 * 2.0 / 3.0);
    assert!((rep.noise_term - 0.25).abs() < 0.01);
    assert!(rep.risk_after >= rep.noise_term - 0.01);

    let unbiased: Vec<f64> = (0..n).map(|_| noise.sample(&mut rng)).collect();
    let rep = residual_decomposition(&bins, &unbiased).unwrap();
    assert!(rep.bias_term < 1e-3);
    assert!((rep.risk_after - rep.risk_before).abs() < 1e-3);
}

#[test]
fn bins_missing_from_the_fit_half_are_reported() {
    let bins = [0, 0, 1, 2, 0, 1];
    let r = [0.0; 6];
    assert_eq!(residual_decomposition(&bins, &r), Err(TheoryError::EmptyBins(vec![2])));
}

#[test]
fn kappa_inverts_the_noise_level() {
    let sd = crate::graphs::SynthScenario::noise_sd_for_kappa(1.3, 0.8);
    assert!((kappa_from_generative(1.3, 1.0, sd * sd) - 0.8).abs() < 1e-12);
    assert_eq!(kappa_from_generative(2.0, 1.5, 0.0), 1.0);
}

#[test]
fn every_report_check_passes() {
    let report = verify_theory(0).unwrap();
    let failed: Vec<_> = report.iter().filter(|c| !c.pass).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

fn valid_batch() -> impl Strategy<Value = BatchMoments> {
    (-1.0..1.0f64, -1.0..1.0f64, 0.1..3.0f64, 0.1..3.0f64).prop_map(|(alpha, rho, sc, sq)| BatchMoments {
        alpha,
        rho,
        sigma_c: sc,
        sigma_q: sq,
        sigma_y: 1.0,
    })
}

proptest! {
    #[test]
    fn closed_form_is_a_correlation(m in valid_batch(), kappa in -1.0..1.0f64, a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let s = TheoryScenario { a, b, kappa, batches: vec![m], rho_star: 0.5, batch_size: 8, theta: 1.0, var_eta: 1.0 };
        prop_assume!(s.validate().is_ok());
        if let Ok(c) = corr_closed_form(&s, 0) {
            prop_assert!(c.abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn noise_keeps_kappa_below_one(theta in 0.01..5.0f64, var_c in 0.01..5.0f64, var_eta in 1e-6..5.0f64) {
        prop_assert!(kappa_from_generative(theta, var_c, var_eta) < 1.0);
    }
}
