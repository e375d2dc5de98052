mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use slp_smpc::controller::{design_gain, design_offline};
use slp_smpc::linalg::{chi_squared_quantile, solve_discrete_lyapunov, LyapunovForm};
use slp_smpc::scenarios;
use slp_smpc::terminal::{
    algorithm1_terminal_set, cache_key, lmi_containment_mu, lmi_containment_nu,
    synthesize_terminal_gain, tail_row, terminal_cost, LmiData, SearchCaps, TailVariant,
    TerminalSetCache,
};
use slp_smpc::{Error, TerminalIngredients};

fn stationary_by_iteration(a: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(a.nrows(), a.ncols());
    for _ in 0..20_000 {
        s = a * &s * a.transpose() + w;
    }
    s
}

/// x <= 1 with probability 0.7 on a scalar system.
fn scalar_case(a: f64, b: f64, w: f64) -> (slp_smpc::LinearGaussianSystem, slp_smpc::ConstraintSpec) {
    let sys = scalar_system(a, b, w);
    let cs = half_spaces(
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::zeros(1, 1),
        &[1.0],
        &[0.7],
    );
    (sys, cs)
}

#[test]
fn hvac_fixed_gain_passes_margin_check() {
    let sc = scenarios::hvac().unwrap();
    let (gain, ing) = design_gain(&sc).unwrap();
    assert!(!gain.synthesized);
    assert_eq!(gain.k, DMatrix::zeros(1, 3));
    assert!(gain.spectral_radius < 1.0);

    let sigma = stationary_by_iteration(sc.system.a(), sc.system.sigma_w());
    assert!((&gain.sigma_x_inf - &sigma).amax() < 1e-10);
    let pt = chi_squared_quantile(0.4).unwrap();
    let margin = 0.5 - (pt * sigma[(0, 0)]).sqrt();
    assert!((gain.margins[0] - margin).abs() < 1e-10);
    assert!(margin > 0.0);
    assert!((ing.stationary_margins(&sc.constraints)[0] - margin).abs() < 1e-10);
}

#[test]
fn terminal_cost_for_deadbeat_gain() {
    // a + b K = 0: P = Q + K^2 R and p_f = K r + q.
    let sys = scalar_system(0.5, 1.0, 0.01);
    let cost = slp_smpc::StageCost::new(
        DMatrix::from_element(1, 1, 2.0),
        DMatrix::from_element(1, 1, 3.0),
        DVector::from_element(1, 0.4),
        DVector::from_element(1, -1.0),
    )
    .unwrap();
    let (p, pf) = terminal_cost(&sys, &cost, &DMatrix::from_element(1, 1, -0.5)).unwrap();
    assert!((p[(0, 0)] - (2.0 + 0.25 * 3.0)).abs() < 1e-12);
    assert!((pf[0] - (0.5 + 0.4)).abs() < 1e-12);
}

#[test]
fn terminal_cost_scalar_closed_form() {
    let sys = scalar_system(0.5, 1.0, 0.01);
    let cost = slp_smpc::StageCost::new(
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        DVector::from_element(1, 1.0),
        DVector::from_element(1, 2.0),
    )
    .unwrap();
    let (p, pf) = terminal_cost(&sys, &cost, &DMatrix::from_element(1, 1, -0.2)).unwrap();
    assert!((p[(0, 0)] - 1.04 / 0.91).abs() < 1e-12);
    assert!((pf[0] - 0.6 / 0.7).abs() < 1e-12);
}

#[test]
fn synthesis_with_negligible_noise_meets_margins() {
    let mut sc = scenarios::hvac().unwrap();
    sc.system = sc.system.with_scaled_noise(1e-12).unwrap();
    let eps = sc.margins();
    let gain = synthesize_terminal_gain(&sc.system, &sc.constraints, &eps).unwrap();
    assert!(gain.synthesized);
    assert!(gain.spectral_radius < 1.0);
    assert!(gain.margins[0] >= eps[0] - 1e-9);
    assert!(gain.margins[0] > 0.49);
}

#[test]
fn synthesis_reports_infeasible_margins() {
    let sc = scenarios::hvac().unwrap();
    let tight = sc.constraints.with_scaled_bounds(1e-3).unwrap();
    let eps = tight.b() * 1e-6;
    match synthesize_terminal_gain(&sc.system, &tight, &eps) {
        Err(Error::DesignInfeasible(_)) => {}
        other => panic!("expected an infeasible design, got {other:?}"),
    }
}

#[test]
fn synthesized_gain_matches_lyapunov_covariance() {
    let mut rng = rng(11);
    let sys = random_system(&mut rng, 3, 2);
    let cs = half_spaces(
        DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, -1.0, 0.5]),
        DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.3, 0.0]),
        &[3.0, 2.0],
        &[0.8, 0.9],
    );
    let eps = DVector::from_row_slice(&[1e-3, 1e-3]);
    let gain = synthesize_terminal_gain(&sys, &cs, &eps).unwrap();
    let a_k = sys.a() + sys.b() * &gain.k;
    let sigma = stationary_by_iteration(&a_k, sys.sigma_w());
    assert!((&gain.sigma_x_inf - &sigma).amax() < 1e-8);
    for j in 0..2 {
        assert!(gain.margins[j] >= eps[j] - 1e-7);
    }
}

#[test]
fn deadbeat_gain_needs_no_tail_steps() {
    let (sys, cs) = scalar_case(0.5, 1.0, 0.01);
    let cost = quadratic_cost(1, 1, 1.0, 1.0);
    let ing = TerminalIngredients::new(&sys, &cs, &cost, &DMatrix::from_element(1, 1, -0.5), 50)
        .unwrap();
    let set = algorithm1_terminal_set(&sys, &ing, &cs, 3, SearchCaps::default(), 1e-8).unwrap();
    assert_eq!((set.nu, set.mu), (0, 0));
    assert_eq!(set.rows.len(), 1);
}

#[test]
fn margin_violation_is_rejected() {
    let (sys, cs) = scalar_case(0.9, 1.0, 2.0);
    let cost = quadratic_cost(1, 1, 1.0, 1.0);
    match TerminalIngredients::new(&sys, &cs, &cost, &DMatrix::zeros(1, 1), 50) {
        Err(Error::DesignInfeasible(msg)) => assert!(msg.contains("margin")),
        other => panic!("expected a margin failure, got {other:?}"),
    }
}

#[test]
fn search_caps_are_reported() {
    let sc = scenarios::hvac().unwrap();
    let (_, ing) = design_gain(&sc).unwrap();
    let caps = SearchCaps {
        nu_max: 200,
        mu_max: 5,
    };
    match algorithm1_terminal_set(&sc.system, &ing, &sc.constraints, sc.horizon, caps, 1e-8) {
        Err(Error::NotTerminated { stage, cap }) => {
            assert_eq!(stage, "mu search");
            assert_eq!(cap, 5);
        }
        other => panic!("expected cap exhaustion, got {other:?}"),
    }
}

#[test]
fn hvac_terminal_set_golden() {
    let sc = scenarios::hvac().unwrap();
    let (_, ing) = design_gain(&sc).unwrap();
    let set = algorithm1_terminal_set(
        &sc.system,
        &ing,
        &sc.constraints,
        sc.horizon,
        SearchCaps::default(),
        sc.terminal.lmi_tol,
    )
    .unwrap();
    assert_eq!(set.nu, 52);
    assert_eq!(set.mu, 56);
    assert_eq!(set.rows.len(), 57);
    assert!(set.rows.iter().all(|r| r.variant == TailVariant::Exact));

    let lmi = LmiData::new(&ing, &sc.constraints, sc.system.sigma_w(), sc.horizon, sc.terminal.lmi_tol);
    assert!(!lmi_containment_nu(&lmi, 51).unwrap().certified);
    assert!(!lmi_containment_mu(&lmi, 55, 52).unwrap().certified);
    assert!(!lmi_containment_mu(&lmi, 0, 52).unwrap().certified);
    assert!(lmi_containment_mu(&lmi, 59, 52).unwrap().certified);

    // Every recorded certificate holds at the stated tolerance.
    for cert in set.certificates.nu_step.iter().chain(&set.certificates.mu_step) {
        assert!(cert.min_eigenvalue >= -lmi.tolerance);
        assert!(cert.quadratic_multipliers.iter().all(|&a| a >= 0.0));
        assert!(cert.linear_multipliers.iter().all(|&b| b >= 0.0));
    }

    // Sampled members of S_mu satisfy the stationary rows up to mu + nu + 1.
    let mut rng = rng(5);
    let n = sc.n();
    let dim = sc.horizon * n * n;
    let stationary: Vec<_> = (set.mu + 1..=set.mu + set.nu + 1)
        .map(|i| tail_row(&ing, &sc.constraints, sc.horizon, 0, i, TailVariant::Tightened).unwrap())
        .collect();
    let mut members = 0;
    for trial in 0..4000 {
        let spread = [0.5, 2.0, 8.0][trial % 3];
        let z = gaussian_vector(&mut rng, n) * spread;
        let psi = gaussian_vector(&mut rng, dim) * (0.1 * spread);
        if !set.contains(&z, &psi, 0.0) {
            continue;
        }
        members += 1;
        for row in &stationary {
            assert!(row.slack(&z, &psi) >= -1e-6, "row {} slack {}", row.i, row.slack(&z, &psi));
        }
    }
    assert!(members > 100, "only {members} samples landed in the set");
}

#[test]
fn certificates_audit_on_lifted_form() {
    let mut rng = rng(21);
    let sys = random_system(&mut rng, 2, 1);
    let cs = half_spaces(
        DMatrix::from_row_slice(1, 2, &[1.0, 0.5]),
        DMatrix::zeros(1, 1),
        &[2.0],
        &[0.8],
    );
    let cost = quadratic_cost(2, 1, 1.0, 1.0);
    let ing = TerminalIngredients::new(&sys, &cs, &cost, &DMatrix::zeros(1, 2), 200).unwrap();
    let set = algorithm1_terminal_set(&sys, &ing, &cs, 2, SearchCaps::default(), 1e-8).unwrap();
    let lmi = LmiData::new(&ing, &cs, sys.sigma_w(), 2, 1e-8);
    for cert in set.certificates.nu_step.iter().chain(&set.certificates.mu_step) {
        let full = lmi.audit_full(cert);
        assert!((full - cert.min_eigenvalue).abs() < 1e-8 * (1.0 + full.abs()), "{full} vs {}", cert.min_eigenvalue);
    }
}

#[test]
fn cache_round_trip_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let cache = TerminalSetCache::new(dir.path());
    let sc = scenarios::hvac().unwrap();
    let first = design_offline(&sc, Some(&cache)).unwrap();
    assert!(!first.cache_hit);
    let second = design_offline(&sc, Some(&cache)).unwrap();
    assert!(second.cache_hit);
    assert_eq!(first.terminal_set, second.terminal_set);

    let caps = SearchCaps::default();
    let key = cache_key(&sc.system, &sc.constraints, &first.gain.k, 6, 1e-8, caps);
    assert_eq!(key.len(), 64);
    assert_ne!(key, cache_key(&sc.system, &sc.constraints, &first.gain.k, 7, 1e-8, caps));
    assert_ne!(key, cache_key(&sc.system, &sc.constraints, &first.gain.k, 6, 1e-9, caps));

    // A corrupt entry is ignored rather than trusted.
    let path = std::fs::read_dir(dir.path()).unwrap().next().unwrap().unwrap().path();
    std::fs::write(&path, "{not json").unwrap();
    let third = design_offline(&sc, Some(&cache)).unwrap();
    assert!(!third.cache_hit);
    assert_eq!(third.terminal_set, first.terminal_set);
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 32,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn tail_variants_are_ordered(seed in 0u64..10_000, i in 0usize..30) {
        let mut rng = rng(seed);
        let sys = random_system(&mut rng, 3, 1);
        let cs = half_spaces(
            gaussian_matrix(&mut rng, 2, 3),
            DMatrix::zeros(2, 1),
            &[5.0, 5.0],
            &[0.75, 0.9],
        );
        let cost = quadratic_cost(3, 1, 1.0, 1.0);
        let ing = TerminalIngredients::new(&sys, &cs, &cost, &DMatrix::zeros(1, 3), 40).unwrap();
        let z = gaussian_vector(&mut rng, 3);
        let psi = gaussian_vector(&mut rng, 2 * 9) * 0.3;
        for j in 0..2 {
            let s = |v| tail_row(&ing, &cs, 2, j, i, v).unwrap().slack(&z, &psi);
            let (t, e, r) = (s(TailVariant::Tightened), s(TailVariant::Exact), s(TailVariant::Relaxed));
            prop_assert!(t <= e + 1e-12 && e <= r + 1e-12, "{t} {e} {r}");
        }
    }

    #[test]
    fn terminal_cost_solves_lyapunov(seed in 0u64..10_000) {
        let mut rng = rng(seed);
        let sys = random_system(&mut rng, 3, 2);
        let cost = quadratic_cost(3, 2, 0.7, 1.3);
        let k = gaussian_matrix(&mut rng, 2, 3) * 0.05;
        let a_k = sys.a() + sys.b() * &k;
        prop_assume!(radius(&a_k) < 0.95);
        let (p, _) = terminal_cost(&sys, &cost, &k).unwrap();
        let w = cost.q_mat() + k.transpose() * cost.r_mat() * &k;
        let residual = a_k.transpose() * &p * &a_k + &w - &p;
        prop_assert!(residual.amax() < 1e-9 * (1.0 + p.amax()));
        let again = solve_discrete_lyapunov(&a_k, &w, LyapunovForm::CostToGo).unwrap();
        prop_assert!((again - p).amax() < 1e-12);
    }
}
