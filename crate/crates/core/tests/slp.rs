mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use common::*;
use slp_smpc::linalg::min_eigenvalue;
use slp_smpc::model::{ConstraintSpec, StageCost};
use slp_smpc::sim::disturbance;
use slp_smpc::slp::*;
use slp_smpc::terminal::TerminalIngredients;
use slp_smpc::Error;

#[test]
fn zero_feedback_blocks_are_powers_of_a() {
    let mut r = rng(1);
    let sys = random_system(&mut r, 3, 2);
    let resp = SystemResponse::zero_feedback(&sys, 5).unwrap();
    assert!(validate_slp(&resp, &sys).unwrap());
    for k in 1..=5 {
        for i in 1..=k {
            let mut want = DMatrix::identity(3, 3);
            for _ in 0..k - i {
                want = sys.a() * want;
            }
            assert!((resp.phi_x(k, i) - want).amax() < 1e-12);
        }
    }
}

#[test]
fn first_block_must_be_identity() {
    let sys = scalar_system(1.0, 1.0, 1.0);
    let two = DMatrix::from_element(1, 1, 2.0);
    let resp = SystemResponse::new(1, 1, vec![vec![two]], vec![]).unwrap();
    assert!(!validate_slp(&resp, &sys).unwrap());
    let other = random_system(&mut rng(2), 2, 1);
    assert!(validate_slp(&resp, &other).is_err());
}

#[test]
fn hand_recursion_step() {
    let sys = scalar_system(1.0, 1.0, 1.0);
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    let good = SystemResponse::new(
        1,
        1,
        vec![vec![one(1.0)], vec![one(0.0), one(1.0)]],
        vec![vec![one(-1.0)]],
    )
    .unwrap();
    assert!(validate_slp(&good, &sys).unwrap());
    let bad = SystemResponse::new(
        1,
        1,
        vec![vec![one(1.0)], vec![one(0.5), one(1.0)]],
        vec![vec![one(-1.0)]],
    )
    .unwrap();
    assert!(!validate_slp(&bad, &sys).unwrap());
}

#[test]
fn joint_moments_first_steps() {
    let mut r = rng(4);
    let sys = random_system(&mut r, 2, 1);
    let pol = random_policy(&mut r, &sys, 4, &DVector::zeros(2), &DMatrix::zeros(1, 2));
    let m0 = joint_moments(&pol, &sys, 0).unwrap();
    assert_eq!(m0.factor.ncols(), 0);
    assert_eq!(m0.covariance(), DMatrix::zeros(3, 3));
    let m1 = joint_moments(&pol, &sys, 1).unwrap();
    let cov = m1.covariance();
    assert!((cov.view((0, 0), (2, 2)) - sys.sigma_w()).amax() < 1e-14);
    assert!(matches!(
        joint_moments(&pol, &sys, 4),
        Err(Error::OutOfRange { index: 4, .. })
    ));
}

#[test]
fn joint_moments_match_monte_carlo() {
    let mut r = rng(5);
    let sys = random_system(&mut r, 2, 1);
    let x0 = DVector::from_vec(vec![0.3, -0.2]);
    let pol = random_policy(&mut r, &sys, 4, &x0, &DMatrix::zeros(1, 2));
    let i = 3;
    let mom = joint_moments(&pol, &sys, i).unwrap();
    let cov = mom.covariance();

    let draws = 1_000_000;
    let mut sum = DVector::<f64>::zeros(3);
    let mut sq = DMatrix::<f64>::zeros(3, 3);
    for d in 0..draws {
        let ws: Vec<DVector<f64>> = (0..i)
            .map(|s| disturbance(sys.sigma_w_sqrt(), 5, d, s as u64))
            .collect();
        let mut x = x0.clone();
        let mut u = DVector::zeros(1);
        for k in 0..=i {
            u = evaluate_policy(&pol, &ws, k, Some(&x)).unwrap();
            if k < i {
                x = sys.step(&x, &u, &ws[k]);
            }
        }
        let y = DVector::from_vec(vec![x[0], x[1], u[0]]);
        let e = &y - &mom.mean;
        sum += &e;
        sq += &e * e.transpose();
    }
    let nf = draws as f64;
    let mean_err = &sum / nf;
    let sample = sq / nf - &mean_err * mean_err.transpose();
    for a in 0..3 {
        let se_mean = (cov[(a, a)] / nf).sqrt();
        assert!(mean_err[a].abs() <= 3.0 * se_mean + 1e-12, "mean {a}");
        for b in 0..3 {
            // Var of a product of jointly Gaussian entries.
            let var = cov[(a, a)] * cov[(b, b)] + cov[(a, b)].powi(2);
            let se = (var / nf).sqrt();
            assert!(
                (sample[(a, b)] - cov[(a, b)]).abs() <= 3.0 * se,
                "cov ({a},{b}): {} vs {}",
                sample[(a, b)],
                cov[(a, b)]
            );
        }
    }
}

#[test]
fn evaluate_policy_examples() {
    let mut r = rng(6);
    let sys = random_system(&mut r, 2, 1);
    let gain = DMatrix::from_row_slice(1, 2, &[-0.3, 0.1]);
    let pol = random_policy(&mut r, &sys, 4, &DVector::zeros(2), &gain);
    let zeros = vec![DVector::zeros(2); 4];
    for k in 0..4 {
        assert_eq!(evaluate_policy(&pol, &zeros, k, None).unwrap(), pol.nominal.v[k]);
    }
    let x = DVector::from_vec(vec![1.0, -2.0]);
    assert_eq!(evaluate_policy(&pol, &zeros, 4, Some(&x)).unwrap(), &gain * &x);
    let mut ws = zeros.clone();
    ws[0] = DVector::from_vec(vec![0.7, -0.4]);
    let want = &pol.nominal.v[2] + pol.response.phi_u(2, 1) * &ws[0];
    assert!((evaluate_policy(&pol, &ws, 2, None).unwrap() - want).amax() < 1e-15);
}

fn loose_ingredients(
    sys: &slp_smpc::LinearGaussianSystem,
    cost: &StageCost,
    gain: &DMatrix<f64>,
) -> TerminalIngredients {
    let n = sys.n();
    let cs = ConstraintSpec::new(
        DMatrix::from_fn(1, n, |_, c| if c == 0 { 1.0 } else { 0.0 }),
        DMatrix::zeros(1, sys.m()),
        DVector::from_element(1, 100.0),
        DVector::from_element(1, 0.7),
        None,
    )
    .unwrap();
    TerminalIngredients::new(sys, &cs, cost, gain, 16).unwrap()
}

#[test]
fn expected_cost_without_quadratic_terms_is_nominal() {
    let mut r = rng(7);
    let sys = random_system(&mut r, 2, 1);
    let cost = StageCost::new(
        DMatrix::zeros(2, 2),
        DMatrix::zeros(1, 1),
        DVector::from_vec(vec![0.4, -1.0]),
        DVector::from_vec(vec![2.0]),
    )
    .unwrap();
    let gain = DMatrix::zeros(1, 2);
    let ing = loose_ingredients(&sys, &cost, &gain);
    let pol = random_policy(&mut r, &sys, 3, &DVector::from_vec(vec![1.0, 0.0]), &gain);
    let mut want = 0.0;
    for i in 0..3 {
        want += cost.eval(&pol.nominal.z[i], &pol.nominal.v[i]).unwrap();
    }
    want += ing.p_f.dot(&pol.nominal.z[3]);
    let got = expected_cost(&pol, &sys, &cost, &ing).unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn expected_cost_single_step_terminal_trace() {
    let mut r = rng(8);
    let sys = random_system(&mut r, 2, 1);
    let cost = quadratic_cost(2, 1, 1.0, 1.0);
    let gain = DMatrix::zeros(1, 2);
    let ing = loose_ingredients(&sys, &cost, &gain);
    // P by fixed-point iteration of the cost-to-go recursion.
    let mut p = DMatrix::<f64>::zeros(2, 2);
    for _ in 0..10_000 {
        p = sys.a().transpose() * &p * sys.a() + cost.q_mat();
    }
    let resp = SystemResponse::zero_feedback(&sys, 1).unwrap();
    let pol = Policy::new(
        NominalTrajectory {
            z: vec![DVector::zeros(2); 2],
            v: vec![DVector::zeros(1)],
        },
        resp,
        gain,
    )
    .unwrap();
    let got = expected_cost(&pol, &sys, &cost, &ing).unwrap();
    let want = (&p * sys.sigma_w()).trace();
    assert!((got - want).abs() < 1e-9 * want.abs().max(1.0));
}

#[test]
fn expected_cost_matches_monte_carlo() {
    let mut r = rng(9);
    let sys = random_system(&mut r, 2, 1);
    let cost = StageCost::new(
        random_psd(&mut r, 2, 0.1),
        DMatrix::from_element(1, 1, 0.5),
        DVector::from_vec(vec![0.2, -0.1]),
        DVector::from_vec(vec![0.3]),
    )
    .unwrap();
    let gain = DMatrix::from_row_slice(1, 2, &[-0.1, 0.05]);
    let ing = loose_ingredients(&sys, &cost, &gain);
    let x0 = DVector::from_vec(vec![0.5, 0.5]);
    let horizon = 4;
    let pol = random_policy(&mut r, &sys, horizon, &x0, &gain);
    let want = expected_cost(&pol, &sys, &cost, &ing).unwrap();

    let draws = 1_000_000u64;
    let (mut s, mut s2) = (0.0, 0.0);
    for d in 0..draws {
        let ws: Vec<DVector<f64>> = (0..horizon)
            .map(|k| disturbance(sys.sigma_w_sqrt(), 9, d, k as u64))
            .collect();
        let mut x = x0.clone();
        let mut total = 0.0;
        for k in 0..horizon {
            let u = evaluate_policy(&pol, &ws, k, None).unwrap();
            total += cost.eval(&x, &u).unwrap();
            x = sys.step(&x, &u, &ws[k]);
        }
        total += x.dot(&(&ing.p * &x)) + ing.p_f.dot(&x);
        s += total;
        s2 += total * total;
    }
    let nf = draws as f64;
    let mean = s / nf;
    let se = ((s2 / nf - mean * mean) / nf).sqrt();
    assert!((mean - want).abs() <= 3.0 * se, "{mean} vs {want} (se {se})");
}

#[test]
fn policy_json_round_trip() {
    let mut r = rng(10);
    let sys = random_system(&mut r, 3, 2);
    let pol = random_policy(&mut r, &sys, 3, &DVector::zeros(3), &DMatrix::zeros(2, 3));
    let back = Policy::from_json(&pol.to_json().unwrap()).unwrap();
    assert_eq!(back, pol);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn closed_loop_follows_parameterization(seed in any::<u64>(), n in 1usize..4, m in 1usize..3, horizon in 1usize..6) {
        let mut r = rng(seed);
        let sys = random_system(&mut r, n, m);
        let x0 = gaussian_vector(&mut r, n);
        let pol = random_policy(&mut r, &sys, horizon, &x0, &DMatrix::zeros(m, n));
        prop_assert!(validate_slp(&pol.response, &sys).unwrap());
        let ws: Vec<DVector<f64>> = (0..horizon).map(|_| gaussian_vector(&mut r, n)).collect();
        let mut x = x0;
        for k in 0..horizon {
            let pred = predicted_state(&pol, &ws, k);
            prop_assert!((&x - pred).amax() <= 1e-9 * (1.0 + x.amax()));
            let u = evaluate_policy(&pol, &ws, k, None).unwrap();
            x = sys.step(&x, &u, &ws[k]);
        }
        let pred = predicted_state(&pol, &ws, horizon);
        prop_assert!((&x - pred).amax() <= 1e-9 * (1.0 + x.amax()));
    }

    #[test]
    fn joint_covariance_is_psd(seed in any::<u64>(), horizon in 1usize..6) {
        let mut r = rng(seed);
        let sys = random_system(&mut r, 3, 2);
        let pol = random_policy(&mut r, &sys, horizon, &DVector::zeros(3), &DMatrix::zeros(2, 3));
        for i in 0..horizon {
            let cov = joint_moments(&pol, &sys, i).unwrap().covariance();
            prop_assert!(min_eigenvalue(&cov) >= -1e-10 * (1.0 + cov.amax()));
        }
    }

    #[test]
    fn exact_recursions_fix_perturbed_states(seed in any::<u64>()) {
        let mut r = rng(seed);
        let sys = random_system(&mut r, 3, 1);
        let mut pol = random_policy(&mut r, &sys, 4, &DVector::zeros(3), &DMatrix::zeros(1, 3));
        pol.nominal.z[2][1] += 1e-6;
        let fixed = pol.with_exact_recursions(&sys).unwrap();
        prop_assert!(fixed.nominal.is_consistent(&sys, 1e-12));
        prop_assert!(validate_slp(&fixed.response, &sys).unwrap());
        prop_assert_eq!(&fixed.nominal.v, &pol.nominal.v);
    }
}
