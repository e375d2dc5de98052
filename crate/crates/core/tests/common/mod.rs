//! Helpers shared by the integration tests: independent numeric oracles and
//! small random problem instances.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use slp_smpc::model::{ConstraintSpec, LinearGaussianSystem, StageCost};

/// `erf(x)` by composite Simpson integration of `2/sqrt(pi) exp(-t^2)`.
pub fn erf_simpson(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let n = 20_000;
    let h = x / n as f64;
    let f = |t: f64| (-t * t).exp();
    let mut s = f(0.0) + f(x);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(i as f64 * h);
    }
    s * h / 3.0 * 2.0 / std::f64::consts::PI.sqrt()
}

/// Standard normal quantile by bisection on the integrated error function.
pub fn normal_quantile_bisect(p: f64) -> f64 {
    let cdf = |x: f64| 0.5 * (1.0 + erf_simpson(x / std::f64::consts::SQRT_2));
    let (mut lo, mut hi) = (-12.0, 12.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Chi-squared (one degree of freedom) quantile via the squared normal quantile.
pub fn chi2_quantile_oracle(q: f64) -> f64 {
    normal_quantile_bisect(0.5 * (1.0 + q)).powi(2)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Spectral radius via the eigenvalues of the real Schur form.
pub fn radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Random matrix rescaled to spectral radius `rho`.
pub fn stable_matrix(rng: &mut ChaCha8Rng, n: usize, rho: f64) -> DMatrix<f64> {
    let a = gaussian_matrix(rng, n, n);
    let r = radius(&a).max(1e-6);
    a * (rho / r)
}

pub fn random_psd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let x = gaussian_matrix(rng, n, n);
    &x * x.transpose() * (1.0 / n as f64) + DMatrix::identity(n, n) * floor
}

pub fn random_system(rng: &mut ChaCha8Rng, n: usize, m: usize) -> LinearGaussianSystem {
    let a = stable_matrix(rng, n, 0.8);
    let b = gaussian_matrix(rng, n, m);
    let w = random_psd(rng, n, 0.05) * 0.1;
    LinearGaussianSystem::new(a, b, w).unwrap()
}

pub fn scalar_system(a: f64, b: f64, w: f64) -> LinearGaussianSystem {
    LinearGaussianSystem::new(
        DMatrix::from_element(1, 1, a),
        DMatrix::from_element(1, 1, b),
        DMatrix::from_element(1, 1, w),
    )
    .unwrap()
}

/// One half-space per constraint with default decomposition.
pub fn half_spaces(g: DMatrix<f64>, h: DMatrix<f64>, b: &[f64], p: &[f64]) -> ConstraintSpec {
    ConstraintSpec::new(g, h, DVector::from_row_slice(b), DVector::from_row_slice(p), None).unwrap()
}

pub fn quadratic_cost(n: usize, m: usize, q: f64, r: f64) -> StageCost {
    StageCost::new(
        DMatrix::identity(n, n) * q,
        DMatrix::identity(m, m) * r,
        DVector::zeros(n),
        DVector::zeros(m),
    )
    .unwrap()
}

/// Binomial standard error of a frequency estimate.
pub fn binomial_se(p: f64, count: usize) -> f64 {
    (p * (1.0 - p) / count as f64).sqrt()
}

use slp_smpc::slp::{NominalTrajectory, Policy, SystemResponse};

/// Random feedback blocks and nominal inputs; states follow the dynamics
/// from `x0`, so the result satisfies both recursions.
pub fn random_policy(
    rng: &mut ChaCha8Rng,
    sys: &LinearGaussianSystem,
    horizon: usize,
    x0: &DVector<f64>,
    gain: &DMatrix<f64>,
) -> Policy {
    let (n, m) = (sys.n(), sys.m());
    let phi_u = (1..horizon)
        .map(|k| (0..k).map(|_| gaussian_matrix(rng, m, n) * 0.5).collect())
        .collect();
    let response = SystemResponse::from_feedback(sys, horizon, phi_u).unwrap();
    let v: Vec<DVector<f64>> = (0..horizon).map(|_| gaussian_vector(rng, m)).collect();
    let mut z = vec![x0.clone()];
    for i in 0..horizon {
        z.push(sys.a() * &z[i] + sys.b() * &v[i]);
    }
    Policy::new(NominalTrajectory { z, v }, response, gain.clone()).unwrap()
}
