//! Dense numerical primitives: chi-squared quantile, PSD square roots,
//! discrete Lyapunov equations, Kronecker/vec utilities.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{dim_err, Error, Result};

/// Schur stability is rejected once the spectral radius reaches `1 - SCHUR_TOL`.
pub const SCHUR_TOL: f64 = 1e-9;

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// Error function. Series expansion below 2.5, continued fraction above.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return -erf(-x);
    }
    if x < 2.5 {
        erf_series(x)
    } else {
        1.0 - erfc_cf(x)
    }
}

/// Complementary error function, accurate in the far tail.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.5 {
        1.0 - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

// erf(x) = 2/sqrt(pi) exp(-x^2) sum_n 2^n x^(2n+1) / (2n+1)!!; all terms positive.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    for n in 0..200 {
        term *= 2.0 * x2 / (2 * n + 3) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    FRAC_2_SQRT_PI * (-x2).exp() * sum
}

// Modified Lentz evaluation of x + (1/2)/(x + 1/(x + (3/2)/(x + ...))).
fn erfc_cf(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 * 0.5;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (f * std::f64::consts::PI.sqrt())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse standard normal CDF: Acklam's rational approximation followed by
/// one Halley step.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "normal quantile needs p in (0,1), got {p}"
        )));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };

    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + 0.5 * x * u))
}

/// Quantile of the chi-squared distribution with one degree of freedom.
///
/// The starting point is the squared normal quantile of `(1+q)/2`; a final
/// Halley step is taken on `erf(y) = q` directly so that small `q` keeps full
/// relative accuracy.
pub fn chi_squared_quantile(q: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Domain(format!(
            "chi-squared quantile needs q in [0,1), got {q}"
        )));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    let mut y = normal_quantile(0.5 * (1.0 + q))? / std::f64::consts::SQRT_2;
    let resid = if q > 0.5 {
        (1.0 - q) - erfc(y)
    } else {
        erf(y) - q
    };
    let step = resid / (FRAC_2_SQRT_PI * (-y * y).exp());
    y -= step / (1.0 + y * step);
    Ok(2.0 * y * y)
}

/// CDF of the chi-squared distribution with one degree of freedom.
pub fn chi_squared_cdf(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        erf((0.5 * t).sqrt())
    }
}

/// Largest absolute deviation from symmetry.
pub fn asymmetry(s: &DMatrix<f64>) -> f64 {
    (s - s.transpose()).amax()
}

pub fn symmetrize(s: &DMatrix<f64>) -> DMatrix<f64> {
    (s + s.transpose()) * 0.5
}

pub fn min_eigenvalue(s: &DMatrix<f64>) -> f64 {
    if s.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(s)).eigenvalues.min()
}

fn check_square(s: &DMatrix<f64>, what: &str) -> Result<()> {
    if s.nrows() != s.ncols() {
        return Err(dim_err(format!(
            "{what} must be square, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    Ok(())
}

/// Symmetric PSD square root via eigendecomposition.
pub fn psd_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(s, "psd_sqrt input")?;
    if s.nrows() == 0 {
        return Ok(s.clone());
    }
    if asymmetry(s) > 1e-9 {
        return Err(Error::Validation(format!(
            "psd_sqrt input not symmetric (max deviation {:e})",
            asymmetry(s)
        )));
    }
    let eig = SymmetricEigen::new(symmetrize(s));
    let min = eig.eigenvalues.min();
    if min < -1e-9 {
        return Err(Error::NotPsd { min_eig: min });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let m = v * DMatrix::from_diagonal(&roots) * v.transpose();
    Ok(symmetrize(&m))
}

pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    check_square(a, "spectral radius input")?;
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    Ok(a.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max))
}

pub fn ensure_schur(a: &DMatrix<f64>) -> Result<()> {
    let radius = spectral_radius(a)?;
    if radius >= 1.0 - SCHUR_TOL {
        return Err(Error::Unstable { radius });
    }
    Ok(())
}

/// Which discrete Lyapunov equation to solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LyapunovForm {
    /// `X = A X A^T + W` (stationary covariance).
    Covariance,
    /// `X = A^T X A + W` (cost-to-go Hessian).
    CostToGo,
}

/// Solves the discrete Lyapunov equation selected by `form`.
pub fn solve_discrete_lyapunov(
    a: &DMatrix<f64>,
    w: &DMatrix<f64>,
    form: LyapunovForm,
) -> Result<DMatrix<f64>> {
    check_square(a, "closed-loop matrix")?;
    if w.shape() != a.shape() {
        return Err(dim_err("Lyapunov W must match A"));
    }
    ensure_schur(a)?;
    let n = a.nrows();
    let op = match form {
        LyapunovForm::Covariance => a.clone(),
        LyapunovForm::CostToGo => a.transpose(),
    };
    let x = if n <= 30 {
        let lhs = DMatrix::identity(n * n, n * n) - op.kronecker(&op);
        let sol = lhs
            .lu()
            .solve(&vec(w))
            .ok_or_else(|| Error::Solver("singular Lyapunov operator".into()))?;
        unvec(&sol, n, n)
    } else {
        // Doubling iteration: X_{2k} = X_k + A^k X_k A^kT.
        let mut x = w.clone();
        let mut ak = op.clone();
        for _ in 0..200 {
            x += &ak * &x * ak.transpose();
            ak = &ak * &ak;
            if ak.amax() < 1e-18 {
                break;
            }
        }
        x
    };
    Ok(symmetrize(&x))
}

/// `Sigma_0 = 0, Sigma_{i+1} = A_K Sigma_i A_K^T + Sigma_w`, plus the limit.
#[derive(Clone, Debug)]
pub struct CovarianceSequence {
    pub sigma_x: Vec<DMatrix<f64>>,
    pub sigma_x_inf: DMatrix<f64>,
    a_k: DMatrix<f64>,
    sigma_w: DMatrix<f64>,
}

impl CovarianceSequence {
    pub fn imax(&self) -> usize {
        self.sigma_x.len() - 1
    }

    /// `Sigma_i`; indices beyond the stored range are generated on demand.
    pub fn get(&self, i: usize) -> DMatrix<f64> {
        if let Some(s) = self.sigma_x.get(i) {
            return s.clone();
        }
        let mut s = self.sigma_x.last().expect("nonempty sequence").clone();
        for _ in self.imax()..i {
            s = &self.a_k * s * self.a_k.transpose() + &self.sigma_w;
        }
        s
    }
}

pub fn tail_covariance_sequence(
    a_k: &DMatrix<f64>,
    sigma_w: &DMatrix<f64>,
    imax: usize,
) -> Result<CovarianceSequence> {
    let n = a_k.nrows();
    let sigma_x_inf = solve_discrete_lyapunov(a_k, sigma_w, LyapunovForm::Covariance)?;
    let mut sigma_x = Vec::with_capacity(imax + 1);
    sigma_x.push(DMatrix::zeros(n, n));
    for i in 0..imax {
        let next = a_k * &sigma_x[i] * a_k.transpose() + sigma_w;
        sigma_x.push(next);
    }
    Ok(CovarianceSequence {
        sigma_x,
        sigma_x_inf,
        a_k: a_k.clone(),
        sigma_w: sigma_w.clone(),
    })
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-major vectorisation.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// Both sides of `vec(A B C) = (C^T kron A) vec(B)`.
pub fn kron_vec_sides(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if a.ncols() != b.nrows() || b.ncols() != c.nrows() {
        return Err(dim_err(format!(
            "A {:?}, B {:?}, C {:?} not conformable",
            a.shape(),
            b.shape(),
            c.shape()
        )));
    }
    let lhs = kron(&c.transpose(), a) * vec(b);
    let rhs = vec(&(a * b * c));
    Ok((lhs, rhs))
}

pub fn kron_vec_identity_check(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<bool> {
    let (lhs, rhs) = kron_vec_sides(a, b, c)?;
    Ok((lhs - rhs).amax() <= 1e-10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_values() {
        // Values from Abramowitz & Stegun table 7.1.
        assert!((erf(0.5) - 0.520_499_877_813_046_5).abs() < 1e-15);
        assert!((erf(1.0) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((erfc(3.0) - 2.209_049_699_858_544e-5).abs() < 1e-19);
        assert!((erfc(5.0) - 1.537_459_794_428_035e-12).abs() < 1e-25);
        assert_eq!(erf(0.0), 0.0);
    }

    #[test]
    fn quantile_domain() {
        assert_eq!(chi_squared_quantile(0.0).unwrap(), 0.0);
        assert!(chi_squared_quantile(1.0).is_err());
        assert!(chi_squared_quantile(-0.1).is_err());
    }

    #[test]
    fn tiny_q_keeps_relative_accuracy() {
        // chi2_1 CDF ~ sqrt(2t/pi) near zero, so t ~ pi q^2 / 2.
        let q = 1e-9;
        let t = chi_squared_quantile(q).unwrap();
        let approx = std::f64::consts::PI * q * q / 2.0;
        assert!(((t - approx) / approx).abs() < 1e-8);
    }

    #[test]
    fn lyapunov_scalar() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let w = DMatrix::from_element(1, 1, 1.0);
        let x = solve_discrete_lyapunov(&a, &w, LyapunovForm::Covariance).unwrap();
        assert!((x[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let a = DMatrix::from_element(1, 1, 1.0);
        let w = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(
            solve_discrete_lyapunov(&a, &w, LyapunovForm::CostToGo),
            Err(Error::Unstable { .. })
        ));
    }

    #[test]
    fn doubling_branch_matches_direct() {
        let n = 31;
        let a = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                0.5
            } else if j == i + 1 {
                0.3
            } else {
                0.0
            }
        });
        let w = DMatrix::identity(n, n);
        let x = solve_discrete_lyapunov(&a, &w, LyapunovForm::Covariance).unwrap();
        let resid = &a * &x * a.transpose() + &w - &x;
        assert!(resid.amax() < 1e-12);
    }

    #[test]
    fn sequence_extends_past_imax() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let w = DMatrix::from_element(1, 1, 1.0);
        let seq = tail_covariance_sequence(&a, &w, 2).unwrap();
        let full = tail_covariance_sequence(&a, &w, 6).unwrap();
        assert_eq!(seq.get(6), full.sigma_x[6]);
    }

    #[test]
    fn vec_is_column_major() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vec(&m).as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(unvec(&vec(&m), 2, 2), m);
    }

    #[test]
    fn psd_sqrt_rejects_indefinite() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(psd_sqrt(&s), Err(Error::NotPsd { .. })));
    }
}
