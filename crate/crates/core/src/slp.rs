//! System-level parameterisation of affine disturbance-feedback policies.
//!
//! With `x_k = z_k + sum_{i=1}^{k} PhiX_{k,i} w_{i-1}` and
//! `u_k = v_k + sum_{i=1}^{k} PhiU_{k,i} w_{i-1}` the response blocks obey
//! `PhiX_1 = I` and `PhiX_{k+1} = [A PhiX_k + B PhiU_k, I]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::matrix_serde;
use crate::model::{LinearGaussianSystem, StageCost};
use crate::terminal::TerminalIngredients;

/// Block-lower-triangular response maps. Blocks are indexed 1-based as
/// `(k, i)` with `1 <= i <= k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemResponse {
    n: usize,
    m: usize,
    horizon: usize,
    /// `phi_x[k-1][i-1]`, k = 1..=N.
    #[serde(with = "matrix_serde::block_rows")]
    phi_x: Vec<Vec<DMatrix<f64>>>,
    /// `phi_u[k-1][i-1]`, k = 1..=N-1, plus k = N once extended by a gain.
    #[serde(with = "matrix_serde::block_rows")]
    phi_u: Vec<Vec<DMatrix<f64>>>,
}

impl SystemResponse {
    pub fn new(
        n: usize,
        m: usize,
        phi_x: Vec<Vec<DMatrix<f64>>>,
        phi_u: Vec<Vec<DMatrix<f64>>>,
    ) -> Result<Self> {
        let horizon = phi_x.len();
        if horizon == 0 {
            return Err(dim_err("response needs at least one state row"));
        }
        if phi_u.len() + 1 != horizon && phi_u.len() != horizon {
            return Err(dim_err(format!(
                "expected {} or {} input rows, got {}",
                horizon - 1,
                horizon,
                phi_u.len()
            )));
        }
        for (k, row) in phi_x.iter().enumerate() {
            if row.len() != k + 1 || row.iter().any(|b| b.shape() != (n, n)) {
                return Err(dim_err(format!("state row {} malformed", k + 1)));
            }
        }
        for (k, row) in phi_u.iter().enumerate() {
            if row.len() != k + 1 || row.iter().any(|b| b.shape() != (m, n)) {
                return Err(dim_err(format!("input row {} malformed", k + 1)));
            }
        }
        Ok(Self {
            n,
            m,
            horizon,
            phi_x,
            phi_u,
        })
    }

    /// Builds the state blocks from input blocks by running the recursion.
    pub fn from_feedback(
        sys: &LinearGaussianSystem,
        horizon: usize,
        phi_u: Vec<Vec<DMatrix<f64>>>,
    ) -> Result<Self> {
        let (n, m) = (sys.n(), sys.m());
        if horizon == 0 || phi_u.len() + 1 < horizon {
            return Err(dim_err("not enough input rows for the horizon"));
        }
        let mut phi_x: Vec<Vec<DMatrix<f64>>> = vec![vec![DMatrix::identity(n, n)]];
        for k in 1..horizon {
            let prev = &phi_x[k - 1];
            let mut row: Vec<DMatrix<f64>> = prev
                .iter()
                .zip(&phi_u[k - 1])
                .map(|(px, pu)| sys.a() * px + sys.b() * pu)
                .collect();
            row.push(DMatrix::identity(n, n));
            phi_x.push(row);
        }
        Self::new(n, m, phi_x, phi_u)
    }

    /// The open-loop response, `PhiU = 0` and `PhiX_{k,i} = A^{k-i}`.
    pub fn zero_feedback(sys: &LinearGaussianSystem, horizon: usize) -> Result<Self> {
        let phi_u = (1..horizon)
            .map(|k| vec![DMatrix::zeros(sys.m(), sys.n()); k])
            .collect();
        Self::from_feedback(sys, horizon, phi_u)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn is_extended(&self) -> bool {
        self.phi_u.len() == self.horizon
    }

    pub fn phi_x(&self, k: usize, i: usize) -> &DMatrix<f64> {
        &self.phi_x[k - 1][i - 1]
    }

    pub fn phi_u(&self, k: usize, i: usize) -> &DMatrix<f64> {
        &self.phi_u[k - 1][i - 1]
    }

    /// `[PhiX_{k,1} .. PhiX_{k,k}]`, n x kn (empty for k = 0).
    pub fn state_row(&self, k: usize) -> DMatrix<f64> {
        hstack(
            self.n,
            k.checked_sub(1).map(|r| &self.phi_x[r][..]).unwrap_or(&[]),
        )
    }

    /// `[PhiU_{k,1} .. PhiU_{k,k}]`, m x kn (empty for k = 0).
    pub fn input_row(&self, k: usize) -> DMatrix<f64> {
        hstack(
            self.m,
            k.checked_sub(1).map(|r| &self.phi_u[r][..]).unwrap_or(&[]),
        )
    }

    /// `vec(PhiX_N^T)`, the terminal response in the form used by tail rows.
    pub fn psi(&self) -> DVector<f64> {
        crate::linalg::vec(&self.state_row(self.horizon).transpose())
    }

    /// Appends `PhiU_N = K PhiX_N`.
    pub fn extend_with_gain(&self, k: &DMatrix<f64>) -> Result<Self> {
        if k.shape() != (self.m, self.n) {
            return Err(dim_err("gain shape"));
        }
        let mut out = self.clone();
        out.phi_u.truncate(self.horizon - 1);
        out.phi_u
            .push(self.phi_x[self.horizon - 1].iter().map(|b| k * b).collect());
        Ok(out)
    }
}

fn hstack(rows: usize, blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), b.shape()).copy_from(b);
        c += b.ncols();
    }
    out
}

/// True iff the recursion holds blockwise within 1e-9.
pub fn validate_slp(resp: &SystemResponse, sys: &LinearGaussianSystem) -> Result<bool> {
    if resp.n != sys.n() || resp.m != sys.m() {
        return Err(dim_err("response dimensions do not match the system"));
    }
    const TOL: f64 = 1e-9;
    let eye = DMatrix::<f64>::identity(resp.n, resp.n);
    for k in 1..=resp.horizon {
        if (resp.phi_x(k, k) - &eye).amax() > TOL {
            return Ok(false);
        }
    }
    for k in 1..resp.horizon {
        for i in 1..=k {
            let next = sys.a() * resp.phi_x(k, i) + sys.b() * resp.phi_u(k, i);
            if (resp.phi_x(k + 1, i) - next).amax() > TOL {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Disturbance-free trajectory `z_{i+1} = A z_i + B v_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NominalTrajectory {
    #[serde(with = "matrix_serde::vectors")]
    pub z: Vec<DVector<f64>>,
    #[serde(with = "matrix_serde::vectors")]
    pub v: Vec<DVector<f64>>,
}

impl NominalTrajectory {
    pub fn is_consistent(&self, sys: &LinearGaussianSystem, tol: f64) -> bool {
        self.z.len() == self.v.len() + 1
            && self
                .v
                .iter()
                .enumerate()
                .all(|(i, v)| (sys.a() * &self.z[i] + sys.b() * v - &self.z[i + 1]).amax() <= tol)
    }
}

/// Affine policy: nominal plan, response maps and the gain used past N.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub nominal: NominalTrajectory,
    pub response: SystemResponse,
    #[serde(with = "matrix_serde::matrix")]
    pub terminal_gain: DMatrix<f64>,
}

impl Policy {
    pub fn new(
        nominal: NominalTrajectory,
        response: SystemResponse,
        terminal_gain: DMatrix<f64>,
    ) -> Result<Self> {
        let (n, m, big_n) = (response.n, response.m, response.horizon);
        if nominal.z.len() != big_n + 1
            || nominal.v.len() != big_n
            || nominal.z.iter().any(|z| z.len() != n)
            || nominal.v.iter().any(|v| v.len() != m)
            || terminal_gain.shape() != (m, n)
        {
            return Err(dim_err("policy parts have inconsistent dimensions"));
        }
        Ok(Self {
            nominal,
            response,
            terminal_gain,
        })
    }

    pub fn horizon(&self) -> usize {
        self.response.horizon
    }

    /// Recomputes `z` from `z_0, v` and the state blocks from the input
    /// blocks, so that both recursions hold to rounding. Solver output
    /// satisfies them only to its feasibility tolerance.
    pub fn with_exact_recursions(&self, sys: &LinearGaussianSystem) -> Result<Self> {
        let big_n = self.horizon();
        let mut z = vec![self.nominal.z[0].clone()];
        for i in 0..big_n {
            z.push(sys.step(&z[i], &self.nominal.v[i], &DVector::zeros(sys.n())));
        }
        let phi_u = self.response.phi_u[..big_n - 1].to_vec();
        Policy::new(
            NominalTrajectory {
                z,
                v: self.nominal.v.clone(),
            },
            SystemResponse::from_feedback(sys, big_n, phi_u)?,
            self.terminal_gain.clone(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Policy = serde_json::from_str(text)?;
        let response = SystemResponse::new(
            p.response.n,
            p.response.m,
            p.response.phi_x,
            p.response.phi_u,
        )?;
        Policy::new(p.nominal, response, p.terminal_gain)
    }
}

/// Mean and covariance factor of the predicted pair `(x_i, u_i)`.
#[derive(Clone, Debug)]
pub struct JointMoments {
    pub mean: DVector<f64>,
    /// `F` with covariance `F F^T`; `(n+m) x (i n)`.
    pub factor: DMatrix<f64>,
}

impl JointMoments {
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }
}

/// Moments of `(x_i, u_i)` for `0 <= i <= N-1`.
pub fn joint_moments(
    policy: &Policy,
    sys: &LinearGaussianSystem,
    i: usize,
) -> Result<JointMoments> {
    let big_n = policy.horizon();
    if i >= big_n {
        return Err(Error::OutOfRange {
            index: i,
            limit: big_n - 1,
        });
    }
    let (n, m) = (sys.n(), sys.m());
    let mut mean = DVector::zeros(n + m);
    mean.rows_mut(0, n).copy_from(&policy.nominal.z[i]);
    mean.rows_mut(n, m).copy_from(&policy.nominal.v[i]);
    let mut factor = DMatrix::zeros(n + m, i * n);
    for l in 1..=i {
        let c = (l - 1) * n;
        factor
            .view_mut((0, c), (n, n))
            .copy_from(&(policy.response.phi_x(i, l) * sys.sigma_w_sqrt()));
        factor
            .view_mut((n, c), (m, n))
            .copy_from(&(policy.response.phi_u(i, l) * sys.sigma_w_sqrt()));
    }
    Ok(JointMoments { mean, factor })
}

/// Control at time `k`: `v_k + sum_i PhiU_{k,i} w_{i-1}` inside the
/// horizon, `K x` afterwards.
pub fn evaluate_policy(
    policy: &Policy,
    disturbances: &[DVector<f64>],
    k: usize,
    state: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let big_n = policy.horizon();
    if k >= big_n {
        let x = state.ok_or(Error::MissingState)?;
        return Ok(&policy.terminal_gain * x);
    }
    if disturbances.len() < k {
        return Err(Error::MissingHistory {
            needed: k,
            got: disturbances.len(),
        });
    }
    let mut u = policy.nominal.v[k].clone();
    for i in 1..=k {
        u += policy.response.phi_u(k, i) * &disturbances[i - 1];
    }
    Ok(u)
}

/// Predicted state `z_k + sum_i PhiX_{k,i} w_{i-1}` for `k <= N`.
pub fn predicted_state(policy: &Policy, disturbances: &[DVector<f64>], k: usize) -> DVector<f64> {
    let mut x = policy.nominal.z[k].clone();
    for i in 1..=k {
        x += policy.response.phi_x(k, i) * &disturbances[i - 1];
    }
    x
}

/// Expected cost of the dual-mode policy: in-horizon stage costs with
/// covariance traces plus the terminal cost of `x_N`.
pub fn expected_cost(
    policy: &Policy,
    sys: &LinearGaussianSystem,
    cost: &StageCost,
    terminal: &TerminalIngredients,
) -> Result<f64> {
    let big_n = policy.horizon();
    if sys.n() != policy.response.n || cost.q().len() != sys.n() || cost.r().len() != sys.m() {
        return Err(dim_err("expected cost: dimensions inconsistent"));
    }
    let sw = sys.sigma_w_sqrt();
    let mut j = 0.0;
    for i in 0..big_n {
        j += cost.eval(&policy.nominal.z[i], &policy.nominal.v[i])?;
        for l in 1..=i {
            let fx = policy.response.phi_x(i, l) * sw;
            let fu = policy.response.phi_u(i, l) * sw;
            j += (fx.transpose() * cost.q_mat() * &fx).trace();
            j += (fu.transpose() * cost.r_mat() * &fu).trace();
        }
    }
    let z_n = &policy.nominal.z[big_n];
    j += z_n.dot(&(&terminal.p * z_n)) + terminal.p_f.dot(z_n);
    for l in 1..=big_n {
        let fx = policy.response.phi_x(big_n, l) * sw;
        j += (fx.transpose() * &terminal.p * &fx).trace();
    }
    Ok(j)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_sys() -> LinearGaussianSystem {
        LinearGaussianSystem::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn one_step_recursion_by_hand() {
        let sys = scalar_sys();
        let resp =
            SystemResponse::from_feedback(&sys, 2, vec![vec![DMatrix::from_element(1, 1, -1.0)]])
                .unwrap();
        assert_eq!(resp.phi_x(2, 1)[(0, 0)], 0.0);
        assert_eq!(resp.phi_x(2, 2)[(0, 0)], 1.0);
        assert!(validate_slp(&resp, &sys).unwrap());
    }

    #[test]
    fn psi_stacks_transposed_blocks() {
        let sys = scalar_sys();
        let resp = SystemResponse::zero_feedback(&sys, 3).unwrap();
        assert_eq!(resp.psi().len(), 3);
        assert!(resp.psi().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn extend_replaces_terminal_row() {
        let sys = scalar_sys();
        let resp = SystemResponse::zero_feedback(&sys, 2).unwrap();
        let k = DMatrix::from_element(1, 1, -0.5);
        let ext = resp.extend_with_gain(&k).unwrap();
        assert!(ext.is_extended());
        assert_eq!(ext.phi_u(2, 2)[(0, 0)], -0.5);
        let again = ext.extend_with_gain(&k).unwrap();
        assert_eq!(again, ext);
    }

    #[test]
    fn missing_history_is_reported() {
        let sys = scalar_sys();
        let resp = SystemResponse::zero_feedback(&sys, 3).unwrap();
        let nominal = NominalTrajectory {
            z: vec![DVector::zeros(1); 4],
            v: vec![DVector::zeros(1); 3],
        };
        let pol = Policy::new(nominal, resp, DMatrix::zeros(1, 1)).unwrap();
        assert!(matches!(
            evaluate_policy(&pol, &[], 2, None),
            Err(Error::MissingHistory { needed: 2, got: 0 })
        ));
        assert!(matches!(
            evaluate_policy(&pol, &[], 3, None),
            Err(Error::MissingState)
        ));
    }
}
