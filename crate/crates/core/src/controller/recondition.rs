//! Shift of the previous optimum, the alpha factors and the case split for
//! the reconditioned program.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::model::ConstraintSpec;
use crate::slp::{NominalTrajectory, Policy, SystemResponse};
use crate::terminal::{tail_row, TailRow, TailVariant, TerminalIngredients};

/// Relative threshold below which a conditional variance counts as zero.
pub const DEGENERACY_TOL: f64 = 1e-12;

/// Shifts `prev` by one step and conditions it on the realised `w_prev`.
///
/// Past the horizon the previous plan is extended with the terminal gain,
/// so the result is again a valid policy of the same horizon.
pub fn recondition_shift(
    prev: &Policy,
    w_prev: &DVector<f64>,
    ingredients: &TerminalIngredients,
) -> Result<Policy> {
    let resp = &prev.response;
    let (n, m, big_n) = (resp.n(), resp.m(), resp.horizon());
    if w_prev.len() != n {
        return Err(dim_err("disturbance length"));
    }
    let ext = resp.extend_with_gain(&ingredients.k)?;
    let k = &ingredients.k;
    let z_star = &prev.nominal.z;
    let v_star = |i: usize| -> DVector<f64> {
        if i < big_n {
            prev.nominal.v[i].clone()
        } else {
            k * &z_star[big_n]
        }
    };

    let mut z = Vec::with_capacity(big_n + 1);
    let mut v = Vec::with_capacity(big_n);
    for i in 0..big_n {
        z.push(&z_star[i + 1] + ext.phi_x(i + 1, 1) * w_prev);
        v.push(v_star(i + 1) + ext.phi_u(i + 1, 1) * w_prev);
    }
    z.push(&ingredients.a_k * &z[big_n - 1]);

    let mut phi_x: Vec<Vec<DMatrix<f64>>> = (1..big_n)
        .map(|i| (1..=i).map(|l| ext.phi_x(i + 1, l + 1).clone()).collect())
        .collect();
    let mut last: Vec<DMatrix<f64>> = match phi_x.last() {
        Some(row) => row.iter().map(|b| &ingredients.a_k * b).collect(),
        None => Vec::new(),
    };
    last.push(DMatrix::identity(n, n));
    phi_x.push(last);
    let phi_u = (1..big_n)
        .map(|i| (1..=i).map(|l| ext.phi_u(i + 1, l + 1).clone()).collect())
        .collect();

    Policy::new(
        NominalTrajectory { z, v },
        SystemResponse::new(n, m, phi_x, phi_u)?,
        prev.terminal_gain.clone(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaResult {
    /// `None` when the conditional variance vanishes.
    pub alpha: Option<f64>,
    pub degenerate: bool,
    /// Mean of the hat candidate satisfies the half-space.
    pub prev_satisfied: bool,
    /// `b_j` minus the hat mean.
    pub slack: f64,
    /// Conditional standard deviation of the hat candidate.
    pub spread: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintCase {
    /// Zero variance, satisfied: half-space plus zero-variance equality.
    C1,
    /// Zero variance, violated: no constraint.
    C2,
    /// Cone row scaled by a nonnegative alpha.
    C3,
    /// Negative alpha: mean bounded by the hat mean, variance matched.
    C4,
}

impl ConstraintCase {
    pub fn index(self) -> usize {
        match self {
            ConstraintCase::C1 => 0,
            ConstraintCase::C2 => 1,
            ConstraintCase::C3 => 2,
            ConstraintCase::C4 => 3,
        }
    }
}

pub fn classify_constraint(a: &AlphaResult) -> ConstraintCase {
    match (a.degenerate, a.prev_satisfied, a.alpha) {
        (true, true, _) => ConstraintCase::C1,
        (true, false, _) => ConstraintCase::C2,
        (false, _, Some(al)) if al >= 0.0 => ConstraintCase::C3,
        (false, _, _) => ConstraintCase::C4,
    }
}

fn alpha_from(slack: f64, spread: f64, scale: f64) -> AlphaResult {
    let degenerate = spread <= DEGENERACY_TOL * (1.0 + scale);
    AlphaResult {
        alpha: (!degenerate).then(|| slack / spread),
        degenerate,
        prev_satisfied: slack >= 0.0,
        slack,
        spread,
    }
}

/// Alpha of horizon row `(i, j)`, `0 <= i < N`, for the hat policy.
pub fn compute_alpha(
    hat: &Policy,
    sigma_w_sqrt: &DMatrix<f64>,
    constraints: &ConstraintSpec,
    i: usize,
    j: usize,
) -> AlphaResult {
    let resp = &hat.response;
    let g = constraints.g().row(j);
    let h = constraints.h().row(j);
    let slack = constraints.b()[j] - (g * &hat.nominal.z[i])[0] - (h * &hat.nominal.v[i])[0];
    let mut sq = 0.0;
    let mut block_sq = 0.0;
    let mut var_sq = 0.0;
    for l in 1..=i {
        let (px, pu) = (resp.phi_x(i, l), resp.phi_u(i, l));
        let row = g * px + h * pu;
        var_sq += row.norm_squared();
        block_sq += px.norm_squared() + pu.norm_squared();
        sq += (sigma_w_sqrt * row.transpose()).norm_squared();
    }
    // Degeneracy is judged on G PhiX + H PhiU itself, the spread on the
    // covariance-weighted version.
    let degenerate = i == 0 || var_sq.sqrt() <= DEGENERACY_TOL * (1.0 + block_sq.sqrt());
    let spread = sq.sqrt();
    AlphaResult {
        alpha: (!degenerate).then(|| slack / spread),
        degenerate,
        prev_satisfied: slack >= 0.0,
        slack,
        spread,
    }
}

/// Alpha of a tail row for the hat terminal pair `(z_N, PhiX_N)`.
pub fn compute_tail_alpha(hat: &Policy, row: &TailRow) -> AlphaResult {
    let big_n = hat.horizon();
    let psi = hat.response.psi();
    let slack = row.rhs - row.linear.dot(&hat.nominal.z[big_n]);
    let norm = row.norm_part(&psi);
    let spread = (norm.norm_squared() + row.augmentation.norm_squared()).sqrt();
    alpha_from(slack, spread, row.linear.norm() * (1.0 + psi.norm()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TailEntry {
    pub row: TailRow,
    pub alpha: AlphaResult,
    pub case: ConstraintCase,
}

/// Everything the reconditioned program needs besides the measured state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconditioningContext {
    pub hat: Policy,
    /// Indexed `[i][j]` for `i = 0..N-1`.
    pub alpha: Vec<Vec<AlphaResult>>,
    pub case: Vec<Vec<ConstraintCase>>,
    /// Tail rows `i = 0..=mu_hat`; empty for the equality terminal set.
    pub tail: Vec<TailEntry>,
}

impl ReconditioningContext {
    /// `mu_hat = None` selects the equality terminal set.
    pub fn new(
        prev: &Policy,
        w_prev: &DVector<f64>,
        ingredients: &TerminalIngredients,
        constraints: &ConstraintSpec,
        mu_hat: Option<usize>,
    ) -> Result<Self> {
        let hat = recondition_shift(prev, w_prev, ingredients)?;
        let big_n = hat.horizon();
        let c = constraints.count();
        let alpha: Vec<Vec<AlphaResult>> = (0..big_n)
            .map(|i| {
                (0..c)
                    .map(|j| compute_alpha(&hat, &ingredients.sigma_w_sqrt, constraints, i, j))
                    .collect()
            })
            .collect();
        let case = alpha
            .iter()
            .map(|row| row.iter().map(classify_constraint).collect())
            .collect();
        let mut tail = Vec::new();
        if let Some(mu_hat) = mu_hat {
            for i in 0..=mu_hat {
                for j in 0..c {
                    let row = tail_row(ingredients, constraints, big_n, j, i, TailVariant::Exact)?;
                    let a = compute_tail_alpha(&hat, &row);
                    tail.push(TailEntry {
                        case: classify_constraint(&a),
                        alpha: a,
                        row,
                    });
                }
            }
        }
        Ok(Self {
            hat,
            alpha,
            case,
            tail,
        })
    }

    pub fn hat_z(&self, i: usize) -> &DVector<f64> {
        &self.hat.nominal.z[i]
    }

    pub fn hat_v(&self, i: usize) -> &DVector<f64> {
        &self.hat.nominal.v[i]
    }

    pub fn hat_phi_x(&self, i: usize) -> DMatrix<f64> {
        self.hat.response.state_row(i)
    }

    pub fn hat_phi_u(&self, i: usize) -> DMatrix<f64> {
        self.hat.response.input_row(i)
    }

    /// Counts of C1..C4 over the horizon rows.
    pub fn case_histogram(&self) -> [usize; 4] {
        let mut h = [0; 4];
        for c in self.case.iter().flatten() {
            h[c.index()] += 1;
        }
        h
    }

    pub fn tail_case_histogram(&self) -> [usize; 4] {
        let mut h = [0; 4];
        for t in &self.tail {
            h[t.case.index()] += 1;
        }
        h
    }
}
