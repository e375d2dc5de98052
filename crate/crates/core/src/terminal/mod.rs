//! Offline terminal ingredients: gain synthesis, terminal cost, tail rows,
//! S-procedure certificates and the terminal-set search.

mod cache;
mod lmi;
mod set;
mod tail;

pub use cache::{cache_key, TerminalSetCache, CACHE_DIR_ENV};
pub use lmi::{
    lmi_containment_mu, lmi_containment_nu, ConstKind, ContainmentOutcome, ImplicationCertificate,
    LmiData, ReducedForm, TargetKind, Verdict,
};
pub use set::{algorithm1_terminal_set, Certificates, SearchCaps, TerminalSet};
pub use tail::{tail_row, TailRow, TailVariant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{self, LinExpr, ProgramBuilder, SolveStatus, SolverSettings};
use crate::error::{dim_err, Error, Result};
use crate::linalg::{
    ensure_schur, solve_discrete_lyapunov, tail_covariance_sequence, CovarianceSequence,
    LyapunovForm,
};
use crate::matrix_serde;
use crate::model::{ConstraintSpec, LinearGaussianSystem, StageCost};

/// Terminal gain with its closed-loop data.
#[derive(Clone, Debug)]
pub struct TerminalIngredients {
    pub k: DMatrix<f64>,
    pub a_k: DMatrix<f64>,
    pub g_k: DMatrix<f64>,
    pub c_k: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub p_f: DVector<f64>,
    pub cov: CovarianceSequence,
    pub sigma_w_sqrt: DMatrix<f64>,
}

impl TerminalIngredients {
    /// Computes every ingredient for gain `k` and checks the stationary
    /// margin `b_j - sqrt(p~_j) ||Sigma_inf^(1/2) C_K^T L_j^T|| > 0`.
    pub fn new(
        sys: &LinearGaussianSystem,
        constraints: &ConstraintSpec,
        cost: &StageCost,
        k: &DMatrix<f64>,
        imax: usize,
    ) -> Result<Self> {
        if k.shape() != (sys.m(), sys.n()) {
            return Err(dim_err(format!(
                "terminal gain must be {}x{}",
                sys.m(),
                sys.n()
            )));
        }
        let a_k = sys.a() + sys.b() * k;
        ensure_schur(&a_k)?;
        let (p, p_f) = terminal_cost(sys, cost, k)?;
        let cov = tail_covariance_sequence(&a_k, sys.sigma_w(), imax)?;
        let out = Self {
            k: k.clone(),
            g_k: constraints.g() + constraints.h() * k,
            c_k: constraints.c() + constraints.d() * k,
            a_k,
            p,
            p_f,
            cov,
            sigma_w_sqrt: sys.sigma_w_sqrt().clone(),
        };
        let margins = out.stationary_margins(constraints);
        if let Some(j) = margins.iter().position(|&m| !(m > 0.0)) {
            return Err(Error::DesignInfeasible(format!(
                "gain violates the stationary margin for constraint {j} (margin {:.6e})",
                margins[j]
            )));
        }
        Ok(out)
    }

    pub fn n(&self) -> usize {
        self.a_k.nrows()
    }

    /// `b_j - sqrt(p~_j) sqrt(L_j C_K Sigma_inf C_K^T L_j^T)` for every j.
    pub fn stationary_margins(&self, constraints: &ConstraintSpec) -> DVector<f64> {
        let lc = constraints.l() * &self.c_k;
        DVector::from_fn(constraints.count(), |j, _| {
            let row = lc.row(j);
            let var = (row * &self.cov.sigma_x_inf * row.transpose())[0];
            constraints.b()[j] - constraints.p_tilde()[j].sqrt() * var.max(0.0).sqrt()
        })
    }

    /// `G_{K,j} A_K^i` as a column vector.
    pub fn tail_linear(&self, j: usize, i: usize) -> DVector<f64> {
        let mut g = self.g_k.row(j).transpose();
        let at = self.a_k.transpose();
        for _ in 0..i {
            g = &at * g;
        }
        g
    }
}

/// `P` from `A_K^T P A_K + Q + K^T R K = P` and `p_f = (I - A_K^T)^{-1}(K^T r + q)`.
pub fn terminal_cost(
    sys: &LinearGaussianSystem,
    cost: &StageCost,
    k: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = sys.n();
    let a_k = sys.a() + sys.b() * k;
    let w = cost.q_mat() + k.transpose() * cost.r_mat() * k;
    let p = solve_discrete_lyapunov(&a_k, &w, LyapunovForm::CostToGo)?;
    let rhs = k.transpose() * cost.r() + cost.q();
    let p_f = (DMatrix::identity(n, n) - a_k.transpose())
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Solver("I - A_K^T singular".into()))?;
    Ok((p, p_f))
}

/// Result of the terminal-gain SDP.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GainDesign {
    #[serde(with = "matrix_serde::matrix")]
    pub k: DMatrix<f64>,
    /// Stationary covariance of `A_K`, recomputed with the Lyapunov solver.
    #[serde(with = "matrix_serde::matrix")]
    pub sigma_x_inf: DMatrix<f64>,
    /// Stationary margins recomputed from `sigma_x_inf`.
    #[serde(with = "matrix_serde::vector")]
    pub margins: DVector<f64>,
    #[serde(with = "matrix_serde::vector")]
    pub eps: DVector<f64>,
    pub spectral_radius: f64,
    /// SDP objective (bound on the largest eigenvalue of the covariance).
    pub sdp_objective: Option<f64>,
    pub synthesized: bool,
}

/// Checks a given gain against the margins without solving the SDP.
pub fn verify_terminal_gain(
    sys: &LinearGaussianSystem,
    constraints: &ConstraintSpec,
    k: &DMatrix<f64>,
    eps: &DVector<f64>,
) -> Result<GainDesign> {
    if k.shape() != (sys.m(), sys.n()) {
        return Err(dim_err("terminal gain shape"));
    }
    let a_k = sys.a() + sys.b() * k;
    let radius = crate::linalg::spectral_radius(&a_k)?;
    ensure_schur(&a_k)?;
    let sigma = solve_discrete_lyapunov(&a_k, sys.sigma_w(), LyapunovForm::Covariance)?;
    let lc = constraints.l() * (constraints.c() + constraints.d() * k);
    let margins = DVector::from_fn(constraints.count(), |j, _| {
        let row = lc.row(j);
        constraints.b()[j]
            - constraints.p_tilde()[j].sqrt() * (row * &sigma * row.transpose())[0].max(0.0).sqrt()
    });
    Ok(GainDesign {
        k: k.clone(),
        sigma_x_inf: sigma,
        margins,
        eps: eps.clone(),
        spectral_radius: radius,
        sdp_objective: None,
        synthesized: false,
    })
}

/// Solves the covariance-bounding SDP for a terminal gain `K = Y Sigma^{-1}`.
pub fn synthesize_terminal_gain(
    sys: &LinearGaussianSystem,
    constraints: &ConstraintSpec,
    eps: &DVector<f64>,
) -> Result<GainDesign> {
    let (n, m, c) = (sys.n(), sys.m(), constraints.count());
    if eps.len() != c || eps.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::Validation("margins eps_j must be positive".into()));
    }
    if let Some(j) = (0..c).find(|&j| eps[j] >= constraints.b()[j]) {
        return Err(Error::DesignInfeasible(format!(
            "margin eps_{j} is not below b_{j}"
        )));
    }

    let mut pb = ProgramBuilder::new();
    let t = pb.add_var("t");
    let s0 = pb.add_vars("sigma", n * (n + 1) / 2);
    let y0 = pb.add_vars("y", m * n);
    let sig = |i: usize, j: usize| {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        s0 + j * (j + 1) / 2 + i
    };
    let y = |i: usize, j: usize| y0 + i * n + j;

    pb.add_psd(
        n,
        |i, j| {
            let mut e = LinExpr::term(sig(i, j), -1.0);
            if i == j {
                e.add_term(t, 1.0);
            }
            e
        },
        "t I - Sigma",
    );

    // (A Sigma + B Y)_{ij}
    let closed = |i: usize, j: usize| {
        let mut e = LinExpr::zero();
        for k in 0..n {
            e.add_term(sig(k, j), sys.a()[(i, k)]);
        }
        for k in 0..m {
            e.add_term(y(k, j), sys.b()[(i, k)]);
        }
        e
    };
    pb.add_psd(
        2 * n,
        |i, j| match (i < n, j < n) {
            (true, true) => LinExpr::var(sig(i, j)) - LinExpr::constant(sys.sigma_w()[(i, j)]),
            (true, false) => closed(i, j - n),
            (false, false) => LinExpr::var(sig(i - n, j - n)),
            (false, true) => unreachable!("upper triangle only"),
        },
        "covariance bound",
    );

    let (l, cm, dm) = (constraints.l(), constraints.c(), constraints.d());
    for jc in 0..c {
        let pt = constraints.p_tilde()[jc];
        let bm = constraints.b()[jc] - eps[jc];
        // L_j (C Sigma + D Y), column `col`
        let out = |col: usize| {
            let mut e = LinExpr::zero();
            for r in 0..l.ncols() {
                let lr = l[(jc, r)];
                if lr == 0.0 {
                    continue;
                }
                for k in 0..n {
                    e.add_term(sig(k, col), lr * cm[(r, k)]);
                }
                for k in 0..m {
                    e.add_term(y(k, col), lr * dm[(r, k)]);
                }
            }
            e
        };
        pb.add_psd(
            n + 1,
            |i, j| match (i, j) {
                (0, 0) => LinExpr::constant(bm * bm),
                (0, j) => out(j - 1),
                (i, j) => LinExpr::term(sig(i - 1, j - 1), 1.0 / pt),
            },
            format!("margin {jc}"),
        );
    }
    pb.add_linear(&LinExpr::var(t));
    let prog = pb.build()?;
    let rep = conic::solve(&prog, &SolverSettings::default())?;
    match rep.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => {
            return Err(Error::DesignInfeasible(
                "terminal gain SDP is infeasible".into(),
            ))
        }
        SolveStatus::NumericalFailure => {
            return Err(Error::Solver(format!("terminal gain SDP: {}", rep.detail)))
        }
    }
    let sigma = DMatrix::from_fn(n, n, |i, j| rep.x[sig(i, j)]);
    let ym = DMatrix::from_fn(m, n, |i, j| rep.x[y(i, j)]);
    let inv = sigma
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Solver("SDP covariance is singular".into()))?;
    let k = ym * inv;
    let mut design = verify_terminal_gain(sys, constraints, &k, eps)?;
    design.sdp_objective = Some(rep.x[t]);
    design.synthesized = true;
    for j in 0..c {
        let slack = 1e-7 * (1.0 + constraints.b()[j]);
        if design.margins[j] < eps[j] - slack {
            return Err(Error::DesignInfeasible(format!(
                "recovered gain misses margin {j}: {:.3e} < {:.3e}",
                design.margins[j], eps[j]
            )));
        }
    }
    Ok(design)
}
