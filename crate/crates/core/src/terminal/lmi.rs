//! S-procedure certificates for the containments used by the terminal-set
//! search.
//!
//! With `zeta = (z, psi)` each tail row is the pair of inequalities
//!
//! ```text
//! q_{j,i}(zeta) = zeta^T A^iT C^T F_j C A^i zeta + 2 f_j^T C A^i zeta + const >= 0
//! l_{j,i}(zeta) = 2 g_j^T C A^i zeta + b_j >= 0
//! ```
//!
//! A target row is implied by premise rows when the target's (bordered)
//! matrix minus a nonnegative combination of the premise matrices is PSD.
//!
//! Because `F_j` is block diagonal and the `psi` block equals
//! `-p~_j (g^T g) kron I_N kron Sigma_w` with `g = L_j C_K A_K^i`, every
//! certificate matrix splits into a bordered `(n+1)` block for `(z, 1)` and
//! `N` identical copies (up to permutation) of an `n^2` block `X kron
//! Sigma_w`. The search runs on those reduced blocks; [`LmiData`] also builds
//! the lifted matrices so certificates can be audited on the full form.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::TerminalIngredients;
use crate::conic::{self, LinExpr, ProgramBuilder, SolveStatus, SolverSettings};
use crate::error::{Error, Result};
use crate::linalg::{kron, min_eigenvalue};
use crate::model::ConstraintSpec;

/// Constant term of a quadratic row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstKind {
    /// `varphi_j`, built from `Sigma_inf`.
    Stationary,
    /// `phi_{k,j}`, built from `Sigma_k`.
    Step(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Quadratic,
    Linear,
}

/// A certificate matrix in reduced form: `zblock` on `(z, 1)` and
/// `psi_x kron Sigma_w` on each of the N `psi` sub-blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedForm {
    pub zblock: DMatrix<f64>,
    pub psi_x: DMatrix<f64>,
}

impl ReducedForm {
    fn axpy(&mut self, s: f64, other: &ReducedForm) {
        self.zblock += &other.zblock * s;
        self.psi_x += &other.psi_x * s;
    }
}

/// Data of the S-procedure LMIs.
#[derive(Clone, Debug)]
pub struct LmiData {
    n: usize,
    horizon: usize,
    count: usize,
    a_k: DMatrix<f64>,
    c_k: DMatrix<f64>,
    l: DMatrix<f64>,
    b: DVector<f64>,
    p_tilde: DVector<f64>,
    sigma_w: DMatrix<f64>,
    /// `varphi_j`.
    pub varphi: DVector<f64>,
    /// `phi_{i,j}` for i up to the covariance sequence length (extended on demand).
    cov: crate::linalg::CovarianceSequence,
    /// Certification threshold on the smallest eigenvalue.
    pub tolerance: f64,
}

impl LmiData {
    /// `tol` is relative to `max(1, max_j b_j^2)`.
    pub fn new(
        ingredients: &TerminalIngredients,
        constraints: &ConstraintSpec,
        sigma_w: &DMatrix<f64>,
        horizon: usize,
        tol: f64,
    ) -> Self {
        let count = constraints.count();
        let b = constraints.b().clone();
        let p_tilde = constraints.p_tilde().clone();
        let lc = constraints.l() * &ingredients.c_k;
        let varphi = DVector::from_fn(count, |j, _| {
            let r = lc.row(j);
            b[j] * b[j] - p_tilde[j] * (r * &ingredients.cov.sigma_x_inf * r.transpose())[0]
        });
        let scale = b.iter().fold(1.0f64, |acc, &v| acc.max(v * v));
        Self {
            n: ingredients.n(),
            horizon,
            count,
            a_k: ingredients.a_k.clone(),
            c_k: ingredients.c_k.clone(),
            l: constraints.l().clone(),
            b,
            p_tilde,
            sigma_w: sigma_w.clone(),
            varphi,
            cov: ingredients.cov.clone(),
            tolerance: tol * scale,
        }
    }

    pub fn constraint_count(&self) -> usize {
        self.count
    }

    /// `phi_{i,j} = b_j^2 - p~_j L_j C_K Sigma_i C_K^T L_j^T`.
    pub fn phi(&self, i: usize, j: usize) -> f64 {
        let r = self.l.row(j) * &self.c_k;
        self.b[j] * self.b[j] - self.p_tilde[j] * (&r * self.cov.get(i) * r.transpose())[0]
    }

    pub fn constant(&self, j: usize, kind: ConstKind) -> f64 {
        match kind {
            ConstKind::Stationary => self.varphi[j],
            ConstKind::Step(i) => self.phi(i, j),
        }
    }

    /// `L_j C_K A_K^i` as a row.
    pub fn output_row(&self, j: usize, i: usize) -> DMatrix<f64> {
        let mut r: DMatrix<f64> = self.l.rows(j, 1) * &self.c_k;
        for _ in 0..i {
            r = r * &self.a_k;
        }
        r
    }

    pub fn quadratic_reduced(&self, j: usize, i: usize, kind: ConstKind) -> ReducedForm {
        let n = self.n;
        let g = self.output_row(j, i);
        let gg = g.transpose() * &g;
        let mut z = DMatrix::zeros(n + 1, n + 1);
        z.view_mut((0, 0), (n, n)).copy_from(&gg);
        for c in 0..n {
            z[(c, n)] = -self.b[j] * g[(0, c)];
            z[(n, c)] = -self.b[j] * g[(0, c)];
        }
        z[(n, n)] = self.constant(j, kind);
        ReducedForm {
            zblock: z,
            psi_x: gg * -self.p_tilde[j],
        }
    }

    pub fn linear_reduced(&self, j: usize, i: usize) -> ReducedForm {
        let n = self.n;
        let g = self.output_row(j, i);
        let mut z = DMatrix::zeros(n + 1, n + 1);
        for c in 0..n {
            z[(c, n)] = -0.5 * g[(0, c)];
            z[(n, c)] = -0.5 * g[(0, c)];
        }
        z[(n, n)] = self.b[j];
        ReducedForm {
            zblock: z,
            psi_x: DMatrix::zeros(n, n),
        }
    }

    /// Smallest eigenvalue of the full certificate matrix represented by `r`.
    pub fn reduced_min_eig(&self, r: &ReducedForm) -> f64 {
        min_eigenvalue(&r.zblock).min(min_eigenvalue(&kron(&r.psi_x, &self.sigma_w)))
    }

    /// Lifted state map `blkdiag(A_K, A_K kron I_{Nn})`.
    pub fn lifted_a(&self) -> DMatrix<f64> {
        let nn = self.horizon * self.n;
        blkdiag(&self.a_k, &kron(&self.a_k, &DMatrix::identity(nn, nn)))
    }

    /// Lifted output map `blkdiag(C_K, C_K kron I_{Nn})`.
    pub fn lifted_c(&self) -> DMatrix<f64> {
        let nn = self.horizon * self.n;
        blkdiag(&self.c_k, &kron(&self.c_k, &DMatrix::identity(nn, nn)))
    }

    /// `F_j = blkdiag(L_j^T L_j, -p~_j L_j^T L_j kron Sigma_N)`.
    pub fn f_matrix(&self, j: usize) -> DMatrix<f64> {
        let lj = self.l.row(j).into_owned();
        let ll = lj.transpose() * &lj;
        let sigma_n = kron(
            &DMatrix::identity(self.horizon, self.horizon),
            &self.sigma_w,
        );
        blkdiag(&ll, &(kron(&ll, &sigma_n) * -self.p_tilde[j]))
    }

    /// `f_j = [-b_j L_j, 0]^T`.
    pub fn f_vector(&self, j: usize) -> DVector<f64> {
        let d = self.l.ncols();
        let mut v = DVector::zeros(d + d * self.horizon * self.n);
        for r in 0..d {
            v[r] = -self.b[j] * self.l[(j, r)];
        }
        v
    }

    /// `g_j = 0.5 [-L_j, 0]^T`.
    pub fn g_vector(&self, j: usize) -> DVector<f64> {
        let d = self.l.ncols();
        let mut v = DVector::zeros(d + d * self.horizon * self.n);
        for r in 0..d {
            v[r] = -0.5 * self.l[(j, r)];
        }
        v
    }

    /// Bordered matrix `[[A^iT C^T F_j C A^i, A^iT C^T f_j], [.., const]]`
    /// on the full `(zeta, 1)` space. `ai` is `lifted_a()^i`.
    pub fn quadratic_full(&self, j: usize, ai: &DMatrix<f64>, kind: ConstKind) -> DMatrix<f64> {
        let ca = self.lifted_c() * ai;
        let top = ca.transpose() * self.f_matrix(j) * &ca;
        let side = ca.transpose() * self.f_vector(j);
        bordered(&top, &side, self.constant(j, kind))
    }

    pub fn linear_full(&self, j: usize, ai: &DMatrix<f64>) -> DMatrix<f64> {
        let ca = self.lifted_c() * ai;
        let dim = ca.ncols();
        bordered(
            &DMatrix::zeros(dim, dim),
            &(ca.transpose() * self.g_vector(j)),
            self.b[j],
        )
    }

    /// Rebuilds a certificate on the lifted space and returns its smallest
    /// eigenvalue.
    pub fn audit_full(&self, cert: &ImplicationCertificate) -> f64 {
        let la = self.lifted_a();
        let pow = |i: usize| {
            let mut m = DMatrix::identity(la.nrows(), la.ncols());
            for _ in 0..i {
                m = &la * m;
            }
            m
        };
        let target_pow = pow(cert.target_step);
        let mut total = match cert.kind {
            TargetKind::Quadratic => {
                self.quadratic_full(cert.j, &target_pow, ConstKind::Stationary)
            }
            TargetKind::Linear => self.linear_full(cert.j, &target_pow),
        };
        for (idx, &(k, kind)) in cert.premises.iter().enumerate() {
            let ak = pow(k);
            for l in 0..self.count {
                let a = cert.quadratic_multipliers[idx * self.count + l];
                let b = cert.linear_multipliers[idx * self.count + l];
                if a != 0.0 {
                    total -= self.quadratic_full(l, &ak, kind) * a;
                }
                if b != 0.0 {
                    total -= self.linear_full(l, &ak) * b;
                }
            }
        }
        min_eigenvalue(&total)
    }
}

fn blkdiag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut(a.shape(), b.shape()).copy_from(b);
    out
}

fn bordered(top: &DMatrix<f64>, side: &DVector<f64>, corner: f64) -> DMatrix<f64> {
    let d = top.nrows();
    let mut out = DMatrix::zeros(d + 1, d + 1);
    out.view_mut((0, 0), (d, d)).copy_from(top);
    for i in 0..d {
        out[(i, d)] = side[i];
        out[(d, i)] = side[i];
    }
    out[(d, d)] = corner;
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Certified,
    NotCertified,
}

/// Multipliers proving (or failing to prove) that the premises imply one
/// target inequality. Multipliers are indexed `premise * c + l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImplicationCertificate {
    pub kind: TargetKind,
    pub j: usize,
    pub target_step: usize,
    pub premises: Vec<(usize, ConstKind)>,
    pub quadratic_multipliers: Vec<f64>,
    pub linear_multipliers: Vec<f64>,
    /// Smallest eigenvalue of the certificate matrix at the multipliers.
    pub min_eigenvalue: f64,
    pub verdict: Verdict,
}

/// Searches multipliers maximising the smallest eigenvalue of the
/// certificate; certified iff that eigenvalue is at least `-tolerance`.
pub fn certify_implication(
    lmi: &LmiData,
    kind: TargetKind,
    j: usize,
    target_step: usize,
    premises: &[(usize, ConstKind)],
) -> Result<ImplicationCertificate> {
    let (n, c) = (lmi.n, lmi.count);
    let target = match kind {
        TargetKind::Quadratic => lmi.quadratic_reduced(j, target_step, ConstKind::Stationary),
        TargetKind::Linear => lmi.linear_reduced(j, target_step),
    };
    let mut quads = Vec::with_capacity(premises.len() * c);
    let mut lins = Vec::with_capacity(premises.len() * c);
    for &(k, ck) in premises {
        for l in 0..c {
            quads.push(lmi.quadratic_reduced(l, k, ck));
            lins.push(lmi.linear_reduced(l, k));
        }
    }
    let m = quads.len();

    let mut pb = ProgramBuilder::new();
    let t = pb.add_var("t");
    let a0 = pb.add_vars("alpha", m);
    let b0 = pb.add_vars("beta", m);
    for v in 0..m {
        pb.add_nonneg(LinExpr::var(a0 + v), format!("alpha[{v}] >= 0"));
        pb.add_nonneg(LinExpr::var(b0 + v), format!("beta[{v}] >= 0"));
    }
    pb.add_nonneg(LinExpr::constant(1.0) - LinExpr::var(t), "t <= 1");

    let zexpr = |r: usize, s: usize| {
        let mut e = LinExpr::constant(target.zblock[(r, s)]);
        for v in 0..m {
            e.add_term(a0 + v, -quads[v].zblock[(r, s)]);
            e.add_term(b0 + v, -lins[v].zblock[(r, s)]);
        }
        if r == s {
            e.add_term(t, -1.0);
        }
        e
    };
    pb.add_psd(n + 1, zexpr, "bordered block");

    let sw = &lmi.sigma_w;
    let psi_target = kron(&target.psi_x, sw);
    let psi_quads: Vec<DMatrix<f64>> = quads.iter().map(|q| kron(&q.psi_x, sw)).collect();
    let pexpr = |r: usize, s: usize| {
        let mut e = LinExpr::constant(psi_target[(r, s)]);
        for v in 0..m {
            e.add_term(a0 + v, -psi_quads[v][(r, s)]);
        }
        if r == s {
            e.add_term(t, -1.0);
        }
        e
    };
    pb.add_psd(n * n, pexpr, "psi block");
    pb.add_linear(&LinExpr::term(t, -1.0));

    let prog = pb.build()?;
    let rep = conic::solve(&prog, &SolverSettings::default())?;

    let clip = |x: f64| if x > 0.0 { x } else { 0.0 };
    let alphas: Vec<f64> = (0..m).map(|v| clip(rep.x[a0 + v])).collect();
    let betas: Vec<f64> = (0..m).map(|v| clip(rep.x[b0 + v])).collect();

    // Judge the multipliers directly instead of trusting the solver's t.
    let mut total = target.clone();
    for v in 0..m {
        total.axpy(-alphas[v], &quads[v]);
        total.zblock -= &lins[v].zblock * betas[v];
    }
    let min_eig = lmi.reduced_min_eig(&total);
    let finite = min_eig.is_finite() && alphas.iter().chain(&betas).all(|v| v.is_finite());
    let verdict = if finite && min_eig >= -lmi.tolerance {
        Verdict::Certified
    } else {
        Verdict::NotCertified
    };
    if verdict == Verdict::NotCertified && rep.status == SolveStatus::NumericalFailure {
        return Err(Error::Solver(format!(
            "S-procedure SDP (constraint {j}, step {target_step}, {} premises): {}",
            premises.len(),
            rep.detail
        )));
    }
    Ok(ImplicationCertificate {
        kind,
        j,
        target_step,
        premises: premises.to_vec(),
        quadratic_multipliers: alphas,
        linear_multipliers: betas,
        min_eigenvalue: min_eig,
        verdict,
    })
}

#[derive(Clone, Debug)]
pub struct ContainmentOutcome {
    pub certified: bool,
    /// Certificates evaluated so far; the search stops at the first failure.
    pub certificates: Vec<ImplicationCertificate>,
}

fn run_targets(
    lmi: &LmiData,
    targets: impl Iterator<Item = usize>,
    premises: &[(usize, ConstKind)],
) -> Result<ContainmentOutcome> {
    let mut certificates = Vec::new();
    for i in targets {
        for j in 0..lmi.count {
            for kind in [TargetKind::Quadratic, TargetKind::Linear] {
                let cert = certify_implication(lmi, kind, j, i, premises)?;
                let ok = cert.verdict == Verdict::Certified;
                certificates.push(cert);
                if !ok {
                    return Ok(ContainmentOutcome {
                        certified: false,
                        certificates,
                    });
                }
            }
        }
    }
    Ok(ContainmentOutcome {
        certified: true,
        certificates,
    })
}

/// Rows `0..=nu` with stationary constants imply row `nu + 1`.
pub fn lmi_containment_nu(lmi: &LmiData, nu: usize) -> Result<ContainmentOutcome> {
    let premises: Vec<_> = (0..=nu).map(|k| (k, ConstKind::Stationary)).collect();
    run_targets(lmi, std::iter::once(nu + 1), &premises)
}

/// Exact rows `0..=mu` imply the stationary rows `mu+1 ..= mu+nu+1`.
pub fn lmi_containment_mu(lmi: &LmiData, mu: usize, nu: usize) -> Result<ContainmentOutcome> {
    let premises: Vec<_> = (0..=mu).map(|k| (k, ConstKind::Step(k))).collect();
    run_targets(lmi, mu + 1..=mu + nu + 1, &premises)
}
