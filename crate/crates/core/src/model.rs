//! Problem definition: dynamics, chance constraints, stage cost and the
//! scenario file schema.
//!
//! # Scenario schema
//!
//! TOML (or the equivalent JSON object). Matrices are arrays of rows.
//!
//! ```toml
//! name = "hvac"               # optional label
//! horizon = 6                 # N >= 1
//! x0 = [0.5, 0.0, 0.0]
//!
//! [system]
//! a = [[...], ...]            # n x n
//! b = [[...], ...]            # n x m
//! sigma_w = [[...], ...]      # disturbance covariance, or instead:
//! sigma_w_factor = [[...]]    # E with sigma_w = E^T E
//!
//! [constraints]               # Pr[G_j x + H_j u <= b_j] >= p_j
//! g = [[...]]                 # c x n
//! h = [[...]]                 # c x m, zero if omitted
//! b = [...]                   # strictly positive
//! p = [...]                   # each in (0.5, 1)
//! l = [[...]]                 # optional decomposition G = L C, H = L D;
//! c = [[...]]                 # defaults L = I, C = G, D = H
//! d = [[...]]
//!
//! [cost]                      # x'Qx + q'x + u'Ru + r'u
//! q_matrix = [[...]]          # zero if omitted
//! r_matrix = [[...]]
//! q = [...]                   # zero if omitted
//! r = [...]
//!
//! [overrides]                 # optional
//! p = [...]                   # replaces constraints.p
//!
//! [simulation]                # defaults: 5000 rollouts, 10 steps, seed 1
//! [solver]                    # see conic::SolverSettings (+ check_tol)
//! [terminal]                  # k, eps_rel, eps, mu_hat, nu_max, mu_max, lmi_tol, imax
//! ```

use std::path::Path;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{self, LinExpr, ProgramBuilder, QuadraticMode, SolveStatus, SolverSettings};
use crate::error::{dim_err, Error, Result};
use crate::linalg::{asymmetry, chi_squared_quantile, min_eigenvalue, psd_sqrt, SCHUR_TOL};
use crate::matrix_serde::{from_rows, to_rows};

/// `x+ = A x + B u + w`, `w ~ N(0, sigma_w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    sigma_w: DMatrix<f64>,
    sigma_w_sqrt: DMatrix<f64>,
}

impl LinearGaussianSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, sigma_w: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::Validation(format!(
                "A must be square and nonempty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::Validation(format!(
                "B must be {n}xm with m >= 1, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if sigma_w.shape() != (n, n) {
            return Err(Error::Validation(format!("sigma_w must be {n}x{n}")));
        }
        if asymmetry(&sigma_w) > 1e-10 {
            return Err(Error::Validation("sigma_w must be symmetric".into()));
        }
        let lmin = min_eigenvalue(&sigma_w);
        if lmin <= 0.0 {
            return Err(Error::Validation(format!(
                "sigma_w must be positive definite (smallest eigenvalue {lmin:e})"
            )));
        }
        if !is_stabilizable(&a, &b) {
            return Err(Error::Validation("(A, B) is not stabilizable".into()));
        }
        let sigma_w_sqrt = psd_sqrt(&sigma_w)?;
        Ok(Self {
            a,
            b,
            sigma_w,
            sigma_w_sqrt,
        })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn sigma_w(&self) -> &DMatrix<f64> {
        &self.sigma_w
    }
    /// Symmetric square root of the disturbance covariance.
    pub fn sigma_w_sqrt(&self) -> &DMatrix<f64> {
        &self.sigma_w_sqrt
    }
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + w
    }

    /// Same dynamics with the covariance multiplied by `factor`.
    pub fn with_scaled_noise(&self, factor: f64) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), &self.sigma_w * factor)
    }
}

/// PBH test: every eigenvalue with modulus >= 1 - 1e-9 must leave
/// `[A - lambda I, B]` with full row rank.
pub fn is_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let scale = 1.0 + a.amax().max(b.amax());
    a.complex_eigenvalues()
        .iter()
        .filter(|l| l.norm() >= 1.0 - SCHUR_TOL)
        .all(|&lambda| {
            let pbh = DMatrix::<Complex<f64>>::from_fn(n, n + b.ncols(), |i, j| {
                if j < n {
                    let d = if i == j {
                        lambda
                    } else {
                        Complex::new(0.0, 0.0)
                    };
                    Complex::new(a[(i, j)], 0.0) - d
                } else {
                    Complex::new(b[(i, j - n)], 0.0)
                }
            });
            let sv = pbh.svd(false, false).singular_values;
            sv.min() > 1e-9 * scale
        })
}

/// Half-space chance constraints `Pr[G_j x + H_j u <= b_j] >= p_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSpec {
    g: DMatrix<f64>,
    h: DMatrix<f64>,
    b: DVector<f64>,
    p: DVector<f64>,
    l: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    p_tilde: DVector<f64>,
}

impl ConstraintSpec {
    /// `lcd = None` selects the decomposition `L = I, C = G, D = H`.
    pub fn new(
        g: DMatrix<f64>,
        h: DMatrix<f64>,
        b: DVector<f64>,
        p: DVector<f64>,
        lcd: Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)>,
    ) -> Result<Self> {
        let c = g.nrows();
        if h.nrows() != c || b.len() != c || p.len() != c {
            return Err(Error::Validation(format!(
                "constraint rows disagree: G has {c}, H {}, b {}, p {}",
                h.nrows(),
                b.len(),
                p.len()
            )));
        }
        if b.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Validation("b must be strictly positive".into()));
        }
        if p.iter().any(|&v| !(v > 0.5 && v < 1.0)) {
            return Err(Error::Validation(
                "probability levels p must lie in (0.5, 1)".into(),
            ));
        }
        let (l, cm, dm) = match lcd {
            Some(t) => t,
            None => (DMatrix::identity(c, c), g.clone(), h.clone()),
        };
        if l.nrows() != c || cm.nrows() != l.ncols() || dm.nrows() != l.ncols() {
            return Err(Error::Validation(
                "decomposition shapes: need L c x d, C d x n, D d x m".into(),
            ));
        }
        if cm.ncols() != g.ncols() || dm.ncols() != h.ncols() {
            return Err(Error::Validation(
                "decomposition shapes: C and D must match G and H columns".into(),
            ));
        }
        if (&l * &cm - &g).amax() > 1e-9 || (&l * &dm - &h).amax() > 1e-9 {
            return Err(Error::Validation(
                "decomposition violated: G = L C and H = L D must hold within 1e-9".into(),
            ));
        }
        let p_tilde = p.map(|pj| chi_squared_quantile(2.0 * pj - 1.0).expect("p validated"));
        Ok(Self {
            g,
            h,
            b,
            p,
            l,
            c: cm,
            d: dm,
            p_tilde,
        })
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }
    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }
    pub fn p(&self) -> &DVector<f64> {
        &self.p
    }
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    /// `chi2_1^{-1}(2 p_j - 1)`.
    pub fn p_tilde(&self) -> &DVector<f64> {
        &self.p_tilde
    }
    pub fn count(&self) -> usize {
        self.g.nrows()
    }

    /// True iff row `j` holds at `(x, u)`.
    pub fn satisfied(&self, j: usize, x: &DVector<f64>, u: &DVector<f64>) -> bool {
        (self.g.row(j) * x)[0] + (self.h.row(j) * u)[0] <= self.b[j]
    }

    pub fn with_probabilities(&self, p: DVector<f64>) -> Result<Self> {
        Self::new(
            self.g.clone(),
            self.h.clone(),
            self.b.clone(),
            p,
            Some((self.l.clone(), self.c.clone(), self.d.clone())),
        )
    }

    pub fn with_scaled_bounds(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.g.clone(),
            self.h.clone(),
            &self.b * factor,
            self.p.clone(),
            Some((self.l.clone(), self.c.clone(), self.d.clone())),
        )
    }

    /// Whether `{y : L y <= b}` is bounded: `L` must have full column rank and
    /// its rows must admit a strictly positive combination summing to zero.
    pub fn output_set_bounded(&self) -> Result<bool> {
        let (c, d) = self.l.shape();
        if self.l.rank(1e-10) < d {
            return Ok(false);
        }
        let mut pb = ProgramBuilder::new();
        let lam = pb.add_vars("lambda", c);
        for j in 0..c {
            pb.add_nonneg(
                LinExpr::var(lam + j) - LinExpr::constant(1.0),
                format!("lambda[{j}] >= 1"),
            );
        }
        for col in 0..d {
            let mut e = LinExpr::zero();
            for j in 0..c {
                e.add_term(lam + j, self.l[(j, col)]);
            }
            pb.add_eq(e, format!("L^T lambda [{col}]"));
        }
        let rep = conic::solve(&pb.build()?, &SolverSettings::default())?;
        Ok(rep.status == SolveStatus::Optimal)
    }
}

/// `l(x, u) = x'Qx + q'x + u'Ru + r'u`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageCost {
    q_mat: DMatrix<f64>,
    r_mat: DMatrix<f64>,
    q: DVector<f64>,
    r: DVector<f64>,
}

impl StageCost {
    pub fn new(
        q_mat: DMatrix<f64>,
        r_mat: DMatrix<f64>,
        q: DVector<f64>,
        r: DVector<f64>,
    ) -> Result<Self> {
        let n = q_mat.nrows();
        let m = r_mat.nrows();
        if q_mat.ncols() != n || r_mat.ncols() != m || q.len() != n || r.len() != m {
            return Err(Error::Validation(
                "stage cost dimensions inconsistent".into(),
            ));
        }
        for (name, s) in [("Q", &q_mat), ("R", &r_mat)] {
            if asymmetry(s) > 1e-10 {
                return Err(Error::Validation(format!("{name} must be symmetric")));
            }
            if min_eigenvalue(s) < -1e-10 {
                return Err(Error::Validation(format!(
                    "{name} must be positive semidefinite"
                )));
            }
        }
        Ok(Self { q_mat, r_mat, q, r })
    }

    pub fn q_mat(&self) -> &DMatrix<f64> {
        &self.q_mat
    }
    pub fn r_mat(&self) -> &DMatrix<f64> {
        &self.r_mat
    }
    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }
    pub fn r(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        stage_cost_eval(self, x, u)
    }
}

pub fn stage_cost_eval(cost: &StageCost, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
    if x.len() != cost.q.len() || u.len() != cost.r.len() {
        return Err(dim_err(format!(
            "stage cost expects x in R^{} and u in R^{}, got {} and {}",
            cost.q.len(),
            cost.r.len(),
            x.len(),
            u.len()
        )));
    }
    Ok(x.dot(&(&cost.q_mat * x)) + cost.q.dot(x) + u.dot(&(&cost.r_mat * u)) + cost.r.dot(u))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub rollouts: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            rollouts: 5000,
            steps: 10,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol_feas: f64,
    pub tol_gap_abs: f64,
    pub tol_gap_rel: f64,
    pub max_iter: u32,
    pub quadratic: QuadraticMode,
    pub equilibrate: bool,
    /// Tolerance of the recursive-feasibility check on reconditioned candidates.
    pub check_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let s = SolverSettings::default();
        Self {
            tol_feas: s.tol_feas,
            tol_gap_abs: s.tol_gap_abs,
            tol_gap_rel: s.tol_gap_rel,
            max_iter: s.max_iter,
            quadratic: s.quadratic,
            equilibrate: s.equilibrate,
            check_tol: conic::DEFAULT_CHECK_TOL,
        }
    }
}

impl SolverConfig {
    pub fn settings(&self) -> SolverSettings {
        SolverSettings {
            tol_feas: self.tol_feas,
            tol_gap_abs: self.tol_gap_abs,
            tol_gap_rel: self.tol_gap_rel,
            max_iter: self.max_iter,
            quadratic: self.quadratic,
            equilibrate: self.equilibrate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerminalConfig {
    /// Fixed terminal gain; synthesised by SDP when absent.
    pub k: Option<Vec<Vec<f64>>>,
    /// Margin `eps_j = eps_rel * b_j` used by the gain SDP.
    pub eps_rel: f64,
    /// Absolute margins; override `eps_rel` when present.
    pub eps: Option<Vec<f64>>,
    /// Tail rows kept by the RC-mod controller; defaults to mu.
    pub mu_hat: Option<usize>,
    pub nu_max: usize,
    pub mu_max: usize,
    /// Certification threshold for the S-procedure LMIs (relative to max b_j^2).
    pub lmi_tol: f64,
    /// Length of the stored covariance sequence.
    pub imax: usize,
}

impl Default for TerminalConfig {
    fn default() -> Self {
        Self {
            k: None,
            eps_rel: 1e-6,
            eps: None,
            mu_hat: None,
            nu_max: 200,
            mu_max: 200,
            lmi_tol: 1e-8,
            imax: 512,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverridesConfig {
    pub p: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub system: LinearGaussianSystem,
    pub constraints: ConstraintSpec,
    pub cost: StageCost,
    pub horizon: usize,
    pub x0: DVector<f64>,
    pub probability_overrides: Option<Vec<f64>>,
    pub simulation: SimulationConfig,
    pub solver: SolverConfig,
    pub terminal: TerminalConfig,
    /// Non-fatal findings from validation.
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemFile {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma_w: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma_w_factor: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstraintFile {
    g: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    h: Option<Vec<Vec<f64>>>,
    b: Vec<f64>,
    p: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    l: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    c: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    d: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    q_matrix: Option<Vec<Vec<f64>>>,
    r_matrix: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    q: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    horizon: usize,
    x0: Vec<f64>,
    system: SystemFile,
    constraints: ConstraintFile,
    cost: CostFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    overrides: Option<OverridesConfig>,
    #[serde(default)]
    simulation: SimulationConfig,
    #[serde(default)]
    solver: SolverConfig,
    #[serde(default)]
    terminal: TerminalConfig,
}

fn mat(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    from_rows(rows, None).map_err(|e| Error::Validation(format!("{what}: {e}")))
}

impl ScenarioFile {
    fn into_config(self) -> Result<ScenarioConfig> {
        let a = mat(&self.system.a, "system.a")?;
        let b = mat(&self.system.b, "system.b")?;
        let n = a.nrows();
        let sigma_w = match (self.system.sigma_w, self.system.sigma_w_factor) {
            (Some(s), None) => mat(&s, "system.sigma_w")?,
            (None, Some(e)) => {
                let e = mat(&e, "system.sigma_w_factor")?;
                e.transpose() * e
            }
            _ => {
                return Err(Error::Validation(
                    "exactly one of system.sigma_w and system.sigma_w_factor is required".into(),
                ))
            }
        };
        let system = LinearGaussianSystem::new(a, b, sigma_w)?;
        let m = system.m();

        let cf = self.constraints;
        let g = mat(&cf.g, "constraints.g")?;
        if g.ncols() != n {
            return Err(Error::Validation(format!(
                "constraints.g must have {n} columns"
            )));
        }
        let c = g.nrows();
        let h = match cf.h {
            Some(h) => mat(&h, "constraints.h")?,
            None => DMatrix::zeros(c, m),
        };
        if h.ncols() != m {
            return Err(Error::Validation(format!(
                "constraints.h must have {m} columns"
            )));
        }
        let lcd = match (cf.l, cf.c, cf.d) {
            (None, None, None) => None,
            (Some(l), Some(cc), Some(d)) => Some((
                mat(&l, "constraints.l")?,
                mat(&cc, "constraints.c")?,
                mat(&d, "constraints.d")?,
            )),
            _ => {
                return Err(Error::Validation(
                    "constraints.l, constraints.c and constraints.d must be given together".into(),
                ))
            }
        };
        let p = match self.overrides.as_ref().and_then(|o| o.p.clone()) {
            Some(p) => p,
            None => cf.p,
        };
        let constraints =
            ConstraintSpec::new(g, h, DVector::from_vec(cf.b), DVector::from_vec(p), lcd)?;

        let cost = StageCost::new(
            match self.cost.q_matrix {
                Some(q) => mat(&q, "cost.q_matrix")?,
                None => DMatrix::zeros(n, n),
            },
            mat(&self.cost.r_matrix, "cost.r_matrix")?,
            DVector::from_vec(self.cost.q.unwrap_or_else(|| vec![0.0; n])),
            DVector::from_vec(self.cost.r.unwrap_or_else(|| vec![0.0; m])),
        )?;
        if cost.q_mat.nrows() != n || cost.r_mat.nrows() != m {
            return Err(Error::Validation(
                "cost dimensions must match the system".into(),
            ));
        }

        if self.horizon < 1 {
            return Err(Error::Validation("horizon must be at least 1".into()));
        }
        if self.x0.len() != n {
            return Err(Error::Validation(format!("x0 must have {n} entries")));
        }
        if self.simulation.rollouts < 1 {
            return Err(Error::Validation(
                "simulation.rollouts must be at least 1".into(),
            ));
        }
        if let Some(k) = &self.terminal.k {
            let k = mat(k, "terminal.k")?;
            if k.shape() != (m, n) {
                return Err(Error::Validation(format!("terminal.k must be {m}x{n}")));
            }
        }
        if let Some(eps) = &self.terminal.eps {
            if eps.len() != c || eps.iter().any(|&e| !(e > 0.0)) {
                return Err(Error::Validation(format!(
                    "terminal.eps must hold {c} positive margins"
                )));
            }
        }
        if !(self.terminal.eps_rel > 0.0) {
            return Err(Error::Validation(
                "terminal.eps_rel must be positive".into(),
            ));
        }

        let mut warnings = Vec::new();
        if !constraints.output_set_bounded()? {
            let msg = "constraint output set {y : L y <= b} is unbounded; terminal set \
                       determination may still succeed"
                .to_string();
            log::warn!("{msg}");
            warnings.push(msg);
        }

        Ok(ScenarioConfig {
            name: self.name.unwrap_or_else(|| "scenario".into()),
            system,
            constraints,
            cost,
            horizon: self.horizon,
            x0: DVector::from_vec(self.x0),
            probability_overrides: self.overrides.and_then(|o| o.p),
            simulation: self.simulation,
            solver: self.solver,
            terminal: self.terminal,
            warnings,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenarioFormat {
    Toml,
    Json,
}

impl ScenarioFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ScenarioFormat::Json,
            _ => ScenarioFormat::Toml,
        }
    }
}

pub fn parse_scenario(text: &str, format: ScenarioFormat) -> Result<ScenarioConfig> {
    let file: ScenarioFile = match format {
        ScenarioFormat::Toml => toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?,
        ScenarioFormat::Json => {
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?
        }
    };
    file.into_config()
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text, ScenarioFormat::from_path(path))
}

impl ScenarioConfig {
    pub fn n(&self) -> usize {
        self.system.n()
    }
    pub fn m(&self) -> usize {
        self.system.m()
    }

    /// Terminal gain from the config, if fixed there.
    pub fn fixed_gain(&self) -> Option<DMatrix<f64>> {
        self.terminal
            .k
            .as_ref()
            .map(|k| from_rows(k, Some(self.n())).expect("validated at load"))
    }

    /// Gain-SDP margins.
    pub fn margins(&self) -> DVector<f64> {
        match &self.terminal.eps {
            Some(e) => DVector::from_column_slice(e),
            None => self.constraints.b() * self.terminal.eps_rel,
        }
    }

    /// Copy with new probability levels recorded as overrides.
    pub fn with_probabilities(&self, p: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.constraints = self
            .constraints
            .with_probabilities(DVector::from_column_slice(p))?;
        out.probability_overrides = Some(p.to_vec());
        Ok(out)
    }

    fn to_file(&self) -> ScenarioFile {
        let cs = &self.constraints;
        let base_p = cs.p.as_slice().to_vec();
        ScenarioFile {
            name: Some(self.name.clone()),
            horizon: self.horizon,
            x0: self.x0.as_slice().to_vec(),
            system: SystemFile {
                a: to_rows(&self.system.a),
                b: to_rows(&self.system.b),
                sigma_w: Some(to_rows(&self.system.sigma_w)),
                sigma_w_factor: None,
            },
            constraints: ConstraintFile {
                g: to_rows(&cs.g),
                h: Some(to_rows(&cs.h)),
                b: cs.b.as_slice().to_vec(),
                p: base_p,
                l: Some(to_rows(&cs.l)),
                c: Some(to_rows(&cs.c)),
                d: Some(to_rows(&cs.d)),
            },
            cost: CostFile {
                q_matrix: Some(to_rows(&self.cost.q_mat)),
                r_matrix: to_rows(&self.cost.r_mat),
                q: Some(self.cost.q.as_slice().to_vec()),
                r: Some(self.cost.r.as_slice().to_vec()),
            },
            overrides: self
                .probability_overrides
                .as_ref()
                .map(|p| OverridesConfig { p: Some(p.clone()) }),
            simulation: self.simulation.clone(),
            solver: self.solver.clone(),
            terminal: self.terminal.clone(),
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(&self.to_file()).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }
}
