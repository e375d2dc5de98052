//! Solver-agnostic conic programs and the Clarabel adapter.
//!
//! A program is assembled with [`ProgramBuilder`], sealed into an immutable
//! [`ConicProgram`] and handed to [`solve`]. Constraint rows are affine
//! expressions in the decision variables:
//!
//! * equality rows `e(x) = 0`,
//! * nonnegative rows `e(x) >= 0`,
//! * second-order cones `||(s_1(x), .., s_k(x))|| <= t(x)`,
//! * PSD blocks `M(x) ⪰ 0` with `M` symmetric and affine.
//!
//! The objective is `sum_r f_r(x)^2 + l(x)` with affine `f_r` and `l`.

use std::fmt;
use std::io::{self, Write};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use std::time::{Duration, Instant};

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::min_eigenvalue;

/// Affine expression `sum_i c_i x_i + constant`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(i: usize) -> Self {
        Self::term(i, 1.0)
    }

    pub fn term(i: usize, c: f64) -> Self {
        Self {
            terms: vec![(i, c)],
            constant: 0.0,
        }
    }

    pub fn add_term(&mut self, i: usize, c: f64) {
        if c != 0.0 {
            self.terms.push((i, c));
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .fold(self.constant, |acc, &(i, c)| acc + c * x[i])
    }

    /// Merges repeated variables and drops exact zeros.
    pub fn compact(mut self) -> Self {
        self.terms.sort_by_key(|t| t.0);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for (i, c) in self.terms {
            match out.last_mut() {
                Some(last) if last.0 == i => last.1 += c,
                _ => out.push((i, c)),
            }
        }
        out.retain(|t| t.1 != 0.0);
        self.terms = out;
        self
    }

    fn max_var(&self) -> Option<usize> {
        self.terms.iter().map(|t| t.0).max()
    }
}

impl From<f64> for LinExpr {
    fn from(c: f64) -> Self {
        LinExpr::constant(c)
    }
}

impl AddAssign<&LinExpr> for LinExpr {
    fn add_assign(&mut self, rhs: &LinExpr) {
        self.terms.extend_from_slice(&rhs.terms);
        self.constant += rhs.constant;
    }
}

impl Add for LinExpr {
    type Output = LinExpr;
    fn add(mut self, rhs: LinExpr) -> LinExpr {
        self += &rhs;
        self
    }
}

impl Sub for LinExpr {
    type Output = LinExpr;
    fn sub(self, rhs: LinExpr) -> LinExpr {
        self + (-rhs)
    }
}

impl Neg for LinExpr {
    type Output = LinExpr;
    fn neg(self) -> LinExpr {
        self * -1.0
    }
}

impl Mul<f64> for LinExpr {
    type Output = LinExpr;
    fn mul(mut self, s: f64) -> LinExpr {
        for t in &mut self.terms {
            t.1 *= s;
        }
        self.constant *= s;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SocBlock {
    pub t: LinExpr,
    pub s: Vec<LinExpr>,
    pub label: String,
}

/// Symmetric affine matrix; `upper` holds entries (i, j), i <= j, stacked
/// column by column.
#[derive(Clone, Debug, PartialEq)]
pub struct PsdBlock {
    pub dim: usize,
    pub upper: Vec<LinExpr>,
    pub label: String,
}

impl PsdBlock {
    pub fn entry(&self, i: usize, j: usize) -> &LinExpr {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        &self.upper[j * (j + 1) / 2 + i]
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.entry(i, j).eval(x))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub expr: LinExpr,
    pub label: String,
}

/// Sealed conic program. Build with [`ProgramBuilder`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConicProgram {
    names: Vec<String>,
    factor: Vec<LinExpr>,
    linear: LinExpr,
    eqs: Vec<Row>,
    nonneg: Vec<Row>,
    socs: Vec<SocBlock>,
    psds: Vec<PsdBlock>,
}

#[derive(Debug, Default)]
pub struct ProgramBuilder {
    prog: ConicProgram,
}

impl Default for ConicProgram {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            factor: Vec::new(),
            linear: LinExpr::zero(),
            eqs: Vec::new(),
            nonneg: Vec::new(),
            socs: Vec::new(),
            psds: Vec::new(),
        }
    }
}

impl ProgramBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>) -> usize {
        self.prog.names.push(name.into());
        self.prog.names.len() - 1
    }

    /// Adds `count` variables named `name[0..count]`; returns the first index.
    pub fn add_vars(&mut self, name: &str, count: usize) -> usize {
        let first = self.prog.names.len();
        for k in 0..count {
            self.prog.names.push(format!("{name}[{k}]"));
        }
        first
    }

    pub fn num_vars(&self) -> usize {
        self.prog.names.len()
    }

    pub fn add_eq(&mut self, expr: LinExpr, label: impl Into<String>) {
        self.prog.eqs.push(Row {
            expr: expr.compact(),
            label: label.into(),
        });
    }

    pub fn add_nonneg(&mut self, expr: LinExpr, label: impl Into<String>) {
        self.prog.nonneg.push(Row {
            expr: expr.compact(),
            label: label.into(),
        });
    }

    pub fn add_soc(&mut self, t: LinExpr, s: Vec<LinExpr>, label: impl Into<String>) {
        self.prog.socs.push(SocBlock {
            t: t.compact(),
            s: s.into_iter().map(LinExpr::compact).collect(),
            label: label.into(),
        });
    }

    /// Adds `M ⪰ 0`; `entry(i, j)` is queried for i <= j only.
    pub fn add_psd(
        &mut self,
        dim: usize,
        mut entry: impl FnMut(usize, usize) -> LinExpr,
        label: impl Into<String>,
    ) {
        let mut upper = Vec::with_capacity(dim * (dim + 1) / 2);
        for j in 0..dim {
            for i in 0..=j {
                upper.push(entry(i, j).compact());
            }
        }
        self.prog.psds.push(PsdBlock {
            dim,
            upper,
            label: label.into(),
        });
    }

    /// Adds `f(x)^2` to the objective.
    pub fn add_square(&mut self, f: LinExpr) {
        let f = f.compact();
        if !f.terms.is_empty() || f.constant != 0.0 {
            self.prog.factor.push(f);
        }
    }

    pub fn add_linear(&mut self, l: &LinExpr) {
        self.prog.linear += l;
    }

    pub fn build(mut self) -> Result<ConicProgram> {
        self.prog.linear = std::mem::take(&mut self.prog.linear).compact();
        self.prog.validate()?;
        Ok(self.prog)
    }
}

impl ConicProgram {
    pub fn num_vars(&self) -> usize {
        self.names.len()
    }

    pub fn var_name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn equalities(&self) -> &[Row] {
        &self.eqs
    }

    pub fn inequalities(&self) -> &[Row] {
        &self.nonneg
    }

    pub fn socs(&self) -> &[SocBlock] {
        &self.socs
    }

    pub fn psds(&self) -> &[PsdBlock] {
        &self.psds
    }

    pub fn objective_factor(&self) -> &[LinExpr] {
        &self.factor
    }

    pub fn objective_linear(&self) -> &LinExpr {
        &self.linear
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.factor.iter().map(|f| f.eval(x).powi(2)).sum::<f64>() + self.linear.eval(x)
    }

    fn all_exprs(&self) -> impl Iterator<Item = &LinExpr> {
        self.factor
            .iter()
            .chain(std::iter::once(&self.linear))
            .chain(self.eqs.iter().map(|r| &r.expr))
            .chain(self.nonneg.iter().map(|r| &r.expr))
            .chain(
                self.socs
                    .iter()
                    .flat_map(|s| std::iter::once(&s.t).chain(s.s.iter())),
            )
            .chain(self.psds.iter().flat_map(|p| p.upper.iter()))
    }

    fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        if let Some(bad) = self
            .all_exprs()
            .filter_map(LinExpr::max_var)
            .find(|&i| i >= n)
        {
            return Err(dim_err(format!(
                "expression references variable {bad} but program has {n}"
            )));
        }
        if self
            .all_exprs()
            .any(|e| !e.constant.is_finite() || e.terms.iter().any(|t| !t.1.is_finite()))
        {
            return Err(Error::Validation(
                "non-finite coefficient in program".into(),
            ));
        }
        for p in &self.psds {
            if p.upper.len() != p.dim * (p.dim + 1) / 2 {
                return Err(dim_err(format!(
                    "PSD block '{}' has wrong entry count",
                    p.label
                )));
            }
        }
        Ok(())
    }

    /// Largest constraint violation at `point` and the row that attains it.
    pub fn max_violation(&self, point: &[f64]) -> Result<Violation> {
        if point.len() != self.num_vars() {
            return Err(dim_err(format!(
                "point has {} entries, program has {} variables",
                point.len(),
                self.num_vars()
            )));
        }
        let mut worst = Violation::default();
        let mut note = |amount: f64, label: &str| {
            if amount > worst.amount || amount.is_nan() {
                worst = Violation {
                    amount,
                    label: label.to_string(),
                };
            }
        };
        for r in &self.eqs {
            note(r.expr.eval(point).abs(), &r.label);
        }
        for r in &self.nonneg {
            note(-r.expr.eval(point), &r.label);
        }
        for s in &self.socs {
            let norm =
                s.s.iter()
                    .map(|e| e.eval(point).powi(2))
                    .sum::<f64>()
                    .sqrt();
            note(norm - s.t.eval(point), &s.label);
        }
        for p in &self.psds {
            note(-min_eigenvalue(&p.eval(point)), &p.label);
        }
        Ok(worst)
    }

    /// Writes the program in the Conic Benchmark Format (version 3). A
    /// quadratic objective is emitted through an epigraph variable.
    pub fn write_cbf(&self, out: &mut impl Write) -> io::Result<()> {
        let (prog, _) = self.epigraph_form();
        prog.write_cbf_linear(out)
    }

    fn write_cbf_linear(&self, out: &mut impl Write) -> io::Result<()> {
        let n = self.num_vars();
        writeln!(out, "# variables: {}", self.names.join(" "))?;
        writeln!(out, "VER\n3\n")?;
        writeln!(out, "OBJSENSE\nMIN\n")?;
        writeln!(out, "VAR\n{n} 1\nF {n}\n")?;
        if !self.psds.is_empty() {
            writeln!(out, "PSDCON\n{}", self.psds.len())?;
            for p in &self.psds {
                writeln!(out, "{}", p.dim)?;
            }
            writeln!(out)?;
        }
        let scalar_rows: Vec<&LinExpr> = self
            .eqs
            .iter()
            .map(|r| &r.expr)
            .chain(self.nonneg.iter().map(|r| &r.expr))
            .chain(
                self.socs
                    .iter()
                    .flat_map(|s| std::iter::once(&s.t).chain(s.s.iter())),
            )
            .collect();
        let mut cones: Vec<(&str, usize)> = Vec::new();
        if !self.eqs.is_empty() {
            cones.push(("L=", self.eqs.len()));
        }
        if !self.nonneg.is_empty() {
            cones.push(("L+", self.nonneg.len()));
        }
        for s in &self.socs {
            cones.push(("Q", s.s.len() + 1));
        }
        if !scalar_rows.is_empty() {
            writeln!(out, "CON\n{} {}", scalar_rows.len(), cones.len())?;
            for (k, d) in &cones {
                writeln!(out, "{k} {d}")?;
            }
            writeln!(out)?;
        }
        let obj: Vec<_> = self.linear.terms.iter().filter(|t| t.1 != 0.0).collect();
        writeln!(out, "OBJACOORD\n{}", obj.len())?;
        for (i, c) in obj {
            writeln!(out, "{i} {c:e}")?;
        }
        writeln!(out, "\nOBJBCOORD\n{:e}\n", self.linear.constant)?;
        let nnz: usize = scalar_rows.iter().map(|r| r.terms.len()).sum();
        writeln!(out, "ACOORD\n{nnz}")?;
        for (r, e) in scalar_rows.iter().enumerate() {
            for (i, c) in &e.terms {
                writeln!(out, "{r} {i} {c:e}")?;
            }
        }
        let consts: Vec<_> = scalar_rows
            .iter()
            .enumerate()
            .filter(|(_, e)| e.constant != 0.0)
            .collect();
        writeln!(out, "\nBCOORD\n{}", consts.len())?;
        for (r, e) in consts {
            writeln!(out, "{r} {:e}", e.constant)?;
        }
        if !self.psds.is_empty() {
            let mut h = Vec::new();
            let mut d = Vec::new();
            for (k, p) in self.psds.iter().enumerate() {
                for j in 0..p.dim {
                    for i in j..p.dim {
                        let e = p.entry(i, j);
                        for (v, c) in &e.terms {
                            h.push(format!("{k} {v} {i} {j} {c:e}"));
                        }
                        if e.constant != 0.0 {
                            d.push(format!("{k} {i} {j} {:e}", e.constant));
                        }
                    }
                }
            }
            writeln!(out, "\nHCOORD\n{}", h.len())?;
            for l in h {
                writeln!(out, "{l}")?;
            }
            writeln!(out, "\nDCOORD\n{}", d.len())?;
            for l in d {
                writeln!(out, "{l}")?;
            }
        }
        Ok(())
    }

    /// Replaces the quadratic part by `tau >= sum f_r^2` through a rotated
    /// cone. Returns the program and the index of `tau` (if one was added).
    fn epigraph_form(&self) -> (ConicProgram, Option<usize>) {
        if self.factor.is_empty() {
            return (self.clone(), None);
        }
        let mut p = self.clone();
        let tau = p.names.len();
        p.names.push("epigraph".into());
        // ||(2 f, 1 - tau)|| <= 1 + tau  <=>  sum f^2 <= tau
        let mut s: Vec<LinExpr> = p.factor.iter().map(|f| f.clone() * 2.0).collect();
        s.push(LinExpr::constant(1.0) - LinExpr::var(tau));
        p.socs.push(SocBlock {
            t: LinExpr::constant(1.0) + LinExpr::var(tau),
            s,
            label: "objective epigraph".into(),
        });
        p.factor.clear();
        p.linear.add_term(tau, 1.0);
        (p, Some(tau))
    }

    /// Merges the constant-only entries of each cone into one entry carried
    /// by an auxiliary variable pinned to 1. Clarabel's equilibration
    /// mis-scales second-order cones that contain rows without variables.
    fn lift_constant_cone_rows(&mut self) {
        let needs = self
            .socs
            .iter()
            .any(|c| c.s.iter().any(|e| e.terms.is_empty() && e.constant != 0.0));
        if !needs {
            for c in &mut self.socs {
                c.s.retain(|e| !e.terms.is_empty());
            }
            return;
        }
        let one = self.names.len();
        self.names.push("one".into());
        self.eqs.push(Row {
            expr: LinExpr::var(one) - LinExpr::constant(1.0),
            label: "one".into(),
        });
        for c in &mut self.socs {
            let sq: f64 =
                c.s.iter()
                    .filter(|e| e.terms.is_empty())
                    .map(|e| e.constant * e.constant)
                    .sum();
            c.s.retain(|e| !e.terms.is_empty());
            if sq > 0.0 {
                c.s.push(LinExpr::term(one, sq.sqrt()));
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Violation {
    pub amount: f64,
    pub label: String,
}

/// True iff every cone membership and equality holds within `tol`.
pub fn check_feasible(prog: &ConicProgram, point: &[f64], tol: f64) -> Result<bool> {
    let v = prog.max_violation(point)?;
    Ok(v.amount <= tol)
}

pub const DEFAULT_CHECK_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum QuadraticMode {
    #[default]
    Native,
    Epigraph,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub tol_feas: f64,
    pub tol_gap_abs: f64,
    pub tol_gap_rel: f64,
    pub max_iter: u32,
    pub quadratic: QuadraticMode,
    /// Ruiz equilibration in the backend. Off by default: the tail cones of
    /// the controller programs are nearly parallel and scaling them row by
    /// row stalls the interior-point iteration.
    pub equilibrate: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol_feas: 1e-8,
            tol_gap_abs: 1e-8,
            tol_gap_rel: 1e-8,
            max_iter: 200,
            quadratic: QuadraticMode::Native,
            equilibrate: false,
        }
    }
}

impl SolverSettings {
    /// All tolerances multiplied by `factor`.
    pub fn relaxed(&self, factor: f64) -> Self {
        Self {
            tol_feas: self.tol_feas * factor,
            tol_gap_abs: self.tol_gap_abs * factor,
            tol_gap_rel: self.tol_gap_rel * factor,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::NumericalFailure => "numerical-failure",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub status: SolveStatus,
    /// Solver reached only its reduced-accuracy thresholds.
    pub reduced_accuracy: bool,
    /// Set when the solver returned a certificate of primal infeasibility.
    pub infeasibility_certificate: bool,
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
    /// Largest violation of the program's own rows at `x`.
    pub max_violation: Violation,
    pub solver_primal_residual: f64,
    pub solver_dual_residual: f64,
    pub solve_time: Duration,
    /// Backend status text for diagnostics.
    pub detail: String,
}

struct CscBuilder {
    rows: usize,
    cols: usize,
    trip: Vec<(usize, usize, f64)>,
}

impl CscBuilder {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            trip: Vec::new(),
        }
    }

    fn push(&mut self, r: usize, c: usize, v: f64) {
        if v != 0.0 {
            self.trip.push((r, c, v));
        }
    }

    fn finish(mut self) -> CscMatrix<f64> {
        self.trip.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut colptr = vec![0usize; self.cols + 1];
        let mut rowval = Vec::with_capacity(self.trip.len());
        let mut nzval: Vec<f64> = Vec::with_capacity(self.trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.trip {
            if last == Some((r, c)) {
                *nzval.last_mut().unwrap() += v;
                continue;
            }
            rowval.push(r);
            nzval.push(v);
            colptr[c + 1] += 1;
            last = Some((r, c));
        }
        for c in 0..self.cols {
            colptr[c + 1] += colptr[c];
        }
        CscMatrix::new(self.rows, self.cols, colptr, rowval, nzval)
    }
}

/// Solves `prog` with Clarabel. Infeasibility and numerical trouble are
/// reported through [`SolveReport::status`]; `Err` means the inputs were
/// unusable.
pub fn solve(prog: &ConicProgram, settings: &SolverSettings) -> Result<SolveReport> {
    let mut work = match settings.quadratic {
        QuadraticMode::Native => prog.clone(),
        QuadraticMode::Epigraph => prog.epigraph_form().0,
    };
    work.lift_constant_cone_rows();
    let n = work.num_vars();

    let mut p = CscBuilder::new(n, n);
    let mut q = vec![0.0; n];
    for f in &work.factor {
        for (a, &(i, ci)) in f.terms.iter().enumerate() {
            q[i] += 2.0 * f.constant * ci;
            for &(j, cj) in &f.terms[a..] {
                // Clarabel reads the upper triangle of P only.
                let (r, c) = if i <= j { (i, j) } else { (j, i) };
                p.push(r, c, 2.0 * ci * cj);
            }
        }
    }
    for &(i, c) in &work.linear.terms {
        q[i] += c;
    }

    let mut a = CscBuilder::new(0, n);
    let mut b = Vec::new();
    let mut cones = Vec::new();
    let push_row = |a: &mut CscBuilder, b: &mut Vec<f64>, e: &LinExpr, scale: f64| {
        let r = b.len();
        for &(i, c) in &e.terms {
            a.push(r, i, -scale * c);
        }
        b.push(scale * e.constant);
    };
    for r in &work.eqs {
        push_row(&mut a, &mut b, &r.expr, 1.0);
    }
    if !work.eqs.is_empty() {
        cones.push(SupportedConeT::ZeroConeT(work.eqs.len()));
    }
    for r in &work.nonneg {
        push_row(&mut a, &mut b, &r.expr, 1.0);
    }
    if !work.nonneg.is_empty() {
        cones.push(SupportedConeT::NonnegativeConeT(work.nonneg.len()));
    }
    for s in &work.socs {
        push_row(&mut a, &mut b, &s.t, 1.0);
        for e in &s.s {
            push_row(&mut a, &mut b, e, 1.0);
        }
        cones.push(SupportedConeT::SecondOrderConeT(s.s.len() + 1));
    }
    for ps in &work.psds {
        for j in 0..ps.dim {
            for i in 0..=j {
                let scale = if i == j {
                    1.0
                } else {
                    std::f64::consts::SQRT_2
                };
                push_row(&mut a, &mut b, ps.entry(i, j), scale);
            }
        }
        cones.push(SupportedConeT::PSDTriangleConeT(ps.dim));
    }
    a.rows = b.len();

    let cs = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(settings.max_iter)
        .tol_feas(settings.tol_feas)
        .tol_gap_abs(settings.tol_gap_abs)
        .tol_gap_rel(settings.tol_gap_rel)
        .max_threads(1)
        .equilibrate_enable(settings.equilibrate)
        .build()
        .map_err(|e| Error::Solver(format!("settings: {e:?}")))?;

    let start = Instant::now();
    let mut solver = DefaultSolver::new(&p.finish(), &q, &a.finish(), &b, &cones, cs)
        .map_err(|e| Error::Solver(format!("problem setup: {e:?}")))?;
    solver.solve();
    let solve_time = start.elapsed();

    let sol = &solver.solution;
    let mut x = sol.x.clone();
    x.truncate(prog.num_vars());
    let (status, reduced, cert) = match sol.status {
        SolverStatus::Solved => (SolveStatus::Optimal, false, false),
        SolverStatus::AlmostSolved => (SolveStatus::Optimal, true, false),
        SolverStatus::PrimalInfeasible => (SolveStatus::Infeasible, false, true),
        SolverStatus::AlmostPrimalInfeasible => (SolveStatus::Infeasible, true, true),
        _ => (SolveStatus::NumericalFailure, false, false),
    };
    let objective = if status == SolveStatus::Optimal {
        prog.objective_value(&x)
    } else {
        f64::NAN
    };
    let max_violation = prog.max_violation(&x)?;
    Ok(SolveReport {
        status,
        reduced_accuracy: reduced,
        infeasibility_certificate: cert,
        x,
        objective,
        iterations: sol.iterations,
        max_violation,
        solver_primal_residual: sol.r_prim,
        solver_dual_residual: sol.r_dual,
        solve_time,
        detail: format!("{:?}", sol.status),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csc_merges_duplicates() {
        let mut b = CscBuilder::new(2, 2);
        b.push(1, 0, 1.0);
        b.push(0, 1, 2.0);
        b.push(1, 0, 3.0);
        let m = b.finish();
        assert_eq!(m.colptr, vec![0, 1, 2]);
        assert_eq!(m.rowval, vec![1, 0]);
        assert_eq!(m.nzval, vec![4.0, 2.0]);
    }

    #[test]
    fn compact_merges_terms() {
        let e = (LinExpr::term(2, 1.0) + LinExpr::term(0, 2.0) + LinExpr::term(2, -1.0)).compact();
        assert_eq!(e.terms, vec![(0, 2.0)]);
    }

    #[test]
    fn builder_rejects_unknown_variable() {
        let mut b = ProgramBuilder::new();
        b.add_var("x");
        b.add_nonneg(LinExpr::var(3), "bad");
        assert!(b.build().is_err());
    }

    #[test]
    fn psd_entry_lookup_is_symmetric() {
        let mut b = ProgramBuilder::new();
        b.add_psd(3, |i, j| LinExpr::constant((10 * i + j) as f64), "m");
        let p = b.build().unwrap();
        let m = p.psds()[0].eval(&[]);
        assert_eq!(m[(0, 2)], 2.0);
        assert_eq!(m[(2, 0)], 2.0);
        assert_eq!(m[(1, 2)], 12.0);
    }

    #[test]
    fn cbf_dump_has_sections() {
        let mut b = ProgramBuilder::new();
        let x = b.add_var("x");
        b.add_square(LinExpr::var(x) - LinExpr::constant(1.0));
        b.add_psd(
            2,
            |i, j| {
                if i == j {
                    LinExpr::var(x)
                } else {
                    LinExpr::constant(1.0)
                }
            },
            "m",
        );
        let p = b.build().unwrap();
        let mut out = Vec::new();
        p.write_cbf(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        for key in [
            "VER", "OBJSENSE", "PSDCON", "CON", "ACOORD", "HCOORD", "DCOORD",
        ] {
            assert!(s.contains(key), "missing {key}");
        }
    }
}
