//! Online optimisation: the initial program, the reconditioned receding
//! horizon program and the step loop that applies them.

mod program;
mod recondition;

pub use program::{
    add_dynamics, add_objective, add_tail_row, constraint_blocks, constraint_mean,
    constraint_spread, soc_row_horizon, PolicyLayout,
};
pub use recondition::{
    classify_constraint, compute_alpha, compute_tail_alpha, recondition_shift, AlphaResult,
    ConstraintCase, ReconditioningContext, TailEntry, DEGENERACY_TOL,
};

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::conic::{
    self, check_feasible, ConicProgram, LinExpr, ProgramBuilder, QuadraticMode, SolveReport,
    SolveStatus, SolverSettings,
};
use crate::error::{dim_err, Error, Result};
use crate::model::ScenarioConfig;
use crate::slp::{evaluate_policy, Policy};
use crate::terminal::{
    algorithm1_terminal_set, cache_key, synthesize_terminal_gain, verify_terminal_gain, GainDesign,
    SearchCaps, TerminalIngredients, TerminalSet, TerminalSetCache,
};

/// Receding-horizon variant or the frozen initial policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Equality terminal set at `k > 0`.
    Rc,
    /// Tail cone rows up to `mu_hat` at `k > 0`.
    RcMod,
    /// The `k = 0` policy applied without re-solving.
    Policy17,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Rc, Method::RcMod, Method::Policy17];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Rc => "rc",
            Method::RcMod => "rc-mod",
            Method::Policy17 => "policy17",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rc" => Ok(Method::Rc),
            "rc-mod" | "rcmod" | "rc_mod" => Ok(Method::RcMod),
            "policy17" | "policy-17" | "dual-mode" => Ok(Method::Policy17),
            other => Err(Error::Validation(format!("unknown method '{other}'"))),
        }
    }
}

/// Terminal rule of the reconditioned program.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecedingVariant {
    Rc,
    RcMod { mu_hat: usize },
}

/// Gain, terminal ingredients and terminal set for one scenario.
#[derive(Clone, Debug)]
pub struct OfflineDesign {
    pub gain: GainDesign,
    pub ingredients: TerminalIngredients,
    pub terminal_set: TerminalSet,
    pub cache_hit: bool,
}

impl OfflineDesign {
    /// `mu_hat` from the config, else `mu`.
    pub fn mu_hat(&self, scenario: &ScenarioConfig) -> usize {
        scenario.terminal.mu_hat.unwrap_or(self.terminal_set.mu)
    }
}

/// Terminal gain (fixed or synthesised) and its ingredients.
pub fn design_gain(scenario: &ScenarioConfig) -> Result<(GainDesign, TerminalIngredients)> {
    let eps = scenario.margins();
    let gain = match scenario.fixed_gain() {
        Some(k) => verify_terminal_gain(&scenario.system, &scenario.constraints, &k, &eps)?,
        None => synthesize_terminal_gain(&scenario.system, &scenario.constraints, &eps)?,
    };
    let ingredients = TerminalIngredients::new(
        &scenario.system,
        &scenario.constraints,
        &scenario.cost,
        &gain.k,
        scenario.terminal.imax,
    )?;
    Ok((gain, ingredients))
}

/// Runs the whole offline design, reusing a cached terminal set when the
/// cache holds one for the same inputs.
pub fn design_offline(
    scenario: &ScenarioConfig,
    cache: Option<&TerminalSetCache>,
) -> Result<OfflineDesign> {
    let (gain, ingredients) = design_gain(scenario)?;
    let caps = SearchCaps {
        nu_max: scenario.terminal.nu_max,
        mu_max: scenario.terminal.mu_max,
    };
    let key = cache_key(
        &scenario.system,
        &scenario.constraints,
        &gain.k,
        scenario.horizon,
        scenario.terminal.lmi_tol,
        caps,
    );
    if let Some(cache) = cache {
        if let Some(set) = cache.load(&key)? {
            log::info!("terminal set cache hit ({key})");
            return Ok(OfflineDesign {
                gain,
                ingredients,
                terminal_set: set,
                cache_hit: true,
            });
        }
    }
    let terminal_set = algorithm1_terminal_set(
        &scenario.system,
        &ingredients,
        &scenario.constraints,
        scenario.horizon,
        caps,
        scenario.terminal.lmi_tol,
    )?;
    if let Some(cache) = cache {
        cache.store(&key, &terminal_set)?;
    }
    Ok(OfflineDesign {
        gain,
        ingredients,
        terminal_set,
        cache_hit: false,
    })
}

fn base_program(
    scenario: &ScenarioConfig,
    ingredients: &TerminalIngredients,
    x: &DVector<f64>,
) -> Result<(ProgramBuilder, PolicyLayout)> {
    let layout = PolicyLayout::new(scenario.n(), scenario.m(), scenario.horizon);
    let mut pb = ProgramBuilder::new();
    layout.declare(&mut pb);
    add_dynamics(&mut pb, &layout, &scenario.system, x)?;
    add_objective(
        &mut pb,
        &layout,
        &scenario.system,
        &scenario.cost,
        ingredients,
    )?;
    Ok((pb, layout))
}

/// The `k = 0` program from state `x`: chance rows scaled by `sqrt(p~_j)`
/// and membership in the terminal set.
pub fn build_initial_socp(
    scenario: &ScenarioConfig,
    x: &DVector<f64>,
    ingredients: &TerminalIngredients,
    terminal_set: &TerminalSet,
) -> Result<(ConicProgram, PolicyLayout)> {
    if terminal_set.horizon != scenario.horizon || terminal_set.gain != ingredients.k {
        return Err(dim_err(
            "terminal set was designed for another horizon or gain",
        ));
    }
    let (mut pb, layout) = base_program(scenario, ingredients, x)?;
    let cs = &scenario.constraints;
    for i in 0..scenario.horizon {
        for j in 0..cs.count() {
            soc_row_horizon(
                &mut pb,
                &layout,
                &scenario.system,
                cs,
                i,
                j,
                cs.p_tilde()[j].sqrt(),
            )?;
        }
    }
    for row in &terminal_set.rows {
        add_tail_row(
            &mut pb,
            &layout,
            row,
            row.scale,
            format!("tail[{}][{}]", row.i, row.j),
        )?;
    }
    Ok((pb.build()?, layout))
}

fn add_equal_rows(pb: &mut ProgramBuilder, lhs: Vec<LinExpr>, rhs: &[f64], label: &str) {
    for (k, (e, &r)) in lhs.into_iter().zip(rhs).enumerate() {
        pb.add_eq(e - LinExpr::constant(r), format!("{label}[{k}]"));
    }
}

/// The reconditioned program at `k > 0` from measured state `x`.
pub fn build_rhc_socp(
    x: &DVector<f64>,
    ctx: &ReconditioningContext,
    scenario: &ScenarioConfig,
    ingredients: &TerminalIngredients,
    variant: RecedingVariant,
) -> Result<(ConicProgram, PolicyLayout)> {
    let (mut pb, layout) = base_program(scenario, ingredients, x)?;
    let cs = &scenario.constraints;
    let sys = &scenario.system;
    let big_n = scenario.horizon;
    let hat = &ctx.hat;
    for i in 0..big_n {
        for j in 0..cs.count() {
            let label = format!("cc[{i}][{j}]");
            match ctx.case[i][j] {
                ConstraintCase::C1 => {
                    pb.add_nonneg(
                        LinExpr::constant(cs.b()[j]) - constraint_mean(&layout, cs, i, j),
                        label.clone(),
                    );
                    let zero = constraint_blocks(&layout, cs, i, j).concat();
                    let n = zero.len();
                    add_equal_rows(&mut pb, zero, &vec![0.0; n], &format!("{label}.var"));
                }
                ConstraintCase::C2 => {}
                ConstraintCase::C3 => {
                    let a = ctx.alpha[i][j].alpha.expect("C3 rows carry alpha");
                    soc_row_horizon(&mut pb, &layout, sys, cs, i, j, a)?;
                }
                ConstraintCase::C4 => {
                    let hat_mean = (cs.g().row(j) * &hat.nominal.z[i])[0]
                        + (cs.h().row(j) * &hat.nominal.v[i])[0];
                    pb.add_nonneg(
                        LinExpr::constant(hat_mean) - constraint_mean(&layout, cs, i, j),
                        label.clone(),
                    );
                    let target: Vec<f64> = (1..=i)
                        .flat_map(|l| {
                            let row = cs.g().row(j) * hat.response.phi_x(i, l)
                                + cs.h().row(j) * hat.response.phi_u(i, l);
                            row.iter().copied().collect::<Vec<_>>()
                        })
                        .collect();
                    let lhs = constraint_blocks(&layout, cs, i, j).concat();
                    add_equal_rows(&mut pb, lhs, &target, &format!("{label}.var"));
                }
            }
        }
    }

    match variant {
        RecedingVariant::Rc => {
            if !ctx.tail.is_empty() {
                return Err(Error::Validation(
                    "context carries tail rows but the equality terminal set was requested".into(),
                ));
            }
            let zn = &hat.nominal.z[big_n];
            add_equal_rows(&mut pb, layout.z_expr(big_n), zn.as_slice(), "term.z");
            for l in 1..big_n {
                let block = hat.response.phi_x(big_n, l);
                let lhs = layout.state_block(big_n, l).concat();
                let rhs: Vec<f64> = (0..layout.n)
                    .flat_map(|r| (0..layout.n).map(move |c| block[(r, c)]))
                    .collect();
                add_equal_rows(&mut pb, lhs, &rhs, &format!("term.phi[{l}]"));
            }
        }
        RecedingVariant::RcMod { mu_hat } => {
            let want = (mu_hat + 1) * cs.count();
            if ctx.tail.len() != want {
                return Err(Error::Validation(format!(
                    "context has {} tail rows, mu_hat = {mu_hat} needs {want}",
                    ctx.tail.len()
                )));
            }
            let psi = hat.response.psi();
            for t in &ctx.tail {
                let label = format!("tail[{}][{}]", t.row.i, t.row.j);
                match t.case {
                    ConstraintCase::C1 => {
                        pb.add_nonneg(
                            LinExpr::constant(t.row.rhs) - program::tail_mean(&layout, &t.row),
                            label.clone(),
                        );
                        let proj = program::tail_projection(&layout, &t.row.linear);
                        let n = proj.len();
                        add_equal_rows(&mut pb, proj, &vec![0.0; n], &format!("{label}.var"));
                    }
                    ConstraintCase::C2 => {}
                    ConstraintCase::C3 => {
                        let a = t.alpha.alpha.expect("C3 rows carry alpha");
                        add_tail_row(&mut pb, &layout, &t.row, a, label)?;
                    }
                    ConstraintCase::C4 => {
                        let hat_mean = t.row.linear.dot(&hat.nominal.z[big_n]);
                        pb.add_nonneg(
                            LinExpr::constant(hat_mean) - program::tail_mean(&layout, &t.row),
                            label.clone(),
                        );
                        let proj = program::tail_projection(&layout, &t.row.linear);
                        let nn = layout.n * big_n;
                        let target: Vec<f64> = (0..nn)
                            .map(|q| {
                                (0..layout.n)
                                    .map(|c| t.row.linear[c] * psi[c * nn + q])
                                    .sum()
                            })
                            .collect();
                        add_equal_rows(&mut pb, proj, &target, &format!("{label}.var"));
                    }
                }
            }
        }
    }
    Ok((pb.build()?, layout))
}

/// Solves the `k = 0` program once and returns the resulting dual-mode
/// policy.
pub fn dual_mode_policy(
    scenario: &ScenarioConfig,
    ingredients: &TerminalIngredients,
    terminal_set: &TerminalSet,
) -> Result<(Policy, SolveReport)> {
    let (prog, layout) = build_initial_socp(scenario, &scenario.x0, ingredients, terminal_set)?;
    let report = solve_with_retry(&prog, &scenario.solver.settings())?;
    match report.status {
        SolveStatus::Optimal => Ok((
            layout
                .unpack(&report.x, &ingredients.k)?
                .with_exact_recursions(&scenario.system)?,
            report,
        )),
        SolveStatus::Infeasible => Err(Error::Infeasible(
            "initial program has no feasible policy from x0".into(),
        )),
        SolveStatus::NumericalFailure => Err(Error::Solver(report.detail)),
    }
}

/// Solves; on anything but an optimum retries once with tolerances relaxed
/// by 10.
fn solve_with_retry(prog: &ConicProgram, settings: &SolverSettings) -> Result<SolveReport> {
    let first = conic::solve(prog, settings)?;
    if first.status == SolveStatus::Optimal {
        return Ok(first);
    }
    log::warn!(
        "solver returned {} ({}), retrying relaxed",
        first.status,
        first.detail
    );
    // The retry also switches the quadratic form, which changes the
    // scaling of the KKT system the solver sees.
    let retry = SolverSettings {
        quadratic: match settings.quadratic {
            QuadraticMode::Native => QuadraticMode::Epigraph,
            QuadraticMode::Epigraph => QuadraticMode::Native,
        },
        ..settings.relaxed(10.0)
    };
    let mut second = conic::solve(prog, &retry)?;
    second.solve_time += first.solve_time;
    second.detail = format!("{} after retry ({})", second.detail, first.detail);
    Ok(second)
}

/// Per-step diagnostics, one JSON line per call of [`ControllerState::step`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub k: usize,
    /// Optimal value of the program solved at this step.
    pub objective: Option<f64>,
    /// Counts of C1..C4 over the horizon rows.
    pub cases: [usize; 4],
    pub tail_cases: [usize; 4],
    pub alpha_min: Option<f64>,
    pub alpha_max: Option<f64>,
    /// Per constraint: non-degenerate horizon rows with `alpha >= 0`.
    pub alpha_nonneg: Vec<usize>,
    /// Per constraint: non-degenerate horizon rows.
    pub alpha_total: Vec<usize>,
    /// Seconds spent in the solver.
    pub solve_time: f64,
    pub status: Option<SolveStatus>,
    pub retried: bool,
    /// Shifted candidate passes the program at the check tolerance.
    pub hat_feasible: Option<bool>,
    pub hat_violation: Option<f64>,
}

impl StepDiagnostics {
    fn empty(k: usize, c: usize) -> Self {
        Self {
            k,
            objective: None,
            cases: [0; 4],
            tail_cases: [0; 4],
            alpha_min: None,
            alpha_max: None,
            alpha_nonneg: vec![0; c],
            alpha_total: vec![0; c],
            solve_time: 0.0,
            status: None,
            retried: false,
            hat_feasible: None,
            hat_violation: None,
        }
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[derive(Clone, Debug)]
struct Stored {
    policy: Policy,
    x: DVector<f64>,
    u: DVector<f64>,
}

/// Closed-loop controller for one rollout.
#[derive(Clone, Debug)]
pub struct ControllerState<'a> {
    scenario: &'a ScenarioConfig,
    design: &'a OfflineDesign,
    method: Method,
    mu_hat: usize,
    k: usize,
    previous: Option<Stored>,
    /// Reconstructed disturbances `w_0 .. w_{k-1}`.
    history: Vec<DVector<f64>>,
    initial: Option<(Policy, f64)>,
}

impl<'a> ControllerState<'a> {
    pub fn new(scenario: &'a ScenarioConfig, design: &'a OfflineDesign, method: Method) -> Self {
        Self {
            scenario,
            design,
            method,
            mu_hat: design.mu_hat(scenario),
            k: 0,
            previous: None,
            history: Vec::new(),
            initial: None,
        }
    }

    /// Uses a precomputed `k = 0` optimum (policy and objective) instead of
    /// solving at the first step. It must come from the same initial state.
    pub fn with_initial(mut self, policy: Policy, objective: f64) -> Self {
        self.initial = Some((policy, objective));
        self
    }

    pub fn with_mu_hat(mut self, mu_hat: usize) -> Self {
        self.mu_hat = mu_hat;
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn method(&self) -> Method {
        self.method
    }

    /// Disturbances reconstructed so far.
    pub fn disturbances(&self) -> &[DVector<f64>] {
        &self.history
    }

    /// The optimum (or frozen policy) in force after the last step.
    pub fn current_policy(&self) -> Option<&Policy> {
        self.previous.as_ref().map(|s| &s.policy)
    }

    /// Computes `u_k` for the measured state `x_k` and advances `k`.
    pub fn step(&mut self, x: &DVector<f64>) -> Result<(DVector<f64>, StepDiagnostics)> {
        if x.len() != self.scenario.n() {
            return Err(dim_err("state length"));
        }
        let k = self.k;
        let c = self.scenario.constraints.count();
        let mut diag = StepDiagnostics::empty(k, c);

        let w_prev = match &self.previous {
            Some(prev) => {
                let sys = &self.scenario.system;
                Some(x - sys.a() * &prev.x - sys.b() * &prev.u)
            }
            None if k == 0 => None,
            None => return Err(Error::MissingPrevious),
        };
        if let Some(w) = &w_prev {
            self.history.push(w.clone());
        }

        let (policy, u) = match (self.method, w_prev) {
            (_, None) if self.initial.is_some() => {
                let (policy, objective) = self.initial.take().expect("checked");
                diag.objective = Some(objective);
                diag.status = Some(SolveStatus::Optimal);
                let u = policy.nominal.v[0].clone();
                (policy, u)
            }
            (_, None) => {
                let ing = &self.design.ingredients;
                let (prog, layout) =
                    build_initial_socp(self.scenario, x, ing, &self.design.terminal_set)?;
                let rep = self.solve(&prog, &mut diag)?;
                if rep.status != SolveStatus::Optimal {
                    return Err(match rep.status {
                        SolveStatus::Infeasible => {
                            Error::Infeasible("initial program infeasible at x0".into())
                        }
                        _ => Error::Solver(rep.detail),
                    });
                }
                let policy = layout
                    .unpack(&rep.x, &ing.k)?
                    .with_exact_recursions(&self.scenario.system)?;
                let u = policy.nominal.v[0].clone();
                (policy, u)
            }
            (Method::Policy17, Some(_)) => {
                let policy = self.previous.take().expect("checked above").policy;
                let u = evaluate_policy(&policy, &self.history, k, Some(x))?;
                (policy, u)
            }
            (method, Some(w)) => {
                let prev = self.previous.take().expect("checked above").policy;
                self.receding_step(x, &prev, &w, method, &mut diag)
                    .map(|p| {
                        let u = p.nominal.v[0].clone();
                        (p, u)
                    })?
            }
        };
        self.previous = Some(Stored {
            policy,
            x: x.clone(),
            u: u.clone(),
        });
        self.k += 1;
        Ok((u, diag))
    }

    fn solve(&self, prog: &ConicProgram, diag: &mut StepDiagnostics) -> Result<SolveReport> {
        let rep = solve_with_retry(prog, &self.scenario.solver.settings())?;
        diag.retried = rep.detail.contains("after retry");
        diag.solve_time = rep.solve_time.as_secs_f64();
        diag.status = Some(rep.status);
        if rep.status == SolveStatus::Optimal {
            diag.objective = Some(rep.objective);
        }
        Ok(rep)
    }

    fn receding_step(
        &self,
        x: &DVector<f64>,
        prev: &Policy,
        w: &DVector<f64>,
        method: Method,
        diag: &mut StepDiagnostics,
    ) -> Result<Policy> {
        let ing = &self.design.ingredients;
        let cs = &self.scenario.constraints;
        let variant = match method {
            Method::RcMod => RecedingVariant::RcMod {
                mu_hat: self.mu_hat,
            },
            _ => RecedingVariant::Rc,
        };
        let mu_hat = match variant {
            RecedingVariant::RcMod { mu_hat } => Some(mu_hat),
            RecedingVariant::Rc => None,
        };
        let ctx = ReconditioningContext::new(prev, w, ing, cs, mu_hat)?;
        diag.cases = ctx.case_histogram();
        diag.tail_cases = ctx.tail_case_histogram();
        for row in &ctx.alpha {
            for (j, a) in row.iter().enumerate() {
                if let Some(al) = a.alpha {
                    diag.alpha_total[j] += 1;
                    if al >= 0.0 {
                        diag.alpha_nonneg[j] += 1;
                    }
                    diag.alpha_min = Some(diag.alpha_min.map_or(al, |m: f64| m.min(al)));
                    diag.alpha_max = Some(diag.alpha_max.map_or(al, |m: f64| m.max(al)));
                }
            }
        }

        let (prog, layout) = build_rhc_socp(x, &ctx, self.scenario, ing, variant)?;
        let candidate = layout.pack(&ctx.hat)?;
        let viol = prog.max_violation(&candidate)?;
        diag.hat_violation = Some(viol.amount);
        diag.hat_feasible = Some(check_feasible(
            &prog,
            &candidate,
            self.scenario.solver.check_tol,
        )?);
        if diag.hat_feasible == Some(false) {
            log::warn!(
                "k={}: shifted candidate violates '{}' by {:.3e}",
                self.k,
                viol.label,
                viol.amount
            );
        }

        let rep = self.solve(&prog, diag)?;
        if rep.status != SolveStatus::Optimal {
            return Err(Error::HardFault {
                k: self.k,
                detail: format!("{} ({})", rep.status, rep.detail),
                candidate: serde_json::to_string(&ctx.hat).ok(),
            });
        }
        layout
            .unpack(&rep.x, &ing.k)?
            .with_exact_recursions(&self.scenario.system)
    }
}
