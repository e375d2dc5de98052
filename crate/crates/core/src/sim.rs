//! Seeded Monte Carlo closed-loop campaigns.
//!
//! Every disturbance `w_k` of rollout `r` comes from its own ChaCha8 stream
//! keyed by `(seed, r, k)`, so results do not depend on the number of
//! workers or on the campaign length.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::{
    design_offline, dual_mode_policy, ControllerState, Method, OfflineDesign, StepDiagnostics,
};
use crate::error::{Error, Result};
use crate::model::ScenarioConfig;
use crate::terminal::TerminalSetCache;

/// One standard-normal draw vector for `(seed, rollout, step)`, mapped
/// through `sigma_w_sqrt`.
pub fn disturbance(
    sigma_w_sqrt: &DMatrix<f64>,
    seed: u64,
    rollout: u64,
    step: u64,
) -> DVector<f64> {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&rollout.to_le_bytes());
    key[16..24].copy_from_slice(&step.to_le_bytes());
    key[24..].copy_from_slice(b"w-stream");
    let mut rng = ChaCha8Rng::from_seed(key);
    let g = DVector::from_fn(sigma_w_sqrt.ncols(), |_, _| StandardNormal.sample(&mut rng));
    sigma_w_sqrt * g
}

/// Disturbance tensor indexed `[rollout][step]`.
pub fn sample_disturbances(
    seed: u64,
    count: usize,
    steps: usize,
    sigma_w_sqrt: &DMatrix<f64>,
) -> Vec<Vec<DVector<f64>>> {
    (0..count)
        .map(|r| {
            (0..steps)
                .map(|k| disturbance(sigma_w_sqrt, seed, r as u64, k as u64))
                .collect()
        })
        .collect()
}

/// Per-step data of one rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub stage_cost: f64,
    pub objective: Option<f64>,
    pub cases: [usize; 4],
    pub tail_cases: [usize; 4],
    pub satisfied: Vec<bool>,
    pub alpha_nonneg: Vec<usize>,
    pub alpha_total: Vec<usize>,
    pub hat_feasible: Option<bool>,
    pub hat_violation: Option<f64>,
    pub retried: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub rollout: usize,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    /// State after the last input.
    pub final_state: Vec<f64>,
    pub total_cost: f64,
    /// Wall-clock solver seconds per step; not part of the deterministic
    /// outcome.
    #[serde(skip)]
    pub solve_times: Vec<f64>,
}

impl RolloutRecord {
    /// States `x_0 .. x_steps`.
    pub fn states(&self) -> Vec<DVector<f64>> {
        self.steps
            .iter()
            .map(|s| DVector::from_column_slice(&s.x))
            .chain(std::iter::once(DVector::from_column_slice(
                &self.final_state,
            )))
            .collect()
    }
}

/// Runs one closed-loop rollout.
pub fn run_rollout(
    scenario: &ScenarioConfig,
    design: &OfflineDesign,
    method: Method,
    initial: Option<&(crate::slp::Policy, f64)>,
    seed: u64,
    rollout: usize,
    steps: usize,
) -> Result<RolloutRecord> {
    let sys = &scenario.system;
    let cs = &scenario.constraints;
    let mut ctrl = ControllerState::new(scenario, design, method);
    if let Some((p, j)) = initial {
        ctrl = ctrl.with_initial(p.clone(), *j);
    }
    let mut x = scenario.x0.clone();
    let mut out = Vec::with_capacity(steps);
    let mut times = Vec::with_capacity(steps);
    let mut total = 0.0;
    for k in 0..steps {
        let (u, diag): (DVector<f64>, StepDiagnostics) = ctrl.step(&x).map_err(|e| match e {
            Error::HardFault {
                k,
                detail,
                candidate,
            } => Error::HardFault {
                k,
                detail: format!("rollout {rollout}: {detail}"),
                candidate,
            },
            other => other,
        })?;
        let w = disturbance(sys.sigma_w_sqrt(), seed, rollout as u64, k as u64);
        let stage = scenario.cost.eval(&x, &u)?;
        total += stage;
        times.push(diag.solve_time);
        out.push(StepRecord {
            k,
            x: x.as_slice().to_vec(),
            u: u.as_slice().to_vec(),
            w: w.as_slice().to_vec(),
            stage_cost: stage,
            objective: diag.objective,
            cases: diag.cases,
            tail_cases: diag.tail_cases,
            satisfied: (0..cs.count()).map(|j| cs.satisfied(j, &x, &u)).collect(),
            alpha_nonneg: diag.alpha_nonneg,
            alpha_total: diag.alpha_total,
            hat_feasible: diag.hat_feasible,
            hat_violation: diag.hat_violation,
            retried: diag.retried,
        });
        x = sys.step(&x, &u, &w);
    }
    Ok(RolloutRecord {
        rollout,
        seed,
        steps: out,
        final_state: x.as_slice().to_vec(),
        total_cost: total,
        solve_times: times,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignOptions {
    pub rollouts: usize,
    pub steps: usize,
    pub seed: u64,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl CampaignOptions {
    pub fn from_scenario(scenario: &ScenarioConfig) -> Self {
        Self {
            rollouts: scenario.simulation.rollouts,
            steps: scenario.simulation.steps,
            seed: scenario.simulation.seed,
            workers: None,
        }
    }
}

/// Sample mean of `J*_{k+1} - J*_k + l(x_k, u_k) - tr(P Sigma_w)` at step `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecreaseStat {
    pub k: usize,
    pub mean: f64,
    pub std_err: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub scenario: String,
    pub method: Method,
    pub rollouts: usize,
    pub steps: usize,
    pub seed: u64,
    pub p: Vec<f64>,
    pub cost_mean: f64,
    pub cost_std: f64,
    /// Empirical satisfaction frequency, `[k][j]`.
    pub satisfaction: Vec<Vec<f64>>,
    /// Smallest entry of `satisfaction`; `None` for an empty table.
    pub min_satisfaction: Option<f64>,
    pub cost_decrease: Vec<DecreaseStat>,
    /// Per constraint: non-degenerate horizon rows with `alpha >= 0`, and all
    /// non-degenerate rows.
    pub alpha_nonneg: Vec<usize>,
    pub alpha_total: Vec<usize>,
    pub hat_checks: usize,
    pub hat_infeasible: usize,
    pub max_hat_violation: f64,
    pub retries: usize,
    pub case_totals: [usize; 4],
    pub tail_case_totals: [usize; 4],
    pub mu: usize,
    pub nu: usize,
    /// SHA-256 over the serialised rollout records.
    pub fingerprint: String,
}

impl CampaignSummary {
    /// Frequency of `alpha >= 0` per constraint.
    pub fn alpha_frequency(&self) -> Vec<Option<f64>> {
        self.alpha_nonneg
            .iter()
            .zip(&self.alpha_total)
            .map(|(&a, &t)| (t > 0).then(|| a as f64 / t as f64))
            .collect()
    }

    pub fn cost_std_err(&self) -> f64 {
        self.cost_std / (self.rollouts.max(1) as f64).sqrt()
    }
}

/// Solver timing, kept apart from the deterministic summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CampaignTiming {
    pub solves: usize,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct Campaign {
    pub summary: CampaignSummary,
    pub timing: CampaignTiming,
    pub records: Vec<RolloutRecord>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn fingerprint(records: &[RolloutRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(serde_json::to_vec(r).expect("plain data serialises"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Aggregates records in rollout order.
pub fn summarize(
    scenario: &ScenarioConfig,
    design: &OfflineDesign,
    method: Method,
    opts: &CampaignOptions,
    records: &[RolloutRecord],
) -> (CampaignSummary, CampaignTiming) {
    let c = scenario.constraints.count();
    let costs: Vec<f64> = records.iter().map(|r| r.total_cost).collect();
    let (cost_mean, cost_std) = mean_std(&costs);

    let mut satisfaction = vec![vec![0.0; c]; opts.steps];
    for r in records {
        for s in &r.steps {
            for (j, &ok) in s.satisfied.iter().enumerate() {
                if ok {
                    satisfaction[s.k][j] += 1.0;
                }
            }
        }
    }
    let count = records.len().max(1) as f64;
    for row in &mut satisfaction {
        for v in row.iter_mut() {
            *v /= count;
        }
    }
    let min_satisfaction = if records.is_empty() {
        None
    } else {
        satisfaction.iter().flatten().copied().reduce(f64::min)
    };

    let trace = (&design.ingredients.p * scenario.system.sigma_w()).trace();
    let mut cost_decrease = Vec::new();
    for k in 0..opts.steps.saturating_sub(1) {
        let d: Vec<f64> = records
            .iter()
            .filter_map(|r| {
                let (a, b) = (&r.steps[k], &r.steps[k + 1]);
                Some(b.objective? - a.objective? + a.stage_cost - trace)
            })
            .collect();
        if d.is_empty() {
            continue;
        }
        let (mean, std) = mean_std(&d);
        cost_decrease.push(DecreaseStat {
            k,
            mean,
            std_err: std / (d.len() as f64).sqrt(),
            count: d.len(),
        });
    }

    let mut alpha_nonneg = vec![0; c];
    let mut alpha_total = vec![0; c];
    let (mut hat_checks, mut hat_infeasible, mut retries) = (0, 0, 0);
    let mut max_hat_violation: f64 = 0.0;
    let mut case_totals = [0; 4];
    let mut tail_case_totals = [0; 4];
    let mut times = Vec::new();
    for r in records {
        times.extend_from_slice(&r.solve_times);
        for s in &r.steps {
            for j in 0..c {
                alpha_nonneg[j] += s.alpha_nonneg[j];
                alpha_total[j] += s.alpha_total[j];
            }
            if let Some(ok) = s.hat_feasible {
                hat_checks += 1;
                if !ok {
                    hat_infeasible += 1;
                }
            }
            if let Some(v) = s.hat_violation {
                max_hat_violation = max_hat_violation.max(v);
            }
            retries += s.retried as usize;
            for q in 0..4 {
                case_totals[q] += s.cases[q];
                tail_case_totals[q] += s.tail_cases[q];
            }
        }
    }
    let solved: Vec<f64> = times.iter().copied().filter(|&t| t > 0.0).collect();
    let (tm, ts) = mean_std(&solved);
    let timing = CampaignTiming {
        solves: solved.len(),
        mean: if solved.is_empty() { 0.0 } else { tm },
        std: if solved.is_empty() { 0.0 } else { ts },
        max: solved.iter().copied().fold(0.0, f64::max),
        total: solved.iter().sum(),
    };

    let summary = CampaignSummary {
        scenario: scenario.name.clone(),
        method,
        rollouts: records.len(),
        steps: opts.steps,
        seed: opts.seed,
        p: scenario.constraints.p().as_slice().to_vec(),
        cost_mean,
        cost_std,
        satisfaction,
        min_satisfaction,
        cost_decrease,
        alpha_nonneg,
        alpha_total,
        hat_checks,
        hat_infeasible,
        max_hat_violation,
        retries,
        case_totals,
        tail_case_totals,
        mu: design.terminal_set.mu,
        nu: design.terminal_set.nu,
        fingerprint: fingerprint(records),
    };
    (summary, timing)
}

/// Runs `opts.rollouts` independent rollouts in parallel and aggregates them
/// in rollout order. The first hard fault aborts the campaign.
pub fn run_campaign(
    scenario: &ScenarioConfig,
    design: &OfflineDesign,
    method: Method,
    opts: &CampaignOptions,
) -> Result<Campaign> {
    // Every rollout starts from the same state, so the k = 0 program is
    // solved once and shared.
    let initial = if opts.rollouts > 0 && opts.steps > 0 {
        let (policy, report) =
            dual_mode_policy(scenario, &design.ingredients, &design.terminal_set)?;
        Some((policy, report.objective))
    } else {
        None
    };
    let work = || -> Result<Vec<RolloutRecord>> {
        (0..opts.rollouts)
            .into_par_iter()
            .map(|r| {
                run_rollout(
                    scenario,
                    design,
                    method,
                    initial.as_ref(),
                    opts.seed,
                    r,
                    opts.steps,
                )
            })
            .collect()
    };
    let records = match opts.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::Validation(format!("worker pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let (summary, timing) = summarize(scenario, design, method, opts, &records);
    Ok(Campaign {
        summary,
        timing,
        records,
    })
}

/// Designs offline ingredients and runs a campaign in one call.
pub fn design_and_run(
    scenario: &ScenarioConfig,
    method: Method,
    opts: &CampaignOptions,
    cache: Option<&TerminalSetCache>,
) -> Result<(OfflineDesign, Campaign)> {
    let design = design_offline(scenario, cache)?;
    let campaign = run_campaign(scenario, &design, method, opts)?;
    Ok((design, campaign))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub p: f64,
    pub method: Method,
    pub summary: Option<CampaignSummary>,
    /// Reason the cell could not be run.
    pub error: Option<String>,
}

/// Runs every method at every probability level; the same level is used for
/// all constraints. Cells whose offline design fails are marked and skipped.
pub fn sweep_probability(
    scenario: &ScenarioConfig,
    methods: &[Method],
    ps: &[f64],
    opts: &CampaignOptions,
    cache: Option<&TerminalSetCache>,
) -> Result<Vec<SweepCell>> {
    let c = scenario.constraints.count();
    let mut cells = Vec::new();
    for &p in ps {
        let sc = scenario.with_probabilities(&vec![p; c])?;
        let design = match design_offline(&sc, cache) {
            Ok(d) => d,
            Err(
                e @ (Error::DesignInfeasible(_)
                | Error::NotTerminated { .. }
                | Error::Unstable { .. }),
            ) => {
                log::warn!("p = {p}: {e}");
                for &m in methods {
                    cells.push(SweepCell {
                        p,
                        method: m,
                        summary: None,
                        error: Some(e.to_string()),
                    });
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        for &m in methods {
            let camp = run_campaign(&sc, &design, m, opts)?;
            cells.push(SweepCell {
                p,
                method: m,
                summary: Some(camp.summary),
                error: None,
            });
        }
    }
    Ok(cells)
}

/// Pairs `(p_a, p_b)` with `p_a < p_b` where the mean cost drops by more
/// than `k_se` combined standard errors, per method.
pub fn monotonicity_violations(cells: &[SweepCell], k_se: f64) -> Vec<(Method, f64, f64)> {
    let mut out = Vec::new();
    for m in Method::ALL {
        let mut rows: Vec<(f64, &CampaignSummary)> = cells
            .iter()
            .filter(|c| c.method == m)
            .filter_map(|c| c.summary.as_ref().map(|s| (c.p, s)))
            .collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in rows.windows(2) {
            let (pa, a) = w[0];
            let (pb, b) = w[1];
            let se = (a.cost_std_err().powi(2) + b.cost_std_err().powi(2)).sqrt();
            if b.cost_mean < a.cost_mean - k_se * se {
                out.push((m, pa, pb));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopePoint {
    pub k: usize,
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation of state coordinate `index`
/// over the rollouts, for `k = 0..=steps`.
pub fn trajectory_envelope(records: &[RolloutRecord], index: usize) -> Result<Vec<EnvelopePoint>> {
    let first = records
        .first()
        .ok_or_else(|| Error::Validation("envelope needs at least one rollout".into()))?;
    let len = first.steps.len() + 1;
    let n = first.final_state.len();
    if index >= n {
        return Err(Error::OutOfRange {
            index,
            limit: n - 1,
        });
    }
    let value = |r: &RolloutRecord, k: usize| {
        if k < r.steps.len() {
            r.steps[k].x[index]
        } else {
            r.final_state[index]
        }
    };
    let count = records.len() as f64;
    Ok((0..len)
        .map(|k| {
            let mean = records.iter().map(|r| value(r, k)).sum::<f64>() / count;
            let var = records
                .iter()
                .map(|r| (value(r, k) - mean).powi(2))
                .sum::<f64>()
                / count;
            EnvelopePoint {
                k,
                mean,
                std: var.sqrt(),
            }
        })
        .collect())
}

/// Writes `summary.json`, `timing.json`, `rollouts.csv`, `envelope.csv`
/// and `satisfaction.csv` into `dir`; returns the paths.
pub fn write_campaign(dir: &Path, campaign: &Campaign) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();

    let p = dir.join("summary.json");
    std::fs::write(&p, serde_json::to_string_pretty(&campaign.summary)?)?;
    paths.push(p);

    let p = dir.join("timing.json");
    std::fs::write(&p, serde_json::to_string_pretty(&campaign.timing)?)?;
    paths.push(p);

    let p = dir.join("rollouts.csv");
    write_rollouts_csv(&p, &campaign.records)?;
    paths.push(p);

    if !campaign.records.is_empty() {
        let p = dir.join("envelope.csv");
        let n = campaign.records[0].final_state.len();
        let mut w = csv_writer(&p)?;
        w.write_record(["state", "k", "mean", "std"])
            .map_err(csv_err)?;
        for i in 0..n {
            for e in trajectory_envelope(&campaign.records, i)? {
                w.write_record([
                    i.to_string(),
                    e.k.to_string(),
                    e.mean.to_string(),
                    e.std.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        paths.push(p);
    }

    let p = dir.join("satisfaction.csv");
    let mut w = csv_writer(&p)?;
    w.write_record(["k", "j", "frequency"]).map_err(csv_err)?;
    for (k, row) in campaign.summary.satisfaction.iter().enumerate() {
        for (j, f) in row.iter().enumerate() {
            w.write_record([k.to_string(), j.to_string(), f.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    paths.push(p);
    Ok(paths)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(csv_err)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Long format: one line per rollout and step.
pub fn write_rollouts_csv(path: &Path, records: &[RolloutRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    if let Some(r) = records.first() {
        let n = r.final_state.len();
        let m = r.steps.first().map_or(0, |s| s.u.len());
        let mut header = vec!["rollout".to_string(), "k".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..m).map(|i| format!("u{i}")));
        header.extend((0..n).map(|i| format!("w{i}")));
        header.push("cost".into());
        header.push("objective".into());
        w.write_record(&header).map_err(csv_err)?;
        for r in records {
            for s in &r.steps {
                let mut line = vec![r.rollout.to_string(), s.k.to_string()];
                line.extend(s.x.iter().map(f64::to_string));
                line.extend(s.u.iter().map(f64::to_string));
                line.extend(s.w.iter().map(f64::to_string));
                line.push(s.stage_cost.to_string());
                line.push(s.objective.map(|v| v.to_string()).unwrap_or_default());
                w.write_record(&line).map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes diagnostics as JSON lines.
pub fn write_diagnostics(out: &mut impl Write, diags: &[StepDiagnostics]) -> Result<()> {
    for d in diags {
        writeln!(out, "{}", d.to_json_line()?)?;
    }
    Ok(())
}
