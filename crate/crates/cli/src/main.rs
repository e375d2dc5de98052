//! Command-line frontend: gain design, terminal set, campaigns, sweeps and
//! report tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use slp_smpc::controller::{design_gain, design_offline};
use slp_smpc::model::ScenarioConfig;
use slp_smpc::sim::{
    monotonicity_violations, run_campaign, sweep_probability, write_campaign, CampaignOptions,
    CampaignTiming, SweepCell,
};
use slp_smpc::terminal::TerminalSetCache;
use slp_smpc::{load_scenario, CampaignSummary, Error, Method};

#[derive(Parser, Debug)]
#[command(name = "slp-smpc", version, about = "Stochastic MPC with affine disturbance feedback")]
struct Cli {
    /// Scenario file (TOML or JSON); `hvac` selects the built-in scenario.
    #[arg(long, global = true, default_value = "hvac")]
    scenario: String,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Terminal-set cache directory (default: $SLP_SMPC_CACHE_DIR or .slp-smpc-cache).
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,

    /// Neither read nor write the terminal-set cache.
    #[arg(long, global = true)]
    no_cache: bool,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Design or verify the terminal gain and write gain.json.
    DesignK(DesignKArgs),
    /// Run the terminal-set search and write terminal_set.json.
    TerminalSet(TerminalSetArgs),
    /// Run a closed-loop Monte Carlo campaign.
    Simulate(SimulateArgs),
    /// Campaigns over a list of probability levels.
    SweepP(SweepArgs),
    /// Merge the summaries under the output directory into tables.
    Report,
}

#[derive(Args, Debug)]
struct DesignKArgs {
    /// Verify this gain instead of solving the SDP: one value (broadcast) or
    /// m*n values, rows separated by ';' and entries by ','.
    #[arg(long, allow_hyphen_values = true)]
    use_k: Option<String>,
    /// Relative margin eps_j = eps * b_j used by the SDP.
    #[arg(long)]
    eps: Option<f64>,
    /// Ignore a gain fixed in the scenario and solve the SDP.
    #[arg(long)]
    synthesize: bool,
}

#[derive(Args, Debug)]
struct TerminalSetArgs {
    #[arg(long)]
    nu_max: Option<usize>,
    #[arg(long)]
    mu_max: Option<usize>,
    #[arg(long)]
    lmi_tol: Option<f64>,
}

#[derive(Args, Debug)]
struct CampaignArgs {
    #[arg(long)]
    rollouts: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the rollouts.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value = "rc")]
    method: Method,
    #[command(flatten)]
    campaign: CampaignArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.6,0.7,0.8")]
    p: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "rc-mod")]
    methods: Vec<Method>,
    #[command(flatten)]
    campaign: CampaignArgs,
}

/// Error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::DesignInfeasible(_) | Error::Unstable { .. } => 2,
            Error::NotTerminated { .. } => 3,
            Error::HardFault { .. } | Error::Solver(_) | Error::Infeasible(_) => 4,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Command::Report = cli.command {
        return cmd_report(&cli.out);
    }
    let scenario = load(&cli.scenario)?;
    fs::create_dir_all(&cli.out)?;
    let cache = if cli.no_cache {
        None
    } else {
        Some(match &cli.cache_dir {
            Some(d) => TerminalSetCache::new(d),
            None => TerminalSetCache::from_env(),
        })
    };
    match &cli.command {
        Command::DesignK(a) => cmd_design_k(scenario, a, &cli.out),
        Command::TerminalSet(a) => cmd_terminal_set(scenario, a, cache.as_ref(), &cli.out),
        Command::Simulate(a) => cmd_simulate(&scenario, a, cache.as_ref(), &cli.out),
        Command::SweepP(a) => cmd_sweep(&scenario, a, cache.as_ref(), &cli.out),
        Command::Report => unreachable!(),
    }
}

fn load(spec: &str) -> CliResult<ScenarioConfig> {
    let path = Path::new(spec);
    if spec == "hvac" && !path.exists() {
        return Ok(slp_smpc::scenarios::hvac()?);
    }
    if !path.exists() {
        return Err(usage(format!("scenario file {spec} not found")));
    }
    Ok(load_scenario(path)?)
}

fn parse_gain(text: &str, m: usize, n: usize) -> CliResult<Vec<Vec<f64>>> {
    let bad = |e: std::num::ParseFloatError| usage(format!("--use-k: {e}"));
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|r| {
            r.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(bad))
                .collect()
        })
        .collect::<CliResult<_>>()?;
    if rows.len() == 1 && rows[0].len() == 1 {
        return Ok(vec![vec![rows[0][0]; n]; m]);
    }
    if rows.len() == 1 && rows[0].len() == m * n {
        return Ok(rows[0].chunks(n).map(|c| c.to_vec()).collect());
    }
    if rows.len() == m && rows.iter().all(|r| r.len() == n) {
        return Ok(rows);
    }
    Err(usage(format!("--use-k needs 1 or {m}x{n} values")))
}

#[derive(Serialize)]
struct GainOutput<'a> {
    scenario: &'a str,
    eps_rel: f64,
    #[serde(flatten)]
    design: &'a slp_smpc::terminal::GainDesign,
}

fn cmd_design_k(mut scenario: ScenarioConfig, a: &DesignKArgs, out: &Path) -> CliResult<()> {
    if let Some(eps) = a.eps {
        if !(eps > 0.0) {
            return Err(usage("--eps must be positive"));
        }
        scenario.terminal.eps_rel = eps;
        scenario.terminal.eps = None;
    }
    if a.synthesize {
        scenario.terminal.k = None;
    }
    if let Some(k) = &a.use_k {
        scenario.terminal.k = Some(parse_gain(k, scenario.m(), scenario.n())?);
    }
    let (gain, _) = design_gain(&scenario)?;
    let path = out.join("gain.json");
    let doc = GainOutput {
        scenario: &scenario.name,
        eps_rel: scenario.terminal.eps_rel,
        design: &gain,
    };
    fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
    let what = if gain.synthesized { "synthesised" } else { "verified" };
    println!(
        "{what} terminal gain: spectral radius {:.4}, margins {:?} -> {}",
        gain.spectral_radius,
        gain.margins.as_slice(),
        path.display()
    );
    Ok(())
}

fn cmd_terminal_set(
    mut scenario: ScenarioConfig,
    a: &TerminalSetArgs,
    cache: Option<&TerminalSetCache>,
    out: &Path,
) -> CliResult<()> {
    if let Some(v) = a.nu_max {
        scenario.terminal.nu_max = v;
    }
    if let Some(v) = a.mu_max {
        scenario.terminal.mu_max = v;
    }
    if let Some(v) = a.lmi_tol {
        scenario.terminal.lmi_tol = v;
    }
    let t = Instant::now();
    let design = design_offline(&scenario, cache)?;
    if design.cache_hit {
        println!("terminal set loaded from cache");
    }
    let set = &design.terminal_set;
    let path = out.join("terminal_set.json");
    fs::write(&path, set.to_json()?)?;
    println!(
        "nu = {}, mu = {} in {:.2} s -> {}",
        set.nu,
        set.mu,
        t.elapsed().as_secs_f64(),
        path.display()
    );
    Ok(())
}

fn campaign_options(scenario: &ScenarioConfig, a: &CampaignArgs) -> CliResult<CampaignOptions> {
    let mut o = CampaignOptions::from_scenario(scenario);
    if let Some(v) = a.rollouts {
        o.rollouts = v;
    }
    if let Some(v) = a.steps {
        o.steps = v;
    }
    if let Some(v) = a.seed {
        o.seed = v;
    }
    if a.workers == Some(0) {
        return Err(usage("--workers must be at least 1"));
    }
    o.workers = a.workers;
    if o.rollouts == 0 {
        return Err(usage("--rollouts must be at least 1"));
    }
    Ok(o)
}

fn cmd_simulate(
    scenario: &ScenarioConfig,
    a: &SimulateArgs,
    cache: Option<&TerminalSetCache>,
    out: &Path,
) -> CliResult<()> {
    let opts = campaign_options(scenario, &a.campaign)?;
    let design = design_offline(scenario, cache)?;
    let dir = out.join(a.method.tag());
    let t = Instant::now();
    let campaign = match run_campaign(scenario, &design, a.method, &opts) {
        Ok(c) => c,
        Err(e) => {
            if let Error::HardFault {
                candidate: Some(c), ..
            } = &e
            {
                fs::create_dir_all(&dir)?;
                let p = dir.join("hard_fault.json");
                fs::write(&p, c)?;
                eprintln!("reconditioned candidate written to {}", p.display());
            }
            return Err(e.into());
        }
    };
    write_campaign(&dir, &campaign)?;
    let s = &campaign.summary;
    println!(
        "{}: cost {:.3} +- {:.3}, min satisfaction {}, {} rollouts in {:.1} s -> {}",
        s.method,
        s.cost_mean,
        s.cost_std,
        fmt_opt(s.min_satisfaction),
        s.rollouts,
        t.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(())
}

fn cmd_sweep(
    scenario: &ScenarioConfig,
    a: &SweepArgs,
    cache: Option<&TerminalSetCache>,
    out: &Path,
) -> CliResult<()> {
    if a.p.iter().any(|&p| !(p > 0.5 && p < 1.0)) {
        return Err(usage("--p values must lie in (0.5, 1)"));
    }
    let opts = campaign_options(scenario, &a.campaign)?;
    let cells = sweep_probability(scenario, &a.methods, &a.p, &opts, cache)?;
    fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&cells)?)?;
    for (m, pa, pb) in monotonicity_violations(&cells, 2.0) {
        log::warn!("{m}: mean cost drops from p = {pa} to p = {pb}");
    }
    for c in &cells {
        match (&c.summary, &c.error) {
            (Some(s), _) => println!(
                "p = {:.3} {}: {:.3} +- {:.3}",
                c.p,
                c.method,
                s.cost_mean,
                s.cost_std_err()
            ),
            (None, Some(e)) => println!("p = {:.3} {}: not run ({e})", c.p, c.method),
            (None, None) => {}
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.2}%", 100.0 * x))
}

/// Summary files below `dir`, depth first in name order.
fn find_files(dir: &Path, name: &str, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_files(&p, name, out)?;
        } else if p.file_name().is_some_and(|f| f == name) {
            out.push(p);
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct SweepFile(Vec<SweepCell>);

fn cmd_report(out: &Path) -> CliResult<()> {
    if !out.is_dir() {
        return Err(usage(format!("{} is not a directory", out.display())));
    }
    let mut summaries = Vec::new();
    find_files(out, "summary.json", &mut summaries)?;
    let mut sweeps = Vec::new();
    find_files(out, "sweep.json", &mut sweeps)?;
    if summaries.is_empty() && sweeps.is_empty() {
        return Err(usage(format!(
            "no summary.json or sweep.json under {}",
            out.display()
        )));
    }

    let mut md = String::new();
    let mut csv = csv::Writer::from_path(out.join("report.csv"))
        .map_err(|e| usage(format!("report.csv: {e}")))?;
    let csv_err = |e: csv::Error| usage(format!("report.csv: {e}"));
    csv.write_record([
        "source",
        "method",
        "p",
        "rollouts",
        "cost_mean",
        "cost_std",
        "min_satisfaction",
        "solve_time_mean",
        "solve_time_std",
    ])
    .map_err(csv_err)?;

    if !summaries.is_empty() {
        md.push_str("| method | rollouts | cost mean | cost std | min satisfaction | solve time [ms] |\n");
        md.push_str("|---|---|---|---|---|---|\n");
        for path in &summaries {
            let s: CampaignSummary = serde_json::from_str(&fs::read_to_string(path)?)?;
            let timing: Option<CampaignTiming> = path
                .parent()
                .map(|d| d.join("timing.json"))
                .and_then(|p| fs::read_to_string(p).ok())
                .and_then(|t| serde_json::from_str(&t).ok());
            let time = timing
                .as_ref()
                .filter(|t| t.solves > 0)
                .map_or_else(|| "-".into(), |t| format!("{:.2} +- {:.2}", 1e3 * t.mean, 1e3 * t.std));
            md.push_str(&format!(
                "| {} | {} | {:.3} | {:.3} | {} | {} |\n",
                s.method,
                s.rollouts,
                s.cost_mean,
                s.cost_std,
                fmt_opt(s.min_satisfaction),
                time
            ));
            csv.write_record([
                path.display().to_string(),
                s.method.to_string(),
                fmt_p(&s.p),
                s.rollouts.to_string(),
                s.cost_mean.to_string(),
                s.cost_std.to_string(),
                s.min_satisfaction.map_or(String::new(), |v| v.to_string()),
                timing.as_ref().map_or(String::new(), |t| t.mean.to_string()),
                timing.as_ref().map_or(String::new(), |t| t.std.to_string()),
            ])
            .map_err(csv_err)?;
        }
    }

    for path in &sweeps {
        let SweepFile(cells) = serde_json::from_str(&fs::read_to_string(path)?)?;
        let mut methods: Vec<Method> = Vec::new();
        let mut grid: Vec<(f64, Vec<(Method, String)>)> = Vec::new();
        for c in &cells {
            if !methods.contains(&c.method) {
                methods.push(c.method);
            }
            let cell = match &c.summary {
                Some(s) => format!("{:.3}", s.cost_mean),
                None => "infeasible".into(),
            };
            match grid.iter_mut().find(|(p, _)| *p == c.p) {
                Some((_, row)) => row.push((c.method, cell)),
                None => grid.push((c.p, vec![(c.method, cell)])),
            }
            if let Some(s) = &c.summary {
                csv.write_record([
                    path.display().to_string(),
                    s.method.to_string(),
                    c.p.to_string(),
                    s.rollouts.to_string(),
                    s.cost_mean.to_string(),
                    s.cost_std.to_string(),
                    s.min_satisfaction.map_or(String::new(), |v| v.to_string()),
                    String::new(),
                    String::new(),
                ])
                .map_err(csv_err)?;
            }
        }
        if !md.is_empty() {
            md.push('\n');
        }
        md.push_str("| p |");
        for m in &methods {
            md.push_str(&format!(" {m} |"));
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(methods.len()));
        md.push('\n');
        grid.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (p, row) in &grid {
            md.push_str(&format!("| {p:.3} |"));
            for m in &methods {
                let cell = row.iter().find(|(rm, _)| rm == m).map(|(_, v)| v.as_str());
                md.push_str(&format!(" {} |", cell.unwrap_or("-")));
            }
            md.push('\n');
        }
    }
    csv.flush()?;
    fs::write(out.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn fmt_p(p: &[f64]) -> String {
    p.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_shapes() {
        assert_eq!(parse_gain("0", 1, 3).ok().unwrap(), vec![vec![0.0; 3]]);
        assert_eq!(parse_gain("1,2,3,4", 2, 2).ok().unwrap(), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(parse_gain("1, 2; 3,4", 2, 2).ok().unwrap(), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(parse_gain("1,2", 1, 3).err().unwrap().code, 1);
        assert_eq!(parse_gain("x", 1, 3).err().unwrap().code, 1);
    }

    #[test]
    fn exit_codes() {
        let code = |e: Error| Failure::from(e).code;
        assert_eq!(code(Error::DesignInfeasible("margin".into())), 2);
        assert_eq!(code(Error::Infeasible("k = 0".into())), 4);
        assert_eq!(code(Error::Validation("p".into())), 1);
    }

    #[test]
    fn formatting() {
        assert_eq!(fmt_opt(None), "-");
        assert_eq!(fmt_opt(Some(0.6934)), "69.34%");
        assert_eq!(fmt_p(&[0.6, 0.7]), "0.6;0.7");
    }
}
