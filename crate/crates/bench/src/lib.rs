//! Shared fixtures for the criterion benchmarks in `benches/`.

use slp_smpc::controller::design_offline;
use slp_smpc::terminal::TerminalSetCache;
use slp_smpc::{scenarios, OfflineDesign, Result, ScenarioConfig};

/// The HVAC scenario with its offline design, read from the terminal-set
/// cache when one is available.
pub fn hvac_design() -> Result<(ScenarioConfig, OfflineDesign)> {
    let sc = scenarios::hvac()?;
    let design = design_offline(&sc, Some(&TerminalSetCache::from_env()))?;
    Ok((sc, design))
}
