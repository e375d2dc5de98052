//! Bundled scenarios.

use crate::error::Result;
use crate::model::{parse_scenario, ScenarioConfig, ScenarioFormat};

/// Three-zone building temperature problem.
pub const HVAC_TOML: &str = include_str!("../scenarios/hvac.toml");

pub fn hvac() -> Result<ScenarioConfig> {
    parse_scenario(HVAC_TOML, ScenarioFormat::Toml)
}
