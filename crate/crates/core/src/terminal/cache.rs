use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{SearchCaps, TerminalSet};
use crate::error::Result;
use crate::matrix_serde::to_rows;
use crate::model::{ConstraintSpec, LinearGaussianSystem};

pub const CACHE_DIR_ENV: &str = "SLP_SMPC_CACHE_DIR";

#[derive(Serialize)]
struct KeyData {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    sigma_w: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    bound: Vec<f64>,
    p: Vec<f64>,
    l: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    d: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    horizon: usize,
    lmi_tol: f64,
    caps: SearchCaps,
}

/// Hex SHA-256 over the inputs that determine the terminal set.
pub fn cache_key(
    sys: &LinearGaussianSystem,
    constraints: &ConstraintSpec,
    k: &DMatrix<f64>,
    horizon: usize,
    lmi_tol: f64,
    caps: SearchCaps,
) -> String {
    let data = KeyData {
        a: to_rows(sys.a()),
        b: to_rows(sys.b()),
        sigma_w: to_rows(sys.sigma_w()),
        g: to_rows(constraints.g()),
        h: to_rows(constraints.h()),
        bound: constraints.b().as_slice().to_vec(),
        p: constraints.p().as_slice().to_vec(),
        l: to_rows(constraints.l()),
        c: to_rows(constraints.c()),
        d: to_rows(constraints.d()),
        k: to_rows(k),
        horizon,
        lmi_tol,
        caps,
    };
    let bytes = serde_json::to_vec(&data).expect("plain data serialises");
    hex::encode(Sha256::digest(&bytes))
}

/// On-disk terminal-set store, one JSON file per key.
#[derive(Clone, Debug)]
pub struct TerminalSetCache {
    dir: PathBuf,
}

impl TerminalSetCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// `$SLP_SMPC_CACHE_DIR`, else `.slp-smpc-cache` in the working directory.
    pub fn from_env() -> Self {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(d) => Self::new(d),
            None => Self::new(".slp-smpc-cache"),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("terminal_set_{key}.json"))
    }

    pub fn load(&self, key: &str) -> Result<Option<TerminalSet>> {
        let path = self.path_for(key);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(path)?;
        match TerminalSet::from_json(&text) {
            Ok(s) => Ok(Some(s)),
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {key}: {e}");
                Ok(None)
            }
        }
    }

    pub fn store(&self, key: &str, set: &TerminalSet) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.dir)?;
        let path = self.path_for(key);
        let tmp = path.with_extension(format!("json.{}.tmp", std::process::id()));
        std::fs::write(&tmp, set.to_json()?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }
}
