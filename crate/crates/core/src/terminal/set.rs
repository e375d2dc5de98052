use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lmi::{lmi_containment_mu, lmi_containment_nu, ImplicationCertificate, LmiData};
use super::tail::{tail_row, TailRow, TailVariant};
use super::TerminalIngredients;
use crate::error::{Error, Result};
use crate::matrix_serde;
use crate::model::{ConstraintSpec, LinearGaussianSystem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchCaps {
    pub nu_max: usize,
    pub mu_max: usize,
}

impl Default for SearchCaps {
    fn default() -> Self {
        Self {
            nu_max: 200,
            mu_max: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Certificates {
    pub nu_step: Vec<ImplicationCertificate>,
    pub mu_step: Vec<ImplicationCertificate>,
}

/// Exact tail rows `i = 0..=mu` for every constraint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerminalSet {
    pub horizon: usize,
    pub mu: usize,
    pub nu: usize,
    #[serde(with = "matrix_serde::matrix")]
    pub gain: DMatrix<f64>,
    pub lmi_tolerance: f64,
    pub rows: Vec<TailRow>,
    pub certificates: Certificates,
}

impl TerminalSet {
    /// Rows at tail step `i`.
    pub fn rows_at(&self, i: usize) -> impl Iterator<Item = &TailRow> {
        self.rows.iter().filter(move |r| r.i == i)
    }

    /// Membership in `S_i` (rows `0..=i`), `i <= mu`.
    pub fn contains_up_to(&self, i: usize, z: &DVector<f64>, psi: &DVector<f64>, tol: f64) -> bool {
        self.rows
            .iter()
            .filter(|r| r.i <= i)
            .all(|r| r.contains(z, psi, tol))
    }

    pub fn contains(&self, z: &DVector<f64>, psi: &DVector<f64>, tol: f64) -> bool {
        self.contains_up_to(self.mu, z, psi, tol)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Finds the smallest `nu` whose stationary rows imply the next one, then
/// the smallest `mu` whose exact rows imply the stationary rows
/// `mu+1 ..= mu+nu+1`.
pub fn algorithm1_terminal_set(
    sys: &LinearGaussianSystem,
    ingredients: &TerminalIngredients,
    constraints: &ConstraintSpec,
    horizon: usize,
    caps: SearchCaps,
    lmi_tol: f64,
) -> Result<TerminalSet> {
    let margins = ingredients.stationary_margins(constraints);
    if margins.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::DesignInfeasible(
            "stationary margin must be positive before the terminal-set search".into(),
        ));
    }
    let lmi = LmiData::new(ingredients, constraints, sys.sigma_w(), horizon, lmi_tol);

    let mut nu = 0;
    let nu_certs = loop {
        let out = lmi_containment_nu(&lmi, nu)?;
        log::debug!("nu = {nu}: certified = {}", out.certified);
        if out.certified {
            break out.certificates;
        }
        if nu >= caps.nu_max {
            return Err(Error::NotTerminated {
                stage: "nu search",
                cap: caps.nu_max,
            });
        }
        nu += 1;
    };

    let mut mu = 0;
    let mu_certs = loop {
        let out = lmi_containment_mu(&lmi, mu, nu)?;
        log::debug!("mu = {mu}: certified = {}", out.certified);
        if out.certified {
            break out.certificates;
        }
        if mu >= caps.mu_max {
            return Err(Error::NotTerminated {
                stage: "mu search",
                cap: caps.mu_max,
            });
        }
        mu += 1;
    };
    log::info!("terminal set: nu = {nu}, mu = {mu}");

    let mut rows = Vec::with_capacity((mu + 1) * constraints.count());
    for i in 0..=mu {
        for j in 0..constraints.count() {
            rows.push(tail_row(
                ingredients,
                constraints,
                horizon,
                j,
                i,
                TailVariant::Exact,
            )?);
        }
    }
    Ok(TerminalSet {
        horizon,
        mu,
        nu,
        gain: ingredients.k.clone(),
        lmi_tolerance: lmi_tol,
        rows,
        certificates: Certificates {
            nu_step: nu_certs,
            mu_step: mu_certs,
        },
    })
}
