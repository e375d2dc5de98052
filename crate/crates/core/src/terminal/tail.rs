use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::TerminalIngredients;
use crate::error::{dim_err, Result};
use crate::linalg::{kron, psd_sqrt};
use crate::matrix_serde;
use crate::model::ConstraintSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailVariant {
    /// Constant term from `Sigma_i`.
    Exact,
    /// Constant term from `Sigma_inf`.
    Tightened,
    /// No constant term.
    Relaxed,
}

/// Tail chance constraint at step `N + i` for constraint `j`, as a cone row
/// on `(z_N, psi)`:
///
/// `g^T z + scale * ||[(g^T kron Sigma_N^(1/2)) psi ; aug]|| <= rhs`
/// with `g = (G_{K,j} A_K^i)^T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub i: usize,
    pub j: usize,
    pub variant: TailVariant,
    pub horizon: usize,
    #[serde(with = "matrix_serde::vector")]
    pub linear: DVector<f64>,
    #[serde(with = "matrix_serde::matrix")]
    pub sigma_w_sqrt: DMatrix<f64>,
    #[serde(with = "matrix_serde::vector")]
    pub augmentation: DVector<f64>,
    pub rhs: f64,
    pub scale: f64,
}

pub fn tail_row(
    ingredients: &TerminalIngredients,
    constraints: &ConstraintSpec,
    horizon: usize,
    j: usize,
    i: usize,
    variant: TailVariant,
) -> Result<TailRow> {
    if j >= constraints.count() {
        return Err(dim_err(format!("constraint index {j} out of range")));
    }
    let n = ingredients.n();
    let g_kj = ingredients.g_k.row(j).transpose();
    let augmentation = match variant {
        TailVariant::Exact => psd_sqrt(&ingredients.cov.get(i))? * &g_kj,
        TailVariant::Tightened => psd_sqrt(&ingredients.cov.sigma_x_inf)? * &g_kj,
        TailVariant::Relaxed => DVector::zeros(n),
    };
    Ok(TailRow {
        i,
        j,
        variant,
        horizon,
        linear: ingredients.tail_linear(j, i),
        sigma_w_sqrt: ingredients.sigma_w_sqrt.clone(),
        augmentation,
        rhs: constraints.b()[j],
        scale: constraints.p_tilde()[j].sqrt(),
    })
}

impl TailRow {
    pub fn n(&self) -> usize {
        self.linear.len()
    }

    /// `g^T kron (I_N kron Sigma_w^(1/2))`, the matrix acting on `psi`.
    pub fn soc_factor(&self) -> DMatrix<f64> {
        let big = kron(
            &DMatrix::identity(self.horizon, self.horizon),
            &self.sigma_w_sqrt,
        );
        kron(
            &DMatrix::from_row_slice(1, self.n(), self.linear.as_slice()),
            &big,
        )
    }

    /// `Sigma_N^(1/2) PhiX_N^T g`, stacked over the N blocks.
    pub fn norm_part(&self, psi: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let nn = self.horizon * n;
        // PhiX_N^T g = sum_c g_c * column c of PhiX_N^T.
        let mut y = DVector::zeros(nn);
        for c in 0..n {
            y.axpy(self.linear[c], &psi.rows(c * nn, nn), 1.0);
        }
        let mut out = DVector::zeros(nn);
        for l in 0..self.horizon {
            out.rows_mut(l * n, n)
                .copy_from(&(&self.sigma_w_sqrt * y.rows(l * n, n)));
        }
        out
    }

    /// `rhs - g^T z - scale * ||[norm_part; aug]||`; nonnegative iff satisfied.
    pub fn slack(&self, z: &DVector<f64>, psi: &DVector<f64>) -> f64 {
        let v = self.norm_part(psi);
        let sq = v.norm_squared() + self.augmentation.norm_squared();
        self.rhs - self.linear.dot(z) - self.scale * sq.sqrt()
    }

    pub fn contains(&self, z: &DVector<f64>, psi: &DVector<f64>, tol: f64) -> bool {
        self.slack(z, psi) >= -tol
    }
}
