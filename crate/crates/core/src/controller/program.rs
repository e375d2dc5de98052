//! Variable layout and the rows shared by the initial and the reconditioned
//! programs.

use nalgebra::{DMatrix, DVector};

use crate::conic::{LinExpr, ProgramBuilder};
use crate::error::{dim_err, Error, Result};
use crate::linalg::psd_sqrt;
use crate::model::{ConstraintSpec, LinearGaussianSystem, StageCost};
use crate::slp::{NominalTrajectory, Policy, SystemResponse};
use crate::terminal::{TailRow, TerminalIngredients};

/// Indices of `(z, v, PhiX, PhiU)` in the decision vector.
///
/// Diagonal state blocks `PhiX_{k,k} = I` are constants, so only the
/// strictly lower state blocks and the input blocks for `k = 1..N-1` are
/// variables. Blocks are stored row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PolicyLayout {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    z0: usize,
    v0: usize,
    px0: usize,
    pu0: usize,
    total: usize,
}

/// Dense grid of affine expressions.
pub type ExprGrid = Vec<Vec<LinExpr>>;

impl PolicyLayout {
    pub fn new(n: usize, m: usize, horizon: usize) -> Self {
        let z0 = 0;
        let v0 = z0 + (horizon + 1) * n;
        let px0 = v0 + horizon * m;
        let px_blocks = horizon * horizon.saturating_sub(1) / 2;
        let pu0 = px0 + px_blocks * n * n;
        let pu_blocks = horizon.saturating_sub(1) * horizon / 2;
        let total = pu0 + pu_blocks * m * n;
        Self {
            n,
            m,
            horizon,
            z0,
            v0,
            px0,
            pu0,
            total,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.total
    }

    pub fn z(&self, i: usize, r: usize) -> usize {
        self.z0 + i * self.n + r
    }

    pub fn v(&self, i: usize, r: usize) -> usize {
        self.v0 + i * self.m + r
    }

    /// Variable of `PhiX_{k,l}[r,c]`, `l < k`.
    fn px_var(&self, k: usize, l: usize, r: usize, c: usize) -> usize {
        debug_assert!(l >= 1 && l < k && k <= self.horizon);
        let block = (k - 1) * (k - 2) / 2 + (l - 1);
        self.px0 + block * self.n * self.n + r * self.n + c
    }

    /// Variable of `PhiU_{k,l}[r,c]`, `l <= k <= N-1`.
    fn pu_var(&self, k: usize, l: usize, r: usize, c: usize) -> usize {
        debug_assert!(l >= 1 && l <= k && k < self.horizon);
        let block = (k - 1) * k / 2 + (l - 1);
        self.pu0 + block * self.m * self.n + r * self.n + c
    }

    pub fn px(&self, k: usize, l: usize, r: usize, c: usize) -> LinExpr {
        if l == k {
            LinExpr::constant(if r == c { 1.0 } else { 0.0 })
        } else {
            LinExpr::var(self.px_var(k, l, r, c))
        }
    }

    pub fn pu(&self, k: usize, l: usize, r: usize, c: usize) -> LinExpr {
        LinExpr::var(self.pu_var(k, l, r, c))
    }

    pub fn state_block(&self, k: usize, l: usize) -> ExprGrid {
        (0..self.n)
            .map(|r| (0..self.n).map(|c| self.px(k, l, r, c)).collect())
            .collect()
    }

    pub fn input_block(&self, k: usize, l: usize) -> ExprGrid {
        (0..self.m)
            .map(|r| (0..self.n).map(|c| self.pu(k, l, r, c)).collect())
            .collect()
    }

    pub fn z_expr(&self, i: usize) -> Vec<LinExpr> {
        (0..self.n).map(|r| LinExpr::var(self.z(i, r))).collect()
    }

    pub fn v_expr(&self, i: usize) -> Vec<LinExpr> {
        (0..self.m).map(|r| LinExpr::var(self.v(i, r))).collect()
    }

    /// Registers the variables with readable names.
    pub fn declare(&self, pb: &mut ProgramBuilder) {
        assert_eq!(
            pb.num_vars(),
            0,
            "layout must own the whole decision vector"
        );
        for i in 0..=self.horizon {
            for r in 0..self.n {
                pb.add_var(format!("z[{i}][{r}]"));
            }
        }
        for i in 0..self.horizon {
            for r in 0..self.m {
                pb.add_var(format!("v[{i}][{r}]"));
            }
        }
        for k in 2..=self.horizon {
            for l in 1..k {
                for r in 0..self.n {
                    for c in 0..self.n {
                        pb.add_var(format!("phix[{k},{l}][{r},{c}]"));
                    }
                }
            }
        }
        for k in 1..self.horizon {
            for l in 1..=k {
                for r in 0..self.m {
                    for c in 0..self.n {
                        pb.add_var(format!("phiu[{k},{l}][{r},{c}]"));
                    }
                }
            }
        }
        debug_assert_eq!(pb.num_vars(), self.total);
    }

    /// Decision vector of a policy.
    pub fn pack(&self, policy: &Policy) -> Result<Vec<f64>> {
        let resp = &policy.response;
        if resp.n() != self.n || resp.m() != self.m || resp.horizon() != self.horizon {
            return Err(dim_err("policy does not match the layout"));
        }
        let mut x = vec![0.0; self.total];
        for i in 0..=self.horizon {
            for r in 0..self.n {
                x[self.z(i, r)] = policy.nominal.z[i][r];
            }
        }
        for i in 0..self.horizon {
            for r in 0..self.m {
                x[self.v(i, r)] = policy.nominal.v[i][r];
            }
        }
        for k in 2..=self.horizon {
            for l in 1..k {
                let b = resp.phi_x(k, l);
                for r in 0..self.n {
                    for c in 0..self.n {
                        x[self.px_var(k, l, r, c)] = b[(r, c)];
                    }
                }
            }
        }
        for k in 1..self.horizon {
            for l in 1..=k {
                let b = resp.phi_u(k, l);
                for r in 0..self.m {
                    for c in 0..self.n {
                        x[self.pu_var(k, l, r, c)] = b[(r, c)];
                    }
                }
            }
        }
        Ok(x)
    }

    pub fn unpack(&self, x: &[f64], gain: &DMatrix<f64>) -> Result<Policy> {
        if x.len() != self.total {
            return Err(dim_err("decision vector length"));
        }
        let (n, m) = (self.n, self.m);
        let z = (0..=self.horizon)
            .map(|i| DVector::from_fn(n, |r, _| x[self.z(i, r)]))
            .collect();
        let v = (0..self.horizon)
            .map(|i| DVector::from_fn(m, |r, _| x[self.v(i, r)]))
            .collect();
        let phi_x = (1..=self.horizon)
            .map(|k| {
                (1..=k)
                    .map(|l| {
                        if l == k {
                            DMatrix::identity(n, n)
                        } else {
                            DMatrix::from_fn(n, n, |r, c| x[self.px_var(k, l, r, c)])
                        }
                    })
                    .collect()
            })
            .collect();
        let phi_u = (1..self.horizon)
            .map(|k| {
                (1..=k)
                    .map(|l| DMatrix::from_fn(m, n, |r, c| x[self.pu_var(k, l, r, c)]))
                    .collect()
            })
            .collect();
        Policy::new(
            NominalTrajectory { z, v },
            SystemResponse::new(n, m, phi_x, phi_u)?,
            gain.clone(),
        )
    }
}

/// `M * X` for a constant `M` and an expression grid `X`.
pub fn left_mul(mat: &DMatrix<f64>, grid: &ExprGrid) -> ExprGrid {
    let cols = grid.first().map_or(0, |r| r.len());
    (0..mat.nrows())
        .map(|a| {
            (0..cols)
                .map(|c| {
                    let mut e = LinExpr::zero();
                    for (r, row) in grid.iter().enumerate() {
                        let s = mat[(a, r)];
                        if s != 0.0 {
                            e += &(row[c].clone() * s);
                        }
                    }
                    e
                })
                .collect()
        })
        .collect()
}

/// `X * M` for a constant `M`.
pub fn right_mul(grid: &ExprGrid, mat: &DMatrix<f64>) -> ExprGrid {
    grid.iter()
        .map(|row| {
            (0..mat.ncols())
                .map(|b| {
                    let mut e = LinExpr::zero();
                    for (c, x) in row.iter().enumerate() {
                        let s = mat[(c, b)];
                        if s != 0.0 {
                            e += &(x.clone() * s);
                        }
                    }
                    e
                })
                .collect()
        })
        .collect()
}

fn mat_vec(mat: &DMatrix<f64>, v: &[LinExpr]) -> Vec<LinExpr> {
    (0..mat.nrows())
        .map(|a| {
            let mut e = LinExpr::zero();
            for (r, x) in v.iter().enumerate() {
                let s = mat[(a, r)];
                if s != 0.0 {
                    e += &(x.clone() * s);
                }
            }
            e
        })
        .collect()
}

fn dot(coeffs: impl Iterator<Item = f64>, v: &[LinExpr]) -> LinExpr {
    let mut e = LinExpr::zero();
    for (s, x) in coeffs.zip(v) {
        if s != 0.0 {
            e += &(x.clone() * s);
        }
    }
    e
}

/// Equalities `z_0 = x`, nominal dynamics and the response recursion.
pub fn add_dynamics(
    pb: &mut ProgramBuilder,
    layout: &PolicyLayout,
    sys: &LinearGaussianSystem,
    x: &DVector<f64>,
) -> Result<()> {
    let (n, big_n) = (layout.n, layout.horizon);
    if x.len() != n {
        return Err(dim_err("initial state length"));
    }
    for r in 0..n {
        pb.add_eq(
            LinExpr::var(layout.z(0, r)) - LinExpr::constant(x[r]),
            format!("z0[{r}]"),
        );
    }
    for i in 0..big_n {
        let next = mat_vec(sys.a(), &layout.z_expr(i));
        let inp = mat_vec(sys.b(), &layout.v_expr(i));
        for r in 0..n {
            pb.add_eq(
                LinExpr::var(layout.z(i + 1, r)) - next[r].clone() - inp[r].clone(),
                format!("dyn[{i}][{r}]"),
            );
        }
    }
    for k in 1..big_n {
        for l in 1..=k {
            let ax = left_mul(sys.a(), &layout.state_block(k, l));
            let bu = left_mul(sys.b(), &layout.input_block(k, l));
            for r in 0..n {
                for c in 0..n {
                    pb.add_eq(
                        layout.px(k + 1, l, r, c) - ax[r][c].clone() - bu[r][c].clone(),
                        format!("slp[{k},{l}][{r},{c}]"),
                    );
                }
            }
        }
    }
    Ok(())
}

/// Expected cost: stage means and covariance traces over the horizon plus
/// the terminal cost of `x_N`.
pub fn add_objective(
    pb: &mut ProgramBuilder,
    layout: &PolicyLayout,
    sys: &LinearGaussianSystem,
    cost: &StageCost,
    ingredients: &TerminalIngredients,
) -> Result<()> {
    let big_n = layout.horizon;
    let qh = psd_sqrt(cost.q_mat())?;
    let rh = psd_sqrt(cost.r_mat())?;
    let ph = psd_sqrt(&ingredients.p)?;
    let sw = sys.sigma_w_sqrt();
    let squares = |pb: &mut ProgramBuilder, grid: ExprGrid| {
        for row in grid {
            for e in row {
                pb.add_square(e);
            }
        }
    };
    for i in 0..big_n {
        for e in mat_vec(&qh, &layout.z_expr(i)) {
            pb.add_square(e);
        }
        for e in mat_vec(&rh, &layout.v_expr(i)) {
            pb.add_square(e);
        }
        pb.add_linear(&dot(cost.q().iter().copied(), &layout.z_expr(i)));
        pb.add_linear(&dot(cost.r().iter().copied(), &layout.v_expr(i)));
        for l in 1..=i {
            squares(pb, right_mul(&left_mul(&qh, &layout.state_block(i, l)), sw));
            squares(pb, right_mul(&left_mul(&rh, &layout.input_block(i, l)), sw));
        }
    }
    for e in mat_vec(&ph, &layout.z_expr(big_n)) {
        pb.add_square(e);
    }
    pb.add_linear(&dot(ingredients.p_f.iter().copied(), &layout.z_expr(big_n)));
    for l in 1..=big_n {
        squares(
            pb,
            right_mul(&left_mul(&ph, &layout.state_block(big_n, l)), sw),
        );
    }
    Ok(())
}

/// `G_j z_i + H_j v_i` as an expression.
pub fn constraint_mean(
    layout: &PolicyLayout,
    constraints: &ConstraintSpec,
    i: usize,
    j: usize,
) -> LinExpr {
    dot(constraints.g().row(j).iter().copied(), &layout.z_expr(i))
        + dot(constraints.h().row(j).iter().copied(), &layout.v_expr(i))
}

/// `G_j PhiX_{i,l} + H_j PhiU_{i,l}` for `l = 1..=i`, each an n-row.
pub fn constraint_blocks(
    layout: &PolicyLayout,
    constraints: &ConstraintSpec,
    i: usize,
    j: usize,
) -> Vec<Vec<LinExpr>> {
    let g = constraints.g().rows(j, 1).into_owned();
    let h = constraints.h().rows(j, 1).into_owned();
    (1..=i)
        .map(|l| {
            let mut row = left_mul(&g, &layout.state_block(i, l)).remove(0);
            if i < layout.horizon {
                let hu = left_mul(&h, &layout.input_block(i, l)).remove(0);
                for (a, b) in row.iter_mut().zip(&hu) {
                    *a += b;
                }
            }
            row
        })
        .collect()
}

/// Entries of `stack_l Sigma_w^(1/2) (PhiX_{i,l}^T G_j^T + PhiU_{i,l}^T H_j^T)`.
pub fn constraint_spread(
    layout: &PolicyLayout,
    sys: &LinearGaussianSystem,
    constraints: &ConstraintSpec,
    i: usize,
    j: usize,
) -> Vec<LinExpr> {
    constraint_blocks(layout, constraints, i, j)
        .iter()
        .flat_map(|row| mat_vec(sys.sigma_w_sqrt(), row))
        .collect()
}

/// Chance-constraint row at horizon step `i`:
/// `G_j z_i + H_j v_i + scale * ||spread|| <= b_j`. Step 0 and a zero scale
/// give a plain half-space.
pub fn soc_row_horizon(
    pb: &mut ProgramBuilder,
    layout: &PolicyLayout,
    sys: &LinearGaussianSystem,
    constraints: &ConstraintSpec,
    i: usize,
    j: usize,
    scale: f64,
) -> Result<()> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::Domain(format!(
            "cone scale must be finite and nonnegative, got {scale}"
        )));
    }
    if i >= layout.horizon || j >= constraints.count() {
        return Err(Error::OutOfRange {
            index: i,
            limit: layout.horizon - 1,
        });
    }
    let slack = LinExpr::constant(constraints.b()[j]) - constraint_mean(layout, constraints, i, j);
    if i == 0 || scale == 0.0 {
        pb.add_nonneg(slack, format!("cc[{i}][{j}]"));
        return Ok(());
    }
    let spread = constraint_spread(layout, sys, constraints, i, j)
        .into_iter()
        .map(|e| e * scale)
        .collect();
    pb.add_soc(slack, spread, format!("cc[{i}][{j}]"));
    Ok(())
}

/// `PhiX_{N,l}^T g` for `l = 1..=N`, stacked.
pub fn tail_projection(layout: &PolicyLayout, g: &DVector<f64>) -> Vec<LinExpr> {
    let gt = g.transpose().into_owned();
    let gm = DMatrix::from_row_slice(1, g.len(), gt.as_slice());
    (1..=layout.horizon)
        .flat_map(|l| left_mul(&gm, &layout.state_block(layout.horizon, l)).remove(0))
        .collect()
}

/// `g^T z_N`.
pub fn tail_mean(layout: &PolicyLayout, row: &TailRow) -> LinExpr {
    dot(row.linear.iter().copied(), &layout.z_expr(layout.horizon))
}

/// Tail row on `(z_N, PhiX_N)` with the given scale in place of the row's own.
pub fn add_tail_row(
    pb: &mut ProgramBuilder,
    layout: &PolicyLayout,
    row: &TailRow,
    scale: f64,
    label: String,
) -> Result<()> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::Domain(format!(
            "cone scale must be finite and nonnegative, got {scale}"
        )));
    }
    if row.horizon != layout.horizon || row.n() != layout.n {
        return Err(dim_err("tail row built for another horizon or state size"));
    }
    let slack = LinExpr::constant(row.rhs) - tail_mean(layout, row);
    if scale == 0.0 {
        pb.add_nonneg(slack, label);
        return Ok(());
    }
    let proj = tail_projection(layout, &row.linear);
    let mut s: Vec<LinExpr> = proj
        .chunks(layout.n)
        .flat_map(|y| mat_vec(&row.sigma_w_sqrt, y))
        .map(|e| e * scale)
        .collect();
    s.extend(
        row.augmentation
            .iter()
            .filter(|&&a| a != 0.0)
            .map(|&a| LinExpr::constant(scale * a)),
    );
    pb.add_soc(slack, s, label);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts_match_complexity() {
        let l = PolicyLayout::new(3, 1, 6);
        // z: 21, v: 6, strictly lower state blocks: 15 * 9, input blocks: 15 * 3
        assert_eq!(l.num_vars(), 21 + 6 + 135 + 45);
    }

    #[test]
    fn pack_unpack_round_trip() {
        let sys = LinearGaussianSystem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 0.9]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let phi_u = (1..3)
            .map(|k| {
                (0..k)
                    .map(|l| DMatrix::from_element(1, 2, 0.1 * (k + l) as f64))
                    .collect()
            })
            .collect();
        let resp = SystemResponse::from_feedback(&sys, 3, phi_u).unwrap();
        let nominal = NominalTrajectory {
            z: (0..4).map(|i| DVector::from_element(2, i as f64)).collect(),
            v: (0..3)
                .map(|i| DVector::from_element(1, -(i as f64)))
                .collect(),
        };
        let gain = DMatrix::zeros(1, 2);
        let pol = Policy::new(nominal, resp, gain.clone()).unwrap();
        let layout = PolicyLayout::new(2, 1, 3);
        let x = layout.pack(&pol).unwrap();
        assert_eq!(layout.unpack(&x, &gain).unwrap(), pol);
    }
}
