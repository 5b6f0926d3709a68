//! Backward solver for the auxiliary value `V(t, s, x)` on the triangle
//! `0 <= t <= s <= T`.
//!
//! For every slice `t` the linear equation
//!
//! ```text
//! d_s V + sigma^2/2 V_xx + b~ V_x + r~(s - t) + lambda delta(s - t) H(pi) = 0,
//! V(t, T, x) = F(t, x, m_T)
//! ```
//!
//! is stepped backward with implicit Euler, first-order upwind drift and
//! homogeneous Neumann boundaries. The level-`s` operator does not depend on
//! `t`, so each level is factored once and shared by all slices.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{averaged_reward_dtau_row, averaged_reward_row, check_shapes, coefficient_fields, CoefficientFields};
use crate::gibbs::RelaxedPolicyField;
use crate::grid::{gradient, GridSpec, TimeSpaceField, TriangularField};
use crate::linalg::TridiagLu;
use crate::measure_flow::MeasureFlow;
use crate::model::ModelSpec;

/// `V` on the whole triangle together with the diagonal `J(t, x) = V(t, t, x)`
/// and its spatial gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxValueField {
    pub values: TriangularField,
    pub diagonal: TimeSpaceField,
    pub diagonal_gradient: TimeSpaceField,
}

impl AuxValueField {
    pub fn value(&self, j_t: usize, j_s: usize) -> &[f64] {
        self.values.row(j_t, j_s)
    }
}

/// Tridiagonal entries of `I - ds L_s` for one level.
pub(crate) fn level_matrix(drift: &[f64], sigma: &[f64], dx: f64, ds: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let nx = drift.len();
    let mut lower = vec![0.0; nx];
    let mut diag = vec![0.0; nx];
    let mut upper = vec![0.0; nx];
    let dx2 = dx * dx;
    for i in 0..nx {
        let a = 0.5 * sigma[i] * sigma[i] / dx2;
        if i == 0 {
            diag[i] = 1.0 + ds * 2.0 * a;
            upper[i] = -ds * 2.0 * a;
        } else if i == nx - 1 {
            diag[i] = 1.0 + ds * 2.0 * a;
            lower[i] = -ds * 2.0 * a;
        } else {
            let bp = drift[i].max(0.0) / dx;
            let bm = (-drift[i]).max(0.0) / dx;
            diag[i] = 1.0 + ds * (2.0 * a + bp + bm);
            upper[i] = -ds * (a + bp);
            lower[i] = -ds * (a + bm);
        }
    }
    (lower, diag, upper)
}

/// Factored level operators for a fixed `(policy, flow)` pair.
pub(crate) struct LevelOperators {
    pub coeffs: CoefficientFields,
    lus: Vec<TridiagLu>,
}

impl LevelOperators {
    pub(crate) fn build(
        model: &ModelSpec,
        grid: &GridSpec,
        policy: &RelaxedPolicyField,
        flow: &MeasureFlow,
    ) -> Result<Self> {
        model.check_grid(grid)?;
        check_shapes(grid, policy, flow)?;
        let coeffs = coefficient_fields(model, grid, policy, flow)?;
        let lus: Result<Vec<TridiagLu>> = (0..grid.n_time)
            .into_par_iter()
            .map(|s| {
                let (l, d, u) = level_matrix(coeffs.drift.row(s), coeffs.sigma.row(s), grid.dx(), grid.dt);
                TridiagLu::factor(&l, &d, &u).map_err(|e| Error::Numeric(format!("value level {s}: {e}")))
            })
            .collect();
        Ok(Self { coeffs, lus: lus? })
    }
}

fn terminal_row(
    model: &ModelSpec,
    grid: &GridSpec,
    flow: &MeasureFlow,
    t: f64,
    derivative: bool,
    out: &mut [f64],
) -> Result<()> {
    let stats = flow.stats(grid.n_time);
    for (o, &x) in out.iter_mut().zip(&grid.space.nodes) {
        let v = if derivative {
            model.terminal_reward_dt(t, x, &stats)
        } else {
            model.terminal_reward(t, x, &stats)
        };
        if !v.is_finite() {
            return Err(Error::ModelEvaluation {
                what: if derivative { "terminal_reward_dt" } else { "terminal_reward" },
                point: format!("(t={t}, x={x})"),
            });
        }
        *o = v;
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum Equation {
    Value,
    TimeDerivative,
}

#[allow(clippy::too_many_arguments)]
fn solve_slab(
    model: &ModelSpec,
    grid: &GridSpec,
    policy: &RelaxedPolicyField,
    flow: &MeasureFlow,
    ops: &LevelOperators,
    lambda: f64,
    j_t: usize,
    eq: Equation,
    slab: &mut [f64],
) -> Result<()> {
    let nx = grid.nx();
    let n = grid.n_time;
    let t = grid.times[j_t];
    let last = (n - j_t) * nx;
    terminal_row(model, grid, flow, t, eq == Equation::TimeDerivative, &mut slab[last..last + nx])?;
    let mut src = vec![0.0; nx];
    for s in (j_t..n).rev() {
        let tau = grid.times[s] - t;
        let ent = ops.coeffs.entropy.row(s);
        match eq {
            Equation::Value => {
                averaged_reward_row(model, grid, policy, flow, s, tau, &mut src)?;
                let w = lambda * model.discount(tau);
                if w != 0.0 {
                    src.iter_mut().zip(ent).for_each(|(v, h)| *v += w * h);
                }
            }
            Equation::TimeDerivative => {
                averaged_reward_dtau_row(model, grid, policy, flow, s, tau, &mut src)?;
                let w = lambda * model.discount_derivative(tau);
                src.iter_mut().zip(ent).for_each(|(v, h)| *v = -*v - w * h);
            }
        }
        let off = (s - j_t) * nx;
        let (head, tail) = slab.split_at_mut(off + nx);
        let cur = &mut head[off..];
        for ((c, next), q) in cur.iter_mut().zip(&tail[..nx]).zip(&src) {
            *c = next + grid.dt * q;
        }
        ops.lus[s].solve_in_place(cur);
        if let Some(v) = cur.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value {v} at slice {j_t}, level {s}")));
        }
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Parameter(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    Ok(())
}

/// Values `V(t_{j_t}, s, .)` for `s = t_{j_t}, ..., T`, one row per level.
pub fn solve_slice(
    model: &ModelSpec,
    grid: &GridSpec,
    policy: &RelaxedPolicyField,
    flow: &MeasureFlow,
    lambda: f64,
    j_t: usize,
) -> Result<Vec<Vec<f64>>> {
    check_lambda(lambda)?;
    if j_t > grid.n_time {
        return Err(Error::Index(format!("slice {j_t} outside 0..={}", grid.n_time)));
    }
    let ops = LevelOperators::build(model, grid, policy, flow)?;
    let nx = grid.nx();
    let mut slab = vec![0.0; (grid.n_time - j_t + 1) * nx];
    solve_slab(model, grid, policy, flow, &ops, lambda, j_t, Equation::Value, &mut slab)?;
    Ok(slab.chunks(nx).map(<[f64]>::to_vec).collect())
}

fn solve_triangle(
    model: &ModelSpec,
    grid: &GridSpec,
    policy: &RelaxedPolicyField,
    flow: &MeasureFlow,
    lambda: f64,
    eq: Equation,
) -> Result<TriangularField> {
    check_lambda(lambda)?;
    let ops = LevelOperators::build(model, grid, policy, flow)?;
    let mut field = TriangularField::for_grid(grid);
    field
        .slabs_mut()
        .into_par_iter()
        .enumerate()
        .try_for_each(|(j_t, slab)| solve_slab(model, grid, policy, flow, &ops, lambda, j_t, eq, slab))?;
    Ok(field)
}

/// Solves every slice and extracts the diagonal and its gradient.
pub fn solve_all_slices(
    model: &ModelSpec,
    grid: &GridSpec,
    policy: &RelaxedPolicyField,
    flow: &MeasureFlow,
    lambda: f64,
) -> Result<AuxValueField> {
    let values = solve_triangle(model, grid, policy, flow, lambda, Equation::Value)?;
    let diagonal = TimeSpaceField::from_rows((0..=grid.n_time).map(|j| values.row(j, j).to_vec()).collect());
    let diagonal_gradient = TimeSpaceField::from_rows(diagonal.rows().map(|r| gradient(r, grid.dx())).collect());
    Ok(AuxValueField {
        values,
        diagonal,
        diagonal_gradient,
    })
}

/// `W = d_t V` from the differentiated equation with source
/// `-d_tau r~ - lambda delta' H` and terminal value `d_t F`.
pub fn solve_t_derivative(
    model: &ModelSpec,
    grid: &GridSpec,
    policy: &RelaxedPolicyField,
    flow: &MeasureFlow,
    lambda: f64,
) -> Result<TriangularField> {
    solve_triangle(model, grid, policy, flow, lambda, Equation::TimeDerivative)
}
