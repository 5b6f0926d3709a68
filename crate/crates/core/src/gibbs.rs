//! Gibbs best response, Shannon entropy and the soft-max log-partition.
//!
//! For an exponent `g(a) = b(t,x,m,a) p + r(0,x,m,a)` the Gibbs density is
//! `exp(g/lambda) / Z` and the log-partition is `lambda ln Z`, with `Z`
//! computed by the same trapezoid rule on `U` that normalizes the density.
//! Everything goes through a max-shift so exponents of size `|p|/lambda`
//! never overflow.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Axis, GridSpec, TimeSpaceField};
use crate::measure_flow::MeasureFlow;
use crate::model::{MeasureStats, ModelSpec};

/// Smallest value a Gibbs density is allowed to take.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// A density on the action grid, w.r.t. Lebesgue measure on `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDensity {
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ActionDensity {
    pub fn uniform(axis: &Axis) -> Self {
        let leb = axis.hi - axis.lo;
        Self {
            values: vec![1.0 / leb; axis.len()],
            weights: axis.weights.clone(),
        }
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }

    /// `sum_k f(a_k) pi_k w_k`.
    pub fn expect(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.values
            .iter()
            .zip(&self.weights)
            .enumerate()
            .map(|(k, (v, w))| f(k) * v * w)
            .sum()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// Normalized Gibbs density of `exponent / lambda` and the log-partition
/// `lambda ln sum_k exp(exponent_k / lambda) w_k`, written into `out`.
pub fn gibbs_from_exponent_into(exponent: &[f64], weights: &[f64], lambda: f64, out: &mut [f64]) -> Result<f64> {
    check_lambda(lambda)?;
    let max = exponent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::ModelEvaluation {
            what: "gibbs exponent",
            point: format!("max exponent {max}"),
        });
    }
    let mut z = 0.0;
    for ((o, g), w) in out.iter_mut().zip(exponent).zip(weights) {
        if !g.is_finite() {
            return Err(Error::ModelEvaluation {
                what: "gibbs exponent",
                point: format!("value {g}"),
            });
        }
        let e = ((g - max) / lambda).exp();
        *o = e;
        z += e * w;
    }
    for o in out.iter_mut() {
        *o = (*o / z).max(DENSITY_FLOOR);
    }
    Ok(max + lambda * z.ln())
}

pub fn gibbs_from_exponent(exponent: &[f64], weights: &[f64], lambda: f64) -> Result<(Vec<f64>, f64)> {
    let mut out = vec![0.0; exponent.len()];
    let lp = gibbs_from_exponent_into(exponent, weights, lambda, &mut out)?;
    Ok((out, lp))
}

/// `b(t,x,m,a_k) p + r(0,x,m,a_k)` on the action nodes.
pub fn exponent_into(
    model: &ModelSpec,
    actions: &[f64],
    t: f64,
    x: f64,
    grad_p: f64,
    stats: &MeasureStats<'_>,
    out: &mut [f64],
) -> Result<()> {
    if !grad_p.is_finite() {
        return Err(Error::Parameter(format!("gradient {grad_p} is not finite at (t={t}, x={x})")));
    }
    for (o, &a) in out.iter_mut().zip(actions) {
        let g = model.drift(t, x, stats, a) * grad_p + model.running_reward(0.0, x, stats, a);
        if !g.is_finite() {
            return Err(Error::ModelEvaluation {
                what: "gibbs exponent",
                point: format!("(t={t}, x={x}, a={a}, p={grad_p})"),
            });
        }
        *o = g;
    }
    Ok(())
}

/// The regularized best response at one `(t, x)`.
pub fn gibbs_policy(
    t: f64,
    x: f64,
    grad_p: f64,
    stats: &MeasureStats<'_>,
    lambda: f64,
    model: &ModelSpec,
    grid: &GridSpec,
) -> Result<ActionDensity> {
    check_lambda(lambda)?;
    let mut g = vec![0.0; grid.na()];
    exponent_into(model, &grid.action.nodes, t, x, grad_p, stats, &mut g)?;
    let (values, _) = gibbs_from_exponent(&g, &grid.action.weights, lambda)?;
    Ok(ActionDensity {
        values,
        weights: grid.action.weights.clone(),
    })
}

/// Soft-max `H(t,x,p,m) = lambda ln int_U exp(g/lambda) da`.
pub fn log_partition(
    t: f64,
    x: f64,
    grad_p: f64,
    stats: &MeasureStats<'_>,
    lambda: f64,
    model: &ModelSpec,
    grid: &GridSpec,
) -> Result<f64> {
    check_lambda(lambda)?;
    let mut g = vec![0.0; grid.na()];
    exponent_into(model, &grid.action.nodes, t, x, grad_p, stats, &mut g)?;
    let mut scratch = vec![0.0; g.len()];
    gibbs_from_exponent_into(&g, &grid.action.weights, lambda, &mut scratch)
}

/// `-sum_k pi_k ln(pi_k) w_k` on raw slices.
pub fn entropy_of(values: &[f64], weights: &[f64]) -> Result<f64> {
    let mut h = 0.0;
    for (k, (v, w)) in values.iter().zip(weights).enumerate() {
        if !(*v > 0.0) {
            return Err(Error::Domain(format!("density value {v} at action node {k} is not positive")));
        }
        h -= v * v.max(DENSITY_FLOOR).ln() * w;
    }
    Ok(h)
}

/// Shannon entropy `-int pi ln pi` of an action density.
pub fn entropy(pi: &ActionDensity) -> Result<f64> {
    entropy_of(&pi.values, &pi.weights)
}

/// An action density at every (time node, space node).
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedPolicyField {
    n_time: usize,
    nx: usize,
    na: usize,
    weights: Vec<f64>,
    data: Vec<f64>,
}

impl RelaxedPolicyField {
    pub fn uniform(grid: &GridSpec) -> Self {
        let leb = grid.action.hi - grid.action.lo;
        Self {
            n_time: grid.n_time,
            nx: grid.nx(),
            na: grid.na(),
            weights: grid.action.weights.clone(),
            data: vec![1.0 / leb; (grid.n_time + 1) * grid.nx() * grid.na()],
        }
    }

    /// Fills every node from `f(j, i, out)`.
    pub fn from_fn(grid: &GridSpec, f: impl Fn(usize, usize, &mut [f64]) + Sync) -> Self {
        let mut field = Self::uniform(grid);
        let (nx, na) = (field.nx, field.na);
        field
            .data
            .par_chunks_mut(nx * na)
            .enumerate()
            .for_each(|(j, row)| {
                for (i, cell) in row.chunks_mut(na).enumerate() {
                    f(j, i, cell);
                }
            });
        field
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn na(&self) -> usize {
        self.na
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn density(&self, j: usize, i: usize) -> &[f64] {
        let start = (j * self.nx + i) * self.na;
        &self.data[start..start + self.na]
    }

    pub fn density_mut(&mut self, j: usize, i: usize) -> &mut [f64] {
        let start = (j * self.nx + i) * self.na;
        &mut self.data[start..start + self.na]
    }

    /// All action densities of time row `j`, concatenated.
    pub fn time_row(&self, j: usize) -> &[f64] {
        &self.data[j * self.nx * self.na..(j + 1) * self.nx * self.na]
    }

    pub fn time_row_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.nx * self.na..(j + 1) * self.nx * self.na]
    }

    pub fn action_density(&self, j: usize, i: usize) -> ActionDensity {
        ActionDensity {
            values: self.density(j, i).to_vec(),
            weights: self.weights.clone(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n_time == other.n_time && self.nx == other.nx && self.na == other.na
    }

    /// `sum_k f(a_k) pi(j, i, a_k) w_k`.
    pub fn average(&self, j: usize, i: usize, f: impl Fn(usize) -> f64) -> f64 {
        self.density(j, i)
            .iter()
            .zip(&self.weights)
            .enumerate()
            .map(|(k, (v, w))| f(k) * v * w)
            .sum()
    }

    /// Entropy at every node.
    pub fn entropy_field(&self) -> Result<TimeSpaceField> {
        let rows: Result<Vec<Vec<f64>>> = (0..=self.n_time)
            .into_par_iter()
            .map(|j| (0..self.nx).map(|i| entropy_of(self.density(j, i), &self.weights)).collect())
            .collect();
        Ok(TimeSpaceField::from_rows(rows?))
    }

    /// Largest deviation of `sum pi w` from one over all nodes.
    pub fn max_normalization_error(&self) -> f64 {
        self.data
            .chunks(self.na)
            .map(|d| (d.iter().zip(&self.weights).map(|(v, w)| v * w).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest L1 gap `sum |pi - rho| w` over all nodes.
    pub fn max_l1_gap(&self, other: &Self) -> f64 {
        self.data
            .chunks(self.na)
            .zip(other.data.chunks(other.na))
            .map(|(p, q)| {
                p.iter()
                    .zip(q)
                    .zip(&self.weights)
                    .map(|((a, b), w)| (a - b).abs() * w)
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }
}

/// `pi(t_j, x_i, .) = Gamma_lambda(t_j, x_i, grad(j, i), m_j, .)` on the whole grid.
pub fn gibbs_field(
    model: &ModelSpec,
    grid: &GridSpec,
    grad: &TimeSpaceField,
    flow: &MeasureFlow,
    lambda: f64,
) -> Result<RelaxedPolicyField> {
    check_lambda(lambda)?;
    let mut field = RelaxedPolicyField::uniform(grid);
    let (nx, na) = (field.nx, field.na);
    let weights = &grid.action.weights;
    field
        .data
        .par_chunks_mut(nx * na)
        .enumerate()
        .try_for_each(|(j, row)| -> Result<()> {
            let t = grid.times[j];
            let stats = flow.stats(j);
            let mut g = vec![0.0; na];
            for (i, cell) in row.chunks_mut(na).enumerate() {
                exponent_into(model, &grid.action.nodes, t, grid.space.nodes[i], grad.row(j)[i], &stats, &mut g)?;
                gibbs_from_exponent_into(&g, weights, lambda, cell)?;
            }
            Ok(())
        })?;
    Ok(field)
}
