//! Uniform discretizations of `[0, T]`, the truncated state box and the
//! action interval, plus triangular storage over `{(t, s): t <= s}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_N_SPACE: usize = 8;
pub const MIN_N_ACTION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryPolicy {
    /// Neumann for the value PDE, zero flux for Fokker-Planck, reflection
    /// for particles.
    #[default]
    ZeroFluxReflecting,
}

/// Raw grid parameters as they appear in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub horizon: f64,
    pub n_time: usize,
    pub x_lo: f64,
    pub x_hi: f64,
    pub n_space: usize,
    pub action_lo: f64,
    pub action_hi: f64,
    pub n_action: usize,
    #[serde(default)]
    pub boundary_policy: BoundaryPolicy,
}

/// A uniform 1-D axis with trapezoid quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Axis {
    pub(crate) fn uniform(lo: f64, hi: f64, cells: usize) -> Self {
        let step = (hi - lo) / cells as f64;
        let nodes: Vec<f64> = (0..=cells)
            .map(|i| {
                if i == cells {
                    hi
                } else {
                    lo + (hi - lo) * (i as f64) / (cells as f64)
                }
            })
            .collect();
        let mut weights = vec![step; cells + 1];
        weights[0] = 0.5 * step;
        weights[cells] = 0.5 * step;
        Self {
            lo,
            hi,
            step,
            nodes,
            weights,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trapezoid integral of nodal values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }

    /// Cell index `i` and fraction `theta` such that `x = (1-theta) x_i + theta x_{i+1}`.
    /// Points outside the axis are clamped to the end cells.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let cells = self.len() - 1;
        let pos = ((x - self.lo) / self.step).clamp(0.0, cells as f64);
        let i = (pos.floor() as usize).min(cells - 1);
        (i, pos - i as f64)
    }

    /// Linear interpolation of nodal values at `x`.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let (i, th) = self.locate(x);
        (1.0 - th) * values[i] + th * values[i + 1]
    }
}

/// Time, space and action discretizations shared by every solver.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub horizon: f64,
    pub n_time: usize,
    pub dt: f64,
    pub times: Vec<f64>,
    pub space: Axis,
    pub action: Axis,
    pub boundary_policy: BoundaryPolicy,
}

impl GridSpec {
    pub fn build(config: &GridConfig) -> Result<Self> {
        build_grid(config)
    }

    pub fn n_space(&self) -> usize {
        self.space.len() - 1
    }

    pub fn n_action(&self) -> usize {
        self.action.len() - 1
    }

    /// Number of space nodes (`n_space + 1`).
    pub fn nx(&self) -> usize {
        self.space.len()
    }

    /// Number of action nodes (`n_action + 1`).
    pub fn na(&self) -> usize {
        self.action.len()
    }

    pub fn dx(&self) -> f64 {
        self.space.step
    }

    pub fn config(&self) -> GridConfig {
        GridConfig {
            horizon: self.horizon,
            n_time: self.n_time,
            x_lo: self.space.lo,
            x_hi: self.space.hi,
            n_space: self.n_space(),
            action_lo: self.action.lo,
            action_hi: self.action.hi,
            n_action: self.n_action(),
            boundary_policy: self.boundary_policy,
        }
    }

    /// Row offset of `(j_t, j_s)` in triangular storage.
    pub fn tri_index(&self, j_t: usize, j_s: usize) -> Result<usize> {
        tri_index(self.n_time, j_t, j_s)
    }

    /// Total number of `(j_t, j_s)` rows, `(N+1)(N+2)/2`.
    pub fn tri_rows(&self) -> usize {
        tri_rows(self.n_time)
    }

    /// Number of whole time steps in `eps`, or an error when `eps` is not a
    /// multiple of `dt`.
    pub fn snap_steps(&self, eps: f64) -> Result<usize> {
        let steps = eps / self.dt;
        let rounded = steps.round();
        if (steps - rounded).abs() > 1e-9 * steps.abs().max(1.0) || rounded < 0.0 {
            return Err(Error::Config(format!(
                "epsilon {eps} is not a multiple of the time step {}",
                self.dt
            )));
        }
        Ok(rounded as usize)
    }

    /// Index of the time node closest to `t`.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        let j = (t / self.dt).round();
        if !(0.0..=self.n_time as f64).contains(&j) || (t - self.times[j as usize]).abs() > 1e-9 {
            return Err(Error::Config(format!("time {t} is not a grid node")));
        }
        Ok(j as usize)
    }

    pub fn same_shape(&self, other: &GridSpec) -> bool {
        self == other
    }
}

/// Validates a configuration and lays out the nodes and quadrature weights.
pub fn build_grid(config: &GridConfig) -> Result<GridSpec> {
    let bad = |msg: String| Err(Error::Config(msg));
    if !(config.horizon.is_finite() && config.horizon > 0.0) {
        return bad(format!("horizon must be positive, got {}", config.horizon));
    }
    if config.n_time < 1 {
        return bad("n_time must be at least 1".into());
    }
    if !(config.x_lo.is_finite() && config.x_hi.is_finite()) || config.x_lo >= config.x_hi {
        return bad(format!("x_lo ({}) must be below x_hi ({})", config.x_lo, config.x_hi));
    }
    if config.n_space < MIN_N_SPACE {
        return bad(format!("n_space must be at least {MIN_N_SPACE}, got {}", config.n_space));
    }
    if !(config.action_lo.is_finite() && config.action_hi.is_finite())
        || config.action_lo >= config.action_hi
    {
        return bad(format!(
            "action_lo ({}) must be below action_hi ({})",
            config.action_lo, config.action_hi
        ));
    }
    if config.n_action < MIN_N_ACTION {
        return bad(format!("n_action must be at least {MIN_N_ACTION}, got {}", config.n_action));
    }
    let time = Axis::uniform(0.0, config.horizon, config.n_time);
    Ok(GridSpec {
        horizon: config.horizon,
        n_time: config.n_time,
        dt: time.step,
        times: time.nodes,
        space: Axis::uniform(config.x_lo, config.x_hi, config.n_space),
        action: Axis::uniform(config.action_lo, config.action_hi, config.n_action),
        boundary_policy: config.boundary_policy,
    })
}

/// Row offset of `(j_t, j_s)`; rows are ordered `(0,0), (0,1), .., (0,N), (1,1), ..`.
pub fn tri_index(n_time: usize, j_t: usize, j_s: usize) -> Result<usize> {
    if j_s < j_t || j_s > n_time {
        return Err(Error::Index(format!(
            "(j_t, j_s) = ({j_t}, {j_s}) is outside the triangle for n_time = {n_time}"
        )));
    }
    Ok(j_t * (n_time + 1) - j_t * j_t.saturating_sub(1) / 2 + (j_s - j_t))
}

pub fn tri_rows(n_time: usize) -> usize {
    (n_time + 1) * (n_time + 2) / 2
}

/// Values over `{(j_t, j_s): j_t <= j_s <= N}` times the space nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangularField {
    n_time: usize,
    width: usize,
    data: Vec<f64>,
}

impl TriangularField {
    pub fn zeros(n_time: usize, width: usize) -> Self {
        Self {
            n_time,
            width,
            data: vec![0.0; tri_rows(n_time) * width],
        }
    }

    pub fn for_grid(grid: &GridSpec) -> Self {
        Self::zeros(grid.n_time, grid.nx())
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        tri_rows(self.n_time)
    }

    pub fn row(&self, j_t: usize, j_s: usize) -> &[f64] {
        let r = tri_index(self.n_time, j_t, j_s).expect("triangular index out of range");
        &self.data[r * self.width..(r + 1) * self.width]
    }

    pub fn row_mut(&mut self, j_t: usize, j_s: usize) -> &mut [f64] {
        let r = tri_index(self.n_time, j_t, j_s).expect("triangular index out of range");
        &mut self.data[r * self.width..(r + 1) * self.width]
    }

    /// The contiguous block of rows `(j_t, j_t..=N)`.
    pub fn slab(&self, j_t: usize) -> &[f64] {
        let start = tri_index(self.n_time, j_t, j_t).expect("slab index") * self.width;
        let len = (self.n_time - j_t + 1) * self.width;
        &self.data[start..start + len]
    }

    /// Mutable slabs for every `j_t`, in order; they are disjoint.
    pub fn slabs_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.n_time + 1);
        let mut rest: &mut [f64] = &mut self.data;
        for j_t in 0..=self.n_time {
            let len = (self.n_time - j_t + 1) * self.width;
            let (head, tail) = rest.split_at_mut(len);
            out.push(head);
            rest = tail;
        }
        out
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Nodal values over time nodes times space nodes, row-major in time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSpaceField {
    n_rows: usize,
    width: usize,
    data: Vec<f64>,
}

impl TimeSpaceField {
    pub fn zeros(n_rows: usize, width: usize) -> Self {
        Self {
            n_rows,
            width,
            data: vec![0.0; n_rows * width],
        }
    }

    /// One row per time node, one column per space node.
    pub fn for_grid(grid: &GridSpec) -> Self {
        Self::zeros(grid.n_time + 1, grid.nx())
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n_rows = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == width), "ragged rows");
        Self {
            n_rows,
            width,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.width..(j + 1) * self.width]
    }

    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.width..(j + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.width)
    }

    pub fn rows_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.data.chunks_mut(self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &TimeSpaceField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Centered differences in the interior, one-sided at the two ends.
pub fn gradient(values: &[f64], dx: f64) -> Vec<f64> {
    let n = values.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    out[0] = (values[1] - values[0]) / dx;
    out[n - 1] = (values[n - 1] - values[n - 2]) / dx;
    for i in 1..n - 1 {
        out[i] = (values[i + 1] - values[i - 1]) / (2.0 * dx);
    }
    out
}
