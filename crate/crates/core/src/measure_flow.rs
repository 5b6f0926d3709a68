//! Population flows: the conservative Fokker-Planck solver, 1-D
//! Wasserstein-2 distances and flow diagnostics.
//!
//! The Fokker-Planck equation is solved in divergence form
//!
//! ```text
//! d_t p = d_x (A d_x p + a p),   A = sigma^2 / 2,   a = d_x A - b~
//! ```
//!
//! with node-centred control volumes (half volumes at the two ends), zero
//! flux through the box edges and Chang-Cooper weighting of the advective
//! flux. Each implicit step is an M-matrix solve, so positivity is kept and
//! the trapezoid mass is conserved up to round-off.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::coefficient_fields;
use crate::gibbs::RelaxedPolicyField;
use crate::grid::{Axis, GridSpec, TimeSpaceField};
use crate::linalg::TridiagLu;
use crate::model::{moments, MeasureStats, ModelSpec};

const MASS_TOL: f64 = 1e-8;
const NEG_TOL: f64 = 1e-10;

/// Initial population law `nu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialLaw {
    Gaussian { mean: f64, variance: f64 },
    /// All mass on the node closest to `at`.
    PointMass { at: f64 },
}

impl InitialLaw {
    /// Nodal density with unit trapezoid mass.
    pub fn discretize(&self, grid: &GridSpec) -> Result<Vec<f64>> {
        let axis = &grid.space;
        let mut p = match *self {
            InitialLaw::Gaussian { mean, variance } => {
                if !(variance > 0.0) {
                    return Err(Error::Config(format!("initial variance must be positive, got {variance}")));
                }
                axis.nodes
                    .iter()
                    .map(|x| (-(x - mean) * (x - mean) / (2.0 * variance)).exp())
                    .collect::<Vec<f64>>()
            }
            InitialLaw::PointMass { at } => {
                let (i, th) = axis.locate(at);
                let k = if th < 0.5 { i } else { i + 1 };
                let mut p = vec![0.0; axis.len()];
                p[k] = 1.0;
                p
            }
        };
        let mass = axis.integrate(&p);
        if !(mass > 0.0) {
            return Err(Error::InvalidDensity("initial law has no mass inside the box".into()));
        }
        p.iter_mut().for_each(|v| *v /= mass);
        Ok(p)
    }
}

/// Discrete densities `p[j][i]` over time nodes and space nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureFlow {
    space: Axis,
    times: Vec<f64>,
    densities: TimeSpaceField,
    means: Vec<f64>,
    variances: Vec<f64>,
}

fn check_density(p: &[f64], axis: &Axis, label: impl Fn() -> String) -> Result<()> {
    if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !(**v >= -1e-12)) {
        return Err(Error::InvalidDensity(format!("{}: entry {i} is {v}", label())));
    }
    let mass = axis.integrate(p);
    if (mass - 1.0).abs() > MASS_TOL {
        return Err(Error::InvalidDensity(format!("{}: mass {mass}", label())));
    }
    Ok(())
}

impl MeasureFlow {
    /// Validates every row (nonnegative, unit mass) and caches the moments.
    pub fn new(grid: &GridSpec, densities: TimeSpaceField) -> Result<Self> {
        if densities.n_rows() != grid.n_time + 1 || densities.width() != grid.nx() {
            return Err(Error::Config("density field does not match the grid".into()));
        }
        for (j, row) in densities.rows().enumerate() {
            check_density(row, &grid.space, || format!("time node {j}"))?;
        }
        let (means, variances) = densities.rows().map(|r| moments(r, &grid.space)).unzip();
        Ok(Self {
            space: grid.space.clone(),
            times: grid.times.clone(),
            densities,
            means,
            variances,
        })
    }

    /// The flow that stays at `nu` for all times.
    pub fn constant(grid: &GridSpec, nu: &[f64]) -> Result<Self> {
        if nu.len() != grid.nx() {
            return Err(Error::Config("initial density does not match the grid".into()));
        }
        let rows = vec![nu.to_vec(); grid.n_time + 1];
        Self::new(grid, TimeSpaceField::from_rows(rows))
    }

    pub fn n_time(&self) -> usize {
        self.densities.n_rows() - 1
    }

    pub fn nx(&self) -> usize {
        self.densities.width()
    }

    pub fn space(&self) -> &Axis {
        &self.space
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn density(&self, j: usize) -> &[f64] {
        self.densities.row(j)
    }

    pub fn densities(&self) -> &TimeSpaceField {
        &self.densities
    }

    pub fn mean(&self, j: usize) -> f64 {
        self.means[j]
    }

    pub fn variance(&self, j: usize) -> f64 {
        self.variances[j]
    }

    pub fn stats(&self, j: usize) -> MeasureStats<'_> {
        MeasureStats::with_moments(self.densities.row(j), &self.space, self.means[j], self.variances[j])
    }

    pub fn mass(&self, j: usize) -> f64 {
        self.space.integrate(self.densities.row(j))
    }

    pub fn same_grid(&self, other: &MeasureFlow) -> bool {
        self.space == other.space && self.times == other.times
    }
}

/// Bernoulli function `z / (e^z - 1)`.
fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 - 0.5 * z
    } else {
        z / z.exp_m1()
    }
}

/// Evolves `nu` under `policy` with coefficients frozen at `frozen`.
///
/// The step `s_j -> s_{j+1}` is implicit and uses coefficients at `s_{j+1}`
/// evaluated against `frozen.stats(j + 1)`.
pub fn solve_fokker_planck(
    model: &ModelSpec,
    grid: &GridSpec,
    policy: &RelaxedPolicyField,
    frozen: &MeasureFlow,
    nu: &[f64],
) -> Result<MeasureFlow> {
    model.check_grid(grid)?;
    if nu.len() != grid.nx() {
        return Err(Error::Config("initial density does not match the grid".into()));
    }
    check_density(nu, &grid.space, || "initial law".to_string())?;
    let coeffs = coefficient_fields(model, grid, policy, frozen)?;
    let nx = grid.nx();
    let dx = grid.dx();
    let dt = grid.dt;
    let vol = &grid.space.weights;

    let mut rows = Vec::with_capacity(grid.n_time + 1);
    rows.push(nu.to_vec());
    let mut lower = vec![0.0; nx];
    let mut diag = vec![0.0; nx];
    let mut upper = vec![0.0; nx];
    // flux J_{i+1/2} = alpha_i p_{i+1} - beta_i p_i
    let mut alpha = vec![0.0; nx - 1];
    let mut beta = vec![0.0; nx - 1];
    for j in 0..grid.n_time {
        let s = j + 1;
        let sig = coeffs.sigma.row(s);
        let drift = coeffs.drift.row(s);
        for i in 0..nx - 1 {
            let a_l = 0.5 * sig[i] * sig[i];
            let a_r = 0.5 * sig[i + 1] * sig[i + 1];
            let diff = 0.5 * (a_l + a_r);
            let adv = (a_r - a_l) / dx - 0.5 * (drift[i] + drift[i + 1]);
            if !(diff > 0.0) {
                return Err(Error::Scheme {
                    step: j,
                    msg: format!("degenerate diffusion at cell face {i}"),
                });
            }
            let w = adv * dx / diff;
            alpha[i] = diff / dx * bernoulli(-w);
            beta[i] = diff / dx * bernoulli(w);
        }
        for i in 0..nx {
            let mut d = vol[i] / dt;
            if i + 1 < nx {
                d += beta[i];
                upper[i] = -alpha[i];
            } else {
                upper[i] = 0.0;
            }
            if i > 0 {
                d += alpha[i - 1];
                lower[i] = -beta[i - 1];
            } else {
                lower[i] = 0.0;
            }
            diag[i] = d;
        }
        let lu = TridiagLu::factor(&lower, &diag, &upper).map_err(|e| Error::Scheme {
            step: j,
            msg: e.to_string(),
        })?;
        let prev: &Vec<f64> = rows.last().expect("initial row");
        let mut next: Vec<f64> = prev.iter().zip(vol).map(|(p, v)| p * v / dt).collect();
        lu.solve_in_place(&mut next);
        let min = next.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -NEG_TOL {
            return Err(Error::Scheme {
                step: j,
                msg: format!("negative density {min}"),
            });
        }
        if min < 0.0 {
            next.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let mass = grid.space.integrate(&next);
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::Conservation {
                step: j,
                drift: mass - 1.0,
            });
        }
        if min < 0.0 {
            next.iter_mut().for_each(|v| *v /= mass);
        }
        rows.push(next);
    }
    MeasureFlow::new(grid, TimeSpaceField::from_rows(rows))
}

/// Quantile function of a nodal density at the midpoints `u_k = (k + 1/2) / n_quantiles`,
/// using the piecewise-linear trapezoid CDF.
pub fn quantiles(p: &[f64], axis: &Axis, n_quantiles: usize) -> Result<Vec<f64>> {
    check_density(p, axis, || "wasserstein input".to_string())?;
    let n = p.len();
    let mut cdf = vec![0.0; n];
    for i in 1..n {
        cdf[i] = cdf[i - 1] + 0.5 * (p[i - 1].max(0.0) + p[i].max(0.0)) * axis.step;
    }
    let total = cdf[n - 1];
    cdf.iter_mut().for_each(|c| *c /= total);
    let mut out = Vec::with_capacity(n_quantiles);
    let mut k = 1usize;
    for q in 0..n_quantiles {
        let u = (q as f64 + 0.5) / n_quantiles as f64;
        while k < n - 1 && cdf[k] < u {
            k += 1;
        }
        let (c0, c1) = (cdf[k - 1], cdf[k]);
        let x = if c1 > c0 {
            axis.nodes[k - 1] + ((u - c0) / (c1 - c0)).clamp(0.0, 1.0) * axis.step
        } else {
            axis.nodes[k]
        };
        out.push(x);
    }
    Ok(out)
}

/// Number of quantile nodes used for a grid with `nx` space nodes.
pub fn quantile_count(nx: usize) -> usize {
    4 * nx
}

fn w2_from_quantiles(qp: &[f64], qq: &[f64]) -> f64 {
    let sum: f64 = qp.iter().zip(qq).map(|(a, b)| (a - b) * (a - b)).sum();
    (sum / qp.len() as f64).sqrt()
}

/// `W2(p, q)` through the quantile functions: `W2^2 = int_0^1 (F_p^-1 - F_q^-1)^2 du`.
pub fn wasserstein2_1d(p: &[f64], q: &[f64], grid: &GridSpec) -> Result<f64> {
    wasserstein2_axis(p, q, &grid.space)
}

pub fn wasserstein2_axis(p: &[f64], q: &[f64], axis: &Axis) -> Result<f64> {
    if p.len() != axis.len() || q.len() != axis.len() {
        return Err(Error::Config("density length does not match the grid".into()));
    }
    let n = quantile_count(axis.len());
    let qp = quantiles(p, axis, n)?;
    let qq = quantiles(q, axis, n)?;
    Ok(w2_from_quantiles(&qp, &qq))
}

/// `sup_t W2(m1_t, m2_t)` over the time nodes.
pub fn flow_distance(m1: &MeasureFlow, m2: &MeasureFlow) -> Result<f64> {
    if !m1.same_grid(m2) {
        return Err(Error::Config("flows live on different grids".into()));
    }
    let dists: Result<Vec<f64>> = (0..=m1.n_time())
        .into_par_iter()
        .map(|j| wasserstein2_axis(m1.density(j), m2.density(j), &m1.space))
        .collect();
    Ok(dists?.into_iter().fold(0.0, f64::max))
}

/// Empirical time regularity and moment bound of a flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowRegularity {
    /// `sup_{t != s} W2^2(m_t, m_s) / |t - s|`.
    pub holder_constant: f64,
    /// `sup_t int |x|^{2 + kappa} dm_t`.
    pub moment_bound: f64,
    pub kappa: f64,
}

pub fn flow_regularity_report(m: &MeasureFlow, kappa: f64) -> Result<FlowRegularity> {
    let n = quantile_count(m.nx());
    let q: Result<Vec<Vec<f64>>> = (0..=m.n_time())
        .into_par_iter()
        .map(|j| quantiles(m.density(j), &m.space, n))
        .collect();
    let q = q?;
    let holder_constant = (0..=m.n_time())
        .into_par_iter()
        .map(|a| {
            let mut best = 0.0f64;
            for b in a + 1..=m.n_time() {
                let w = w2_from_quantiles(&q[a], &q[b]);
                best = best.max(w * w / (m.times[b] - m.times[a]));
            }
            best
        })
        .reduce(|| 0.0, f64::max);
    let moment_bound = (0..=m.n_time())
        .map(|j| m.stats(j).integrate(|x| x.abs().powf(2.0 + kappa)))
        .fold(0.0, f64::max);
    Ok(FlowRegularity {
        holder_constant,
        moment_bound,
        kappa,
    })
}
