//! Sampling-based audit of the standing assumptions.

use crate::error::{Error, Result};
use crate::grid::{build_grid, GridConfig, GridSpec};
use crate::model::{MeasureStats, ModelSpec};

const PASS_TOL: f64 = 1e-9;

/// Sampling lattice for the audit. Measures are discretized Gaussians with
/// means and standard deviations on uniform sub-lattices.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditLattice {
    pub n_time: usize,
    pub x_lo: f64,
    pub x_hi: f64,
    pub n_space: usize,
    pub n_action: usize,
    pub means: (f64, f64),
    pub std_devs: (f64, f64),
    pub n_measure: usize,
    /// Resolution of the grid the sampled Gaussians live on.
    pub density_cells: usize,
}

impl AuditLattice {
    pub fn new(x_lo: f64, x_hi: f64) -> Self {
        Self {
            n_time: 9,
            x_lo,
            x_hi,
            n_space: 9,
            n_action: 9,
            means: (-0.5, 0.5),
            std_devs: (0.2, 0.6),
            n_measure: 3,
            density_cells: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    /// `min sigma^2 - eta`.
    pub ellipticity_margin: f64,
    /// `K1 - max(|b|, |sigma|, |r|, |F|)`.
    pub bound_margin: f64,
    /// Largest `(|db| + |dsigma| + |dr|) / |dx|` over neighbouring lattice points.
    pub x_lipschitz_ratio: f64,
    pub x_lipschitz_margin: f64,
    /// Largest `(|db| + |dsigma| + |dr| + |d r_tau|) / W2` over pairs of sampled measures.
    pub measure_lipschitz_ratio: f64,
    pub measure_lipschitz_margin: f64,
    /// Largest `(|dF| + |dDxF|) / W2` over pairs of sampled measures.
    pub terminal_lipschitz_ratio: f64,
    pub terminal_lipschitz_margin: f64,
    pub discount_ok: bool,
    pub action_set_ok: bool,
    /// Inner-cone condition; holds for every nondegenerate interval.
    pub cone_condition: bool,
    pub pass: bool,
}

impl AssumptionReport {
    pub fn margins(&self) -> [(&'static str, f64); 5] {
        [
            ("ellipticity", self.ellipticity_margin),
            ("bound", self.bound_margin),
            ("x_lipschitz", self.x_lipschitz_margin),
            ("measure_lipschitz", self.measure_lipschitz_margin),
            ("terminal_lipschitz", self.terminal_lipschitz_margin),
        ]
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

fn finite(v: f64, what: &'static str, point: impl FnOnce() -> String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::ModelEvaluation { what, point: point() })
    }
}

/// Samples the coefficients on the lattice and reports worst-case margins.
pub fn audit_assumptions(model: &ModelSpec, lattice: &AuditLattice) -> Result<AssumptionReport> {
    if lattice.n_time < 8 || lattice.n_space < 8 || lattice.n_action < 8 {
        return Err(Error::Config("audit lattice needs at least 8 points per axis".into()));
    }
    if lattice.n_measure < 1 {
        return Err(Error::Config("audit lattice needs at least one measure".into()));
    }
    let c = model.constants;
    let times = linspace(0.0, model.horizon, lattice.n_time);
    let xs = linspace(lattice.x_lo, lattice.x_hi, lattice.n_space);
    let actions = linspace(model.action_lo, model.action_hi, lattice.n_action);

    // Gaussian measures live on a wider box so their tails are not clipped.
    let (m_lo, m_hi) = lattice.means;
    let (s_lo, s_hi) = lattice.std_devs;
    let pad = 8.0 * s_hi.max(1e-3);
    let density_grid: GridSpec = build_grid(&GridConfig {
        horizon: model.horizon,
        n_time: 1,
        x_lo: m_lo - pad,
        x_hi: m_hi + pad,
        n_space: lattice.density_cells.max(8),
        action_lo: model.action_lo,
        action_hi: model.action_hi,
        n_action: 4,
        boundary_policy: Default::default(),
    })?;
    let mut densities = Vec::new();
    for mu in linspace(m_lo, m_hi, lattice.n_measure) {
        for sd in linspace(s_lo, s_hi, lattice.n_measure) {
            let mut p: Vec<f64> = density_grid
                .space
                .nodes
                .iter()
                .map(|x| (-(x - mu) * (x - mu) / (2.0 * sd * sd)).exp())
                .collect();
            let mass = density_grid.space.integrate(&p);
            p.iter_mut().for_each(|v| *v /= mass);
            densities.push(p);
        }
    }
    let measures: Vec<MeasureStats<'_>> = densities
        .iter()
        .map(|p| MeasureStats::from_parts(p, &density_grid.space))
        .collect();

    let mut min_sigma2 = f64::INFINITY;
    let mut max_coef = 0.0f64;
    let mut x_ratio = 0.0f64;
    let mut m_ratio = 0.0f64;
    let mut f_ratio = 0.0f64;

    for &t in &times {
        for m in &measures {
            let mut prev: Option<(f64, Vec<f64>, f64, Vec<f64>)> = None;
            for &x in &xs {
                let here = || format!("(t={t}, x={x}, mean={}, var={})", m.mean, m.variance);
                let sigma = finite(model.diffusion(t, x, m), "diffusion", here)?;
                let f = finite(model.terminal_reward(t, x, m), "terminal_reward", here)?;
                min_sigma2 = min_sigma2.min(sigma * sigma);
                max_coef = max_coef.max(sigma.abs()).max(f.abs());
                let mut bs = Vec::with_capacity(actions.len());
                let mut rs = Vec::with_capacity(actions.len());
                for &a in &actions {
                    let at = || format!("(t={t}, x={x}, a={a}, mean={}, var={})", m.mean, m.variance);
                    let b = finite(model.drift(t, x, m, a), "drift", at)?;
                    let r = finite(model.running_reward(t, x, m, a), "running_reward", at)?;
                    max_coef = max_coef.max(b.abs()).max(r.abs());
                    bs.push(b);
                    rs.push(r);
                }
                if let Some((px, pb, ps, pr)) = &prev {
                    let dx = x - px;
                    for k in 0..actions.len() {
                        let diff = (bs[k] - pb[k]).abs() + (sigma - ps).abs() + (rs[k] - pr[k]).abs();
                        x_ratio = x_ratio.max(diff / dx);
                    }
                }
                prev = Some((x, bs, sigma, rs));
            }
        }
    }

    // Measure regularity over all pairs of sampled measures.
    let w2 = |p: &MeasureStats<'_>, q: &MeasureStats<'_>| {
        ((p.mean - q.mean).powi(2) + (p.std_dev() - q.std_dev()).powi(2)).sqrt()
    };
    let h = 1e-5 * (lattice.x_hi - lattice.x_lo);
    for (i, p) in measures.iter().enumerate() {
        for q in measures.iter().skip(i + 1) {
            let dist = w2(p, q);
            if dist <= 0.0 {
                continue;
            }
            for &t in &times {
                for &x in &xs {
                    let ds = (model.diffusion(t, x, p) - model.diffusion(t, x, q)).abs();
                    for &a in &actions {
                        let diff = (model.drift(t, x, p, a) - model.drift(t, x, q, a)).abs()
                            + ds
                            + (model.running_reward(t, x, p, a) - model.running_reward(t, x, q, a)).abs()
                            + (model.running_reward_dtau(t, x, p, a) - model.running_reward_dtau(t, x, q, a)).abs();
                        m_ratio = m_ratio.max(diff / dist);
                    }
                    let dfx = |m: &MeasureStats<'_>| {
                        (model.terminal_reward(t, x + h, m) - model.terminal_reward(t, x - h, m)) / (2.0 * h)
                    };
                    let diff = (model.terminal_reward(t, x, p) - model.terminal_reward(t, x, q)).abs()
                        + (dfx(p) - dfx(q)).abs();
                    f_ratio = f_ratio.max(diff / dist);
                }
            }
        }
    }

    let discount_ok = model.discount(0.0) == 1.0
        && times.iter().all(|&tau| {
            let d = model.discount(tau);
            d.is_finite() && d > 0.0
        });
    let action_set_ok = model.action_hi - model.action_lo > 0.0;

    let ellipticity_margin = min_sigma2 - c.eta_ellipticity;
    let bound_margin = c.k1_bound - max_coef;
    let x_lipschitz_margin = c.k2_lipschitz - x_ratio;
    let measure_lipschitz_margin = c.k2_lipschitz - m_ratio;
    let terminal_lipschitz_margin = c.k6_terminal_lipschitz - f_ratio;
    let margins_ok = [
        ellipticity_margin,
        bound_margin,
        x_lipschitz_margin,
        measure_lipschitz_margin,
        terminal_lipschitz_margin,
    ]
    .iter()
    .all(|m| *m >= -PASS_TOL);

    Ok(AssumptionReport {
        ellipticity_margin,
        bound_margin,
        x_lipschitz_ratio: x_ratio,
        x_lipschitz_margin,
        measure_lipschitz_ratio: m_ratio,
        measure_lipschitz_margin,
        terminal_lipschitz_ratio: f_ratio,
        terminal_lipschitz_margin,
        discount_ok,
        action_set_ok,
        cone_condition: action_set_ok,
        pass: margins_ok && discount_ok && action_set_ok,
    })
}
