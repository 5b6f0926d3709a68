//! Problem definition: coefficient functions, discount, action interval and
//! the constants of the standing assumptions.
//!
//! Coefficients see the population through [`MeasureStats`], which carries
//! the mean and variance together with the full discrete density, so both
//! moment interactions and arbitrary density functionals can be expressed.

mod audit;
pub mod catalog;

use std::fmt;
use std::sync::Arc;

pub use audit::{audit_assumptions, AssumptionReport, AuditLattice};

use crate::error::{Error, Result};
use crate::grid::{Axis, GridSpec};

/// Read-only view of one population marginal `m_t`.
#[derive(Debug, Clone, Copy)]
pub struct MeasureStats<'a> {
    pub mean: f64,
    pub variance: f64,
    density: &'a [f64],
    axis: &'a Axis,
}

impl<'a> MeasureStats<'a> {
    /// Builds the view without validation; callers guarantee a normalized,
    /// nonnegative density.
    pub(crate) fn from_parts(density: &'a [f64], axis: &'a Axis) -> Self {
        let (mean, variance) = moments(density, axis);
        Self {
            mean,
            variance,
            density,
            axis,
        }
    }

    pub(crate) fn with_moments(density: &'a [f64], axis: &'a Axis, mean: f64, variance: f64) -> Self {
        Self {
            mean,
            variance,
            density,
            axis,
        }
    }

    pub fn density(&self) -> &'a [f64] {
        self.density
    }

    pub fn nodes(&self) -> &'a [f64] {
        &self.axis.nodes
    }

    pub fn weights(&self) -> &'a [f64] {
        &self.axis.weights
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }

    /// Trapezoid integral of `f(x) p(x)`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.density
            .iter()
            .zip(&self.axis.nodes)
            .zip(&self.axis.weights)
            .map(|((p, x), w)| f(*x) * p * w)
            .sum()
    }
}

pub(crate) fn moments(density: &[f64], axis: &Axis) -> (f64, f64) {
    let mean: f64 = density
        .iter()
        .zip(&axis.nodes)
        .zip(&axis.weights)
        .map(|((p, x), w)| x * p * w)
        .sum();
    let variance: f64 = density
        .iter()
        .zip(&axis.nodes)
        .zip(&axis.weights)
        .map(|((p, x), w)| (x - mean) * (x - mean) * p * w)
        .sum();
    (mean, variance.max(0.0))
}

/// Mean, variance and density accessor of a discrete density on the space grid.
pub fn measure_stats_of<'a>(density: &'a [f64], grid: &'a GridSpec) -> Result<MeasureStats<'a>> {
    if density.len() != grid.nx() {
        return Err(Error::InvalidDensity(format!(
            "density has {} entries, grid has {} nodes",
            density.len(),
            grid.nx()
        )));
    }
    if let Some((i, p)) = density.iter().enumerate().find(|(_, p)| !(**p >= -1e-12)) {
        return Err(Error::InvalidDensity(format!("entry {i} is {p}")));
    }
    let mass = grid.space.integrate(density);
    if (mass - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidDensity(format!("mass {mass} differs from 1")));
    }
    Ok(MeasureStats::from_parts(density, &grid.space))
}

pub type DriftFn = Arc<dyn Fn(f64, f64, &MeasureStats<'_>, f64) -> f64 + Send + Sync>;
pub type DiffusionFn = Arc<dyn Fn(f64, f64, &MeasureStats<'_>) -> f64 + Send + Sync>;
pub type RewardFn = Arc<dyn Fn(f64, f64, &MeasureStats<'_>, f64) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(f64, f64, &MeasureStats<'_>) -> f64 + Send + Sync>;
pub type DiscountFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Constants of the standing assumptions: bound, Lipschitz, ellipticity and
/// terminal-measure Lipschitz constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssumptionConstants {
    pub k1_bound: f64,
    pub k2_lipschitz: f64,
    pub eta_ellipticity: f64,
    pub k6_terminal_lipschitz: f64,
}

impl Default for AssumptionConstants {
    fn default() -> Self {
        Self {
            k1_bound: 1.0,
            k2_lipschitz: 1.0,
            eta_ellipticity: 1.0,
            k6_terminal_lipschitz: 0.0,
        }
    }
}

/// The game: `b(t,x,m,a)`, `sigma(t,x,m)`, `r(tau,x,m,a)`, `F(t,x,m)`,
/// `delta(tau)` on the action interval `[action_lo, action_hi]` and horizon `T`.
///
/// Immutable once built; every coefficient must be a pure function.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub horizon: f64,
    pub action_lo: f64,
    pub action_hi: f64,
    pub constants: AssumptionConstants,
    drift: DriftFn,
    diffusion: DiffusionFn,
    running_reward: RewardFn,
    terminal_reward: TerminalFn,
    discount: DiscountFn,
    running_reward_dtau: Option<RewardFn>,
    terminal_reward_dt: Option<TerminalFn>,
    discount_derivative: Option<DiscountFn>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("horizon", &self.horizon)
            .field("action", &(self.action_lo, self.action_hi))
            .field("constants", &self.constants)
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    /// A model with `b = 0`, `sigma = 1`, `r = 0`, `F = 0` and `delta = 1`.
    pub fn new(name: impl Into<String>, horizon: f64, action_lo: f64, action_hi: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        if !(action_lo.is_finite() && action_hi.is_finite() && action_hi > action_lo) {
            return Err(Error::Config(format!(
                "empty action interval [{action_lo}, {action_hi}]"
            )));
        }
        Ok(Self {
            name: name.into(),
            horizon,
            action_lo,
            action_hi,
            constants: AssumptionConstants::default(),
            drift: Arc::new(|_, _, _, _| 0.0),
            diffusion: Arc::new(|_, _, _| 1.0),
            running_reward: Arc::new(|_, _, _, _| 0.0),
            terminal_reward: Arc::new(|_, _, _| 0.0),
            discount: Arc::new(|_| 1.0),
            running_reward_dtau: None,
            terminal_reward_dt: None,
            discount_derivative: None,
        })
    }

    pub fn with_drift(mut self, f: impl Fn(f64, f64, &MeasureStats<'_>, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.drift = Arc::new(f);
        self
    }

    pub fn with_diffusion(mut self, f: impl Fn(f64, f64, &MeasureStats<'_>) -> f64 + Send + Sync + 'static) -> Self {
        self.diffusion = Arc::new(f);
        self
    }

    pub fn with_running_reward(
        mut self,
        f: impl Fn(f64, f64, &MeasureStats<'_>, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.running_reward = Arc::new(f);
        self
    }

    pub fn with_terminal_reward(mut self, f: impl Fn(f64, f64, &MeasureStats<'_>) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal_reward = Arc::new(f);
        self
    }

    pub fn with_discount(mut self, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.discount = Arc::new(f);
        self
    }

    /// Exact `d r / d tau`; finite differences are used otherwise.
    pub fn with_running_reward_dtau(
        mut self,
        f: impl Fn(f64, f64, &MeasureStats<'_>, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.running_reward_dtau = Some(Arc::new(f));
        self
    }

    /// Exact `d F / d t`; finite differences are used otherwise.
    pub fn with_terminal_reward_dt(mut self, f: impl Fn(f64, f64, &MeasureStats<'_>) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal_reward_dt = Some(Arc::new(f));
        self
    }

    /// Exact `delta'`; finite differences are used otherwise.
    pub fn with_discount_derivative(mut self, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.discount_derivative = Some(Arc::new(f));
        self
    }

    pub fn with_constants(mut self, constants: AssumptionConstants) -> Self {
        self.constants = constants;
        self
    }

    #[inline]
    pub fn drift(&self, t: f64, x: f64, m: &MeasureStats<'_>, a: f64) -> f64 {
        (self.drift)(t, x, m, a)
    }

    #[inline]
    pub fn diffusion(&self, t: f64, x: f64, m: &MeasureStats<'_>) -> f64 {
        (self.diffusion)(t, x, m)
    }

    #[inline]
    pub fn running_reward(&self, tau: f64, x: f64, m: &MeasureStats<'_>, a: f64) -> f64 {
        (self.running_reward)(tau, x, m, a)
    }

    #[inline]
    pub fn terminal_reward(&self, t: f64, x: f64, m: &MeasureStats<'_>) -> f64 {
        (self.terminal_reward)(t, x, m)
    }

    #[inline]
    pub fn discount(&self, tau: f64) -> f64 {
        (self.discount)(tau)
    }

    fn fd_step(&self) -> f64 {
        1e-5 * self.horizon
    }

    pub fn running_reward_dtau(&self, tau: f64, x: f64, m: &MeasureStats<'_>, a: f64) -> f64 {
        match &self.running_reward_dtau {
            Some(f) => f(tau, x, m, a),
            None => {
                let h = self.fd_step();
                (self.running_reward(tau + h, x, m, a) - self.running_reward(tau - h, x, m, a)) / (2.0 * h)
            }
        }
    }

    pub fn terminal_reward_dt(&self, t: f64, x: f64, m: &MeasureStats<'_>) -> f64 {
        match &self.terminal_reward_dt {
            Some(f) => f(t, x, m),
            None => {
                let h = self.fd_step();
                (self.terminal_reward(t + h, x, m) - self.terminal_reward(t - h, x, m)) / (2.0 * h)
            }
        }
    }

    pub fn discount_derivative(&self, tau: f64) -> f64 {
        match &self.discount_derivative {
            Some(f) => f(tau),
            None => {
                let h = self.fd_step();
                (self.discount(tau + h) - self.discount(tau - h)) / (2.0 * h)
            }
        }
    }

    /// Checks that a grid was built for this model's horizon and action set.
    pub fn check_grid(&self, grid: &GridSpec) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
        if !close(grid.horizon, self.horizon)
            || !close(grid.action.lo, self.action_lo)
            || !close(grid.action.hi, self.action_hi)
        {
            return Err(Error::Config(format!(
                "grid (T = {}, U = [{}, {}]) does not match model '{}' (T = {}, U = [{}, {}])",
                grid.horizon, grid.action.lo, grid.action.hi, self.name, self.horizon, self.action_lo, self.action_hi
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, GridConfig};

    fn grid(x_lo: f64, x_hi: f64, n_space: usize) -> GridSpec {
        build_grid(&GridConfig {
            horizon: 1.0,
            n_time: 4,
            x_lo,
            x_hi,
            n_space,
            action_lo: 0.0,
            action_hi: 1.0,
            n_action: 4,
            boundary_policy: Default::default(),
        })
        .unwrap()
    }

    #[test]
    fn point_mass_stats() {
        let g = grid(-4.0, 4.0, 80);
        let mut p = vec![0.0; g.nx()];
        let i = g.space.nodes.iter().position(|x| (x - 2.0).abs() < 1e-12).unwrap();
        p[i] = 1.0 / g.dx();
        let s = measure_stats_of(&p, &g).unwrap();
        assert!((s.mean - 2.0).abs() < 1e-12);
        assert!(s.variance.abs() < 1e-12);
    }

    #[test]
    fn two_point_stats() {
        let g = grid(-4.0, 4.0, 80);
        let mut p = vec![0.0; g.nx()];
        for target in [-1.0, 1.0] {
            let i = g.space.nodes.iter().position(|x| (x - target).abs() < 1e-12).unwrap();
            p[i] = 0.5 / g.dx();
        }
        let s = measure_stats_of(&p, &g).unwrap();
        assert!(s.mean.abs() < 1e-12);
        assert!((s.variance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn discretized_gaussian_stats() {
        let g = grid(-4.0, 4.0, 800);
        let (mu, var) = (0.5, 0.04);
        let mut p: Vec<f64> = g
            .space
            .nodes
            .iter()
            .map(|x| (-(x - mu) * (x - mu) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt())
            .collect();
        let mass = g.space.integrate(&p);
        p.iter_mut().for_each(|v| *v /= mass);
        let s = measure_stats_of(&p, &g).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-3);
        assert!((s.variance - 0.04).abs() < 1e-3);
    }

    #[test]
    fn rejects_negative_and_unnormalized() {
        let g = grid(-1.0, 1.0, 8);
        let mut p = vec![0.5; g.nx()];
        p[3] = -0.1;
        assert!(matches!(measure_stats_of(&p, &g), Err(Error::InvalidDensity(_))));
        let p = vec![1.0; g.nx()];
        assert!(matches!(measure_stats_of(&p, &g), Err(Error::InvalidDensity(_))));
    }

    proptest::proptest! {
        #[test]
        fn shift_moves_mean_by_whole_cells(shift in 1usize..40, center in 60usize..100, width in 2usize..10) {
            let g = grid(-4.0, 4.0, 200);
            let bump = |c: usize| -> Vec<f64> {
                let mut p = vec![0.0; g.nx()];
                for k in 0..=2 * width {
                    let i = c + k - width;
                    p[i] = 1.0 + (k as f64 - width as f64).abs().recip().min(1.0);
                }
                let m = g.space.integrate(&p);
                p.iter_mut().for_each(|v| *v /= m);
                p
            };
            let p = bump(center);
            let q = bump(center + shift);
            let a = measure_stats_of(&p, &g).unwrap();
            let b = measure_stats_of(&q, &g).unwrap();
            proptest::prop_assert!((b.mean - a.mean - shift as f64 * g.dx()).abs() < 1e-12);
            proptest::prop_assert!((b.variance - a.variance).abs() < 1e-12);
        }
    }
}
