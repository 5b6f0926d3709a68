//! Monte Carlo oracle: Euler-Maruyama particles driven by the
//! policy-averaged drift, used to cross-check the PDE and Fokker-Planck
//! solvers and to evaluate pasted deviation policies.
//!
//! Each particle owns a counter-based random stream (`ChaCha8` keyed by the
//! run seed, stream id = particle index), and particles are processed in
//! fixed-size chunks reduced in index order, so results do not depend on the
//! number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{averaged_reward_row, coefficient_fields, CoefficientFields};
use crate::gibbs::RelaxedPolicyField;
use crate::grid::{Axis, GridSpec, TimeSpaceField};
use crate::measure_flow::MeasureFlow;
use crate::model::ModelSpec;

/// Smallest ensemble accepted by [`simulate_flow`].
pub const MIN_PARTICLES: usize = 1000;
const CHUNK: usize = 4096;

/// Terminal state of a simulated ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub positions: Vec<f64>,
    /// Particle `k` used stream `k` of this seed.
    pub seed: u64,
    pub time_index: usize,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn mean(&self) -> f64 {
        pairwise_sum(&self.positions) / self.positions.len() as f64
    }
}

/// Empirical flow together with the terminal particle positions.
#[derive(Debug, Clone)]
pub struct SimulatedFlow {
    pub flow: MeasureFlow,
    pub terminal: ParticleEnsemble,
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub n: usize,
    pub seed: u64,
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        v.iter().sum()
    } else {
        let (a, b) = v.split_at(v.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

fn reflect(mut x: f64, axis: &Axis) -> f64 {
    let (lo, hi) = (axis.lo, axis.hi);
    let width = hi - lo;
    if !(lo..=hi).contains(&x) {
        let y = (x - lo).rem_euclid(2.0 * width);
        x = if y <= width { lo + y } else { hi - (y - width) };
    }
    x
}

fn particle_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Piecewise-linear CDF of a nodal density, normalized to end at 1.
fn nodal_cdf(p: &[f64], axis: &Axis) -> Vec<f64> {
    let mut cdf = vec![0.0; p.len()];
    for i in 1..p.len() {
        cdf[i] = cdf[i - 1] + 0.5 * (p[i - 1].max(0.0) + p[i].max(0.0)) * axis.step;
    }
    let total = cdf[p.len() - 1];
    cdf.iter_mut().for_each(|c| *c /= total);
    cdf
}

fn inverse_cdf(cdf: &[f64], axis: &Axis, u: f64) -> f64 {
    let k = cdf.partition_point(|c| *c < u).clamp(1, cdf.len() - 1);
    let (c0, c1) = (cdf[k - 1], cdf[k]);
    if c1 > c0 {
        axis.nodes[k - 1] + ((u - c0) / (c1 - c0)).clamp(0.0, 1.0) * axis.step
    } else {
        axis.nodes[k]
    }
}

/// One Euler-Maruyama step with reflection.
#[inline]
fn em_step(x: f64, j: usize, coeffs: &CoefficientFields, axis: &Axis, dt: f64, xi: f64) -> f64 {
    let b = axis.interpolate(coeffs.drift.row(j), x);
    let s = axis.interpolate(coeffs.sigma.row(j), x);
    reflect(x + b * dt + s * dt.sqrt() * xi, axis)
}

fn deposit(hist: &mut [f64], axis: &Axis, x: f64, mass: f64) {
    let (i, th) = axis.locate(x);
    hist[i] += (1.0 - th) * mass;
    hist[i + 1] += th * mass;
}

fn validate(grid: &GridSpec, nu: &[f64], n_particles: usize, min: usize) -> Result<()> {
    if n_particles < min {
        return Err(Error::Config(format!("need at least {min} particles, got {n_particles}")));
    }
    if nu.len() != grid.nx() {
        return Err(Error::Config("initial density does not match the grid".into()));
    }
    Ok(())
}

/// Simulates `n_particles` paths from `nu` and returns histogram densities
/// (cloud-in-cell deposit divided by the trapezoid weights) at every time node.
pub fn simulate_particles(
    model: &ModelSpec,
    grid: &GridSpec,
    policy: &RelaxedPolicyField,
    frozen: &MeasureFlow,
    nu: &[f64],
    n_particles: usize,
    seed: u64,
) -> Result<SimulatedFlow> {
    model.check_grid(grid)?;
    validate(grid, nu, n_particles, MIN_PARTICLES)?;
    let coeffs = coefficient_fields(model, grid, policy, frozen)?;
    let axis = &grid.space;
    let cdf = nodal_cdf(nu, axis);
    let n_rows = grid.n_time + 1;
    let nx = grid.nx();
    let mass = 1.0 / n_particles as f64;
    let n_chunks = n_particles.div_ceil(CHUNK);
    let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(n_particles);
            let mut hist = vec![0.0; n_rows * nx];
            let mut last = Vec::with_capacity(end - start);
            for id in start..end {
                let mut rng = particle_rng(seed, id as u64);
                let mut x = inverse_cdf(&cdf, axis, rng.random::<f64>());
                deposit(&mut hist[..nx], axis, x, mass);
                for j in 0..grid.n_time {
                    let xi: f64 = rng.sample(StandardNormal);
                    x = em_step(x, j, &coeffs, axis, grid.dt, xi);
                    deposit(&mut hist[(j + 1) * nx..(j + 2) * nx], axis, x, mass);
                }
                last.push(x);
            }
            (hist, last)
        })
        .collect();
    let mut total = vec![0.0; n_rows * nx];
    let mut positions = Vec::with_capacity(n_particles);
    for (hist, last) in chunks {
        total.iter_mut().zip(&hist).for_each(|(t, h)| *t += h);
        positions.extend(last);
    }
    let rows: Vec<Vec<f64>> = total
        .chunks(nx)
        .map(|r| r.iter().zip(&axis.weights).map(|(m, w)| m / w).collect())
        .collect();
    let flow = MeasureFlow::new(grid, TimeSpaceField::from_rows(rows))?;
    Ok(SimulatedFlow {
        flow,
        terminal: ParticleEnsemble {
            positions,
            seed,
            time_index: grid.n_time,
        },
    })
}

/// Empirical flow of the particle system.
pub fn simulate_flow(
    model: &ModelSpec,
    grid: &GridSpec,
    policy: &RelaxedPolicyField,
    frozen: &MeasureFlow,
    nu: &[f64],
    n_particles: usize,
    seed: u64,
) -> Result<MeasureFlow> {
    simulate_particles(model, grid, policy, frozen, nu, n_particles, seed).map(|s| s.flow)
}

/// Pathwise estimate of `V(t, s, x)`:
/// `E[ sum_l ds (r~(t_l - t, X_l) + lambda delta(t_l - t) H(pi)(X_l)) + F(t, X_T, m_T) ]`
/// with left-endpoint quadrature, `X_s = x`.
#[allow(clippy::too_many_arguments)]
pub fn mc_value(
    model: &ModelSpec,
    grid: &GridSpec,
    policy: &RelaxedPolicyField,
    frozen: &MeasureFlow,
    lambda: f64,
    t: f64,
    s: f64,
    x: f64,
    n_paths: usize,
    seed: u64,
) -> Result<McEstimate> {
    model.check_grid(grid)?;
    if n_paths < 2 {
        return Err(Error::Config(format!("need at least 2 paths, got {n_paths}")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!("lambda must be nonnegative, got {lambda}")));
    }
    let j_t = grid.time_index(t)?;
    let j_s = grid.time_index(s)?;
    if j_s < j_t {
        return Err(Error::Index(format!("s = {s} precedes t = {t}")));
    }
    let axis = &grid.space;
    if !(axis.lo..=axis.hi).contains(&x) {
        return Err(Error::Domain(format!("x = {x} outside the box [{}, {}]", axis.lo, axis.hi)));
    }
    let coeffs = coefficient_fields(model, grid, policy, frozen)?;
    let t = grid.times[j_t];
    let nx = grid.nx();
    // source rows r~ + lambda delta H at levels j_s..n-1
    let mut source = vec![0.0; (grid.n_time - j_s) * nx];
    for (row, l) in source.chunks_mut(nx).zip(j_s..grid.n_time) {
        let tau = grid.times[l] - t;
        averaged_reward_row(model, grid, policy, frozen, l, tau, row)?;
        let w = lambda * model.discount(tau);
        row.iter_mut().zip(coeffs.entropy.row(l)).for_each(|(v, h)| *v += w * h);
    }
    let stats_t = frozen.stats(grid.n_time);
    let n_chunks = n_paths.div_ceil(CHUNK);
    let payoffs: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(n_paths);
            (start..end)
                .map(|id| {
                    let mut rng = particle_rng(seed, id as u64);
                    let mut y = x;
                    let mut acc = 0.0;
                    for l in j_s..grid.n_time {
                        acc += grid.dt * axis.interpolate(&source[(l - j_s) * nx..(l - j_s + 1) * nx], y);
                        let xi: f64 = rng.sample(StandardNormal);
                        y = em_step(y, l, &coeffs, axis, grid.dt, xi);
                    }
                    acc + model.terminal_reward(t, y, &stats_t)
                })
                .collect()
        })
        .collect();
    let payoffs: Vec<f64> = payoffs.into_iter().flatten().collect();
    if let Some(v) = payoffs.iter().find(|v| !v.is_finite()) {
        return Err(Error::ModelEvaluation {
            what: "pathwise payoff",
            point: format!("value {v} at (t={t}, s={s}, x={x})"),
        });
    }
    let n = n_paths as f64;
    let mean = pairwise_sum(&payoffs) / n;
    let sq: Vec<f64> = payoffs.iter().map(|p| (p - mean) * (p - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1.0);
    Ok(McEstimate {
        estimate: mean,
        stderr: (var / n).sqrt(),
        n: n_paths,
        seed,
    })
}

/// `pi'` on the time nodes `t, ..., t + epsilon`, `pi*` elsewhere.
pub fn paste_policy(
    pi_prime: &RelaxedPolicyField,
    pi_star: &RelaxedPolicyField,
    grid: &GridSpec,
    t: f64,
    epsilon: f64,
) -> Result<RelaxedPolicyField> {
    if !pi_prime.same_shape(pi_star) {
        return Err(Error::Config("policies live on different grids".into()));
    }
    let j_t = grid.time_index(t)?;
    let steps = grid.snap_steps(epsilon)?;
    if j_t + steps > grid.n_time {
        return Err(Error::Config(format!("paste window [{t}, {t} + {epsilon}] leaves the horizon")));
    }
    let mut out = pi_star.clone();
    if steps == 0 {
        return Ok(out);
    }
    for j in j_t..=j_t + steps {
        out.time_row_mut(j).copy_from_slice(pi_prime.time_row(j));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, GridConfig};
    use crate::measure_flow::{solve_fokker_planck, wasserstein2_1d, InitialLaw};

    fn grid(x_lo: f64, x_hi: f64, n_space: usize, horizon: f64, n_time: usize) -> GridSpec {
        build_grid(&GridConfig {
            horizon,
            n_time,
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

    fn gaussian(g: &GridSpec, mean: f64, var: f64) -> Vec<f64> {
        InitialLaw::Gaussian { mean, variance: var }.discretize(g).unwrap()
    }

    fn model(sigma: f64, drift: f64) -> ModelSpec {
        ModelSpec::new("mc", 1.0, 0.0, 1.0)
            .unwrap()
            .with_diffusion(move |_, _, _| sigma)
            .with_drift(move |_, _, _, _| drift)
    }

    #[test]
    fn reflection_stays_in_box() {
        let g = grid(-1.0, 1.0, 8, 1.0, 2);
        assert_eq!(reflect(1.25, &g.space), 0.75);
        assert_eq!(reflect(-1.5, &g.space), -0.5);
        assert!((reflect(5.3, &g.space) - 0.7).abs() < 1e-12);
        assert_eq!(reflect(0.3, &g.space), 0.3);
    }

    #[test]
    fn frozen_particles_reproduce_initial_law() {
        let g = grid(-3.0, 3.0, 120, 1.0, 10);
        let nu = gaussian(&g, 0.2, 0.2);
        let fr = MeasureFlow::constant(&g, &nu).unwrap();
        let sim = simulate_flow(&model(0.0, 0.0), &g, &RelaxedPolicyField::uniform(&g), &fr, &nu, 50_000, 3).unwrap();
        for j in 1..=g.n_time {
            assert_eq!(sim.density(j), sim.density(0));
        }
        assert!(wasserstein2_1d(sim.density(0), &nu, &g).unwrap() < 0.02);
    }

    #[test]
    fn drifting_point_mass_mean() {
        let g = grid(-1.0, 3.0, 200, 1.0, 100);
        let nu = InitialLaw::PointMass { at: 0.0 }.discretize(&g).unwrap();
        let fr = MeasureFlow::constant(&g, &nu).unwrap();
        let n = 40_000;
        let sim = simulate_particles(&model(0.1, 1.0), &g, &RelaxedPolicyField::uniform(&g), &fr, &nu, n, 11).unwrap();
        let tol = 3.0 * 0.1 / (n as f64).sqrt();
        assert!((sim.terminal.mean() - 1.0).abs() <= tol, "{}", sim.terminal.mean());
        assert!((sim.flow.mean(g.n_time) - 1.0).abs() <= tol);
    }

    #[test]
    fn particles_agree_with_fokker_planck() {
        let g = grid(-3.0, 3.0, 200, 1.0, 100);
        let m = ModelSpec::new("ou", 1.0, 0.0, 1.0)
            .unwrap()
            .with_drift(|_, x, _, a| a - 0.5 - x)
            .with_diffusion(|_, x, _| 0.4 + 0.1 * x.cos());
        let nu = gaussian(&g, 0.5, 0.1);
        let fr = MeasureFlow::constant(&g, &nu).unwrap();
        let pol = RelaxedPolicyField::uniform(&g);
        let fp = solve_fokker_planck(&m, &g, &pol, &fr, &nu).unwrap();
        let mc = simulate_flow(&m, &g, &pol, &fr, &nu, 200_000, 5).unwrap();
        let w = wasserstein2_1d(fp.density(g.n_time), mc.density(g.n_time), &g).unwrap();
        assert!(w <= 0.05, "{w}");
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let g = grid(-2.0, 2.0, 40, 1.0, 20);
        let nu = gaussian(&g, 0.0, 0.2);
        let fr = MeasureFlow::constant(&g, &nu).unwrap();
        let pol = RelaxedPolicyField::uniform(&g);
        let m = model(0.5, 0.3).with_terminal_reward(|_, x, _| x.sin());
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let f = simulate_flow(&m, &g, &pol, &fr, &nu, 10_000, 42).unwrap();
                let v = mc_value(&m, &g, &pol, &fr, 0.1, 0.0, 0.0, 0.3, 10_000, 42).unwrap();
                (f, v)
            })
        };
        let (f1, v1) = run(1);
        let (f4, v4) = run(4);
        assert_eq!(f1, f4);
        assert_eq!(v1.estimate.to_bits(), v4.estimate.to_bits());
        assert_eq!(v1.stderr.to_bits(), v4.stderr.to_bits());
    }

    #[test]
    fn constant_terminal_has_zero_error() {
        let g = grid(-2.0, 2.0, 40, 1.0, 20);
        let nu = gaussian(&g, 0.0, 0.2);
        let fr = MeasureFlow::constant(&g, &nu).unwrap();
        let m = model(0.5, 0.0).with_terminal_reward(|_, _, _| 2.5);
        let v = mc_value(&m, &g, &RelaxedPolicyField::uniform(&g), &fr, 0.3, 0.0, 0.5, 0.1, 1000, 1).unwrap();
        assert_eq!(v.estimate, 2.5);
        assert_eq!(v.stderr, 0.0);
    }

    #[test]
    fn quadratic_terminal_matches_ito_formula() {
        let g = grid(-5.0, 5.0, 200, 1.0, 100);
        let nu = gaussian(&g, 0.0, 0.2);
        let fr = MeasureFlow::constant(&g, &nu).unwrap();
        let m = model(0.5, 0.0).with_terminal_reward(|_, x, _| x * x);
        let pol = RelaxedPolicyField::uniform(&g);
        for (s, x) in [(0.0, 0.3), (0.5, -0.4)] {
            let v = mc_value(&m, &g, &pol, &fr, 0.2, 0.0, s, x, 100_000, 9).unwrap();
            let exact = x * x + 0.25 * (1.0 - s);
            assert!((v.estimate - exact).abs() <= 3.0 * v.stderr, "{} vs {exact} ({})", v.estimate, v.stderr);
        }
    }

    #[test]
    fn stderr_scales_like_inverse_sqrt() {
        let g = grid(-3.0, 3.0, 60, 1.0, 20);
        let nu = gaussian(&g, 0.0, 0.2);
        let fr = MeasureFlow::constant(&g, &nu).unwrap();
        let m = model(0.5, 0.1).with_terminal_reward(|_, x, _| x);
        let pol = RelaxedPolicyField::uniform(&g);
        let se: Vec<f64> = [10_000usize, 40_000, 160_000]
            .iter()
            .map(|&n| mc_value(&m, &g, &pol, &fr, 0.0, 0.0, 0.0, 0.0, n, 17).unwrap().stderr)
            .collect();
        for w in se.windows(2) {
            assert!((w[0] / w[1] - 2.0).abs() <= 0.4, "{se:?}");
        }
    }

    #[test]
    fn too_few_particles_is_rejected() {
        let g = grid(-2.0, 2.0, 20, 1.0, 4);
        let nu = gaussian(&g, 0.0, 0.2);
        let fr = MeasureFlow::constant(&g, &nu).unwrap();
        let r = simulate_flow(&model(0.5, 0.0), &g, &RelaxedPolicyField::uniform(&g), &fr, &nu, 10, 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    fn marked(g: &GridSpec, value: f64) -> RelaxedPolicyField {
        RelaxedPolicyField::from_fn(g, |_, _, out| {
            out.iter_mut().enumerate().for_each(|(k, p)| *p = 1.0 + value * (k as f64 - 1.5))
        })
    }

    #[test]
    fn paste_policy_rows() {
        let g = grid(-2.0, 2.0, 20, 1.0, 10);
        let star = marked(&g, 0.1);
        let prime = marked(&g, -0.2);
        assert_eq!(paste_policy(&prime, &star, &g, 0.3, 0.0).unwrap(), star);
        assert_eq!(paste_policy(&prime, &star, &g, 0.0, 1.0).unwrap(), prime);
        let pasted = paste_policy(&prime, &star, &g, 0.3, 0.2).unwrap();
        let differing: Vec<usize> = (0..=g.n_time)
            .filter(|&j| pasted.time_row(j) != star.time_row(j))
            .collect();
        assert_eq!(differing, vec![3, 4, 5]);
        assert!(matches!(paste_policy(&prime, &star, &g, 0.3, 0.15), Err(Error::Config(_))));
        assert!(matches!(paste_policy(&prime, &star, &g, 0.9, 0.2), Err(Error::Config(_))));
    }
}
