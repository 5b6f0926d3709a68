//! Numerical verification of computed equilibria: residual of the value
//! equation, Gibbs and population consistency, deviation gains of pasted
//! policies, and derivative / growth checks of the Gibbs operator.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{averaged_reward_row, coefficient_fields};
use crate::gibbs::{entropy_of, exponent_into, gibbs_field, gibbs_from_exponent, gibbs_policy, log_partition, RelaxedPolicyField};
use crate::grid::{Axis, GridSpec, TimeSpaceField, TriangularField};
use crate::mc_oracle::{mc_value, paste_policy, simulate_flow};
use crate::measure_flow::{flow_distance, solve_fokker_planck, InitialLaw, MeasureFlow};
use crate::model::{ModelSpec, MeasureStats};
use crate::pia::PiaState;
use crate::value_pde::{solve_slice, AuxValueField};

/// Pointwise residual of the value equation on the triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualField {
    /// Zero on boundary nodes and on the terminal level.
    pub values: TriangularField,
    /// Maximum over the bulk nodes.
    pub max_abs: f64,
    /// Bulk maximum per slice `t_j`.
    pub slice_max: Vec<f64>,
    /// Width of the edge bands left out of the maxima.
    pub margin: f64,
}

/// Width `2 sigma_max sqrt(T)` of the layer next to each edge of the box in
/// which the Neumann condition bends the value function.
pub fn boundary_margin(sigma_max: f64, horizon: f64) -> f64 {
    2.0 * sigma_max * horizon.sqrt()
}

/// Discrete residual of
/// `d_s V + sigma^2/2 V_xx + b~ V_x + r~(s - t) + lambda delta(s - t) H(pi)`
/// with a forward difference in `s`, centered differences in `x` and
/// coefficients at level `s`, over interior space nodes and `s < T`.
/// The maxima only cover nodes at distance at least [`boundary_margin`]
/// from both edges.
pub fn eehjb_residual(
    value: &AuxValueField,
    policy: &RelaxedPolicyField,
    flow: &MeasureFlow,
    lambda: f64,
    model: &ModelSpec,
    grid: &GridSpec,
) -> Result<ResidualField> {
    model.check_grid(grid)?;
    if value.values.n_time() != grid.n_time || value.values.width() != grid.nx() {
        return Err(Error::Config("value field does not match the grid".into()));
    }
    let coeffs = coefficient_fields(model, grid, policy, flow)?;
    let nx = grid.nx();
    let (dx, ds) = (grid.dx(), grid.dt);
    let sigma_max = (0..grid.n_time)
        .flat_map(|s| coeffs.sigma.row(s).iter().copied())
        .fold(0.0f64, |a, b| a.max(b.abs()));
    let margin = boundary_margin(sigma_max, grid.horizon);
    let (lo, hi) = (grid.space.lo + margin, grid.space.hi - margin);
    let bulk: Vec<bool> = grid.space.nodes.iter().map(|x| *x >= lo - 1e-12 && *x <= hi + 1e-12).collect();
    if !bulk[1..nx - 1].iter().any(|b| *b) {
        return Err(Error::Config(format!(
            "box [{}, {}] has no interior node farther than {margin} from its edges",
            grid.space.lo, grid.space.hi
        )));
    }
    let mut values = TriangularField::for_grid(grid);
    let slice_max: Result<Vec<f64>> = values
        .slabs_mut()
        .into_par_iter()
        .enumerate()
        .map(|(j_t, slab)| {
            let t = grid.times[j_t];
            let mut src = vec![0.0; nx];
            let mut worst = 0.0f64;
            for s in j_t..grid.n_time {
                let tau = grid.times[s] - t;
                averaged_reward_row(model, grid, policy, flow, s, tau, &mut src)?;
                let w = lambda * model.discount(tau);
                let v = value.values.row(j_t, s);
                let v_next = value.values.row(j_t, s + 1);
                let (b, sig, ent) = (coeffs.drift.row(s), coeffs.sigma.row(s), coeffs.entropy.row(s));
                let out = &mut slab[(s - j_t) * nx..(s - j_t + 1) * nx];
                for i in 1..nx - 1 {
                    let r = (v_next[i] - v[i]) / ds
                        + 0.5 * sig[i] * sig[i] * (v[i + 1] - 2.0 * v[i] + v[i - 1]) / (dx * dx)
                        + b[i] * (v[i + 1] - v[i - 1]) / (2.0 * dx)
                        + src[i]
                        + w * ent[i];
                    out[i] = r;
                    if bulk[i] {
                        worst = worst.max(r.abs());
                    }
                }
            }
            Ok(worst)
        })
        .collect();
    let slice_max = slice_max?;
    if let Some(v) = slice_max.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite residual {v}")));
    }
    let max_abs = slice_max.iter().copied().fold(0.0, f64::max);
    Ok(ResidualField {
        values,
        max_abs,
        slice_max,
        margin,
    })
}

/// `max_{t,x} || pi(t, x, .) - Gamma(t, x, D_x J(t, x), m_t, .) ||_{L^1}`.
pub fn gibbs_consistency(
    policy: &RelaxedPolicyField,
    value: &AuxValueField,
    flow: &MeasureFlow,
    lambda: f64,
    model: &ModelSpec,
    grid: &GridSpec,
) -> Result<f64> {
    let gamma = gibbs_field(model, grid, &value.diagonal_gradient, flow, lambda)?;
    if !gamma.same_shape(policy) {
        return Err(Error::Config("policy field does not match the grid".into()));
    }
    Ok(policy.max_l1_gap(&gamma))
}

/// Particle count and seed for Monte Carlo cross-checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub n_particles: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyGap {
    /// Flow distance between `m` and the Fokker-Planck flow of `pi` frozen at `m`.
    pub fp_gap: f64,
    /// Same against the particle flow, when requested.
    pub mc_gap: Option<f64>,
}

pub fn consistency_gap(
    flow: &MeasureFlow,
    policy: &RelaxedPolicyField,
    model: &ModelSpec,
    grid: &GridSpec,
    mc: Option<McConfig>,
) -> Result<ConsistencyGap> {
    let nu = flow.density(0);
    let fp = solve_fokker_planck(model, grid, policy, flow, nu)?;
    let fp_gap = flow_distance(flow, &fp)?;
    let mc_gap = match mc {
        Some(cfg) => {
            let sim = simulate_flow(model, grid, policy, flow, nu, cfg.n_particles, cfg.seed)?;
            Some(flow_distance(flow, &sim)?)
        }
        None => None,
    };
    Ok(ConsistencyGap { fp_gap, mc_gap })
}

/// How the pasted payoff is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeviationMethod {
    Pde,
    Mc { n_paths: usize, seed: u64 },
}

/// A named deviation policy.
#[derive(Debug, Clone)]
pub struct Deviation {
    pub name: String,
    pub policy: RelaxedPolicyField,
}

/// Uniform policy plus sharp Gibbs policies (`lambda = 1e-3`, exponent
/// `-(a - a_k)^2`) centred at five evenly spaced actions.
pub fn default_deviation_set(grid: &GridSpec) -> Result<Vec<Deviation>> {
    let mut set = vec![Deviation {
        name: "uniform".into(),
        policy: RelaxedPolicyField::uniform(grid),
    }];
    let (lo, hi) = (grid.action.lo, grid.action.hi);
    for k in 0..5 {
        let target = lo + (hi - lo) * k as f64 / 4.0;
        let g: Vec<f64> = grid.action.nodes.iter().map(|a| -(a - target) * (a - target)).collect();
        let (density, _) = gibbs_from_exponent(&g, &grid.action.weights, 1e-3)?;
        let policy = RelaxedPolicyField::from_fn(grid, |_, _, out| out.copy_from_slice(&density));
        set.push(Deviation {
            name: format!("dirac_{target:+.3}"),
            policy,
        });
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationRow {
    pub t: f64,
    pub x: f64,
    pub policy: String,
    pub epsilon: f64,
    /// `(J^{pi' (x)_{t,eps} pi*} - J^{pi*}) / eps` at `(t, x)`.
    pub gain: f64,
    /// Standard error of the gain for Monte Carlo evaluation.
    pub stderr: Option<f64>,
}

/// Exponent of the reporting envelope `eps^{alpha/2}`.
pub const DEVIATION_ALPHA: f64 = 0.5;
/// Acceptance level of [`gibbs_consistency`] at a converged state.
pub const GIBBS_CONSISTENCY_TOL: f64 = 1e-6;
/// Acceptance level of the particle part of [`consistency_gap`].
pub const MC_GAP_TOL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeviationReport {
    pub rows: Vec<DeviationRow>,
}

impl DeviationReport {
    pub fn max_gain(&self) -> f64 {
        self.rows.iter().map(|r| r.gain).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Rows for one `(t, x, policy)` cell ordered by decreasing epsilon.
    pub fn cells(&self) -> Vec<Vec<&DeviationRow>> {
        let mut cells: Vec<Vec<&DeviationRow>> = Vec::new();
        for row in &self.rows {
            match cells
                .iter_mut()
                .find(|c| c[0].t == row.t && c[0].x == row.x && c[0].policy == row.policy)
            {
                Some(c) => c.push(row),
                None => cells.push(vec![row]),
            }
        }
        for c in &mut cells {
            c.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
        }
        cells
    }

    /// `gain / eps^{alpha/2}` per row.
    pub fn envelope_ratios(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.gain / r.epsilon.powf(DEVIATION_ALPHA / 2.0))
            .collect()
    }
}

/// Deviation gains against the baseline `(pi_star, flow)`.
#[allow(clippy::too_many_arguments)]
pub fn deviation_gain_against(
    pi_star: &RelaxedPolicyField,
    flow: &MeasureFlow,
    lambda: f64,
    model: &ModelSpec,
    grid: &GridSpec,
    probes: &[(f64, f64)],
    deviations: &[Deviation],
    epsilons: &[f64],
    method: DeviationMethod,
) -> Result<DeviationReport> {
    for &eps in epsilons {
        if grid.snap_steps(eps)? == 0 {
            return Err(Error::Config("deviation windows must be positive".into()));
        }
    }
    for &(t, x) in probes {
        grid.time_index(t)?;
        if !(grid.space.lo..=grid.space.hi).contains(&x) {
            return Err(Error::Domain(format!("probe x = {x} outside the box")));
        }
    }
    let jobs: Vec<(usize, usize, usize)> = (0..probes.len())
        .flat_map(|p| (0..deviations.len()).flat_map(move |d| (0..epsilons.len()).map(move |e| (p, d, e))))
        .collect();
    let evaluate = |policy: &RelaxedPolicyField, t: f64, x: f64, seed_offset: u64| -> Result<(f64, f64)> {
        match method {
            DeviationMethod::Pde => {
                let j_t = grid.time_index(t)?;
                let slab = solve_slice(model, grid, policy, flow, lambda, j_t)?;
                Ok((grid.space.interpolate(&slab[0], x), 0.0))
            }
            DeviationMethod::Mc { n_paths, seed } => {
                let est = mc_value(model, grid, policy, flow, lambda, t, t, x, n_paths, seed.wrapping_add(seed_offset))?;
                Ok((est.estimate, est.stderr))
            }
        }
    };
    let baseline: Result<Vec<(f64, f64)>> = probes
        .par_iter()
        .enumerate()
        .map(|(p, &(t, x))| evaluate(pi_star, t, x, p as u64))
        .collect();
    let baseline = baseline?;
    let rows: Result<Vec<DeviationRow>> = jobs
        .par_iter()
        .map(|&(p, d, e)| {
            let (t, x) = probes[p];
            let eps = epsilons[e];
            let pasted = paste_policy(&deviations[d].policy, pi_star, grid, t, eps)?;
            // common random numbers with the baseline
            let (value, se) = evaluate(&pasted, t, x, p as u64)?;
            let (base, base_se) = baseline[p];
            Ok(DeviationRow {
                t,
                x,
                policy: deviations[d].name.clone(),
                epsilon: eps,
                gain: (value - base) / eps,
                stderr: match method {
                    DeviationMethod::Pde => None,
                    DeviationMethod::Mc { .. } => Some((se * se + base_se * base_se).sqrt() / eps),
                },
            })
        })
        .collect();
    Ok(DeviationReport { rows: rows? })
}

/// Deviation gains at a computed fixed point, using its policy and the flow
/// its value was evaluated against.
#[allow(clippy::too_many_arguments)]
pub fn deviation_gain(
    fixed_point: &PiaState,
    lambda: f64,
    model: &ModelSpec,
    grid: &GridSpec,
    probes: &[(f64, f64)],
    deviations: &[Deviation],
    epsilons: &[f64],
    method: DeviationMethod,
) -> Result<DeviationReport> {
    deviation_gain_against(
        &fixed_point.policy,
        &fixed_point.frozen,
        lambda,
        model,
        grid,
        probes,
        deviations,
        epsilons,
        method,
    )
}

/// One line of the lemma report.
#[derive(Debug, Clone, PartialEq)]
pub struct LemmaRow {
    pub check: String,
    pub probe: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LemmaReport {
    pub rows: Vec<LemmaRow>,
}

impl LemmaReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn check(&self, name: &str) -> impl Iterator<Item = &LemmaRow> {
        let name = name.to_string();
        self.rows.iter().filter(move |r| r.check == name)
    }

    fn push(&mut self, check: &str, probe: String, value: f64, bound: f64, pass: bool) {
        self.rows.push(LemmaRow {
            check: check.into(),
            probe,
            value,
            bound,
            pass,
        });
    }
}

/// Momentum lattice for the derivative checks.
pub const P_LATTICE: [f64; 9] = [-50.0, -10.0, -2.0, -0.5, 0.0, 0.5, 2.0, 10.0, 50.0];
/// Entropy-weight used by the sublinearity fit.
pub const ENTROPY_FIT_LAMBDA: f64 = 0.1;
/// Action cells used by the entropy fit.
pub const ENTROPY_FIT_CELLS: usize = 16384;

fn reference_measure(grid: &GridSpec) -> Result<Vec<f64>> {
    let mid = 0.5 * (grid.space.lo + grid.space.hi);
    let width = grid.space.hi - grid.space.lo;
    InitialLaw::Gaussian {
        mean: mid,
        variance: (width / 12.0).powi(2),
    }
    .discretize(grid)
}

/// Least-squares fit `y ~ a + b z`.
fn linear_fit(z: &[f64], y: &[f64]) -> (f64, f64) {
    let n = z.len() as f64;
    let (mz, my) = (z.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = z.iter().zip(y).map(|(a, b)| (a - mz) * (b - my)).sum();
    let sxx: f64 = z.iter().map(|a| (a - mz) * (a - mz)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - b * mz, b)
}

/// Derivative bound, Lipschitz bound and entropy growth of the Gibbs operator
/// at a few `(t, x)` probes against a reference Gaussian measure.
pub fn lemma_checks(model: &ModelSpec, grid: &GridSpec, lambda: f64) -> Result<LemmaReport> {
    model.check_grid(grid)?;
    let mut report = LemmaReport::default();
    let rho = reference_measure(grid)?;
    let stats = MeasureStats::from_parts(&rho, &grid.space);
    let k1 = model.constants.k1_bound;
    let na = grid.na();
    let ts = [0.0, 0.5 * grid.horizon, grid.horizon];
    let xs = [
        grid.space.lo,
        0.5 * (grid.space.lo + grid.space.hi),
        grid.space.lo + 0.75 * (grid.space.hi - grid.space.lo),
    ];
    let mut drifts = vec![0.0; na];
    for &t in &ts {
        for &x in &xs {
            for (o, a) in drifts.iter_mut().zip(&grid.action.nodes) {
                *o = model.drift(t, x, &stats, *a);
            }
            for &p in &P_LATTICE {
                let probe = format!("t={t:.6} x={x:.6} p={p}");
                let pi = gibbs_policy(t, x, p, &stats, lambda, model, grid)?;
                let btilde: f64 = pi.expect(|k| drifts[k]);
                let h = 1e-5 * p.abs().max(1.0);
                let hp = log_partition(t, x, p + h, &stats, lambda, model, grid)?;
                let hm = log_partition(t, x, p - h, &stats, lambda, model, grid)?;
                let fd = (hp - hm) / (2.0 * h);
                let err = (fd - btilde).abs() / btilde.abs().max(1.0);
                report.push("dp_logpartition_fd", probe.clone(), err, 1e-6, err <= 1e-6);
                report.push("dp_logpartition_bound", probe.clone(), btilde.abs(), k1, btilde.abs() <= k1);

                let pp = gibbs_policy(t, x, p + h, &stats, lambda, model, grid)?;
                let pm = gibbs_policy(t, x, p - h, &stats, lambda, model, grid)?;
                let ratio = (0..na)
                    .map(|k| ((pp.values[k] - pm.values[k]) / (2.0 * h)).abs() / pi.values[k])
                    .fold(0.0, f64::max);
                let bound = 2.0 * k1 / lambda;
                report.push("dp_gibbs_bound", probe, ratio, bound, ratio <= bound * (1.0 + 1e-6));
            }
        }
    }

    // entropy against ln(1 + |p|) at a fixed probe, on an action axis fine
    // enough to resolve the concentrated policies at large |p|
    let (t, x) = (0.0, xs[1]);
    let fine = Axis::uniform(grid.action.lo, grid.action.hi, ENTROPY_FIT_CELLS);
    let ys: Vec<f64> = (0..=100).map(f64::from).collect();
    let mut g = vec![0.0; fine.len()];
    let mut ent = Vec::with_capacity(ys.len());
    for &y in &ys {
        exponent_into(model, &fine.nodes, t, x, y, &stats, &mut g)?;
        let (pi, _) = gibbs_from_exponent(&g, &fine.weights, ENTROPY_FIT_LAMBDA)?;
        ent.push(entropy_of(&pi, &fine.weights)?.abs());
    }
    let z: Vec<f64> = ys.iter().map(|y| (1.0 + y).ln()).collect();
    let (a, b) = linear_fit(&z, &ent);
    for ((y, zz), e) in ys.iter().zip(&z).zip(&ent) {
        let bound = 1.1 * (a + b * zz);
        report.push(
            "entropy_log_fit",
            format!("y={y} fit_a={a:.6} fit_b={b:.6}"),
            *e,
            bound,
            *e <= bound + 1e-12,
        );
    }
    Ok(report)
}

/// One point of the empirical `C_1(T)` profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct C1Point {
    pub horizon: f64,
    pub input_gap: f64,
    pub output_gap: f64,
    pub ratio: f64,
}

/// Sensitivity of the population map `(J, m) -> FP(Gamma(D_x J, m), m)` at
/// several horizons. The two inputs are a time-constant Gaussian flow with
/// `J = 0` and a flow whose mean drifts by `h t / T` with `J = h x`.
pub fn c1_profile(
    model_at: impl Fn(f64) -> Result<ModelSpec>,
    base: &GridSpec,
    lambda: f64,
    horizons: &[f64],
    initial: InitialLaw,
    h: f64,
) -> Result<Vec<C1Point>> {
    let (mean, variance) = match initial {
        InitialLaw::Gaussian { mean, variance } => (mean, variance),
        InitialLaw::PointMass { .. } => return Err(Error::Config("C1 profile needs a Gaussian initial law".into())),
    };
    horizons
        .iter()
        .map(|&horizon| {
            let model = model_at(horizon)?;
            let grid = crate::grid::build_grid(&crate::grid::GridConfig {
                horizon,
                ..base.config()
            })?;
            let nu = initial.discretize(&grid)?;
            let m = MeasureFlow::constant(&grid, &nu)?;
            let rows: Result<Vec<Vec<f64>>> = grid
                .times
                .iter()
                .map(|t| {
                    InitialLaw::Gaussian {
                        mean: mean + h * t / horizon,
                        variance,
                    }
                    .discretize(&grid)
                })
                .collect();
            let m2 = MeasureFlow::new(&grid, TimeSpaceField::from_rows(rows?))?;
            let grad = TimeSpaceField::for_grid(&grid);
            let mut grad2 = TimeSpaceField::for_grid(&grid);
            grad2.values_mut().iter_mut().for_each(|v| *v = h);
            let pi = gibbs_field(&model, &grid, &grad, &m, lambda)?;
            let pi2 = gibbs_field(&model, &grid, &grad2, &m2, lambda)?;
            let out = solve_fokker_planck(&model, &grid, &pi, &m, &nu)?;
            let out2 = solve_fokker_planck(&model, &grid, &pi2, &m2, &nu)?;
            let input_gap = h + flow_distance(&m, &m2)?;
            let output_gap = flow_distance(&out, &out2)?;
            Ok(C1Point {
                horizon,
                input_gap,
                output_gap,
                ratio: output_gap / input_gap,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, GridConfig};
    use crate::model::catalog;
    use crate::pia::{run_pia, PiaOptions};
    use crate::value_pde::solve_all_slices;

    fn grid(x_lo: f64, x_hi: f64, n_space: usize, horizon: f64, n_time: usize, a: (f64, f64), n_action: usize) -> GridSpec {
        build_grid(&GridConfig {
            horizon,
            n_time,
            x_lo,
            x_hi,
            n_space,
            action_lo: a.0,
            action_hi: a.1,
            n_action,
            boundary_policy: Default::default(),
        })
        .unwrap()
    }

    fn catalog_grid(entry: &catalog::CatalogEntry, n_time: usize, n_space: usize) -> GridSpec {
        grid(
            entry.x_lo,
            entry.x_hi,
            n_space,
            entry.model.horizon,
            n_time,
            (entry.model.action_lo, entry.model.action_hi),
            16,
        )
    }

    fn gaussian_flow(g: &GridSpec) -> MeasureFlow {
        let nu = InitialLaw::Gaussian { mean: 0.0, variance: 0.2 }.discretize(g).unwrap();
        MeasureFlow::constant(g, &nu).unwrap()
    }

    #[test]
    fn constant_value_has_zero_residual() {
        let g = grid(-2.0, 2.0, 20, 1.0, 10, (0.0, 1.0), 4);
        let model = ModelSpec::new("c", 1.0, 0.0, 1.0).unwrap().with_terminal_reward(|_, _, _| 2.0);
        let fl = gaussian_flow(&g);
        let pol = RelaxedPolicyField::uniform(&g);
        let mut values = TriangularField::for_grid(&g);
        for j_t in 0..=g.n_time {
            for j_s in j_t..=g.n_time {
                values.row_mut(j_t, j_s).fill(2.0);
            }
        }
        let exact = AuxValueField {
            values,
            diagonal: TimeSpaceField::for_grid(&g),
            diagonal_gradient: TimeSpaceField::for_grid(&g),
        };
        assert_eq!(eehjb_residual(&exact, &pol, &fl, 0.7, &model, &g).unwrap().max_abs, 0.0);
        let v = solve_all_slices(&model, &g, &pol, &fl, 0.7).unwrap();
        assert!(eehjb_residual(&v, &pol, &fl, 0.7, &model, &g).unwrap().max_abs < 1e-12);
    }

    #[test]
    fn quadratic_corruption_is_detected() {
        let g = grid(-2.0, 2.0, 40, 1.0, 20, (0.0, 1.0), 4);
        let sigma = 0.6;
        let model = ModelSpec::new("q", 1.0, 0.0, 1.0)
            .unwrap()
            .with_diffusion(move |_, _, _| sigma)
            .with_terminal_reward(|_, x, _| x.sin());
        let fl = gaussian_flow(&g);
        let pol = RelaxedPolicyField::uniform(&g);
        let mut v = solve_all_slices(&model, &g, &pol, &fl, 0.3).unwrap();
        let clean = eehjb_residual(&v, &pol, &fl, 0.3, &model, &g).unwrap().max_abs;
        assert!(clean < 1e-10, "{clean}");
        for j_t in 0..=g.n_time {
            for j_s in j_t..=g.n_time {
                for (val, x) in v.values.row_mut(j_t, j_s).iter_mut().zip(&g.space.nodes) {
                    *val += x * x;
                }
            }
        }
        let bad = eehjb_residual(&v, &pol, &fl, 0.3, &model, &g).unwrap().max_abs;
        assert!(bad >= sigma * sigma * (1.0 - 1e-9), "{bad}");
    }

    #[test]
    fn residual_maxima_skip_the_edge_bands() {
        let entry = catalog::by_name("lq_mean", 0.25).unwrap();
        let g = catalog_grid(&entry, 30, 60);
        let nu = entry.initial.discretize(&g).unwrap();
        let out = run_pia(PiaState::initial(&g, &nu).unwrap(), 0.5, &entry.model, &g, PiaOptions::default()).unwrap();
        let st = &out.state;
        let res = eehjb_residual(st.value.as_ref().unwrap(), &st.policy, &st.frozen, 0.5, &entry.model, &g).unwrap();
        assert!((res.margin - 0.5).abs() < 1e-12);
        let (mut bulk, mut all) = (0.0f64, 0.0f64);
        for j_t in 0..g.n_time {
            for j_s in j_t..g.n_time {
                for (r, x) in res.values.row(j_t, j_s).iter().zip(&g.space.nodes) {
                    all = all.max(r.abs());
                    if x.abs() <= 2.5 + 1e-12 {
                        bulk = bulk.max(r.abs());
                    }
                }
            }
        }
        assert_eq!(res.max_abs, bulk);
        assert!(all > bulk);
        assert_eq!(res.slice_max.iter().copied().fold(0.0, f64::max), bulk);
    }

    #[test]
    fn residual_needs_a_bulk_region() {
        let g = grid(-0.4, 0.4, 10, 1.0, 5, (0.0, 1.0), 4);
        let model = ModelSpec::new("c", 1.0, 0.0, 1.0).unwrap();
        let fl = gaussian_flow(&g);
        let pol = RelaxedPolicyField::uniform(&g);
        let v = solve_all_slices(&model, &g, &pol, &fl, 0.7).unwrap();
        assert!(matches!(eehjb_residual(&v, &pol, &fl, 0.7, &model, &g), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_policy_is_inconsistent_with_tilted_gibbs() {
        let g = grid(-2.0, 2.0, 20, 1.0, 10, (0.0, 1.0), 16);
        let model = ModelSpec::new("tilt", 1.0, 0.0, 1.0)
            .unwrap()
            .with_running_reward(|_, _, _, a| 2.0 * a);
        let fl = gaussian_flow(&g);
        let pol = RelaxedPolicyField::uniform(&g);
        let v = solve_all_slices(&model, &g, &pol, &fl, 0.5).unwrap();
        assert!(gibbs_consistency(&pol, &v, &fl, 0.5, &model, &g).unwrap() > 0.1);
    }

    #[test]
    fn decoupled_gibbs_gap_is_zero() {
        let entry = catalog::by_name("decoupled", 0.5).unwrap();
        let g = catalog_grid(&entry, 10, 30);
        let fl = gaussian_flow(&g);
        let pol = RelaxedPolicyField::uniform(&g);
        let v = solve_all_slices(&entry.model, &g, &pol, &fl, 0.5).unwrap();
        assert!(gibbs_consistency(&pol, &v, &fl, 0.5, &entry.model, &g).unwrap() < 1e-12);
    }

    #[test]
    fn frozen_initial_law_is_not_consistent_under_drift() {
        let c = 0.8;
        let horizon = 1.0;
        let g = grid(-3.0, 4.0, 140, horizon, 50, (0.0, 1.0), 4);
        let model = ModelSpec::new("d", horizon, 0.0, 1.0)
            .unwrap()
            .with_drift(move |_, _, _, _| c)
            .with_diffusion(|_, _, _| 0.3);
        let gap = consistency_gap(&gaussian_flow(&g), &RelaxedPolicyField::uniform(&g), &model, &g, None).unwrap();
        assert!(gap.fp_gap >= c * horizon / 2.0, "{}", gap.fp_gap);
    }

    #[test]
    fn fixed_point_checks() {
        let entry = catalog::by_name("lq_mean", 0.25).unwrap();
        let g = catalog_grid(&entry, 40, 80);
        let nu = entry.initial.discretize(&g).unwrap();
        let opts = PiaOptions::default();
        let out = run_pia(PiaState::initial(&g, &nu).unwrap(), 0.5, &entry.model, &g, opts).unwrap();
        assert!(out.converged);
        let st = &out.state;
        let gap = consistency_gap(
            &st.flow,
            &st.policy,
            &entry.model,
            &g,
            Some(McConfig {
                n_particles: 20_000,
                seed: 3,
            }),
        )
        .unwrap();
        assert!(gap.fp_gap <= 2.0 * opts.tol);
        assert!(gap.mc_gap.unwrap() <= gap.fp_gap + 0.05);
        let v = st.value.as_ref().unwrap();
        assert!(gibbs_consistency(&st.policy, v, &st.flow, 0.5, &entry.model, &g).unwrap() <= 1e-6);
        let res = eehjb_residual(v, &st.policy, &st.frozen, 0.5, &entry.model, &g).unwrap();
        assert!(res.max_abs <= 5.0 * (g.dt + g.dx() * g.dx()), "{}", res.max_abs);

        let probes = [(0.0, 0.0), (0.1, 0.5)];
        let eps = [2.0 * g.dt, g.dt];
        let same = vec![Deviation {
            name: "self".into(),
            policy: st.policy.clone(),
        }];
        let rep = deviation_gain(st, 0.5, &entry.model, &g, &probes, &same, &eps, DeviationMethod::Pde).unwrap();
        assert!(rep.rows.iter().all(|r| r.gain == 0.0));
        let set = default_deviation_set(&g).unwrap();
        assert_eq!(set.len(), 6);
        let rep = deviation_gain(st, 0.5, &entry.model, &g, &probes, &set, &eps, DeviationMethod::Pde).unwrap();
        assert_eq!(rep.rows.len(), 2 * 6 * 2);
        assert!(rep.max_gain() <= 1e-2, "{}", rep.max_gain());
        let mc = deviation_gain(
            st,
            0.5,
            &entry.model,
            &g,
            &probes[..1],
            &set[..2],
            &eps[..1],
            DeviationMethod::Mc { n_paths: 20_000, seed: 1 },
        )
        .unwrap();
        for (a, b) in mc.rows.iter().zip(rep.rows.iter().filter(|r| r.t == 0.0 && r.x == 0.0 && r.epsilon == eps[0])) {
            assert_eq!(a.policy, b.policy);
            assert!((a.gain - b.gain).abs() <= 4.0 * a.stderr.unwrap() + 0.05, "{} {} {:?}", a.gain, b.gain, a.stderr);
        }
    }

    #[test]
    fn misaligned_epsilon_is_rejected() {
        let entry = catalog::by_name("decoupled", 0.5).unwrap();
        let g = catalog_grid(&entry, 10, 30);
        let fl = gaussian_flow(&g);
        let pol = RelaxedPolicyField::uniform(&g);
        let set = default_deviation_set(&g).unwrap();
        let r = deviation_gain_against(&pol, &fl, 0.5, &entry.model, &g, &[(0.0, 0.0)], &set, &[0.013], DeviationMethod::Pde);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn constant_drift_gives_exact_derivative() {
        let g = grid(-2.0, 2.0, 20, 1.0, 10, (0.0, 1.0), 32);
        let model = ModelSpec::new("b", 1.0, 0.0, 1.0)
            .unwrap()
            .with_drift(|_, _, _, _| 0.7)
            .with_running_reward(|_, x, _, a| -(a - 0.3 * x).powi(2));
        let rep = lemma_checks(&model, &g, 0.2).unwrap();
        for row in rep.check("dp_logpartition_fd") {
            assert!(row.value <= 1e-6, "{row:?}");
        }
        assert!(rep.check("dp_gibbs_bound").all(|r| r.value < 1e-3));
    }

    #[test]
    fn lemma_checks_on_catalog() {
        let entry = catalog::by_name("lq_mean", 0.25).unwrap();
        let g = catalog_grid(&entry, 10, 40);
        let rep = lemma_checks(&entry.model, &g, 0.5).unwrap();
        for name in ["dp_logpartition_fd", "dp_logpartition_bound", "dp_gibbs_bound"] {
            assert!(rep.check(name).all(|r| r.pass), "{name}");
        }
        assert!(rep.check("entropy_log_fit").all(|r| r.pass));
        assert_eq!(rep.check("entropy_log_fit").count(), 101);
    }

    #[test]
    fn entropy_fit_accepts_linear_exponents_and_flags_plateaus() {
        let g = grid(-1.0, 1.0, 20, 1.0, 4, (-1.0, 1.0), 8);
        let linear = ModelSpec::new("lin", 1.0, -1.0, 1.0).unwrap().with_drift(|_, _, _, a| a);
        assert!(lemma_checks(&linear, &g, 0.5).unwrap().all_pass());

        // a stiff action cost keeps the entropy flat up to |p| = 40
        let stiff = catalog::lq_mean(catalog::LqMeanParams {
            action_cost: 40.0,
            ..Default::default()
        })
        .unwrap();
        let g = catalog_grid(&catalog::by_name("lq_mean", 0.25).unwrap(), 10, 40);
        let rep = lemma_checks(&stiff, &g, 0.5).unwrap();
        assert!(rep.check("entropy_log_fit").any(|r| !r.pass));
    }

    #[test]
    fn c1_profile_decreases_with_horizon() {
        let entry = catalog::by_name("lq_mean", 1.0).unwrap();
        let g = catalog_grid(&entry, 40, 120);
        let pts = c1_profile(
            |h| catalog::by_name("lq_mean", h).map(|e| e.model),
            &g,
            0.5,
            &[1.0, 0.5, 0.25, 0.125],
            entry.initial,
            0.05,
        )
        .unwrap();
        assert!(pts.windows(2).all(|w| w[1].ratio < w[0].ratio), "{pts:?}");
    }
}
