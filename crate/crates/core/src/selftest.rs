//! Quick built-in checks of closed-form special cases, run by the
//! `selftest` command on a fresh build.

use crate::gibbs::{entropy_of, gibbs_from_exponent, RelaxedPolicyField};
use crate::grid::{build_grid, tri_index, tri_rows, GridConfig, GridSpec};
use crate::mc_oracle::{mc_value, paste_policy, simulate_flow};
use crate::measure_flow::{flow_distance, wasserstein2_1d, InitialLaw, MeasureFlow};
use crate::model::catalog;
use crate::model::{audit_assumptions, measure_stats_of, AssumptionConstants, AuditLattice, ModelSpec};
use crate::pia::{halving_schedule, run_pia, vanishing_lambda, PiaOptions, PiaState};
use crate::value_pde::{solve_all_slices, solve_t_derivative};
use crate::verify::{deviation_gain_against, eehjb_residual, gibbs_consistency, lemma_checks, Deviation, DeviationMethod};

type Check = std::result::Result<(), String>;

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfTestOutcome {
    pub name: &'static str,
    pub error: Option<String>,
}

impl SelfTestOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none()
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn grid(x: (f64, f64), n_space: usize, horizon: f64, n_time: usize, a: (f64, f64), n_action: usize) -> Result<GridSpec, String> {
    build_grid(&GridConfig {
        horizon,
        n_time,
        x_lo: x.0,
        x_hi: x.1,
        n_space,
        action_lo: a.0,
        action_hi: a.1,
        n_action,
        boundary_policy: Default::default(),
    })
    .map_err(err)
}

fn small_grid(horizon: f64, n_time: usize) -> Result<GridSpec, String> {
    grid((-2.0, 2.0), 40, horizon, n_time, (0.0, 1.0), 8)
}

fn gaussian_flow(g: &GridSpec) -> Result<MeasureFlow, String> {
    let nu = InitialLaw::Gaussian { mean: 0.0, variance: 0.2 }.discretize(g).map_err(err)?;
    MeasureFlow::constant(g, &nu).map_err(err)
}

fn grid_nodes() -> Check {
    let g = grid((-3.0, 3.0), 600, 1.0, 4, (0.0, 1.0), 4)?;
    ensure(g.times == vec![0.0, 0.25, 0.5, 0.75, 1.0], || format!("time nodes {:?}", g.times))?;
    ensure(g.action.weights == vec![0.125, 0.25, 0.25, 0.25, 0.125], || format!("weights {:?}", g.action.weights))?;
    ensure(g.nx() == 601 && (g.dx() - 0.01).abs() < 1e-15, || format!("dx {}", g.dx()))
}

fn triangular_index() -> Check {
    ensure(tri_index(5, 0, 0).map_err(err)? == 0, || "(0,0)".into())?;
    let pairs = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
    for (k, (a, b)) in pairs.iter().enumerate() {
        ensure(tri_index(2, *a, *b).map_err(err)? == k, || format!("({a},{b})"))?;
    }
    ensure(tri_index(2, 2, 1).is_err(), || "j_s < j_t accepted".into())?;
    ensure(tri_rows(2) == 6, || "row count".into())
}

fn audit_constant_coefficients() -> Check {
    let model = ModelSpec::new("const", 1.0, 0.0, 1.0)
        .map_err(err)?
        .with_drift(|_, _, _, _| 1.0)
        .with_constants(AssumptionConstants {
            k1_bound: 2.0,
            k2_lipschitz: 1.0,
            eta_ellipticity: 0.5,
            k6_terminal_lipschitz: 1.0,
        });
    let rep = audit_assumptions(&model, &AuditLattice::new(-2.0, 2.0)).map_err(err)?;
    ensure(rep.pass && (rep.ellipticity_margin - 0.5).abs() < 1e-12, || format!("{rep:?}"))?;
    let degenerate = model.with_diffusion(|_, x, _| x);
    let rep = audit_assumptions(&degenerate, &AuditLattice::new(-2.0, 2.0)).map_err(err)?;
    ensure(!rep.pass && (rep.ellipticity_margin + 0.5).abs() < 1e-12, || format!("{rep:?}"))
}

fn measure_stats_point_masses() -> Check {
    let g = grid((-4.0, 4.0), 80, 1.0, 2, (0.0, 1.0), 4)?;
    let mut p = vec![0.0; g.nx()];
    p[60] = 1.0 / g.dx();
    let s = measure_stats_of(&p, &g).map_err(err)?;
    ensure((s.mean - 2.0).abs() < 1e-12 && s.variance.abs() < 1e-12, || format!("{} {}", s.mean, s.variance))?;
    let mut q = vec![0.0; g.nx()];
    q[30] = 0.5 / g.dx();
    q[50] = 0.5 / g.dx();
    let s = measure_stats_of(&q, &g).map_err(err)?;
    ensure(s.mean.abs() < 1e-12 && (s.variance - 1.0).abs() < 1e-12, || format!("{} {}", s.mean, s.variance))
}

fn gibbs_special_cases() -> Check {
    let g = grid((-1.0, 1.0), 8, 1.0, 2, (0.0, 1.0), 64)?;
    let (p, lp) = gibbs_from_exponent(&vec![1.5; g.na()], &g.action.weights, 0.3).map_err(err)?;
    ensure(p.iter().all(|v| (v - 1.0).abs() < 1e-14), || "constant exponent not uniform".into())?;
    ensure((lp - 1.5).abs() < 1e-14, || format!("log partition {lp}"))?;
    ensure(entropy_of(&p, &g.action.weights).map_err(err)?.abs() < 1e-15, || "uniform entropy".into())?;
    let g2 = grid((-1.0, 1.0), 8, 1.0, 2, (0.0, 2.0), 64)?;
    let u2 = vec![0.5; g2.na()];
    let h = entropy_of(&u2, &g2.action.weights).map_err(err)?;
    ensure((h - 2f64.ln()).abs() < 1e-12, || format!("entropy on [0,2] {h}"))
}

fn value_special_cases() -> Check {
    let g = small_grid(1.0, 10)?;
    let fl = gaussian_flow(&g)?;
    let pol = RelaxedPolicyField::uniform(&g);
    let model = ModelSpec::new("c", 1.0, 0.0, 1.0)
        .map_err(err)?
        .with_diffusion(|_, _, _| 0.6)
        .with_terminal_reward(|_, _, _| 1.25);
    let v = solve_all_slices(&model, &g, &pol, &fl, 0.4).map_err(err)?;
    ensure(v.values.values().iter().all(|x| (x - 1.25).abs() < 1e-12), || "constant terminal".into())?;
    let res = eehjb_residual(&v, &pol, &fl, 0.4, &model, &g).map_err(err)?;
    ensure(res.max_abs < 1e-10, || format!("residual {}", res.max_abs))?;

    let g1 = small_grid(1.0, 1)?;
    let v1 = solve_all_slices(&model, &g1, &RelaxedPolicyField::uniform(&g1), &gaussian_flow(&g1)?, 0.4).map_err(err)?;
    ensure(v1.values.rows() == 3 && v1.diagonal.n_rows() == 2, || "single step rows".into())?;

    let tc = catalog::by_name("timeconsistent", 1.0).map_err(err)?;
    let gt = grid((-2.0, 2.0), 40, 1.0, 10, (tc.model.action_lo, tc.model.action_hi), 8)?;
    let w = solve_t_derivative(&tc.model, &gt, &RelaxedPolicyField::uniform(&gt), &gaussian_flow(&gt)?, 0.4).map_err(err)?;
    ensure(w.max_abs() <= 1e-8, || format!("time-consistent W {}", w.max_abs()))
}

fn flow_special_cases() -> Check {
    let g = grid((-4.0, 4.0), 200, 1.0, 4, (0.0, 1.0), 4)?;
    let p = InitialLaw::Gaussian { mean: 0.1, variance: 0.2 }.discretize(&g).map_err(err)?;
    ensure(wasserstein2_1d(&p, &p, &g).map_err(err)? < 1e-10, || "W2(p, p)".into())?;
    let a = InitialLaw::PointMass { at: -1.0 }.discretize(&g).map_err(err)?;
    let b = InitialLaw::PointMass { at: 1.0 }.discretize(&g).map_err(err)?;
    let w = wasserstein2_1d(&a, &b, &g).map_err(err)?;
    ensure((w - 2.0).abs() <= g.dx(), || format!("point masses {w}"))?;
    let m = MeasureFlow::constant(&g, &p).map_err(err)?;
    ensure(flow_distance(&m, &m).map_err(err)? == 0.0, || "flow distance to itself".into())
}

fn monte_carlo_special_cases() -> Check {
    let g = small_grid(1.0, 10)?;
    let fl = gaussian_flow(&g)?;
    let pol = RelaxedPolicyField::uniform(&g);
    let still = ModelSpec::new("still", 1.0, 0.0, 1.0)
        .map_err(err)?
        .with_diffusion(|_, _, _| 0.0)
        .with_terminal_reward(|_, _, _| 0.75);
    let sim = simulate_flow(&still, &g, &pol, &fl, fl.density(0), 5000, 1).map_err(err)?;
    ensure((1..=g.n_time).all(|j| sim.density(j) == sim.density(0)), || "frozen particles moved".into())?;
    let est = mc_value(&still, &g, &pol, &fl, 0.3, 0.0, 0.0, 0.2, 500, 1).map_err(err)?;
    ensure(est.estimate == 0.75 && est.stderr == 0.0, || format!("{est:?}"))?;
    let other = RelaxedPolicyField::from_fn(&g, |_, _, out| {
        out.iter_mut().enumerate().for_each(|(k, p)| *p = 0.6 + 0.1 * k as f64)
    });
    ensure(paste_policy(&other, &pol, &g, 0.2, 0.0).map_err(err)? == pol, || "empty paste".into())?;
    ensure(paste_policy(&other, &pol, &g, 0.0, 1.0).map_err(err)? == other, || "full paste".into())
}

fn decoupled_fixed_point() -> Check {
    let entry = catalog::by_name("decoupled", 0.5).map_err(err)?;
    let g = grid((entry.x_lo, entry.x_hi), 60, 0.5, 20, (0.0, 1.0), 8)?;
    let nu = entry.initial.discretize(&g).map_err(err)?;
    let out = run_pia(PiaState::initial(&g, &nu).map_err(err)?, 0.5, &entry.model, &g, PiaOptions::default()).map_err(err)?;
    ensure(out.converged && out.report.iterations() == 2, || format!("iterations {}", out.report.iterations()))?;
    let again = run_pia(out.state.clone(), 0.5, &entry.model, &g, PiaOptions::default()).map_err(err)?;
    ensure(again.converged && again.report.iterations() == 1, || "restart".into())?;
    let st = &out.state;
    let v = st.value.as_ref().ok_or("missing value")?;
    let gap = gibbs_consistency(&st.policy, v, &st.flow, 0.5, &entry.model, &g).map_err(err)?;
    ensure(gap < 1e-12, || format!("gibbs gap {gap}"))?;
    let same = [Deviation {
        name: "self".into(),
        policy: st.policy.clone(),
    }];
    let rep = deviation_gain_against(&st.policy, &st.frozen, 0.5, &entry.model, &g, &[(0.0, 0.0)], &same, &[g.dt], DeviationMethod::Pde)
        .map_err(err)?;
    ensure(rep.rows.iter().all(|r| r.gain == 0.0), || "self deviation gain".into())?;
    let van = vanishing_lambda(&halving_schedule(0.5, 2), &entry.model, &g, &nu, PiaOptions::default(), true).map_err(err)?;
    ensure(
        van.entries[1..].iter().all(|e| e.j_gap == Some(0.0) || e.j_gap.unwrap_or(1.0) < 1e-12),
        || "vanishing gaps".into(),
    )
}

fn constant_drift_derivative() -> Check {
    let g = grid((-2.0, 2.0), 20, 1.0, 4, (0.0, 1.0), 32)?;
    let model = ModelSpec::new("b", 1.0, 0.0, 1.0)
        .map_err(err)?
        .with_drift(|_, _, _, _| 0.7)
        .with_running_reward(|_, _, _, a| -a * a);
    let rep = lemma_checks(&model, &g, 0.3).map_err(err)?;
    let ok = rep.check("dp_logpartition_fd").all(|r| r.pass);
    ensure(ok, || "finite difference of log partition".into())
}

/// Runs every check; never panics.
pub fn run_selftest() -> Vec<SelfTestOutcome> {
    let checks: [(&'static str, fn() -> Check); 11] = [
        ("grid nodes and weights", grid_nodes),
        ("triangular index", triangular_index),
        ("assumption audit", audit_constant_coefficients),
        ("measure stats of point masses", measure_stats_point_masses),
        ("gibbs special cases", gibbs_special_cases),
        ("value equation special cases", value_special_cases),
        ("flow and distance special cases", flow_special_cases),
        ("monte carlo special cases", monte_carlo_special_cases),
        ("decoupled fixed point", decoupled_fixed_point),
        ("constant drift derivative", constant_drift_derivative),
        ("catalog audit", catalog_audit),
    ];
    checks
        .iter()
        .map(|(name, f)| SelfTestOutcome {
            name,
            error: f().err(),
        })
        .collect()
}

fn catalog_audit() -> Check {
    for name in catalog::NAMES {
        let entry = catalog::by_name(name, 0.25).map_err(err)?;
        let rep = audit_assumptions(&entry.model, &AuditLattice::new(entry.x_lo, entry.x_hi)).map_err(err)?;
        ensure(rep.pass, || format!("{name}: {rep:?}"))?;
    }
    Ok(())
}
