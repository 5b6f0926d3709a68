//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use timfg::gibbs::{gibbs_policy, log_partition, RelaxedPolicyField};
use timfg::grid::{build_grid, GridConfig, GridSpec};
use timfg::mc_oracle::simulate_flow;
use timfg::measure_flow::{flow_distance, solve_fokker_planck, wasserstein2_1d};
use timfg::model::catalog;
use timfg::model::measure_stats_of;
use timfg::pia::{halving_schedule, phi_step, run_pia, vanishing_lambda};
use timfg::value_pde::{solve_all_slices, solve_slice};
use timfg::verify::{
    c1_profile, consistency_gap, default_deviation_set, deviation_gain, deviation_gain_against, eehjb_residual,
    gibbs_consistency, lemma_checks, Deviation, DeviationMethod,
};
use timfg::{InitialLaw, MeasureFlow, ModelSpec, PiaOptions, PiaOutcome, PiaState};

const LAMBDA: f64 = 0.5;
const TOL: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn grid(horizon: f64, n_time: usize, x: (f64, f64), n_space: usize, a: (f64, f64), n_action: usize) -> GridSpec {
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
    .unwrap()
}

/// The catalog model on the desk-scale grid together with its fixed point.
struct Solved {
    model: ModelSpec,
    grid: GridSpec,
    nu: Vec<f64>,
    out: PiaOutcome,
}

fn solve_catalog(name: &str, n: usize, n_action: usize) -> Solved {
    let entry = catalog::by_name(name, 0.25).unwrap();
    let grid = grid(0.25, n, (entry.x_lo, entry.x_hi), n, (entry.model.action_lo, entry.model.action_hi), n_action);
    let nu = entry.initial.discretize(&grid).unwrap();
    let opts = PiaOptions {
        tol: TOL,
        max_iters: 50,
    };
    let out = run_pia(PiaState::initial(&grid, &nu).unwrap(), LAMBDA, &entry.model, &grid, opts).unwrap();
    Solved {
        model: entry.model,
        grid,
        nu,
        out,
    }
}

fn criterion_gibbs(lq: &Solved) -> Outcome {
    // pi(a) = e^a / (e - 1) on [0, 1]
    let model = ModelSpec::new("linear", 1.0, 0.0, 1.0)
        .unwrap()
        .with_drift(|_, _, _, a| a);
    let g = grid(1.0, 4, (-1.0, 1.0), 8, (0.0, 1.0), 4096);
    let nu = InitialLaw::Gaussian {
        mean: 0.0,
        variance: 0.1,
    }
    .discretize(&g)
    .unwrap();
    let stats = measure_stats_of(&nu, &g).unwrap();
    let pi = gibbs_policy(0.0, 0.0, 1.0, &stats, 1.0, &model, &g).unwrap();
    let e = std::f64::consts::E;
    let closed = g
        .action
        .nodes
        .iter()
        .zip(&pi.values)
        .map(|(a, p)| (p - a.exp() / (e - 1.0)).abs())
        .fold(0.0, f64::max);

    let mut norm = lq.out.state.policy.max_normalization_error();
    for name in ["decoupled", "timeconsistent"] {
        norm = norm.max(solve_catalog(name, 60, 32).out.state.policy.max_normalization_error());
    }

    // log-partition against <g, pi> + lambda H with an independent entropy
    let stats = lq.out.state.flow.stats(0);
    let mut duality = 0.0f64;
    for &x in &[-2.0, -0.5, 0.0, 1.0] {
        for &p in &[-20.0, -1.0, 0.0, 0.7, 15.0] {
            for &lambda in &[0.05, 0.5, 2.0] {
                let pi = gibbs_policy(0.1, x, p, &stats, lambda, &lq.model, &lq.grid).unwrap();
                let lp = log_partition(0.1, x, p, &stats, lambda, &lq.model, &lq.grid).unwrap();
                let mut inner = 0.0;
                let mut ent = 0.0;
                for (k, a) in lq.grid.action.nodes.iter().enumerate() {
                    let gk = lq.model.drift(0.1, x, &stats, *a) * p + lq.model.running_reward(0.0, x, &stats, *a);
                    let w = lq.grid.action.weights[k];
                    inner += gk * pi.values[k] * w;
                    ent -= pi.values[k] * pi.values[k].ln() * w;
                }
                duality = duality.max((lp - (inner + lambda * ent)).abs());
            }
        }
    }
    outcome(
        closed <= 1e-8 && norm <= 1e-10 && duality <= 1e-9,
        format!("closed-form err {closed:.2e}, normalization err {norm:.2e}, duality err {duality:.2e}"),
    )
}

fn heat_model(horizon: f64, terminal: fn(f64) -> f64) -> ModelSpec {
    ModelSpec::new("heat", horizon, 0.0, 1.0)
        .unwrap()
        .with_diffusion(|_, _, _| 0.5)
        .with_terminal_reward(move |_, x, _| terminal(x))
}

/// Max error of slice 0 against `exact(s, x)`, over nodes with `|x| <= window`.
fn slice_error(model: &ModelSpec, g: &GridSpec, window: f64, exact: impl Fn(f64, f64) -> f64) -> f64 {
    let nu = InitialLaw::Gaussian {
        mean: 0.0,
        variance: 0.1,
    }
    .discretize(g)
    .unwrap();
    let flow = MeasureFlow::constant(g, &nu).unwrap();
    let pi = RelaxedPolicyField::uniform(g);
    let slab = solve_slice(model, g, &pi, &flow, LAMBDA, 0).unwrap();
    let mut err = 0.0f64;
    for (l, row) in slab.iter().enumerate() {
        for (x, v) in g.space.nodes.iter().zip(row) {
            if x.abs() <= window {
                err = err.max((v - exact(g.times[l], *x)).abs());
            }
        }
    }
    err
}

fn criterion_value_pde() -> Outcome {
    let t = 1.0;
    let model = heat_model(t, |x| x * x);
    let g = grid(t, 200, (-5.0, 5.0), 500, (0.0, 1.0), 8);
    let quad = slice_error(&model, &g, 2.0, |s, x| x * x + 0.25 * (t - s));

    let pi = std::f64::consts::PI;
    let model = heat_model(t, |x| (2.0 * x).cos());
    let exact = |s: f64, x: f64| (2.0 * x).cos() * (-0.5 * (t - s)).exp();
    let coarse_x = slice_error(&model, &grid(t, 16000, (-pi, pi), 50, (0.0, 1.0), 8), pi, exact);
    let fine_x = slice_error(&model, &grid(t, 16000, (-pi, pi), 100, (0.0, 1.0), 8), pi, exact);
    let coarse_t = slice_error(&model, &grid(t, 50, (-pi, pi), 800, (0.0, 1.0), 8), pi, exact);
    let fine_t = slice_error(&model, &grid(t, 100, (-pi, pi), 800, (0.0, 1.0), 8), pi, exact);
    let (rx, rt) = (coarse_x / fine_x, coarse_t / fine_t);
    outcome(
        quad <= 0.02 && rx >= 3.5 && rt >= 1.8,
        format!("x^2 err {quad:.2e}, space refinement {rx:.2}, time refinement {rt:.2}"),
    )
}

fn criterion_fokker_planck(lq: &Solved) -> Outcome {
    let t = 1.0;
    let model = heat_model(t, |_| 0.0);
    let g = grid(t, 200, (-4.0, 4.0), 400, (0.0, 1.0), 8);
    let nu = InitialLaw::Gaussian {
        mean: 0.0,
        variance: 0.1,
    }
    .discretize(&g)
    .unwrap();
    let frozen = MeasureFlow::constant(&g, &nu).unwrap();
    let flow = solve_fokker_planck(&model, &g, &RelaxedPolicyField::uniform(&g), &frozen, &nu).unwrap();
    let v0 = flow.variance(0);
    let mut var_err = 0.0f64;
    let mut mass_err = 0.0f64;
    for j in 0..=g.n_time {
        let expect = v0 + 0.25 * g.times[j];
        var_err = var_err.max((flow.variance(j) - expect).abs() / expect);
        mass_err = mass_err.max((flow.mass(j) - 1.0).abs());
    }

    let st = &lq.out.state;
    let fp = solve_fokker_planck(&lq.model, &lq.grid, &st.policy, &st.frozen, &lq.nu).unwrap();
    let mc = simulate_flow(&lq.model, &lq.grid, &st.policy, &st.frozen, &lq.nu, 200_000, 42).unwrap();
    let n = lq.grid.n_time;
    let w2 = wasserstein2_1d(fp.density(n), mc.density(n), &lq.grid).unwrap();
    for j in 0..=n {
        mass_err = mass_err.max((fp.mass(j) - 1.0).abs());
    }
    outcome(
        var_err <= 0.01 && mass_err <= 1e-10 && w2 <= 0.05,
        format!("variance rel err {var_err:.2e}, mass err {mass_err:.2e}, FP-vs-MC W2 {w2:.2e}"),
    )
}

fn criterion_contraction(lq: &Solved) -> Outcome {
    let rep = &lq.out.report;
    let ratios = rep.ratios();
    let totals: Vec<f64> = rep.records.iter().map(|r| r.d_m + r.d_j).collect();
    let decreasing = totals.windows(2).all(|w| w[1] < w[0]);
    let st = &lq.out.state;
    let next = phi_step(st, LAMBDA, &lq.model, &lq.grid).unwrap();
    let moved = flow_distance(&next.flow, &st.flow).unwrap() + next.value_gap(st);
    let k6 = lq.model.constants.k6_terminal_lipschitz;
    let ratio_list: Vec<String> = ratios.iter().map(|r| format!("{r:.4}")).collect();
    outcome(
        k6 == 0.0
            && lq.out.converged
            && rep.iterations() <= 50
            && ratios.iter().all(|r| *r < 1.0)
            && moved <= 2.0 * TOL,
        format!(
            "{} iterations, ratios [{}], totals strictly decreasing: {decreasing}, re-step moves {moved:.2e}",
            rep.iterations(),
            ratio_list.join(", ")
        ),
    )
}

fn criterion_fixed_point(lq: &Solved) -> Outcome {
    let residual_of = |s: &Solved| {
        let st = &s.out.state;
        eehjb_residual(st.value.as_ref().unwrap(), &st.policy, &st.frozen, LAMBDA, &s.model, &s.grid)
            .unwrap()
            .max_abs
    };
    let fine = residual_of(lq);
    let coarse_run = solve_catalog("lq_mean", 100, 32);
    let coarse = residual_of(&coarse_run);
    let bound = 5.0 * (lq.grid.dt + lq.grid.dx() * lq.grid.dx());
    let factor = coarse / fine;
    let st = &lq.out.state;
    let fp_gap = consistency_gap(&st.flow, &st.policy, &lq.model, &lq.grid, None).unwrap().fp_gap;
    let gibbs = gibbs_consistency(&st.policy, st.value.as_ref().unwrap(), &st.flow, LAMBDA, &lq.model, &lq.grid).unwrap();
    outcome(
        coarse_run.out.converged && fine <= bound && factor >= 1.7 && fp_gap <= 2.0 * TOL && gibbs <= 1e-6,
        format!(
            "residual {fine:.3e} (bound {bound:.3e}), refinement {factor:.2}, fp gap {fp_gap:.2e}, gibbs gap {gibbs:.2e}"
        ),
    )
}

fn criterion_deviation(lq: &Solved) -> Outcome {
    let g = &lq.grid;
    let mut probes = Vec::new();
    for f in [0.0, 0.25, 0.5] {
        let j = (f * g.n_time as f64).round() as usize;
        for x in [-0.5, 0.0, 0.5] {
            probes.push((g.times[j], x));
        }
    }
    let eps = [4.0 * g.dt, 2.0 * g.dt];
    let set = default_deviation_set(g).unwrap();
    let st = &lq.out.state;
    let rep = deviation_gain(st, LAMBDA, &lq.model, g, &probes, &set, &eps, DeviationMethod::Pde).unwrap();
    let max_gain = rep.max_gain();
    // gains may not grow as the window shrinks
    let monotone = rep.cells().iter().all(|c| c.windows(2).all(|w| w[1].gain <= w[0].gain + 1e-12));

    // corrupted baseline: uniform everywhere, probed with the default set and
    // the Gibbs policy it replaced
    let uniform = RelaxedPolicyField::uniform(g);
    let mut control_set = set.clone();
    control_set.push(Deviation {
        name: "gibbs".into(),
        policy: st.policy.clone(),
    });
    let control = deviation_gain_against(&uniform, &st.frozen, LAMBDA, &lq.model, g, &probes, &control_set, &eps[..1], DeviationMethod::Pde)
        .unwrap()
        .max_gain();
    outcome(
        rep.rows.len() == 9 * set.len() * 2 && max_gain <= 1e-2 && monotone && control >= 0.05,
        format!("max gain {max_gain:.3e}, nonincreasing as eps shrinks: {monotone}, corrupted control gain {control:.3e}"),
    )
}

/// Least-squares slope of `ln(gap)` against the step index.
fn log_slope(gaps: &[f64]) -> f64 {
    let n = gaps.len() as f64;
    let ys: Vec<f64> = gaps.iter().map(|g| g.max(1e-300).ln()).collect();
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - mx) * (y - my)).sum();
    let sxx: f64 = (0..gaps.len()).map(|i| (i as f64 - mx).powi(2)).sum();
    sxy / sxx
}

fn decreasing_trend(gaps: &[f64]) -> bool {
    log_slope(gaps) < 0.0 && gaps[gaps.len() - 1] < gaps[0]
}

fn criterion_vanishing() -> Outcome {
    let entry = catalog::by_name("lq_mean", 0.25).unwrap();
    let g = grid(0.25, 200, (entry.x_lo, entry.x_hi), 200, (entry.model.action_lo, entry.model.action_hi), 32);
    let nu = entry.initial.discretize(&g).unwrap();
    let opts = PiaOptions {
        tol: TOL,
        max_iters: 50,
    };
    let out = vanishing_lambda(&halving_schedule(0.5, 8), &entry.model, &g, &nu, opts, true).unwrap();
    let ent: Vec<f64> = out.entries.iter().map(|e| e.max_lambda_entropy).collect();
    let j_gaps: Vec<f64> = out.entries.iter().filter_map(|e| e.j_gap).collect();
    let m_gaps: Vec<f64> = out.entries.iter().filter_map(|e| e.m_gap).collect();
    let strictly = ent.windows(2).all(|w| w[1] < w[0]);
    let last = ent[ent.len() - 1];
    let all_converged = out.entries.iter().all(|e| e.converged);
    outcome(
        out.entries.len() == 9
            && all_converged
            && strictly
            && last < 0.05
            && decreasing_trend(&j_gaps)
            && decreasing_trend(&m_gaps),
        format!(
            "max lambda|H| {:.4} -> {last:.4} (strictly decreasing: {strictly}), J gaps {:.2e} -> {:.2e} (log slope {:.3}), m gaps {:.2e} -> {:.2e} (log slope {:.3})",
            ent[0],
            j_gaps[0],
            j_gaps[j_gaps.len() - 1],
            log_slope(&j_gaps),
            m_gaps[0],
            m_gaps[m_gaps.len() - 1],
            log_slope(&m_gaps)
        ),
    )
}

fn criterion_time_consistent() -> Outcome {
    let solved = solve_catalog("timeconsistent", 200, 32);
    let st = &solved.out.state;
    let value = solve_all_slices(&solved.model, &solved.grid, &st.policy, &st.frozen, LAMBDA).unwrap();
    let n = solved.grid.n_time;
    let mut spread = 0.0f64;
    for s in 0..=n {
        for i in 0..solved.grid.nx() {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for t in 0..=s {
                let v = value.values.row(t, s)[i];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            spread = spread.max(hi - lo);
        }
    }
    outcome(spread <= 1e-8, format!("max |V(t,s,x) - V(t',s,x)| {spread:.2e}"))
}

fn criterion_lemmas(lq: &Solved) -> Outcome {
    let rep = lemma_checks(&lq.model, &lq.grid, LAMBDA).unwrap();
    let failed = |name: &str| rep.check(name).filter(|r| !r.pass).count();
    let (fd, bound, gamma, fit) = (
        failed("dp_logpartition_fd"),
        failed("dp_logpartition_bound"),
        failed("dp_gibbs_bound"),
        failed("entropy_log_fit"),
    );
    let worst_fd = rep.check("dp_logpartition_fd").map(|r| r.value).fold(0.0, f64::max);
    let horizons = [1.0, 0.5, 0.25, 0.125];
    let entry = catalog::by_name("lq_mean", 0.25).unwrap();
    let c1 = c1_profile(
        |h| catalog::by_name("lq_mean", h).map(|e| e.model),
        &lq.grid,
        LAMBDA,
        &horizons,
        entry.initial,
        0.05,
    )
    .unwrap();
    let ratios: Vec<f64> = c1.iter().map(|p| p.ratio).collect();
    let c1_ok = ratios.windows(2).all(|w| w[1] < w[0]) && ratios[3] <= 0.5 * ratios[0];
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.4}")).collect();
    outcome(
        fd + bound + gamma + fit == 0 && c1_ok,
        format!(
            "flagged rows: fd {fd}, K1 bound {bound}, gibbs derivative {gamma}, entropy fit {fit}; worst fd rel err {worst_fd:.2e}; C1 ratios [{}]",
            shown.join(", ")
        ),
    )
}

fn run_cli(out: &Path, threads: &str, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_timfg"))
        .args(["--out", out.to_str().unwrap(), "--threads", threads])
        .args(["--n-time", "40", "--n-space", "40", "--n-action", "16"])
        .args(["--n-particles", "20000", "--n-paths", "2000"])
        .args(args)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
}

/// CSV contents keyed by file name, with wall-clock columns dropped.
fn csv_contents(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if !name.ends_with(".csv") {
            continue;
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let text = if name.starts_with("convergence") {
            text.lines()
                .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
                .collect::<Vec<_>>()
                .join("\n")
        } else {
            text
        };
        out.insert(name, text);
    }
    out
}

fn criterion_reproducible() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for threads in ["1", "4"] {
        let mut files = BTreeMap::new();
        for cmd in [vec!["pia"], vec!["verify"], vec!["mc-check"], vec!["vanish", "--halvings", "2"]] {
            let dir = root.path().join(format!("{}_{threads}", cmd[0]));
            run_cli(&dir, threads, &cmd);
            for (name, text) in csv_contents(&dir) {
                files.insert(format!("{}/{name}", cmd[0]), text);
            }
        }
        runs.push(files);
    }
    let differing: Vec<&String> = runs[0]
        .iter()
        .filter(|(k, v)| runs[1].get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    outcome(
        runs[0].len() == runs[1].len() && differing.is_empty() && !runs[0].is_empty(),
        format!("{} CSV files compared across 1 and 4 threads, {} differ", runs[0].len(), differing.len()),
    )
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn main() -> ExitCode {
    let start = Instant::now();
    let lq = solve_catalog("lq_mean", 200, 32);
    let criteria: Vec<Criterion> = vec![
        ("gibbs correctness", Box::new(|| criterion_gibbs(&lq))),
        ("value PDE oracle", Box::new(criterion_value_pde)),
        ("Fokker-Planck oracle", Box::new(|| criterion_fokker_planck(&lq))),
        ("policy iteration contraction", Box::new(|| criterion_contraction(&lq))),
        ("fixed-point verification", Box::new(|| criterion_fixed_point(&lq))),
        ("equilibrium deviation", Box::new(|| criterion_deviation(&lq))),
        ("vanishing entropy", Box::new(criterion_vanishing)),
        ("time-consistency degeneracy", Box::new(criterion_time_consistent)),
        ("lemma-level checks", Box::new(|| criterion_lemmas(&lq))),
        ("reproducibility", Box::new(criterion_reproducible)),
    ];
    let mut failures = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let o = run();
        if !o.pass {
            failures += 1;
        }
        println!(
            "criterion {:>2} {:<30} {}  {}  [{:.1}s]",
            k + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.1}s",
        criteria.len() - failures,
        criteria.len(),
        start.elapsed().as_secs_f64()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
