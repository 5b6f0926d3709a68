//! Orchestration of the command-line subcommands. Each command writes its
//! CSV files and a resolved copy of the configuration into the output
//! directory.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::mc_oracle::mc_value;
use crate::model::catalog::{self, CatalogEntry};
use crate::output::{self, McQuery};
use crate::pia::{halving_schedule, run_pia_with, vanishing_lambda, PiaOutcome, PiaState};
use crate::selftest::run_selftest;
use crate::value_pde::solve_slice;
use crate::verify::{
    c1_profile, consistency_gap, default_deviation_set, deviation_gain, eehjb_residual, gibbs_consistency, lemma_checks,
    DeviationMethod, LemmaRow, McConfig, GIBBS_CONSISTENCY_TOL, MC_GAP_TOL,
};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Pia,
    Vanish,
    Verify,
    McCheck,
    Selftest,
}

/// How a command ended when it did not fail outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Ok,
    /// A policy iteration hit its iteration cap and non-convergence was not allowed.
    NotConverged,
    /// At least one self-test check failed.
    SelfTestFailed,
}

struct Setup {
    entry: CatalogEntry,
    grid: GridSpec,
    nu: Vec<f64>,
}

fn setup(cfg: &RunConfig) -> Result<Setup> {
    let entry = cfg.catalog_entry()?;
    let grid = cfg.build_grid(&entry)?;
    let nu = entry.initial.discretize(&grid)?;
    Ok(Setup { entry, grid, nu })
}

fn prepare_out(cfg: &RunConfig) -> Result<std::path::PathBuf> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(RESOLVED_CONFIG), cfg.to_toml_string()?)?;
    Ok(dir)
}

fn solve(cfg: &RunConfig, s: &Setup) -> Result<PiaOutcome> {
    let init = PiaState::initial(&s.grid, &s.nu)?;
    let out = run_pia_with(init, cfg.solver.lambda, &s.entry.model, &s.grid, cfg.pia_options(), |r| {
        eprintln!(
            "iteration {:>3}  d_m {:.3e}  d_J {:.3e}  ratio {}  {:.2}s",
            r.k,
            r.d_m,
            r.d_j,
            r.ratio.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            r.seconds
        );
    })?;
    if out.converged {
        eprintln!("converged after {} iterations", out.report.iterations());
    } else {
        eprintln!(
            "not converged after {} iterations (last gap {:.3e})",
            out.report.iterations(),
            out.report.last_gap().unwrap_or(f64::NAN)
        );
    }
    Ok(out)
}

fn convergence_status(cfg: &RunConfig, converged: bool) -> RunStatus {
    if converged || cfg.solver.allow_nonconverged {
        RunStatus::Ok
    } else {
        RunStatus::NotConverged
    }
}

fn write_state(dir: &Path, s: &Setup, out: &PiaOutcome) -> Result<()> {
    output::write_convergence(&dir.join("convergence.csv"), &out.report)?;
    let value = out.state.value.as_ref().expect("at least one iteration");
    output::write_diagonal(&dir.join("diagonal.csv"), &s.grid, value)?;
    output::write_density(&dir.join("density.csv"), &s.grid, &out.state.flow)?;
    output::write_value_slice(&dir.join("value_slice.csv"), &s.grid, value, 0)
}

fn run_pia_command(cfg: &RunConfig) -> Result<RunStatus> {
    let s = setup(cfg)?;
    let dir = prepare_out(cfg)?;
    let out = solve(cfg, &s)?;
    write_state(&dir, &s, &out)?;
    Ok(convergence_status(cfg, out.converged))
}

fn run_vanish(cfg: &RunConfig) -> Result<RunStatus> {
    let s = setup(cfg)?;
    let dir = prepare_out(cfg)?;
    let schedule = halving_schedule(cfg.vanish.lambda0, cfg.vanish.halvings);
    let out = vanishing_lambda(&schedule, &s.entry.model, &s.grid, &s.nu, cfg.pia_options(), cfg.vanish.warm_start)?;
    for (n, (e, rep)) in out.entries.iter().zip(&out.reports).enumerate() {
        eprintln!(
            "lambda {:.6e}  iters {:>3}  max lambda|H| {:.4e}  J gap {}  m gap {}  residual {:.3e}{}",
            e.lambda,
            e.iterations,
            e.max_lambda_entropy,
            e.j_gap.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into()),
            e.m_gap.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into()),
            e.residual,
            if e.converged { "" } else { "  (not converged)" }
        );
        output::write_convergence(&dir.join(format!("convergence_lambda_{n}.csv")), rep)?;
    }
    output::write_vanishing(&dir.join("vanishing.csv"), &out.entries)?;
    let value = out.last.value.as_ref().expect("at least one iteration");
    output::write_diagonal(&dir.join("diagonal.csv"), &s.grid, value)?;
    output::write_density(&dir.join("density.csv"), &s.grid, &out.last.flow)?;
    Ok(convergence_status(cfg, out.entries.iter().all(|e| e.converged)))
}

fn probes(cfg: &RunConfig, grid: &GridSpec) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for &f in &cfg.verify.probe_times {
        let j = (f * grid.n_time as f64).round() as usize;
        for &x in &cfg.verify.probe_points {
            out.push((grid.times[j], x));
        }
    }
    out
}

fn run_verify(cfg: &RunConfig) -> Result<RunStatus> {
    let s = setup(cfg)?;
    let dir = prepare_out(cfg)?;
    let out = solve(cfg, &s)?;
    write_state(&dir, &s, &out)?;
    let lambda = cfg.solver.lambda;
    let model = &s.entry.model;
    let st = &out.state;
    let value = st.value.as_ref().expect("at least one iteration");

    let residual = eehjb_residual(value, &st.policy, &st.frozen, lambda, model, &s.grid)?;
    let bound = 5.0 * (s.grid.dt + s.grid.dx() * s.grid.dx());
    output::write_residual(&dir.join("residual.csv"), &s.grid, &residual, bound)?;
    eprintln!("residual max {:.4e} (bound {:.4e})", residual.max_abs, bound);

    let gibbs_gap = gibbs_consistency(&st.policy, value, &st.flow, lambda, model, &s.grid)?;
    let gap = consistency_gap(
        &st.flow,
        &st.policy,
        model,
        &s.grid,
        Some(McConfig {
            n_particles: cfg.mc.n_particles,
            seed: cfg.mc.seed,
        }),
    )?;
    eprintln!(
        "gibbs consistency {:.4e}  fp gap {:.4e}  mc gap {:.4e}",
        gibbs_gap,
        gap.fp_gap,
        gap.mc_gap.unwrap_or(f64::NAN)
    );

    let eps: Vec<f64> = cfg.verify.epsilon_steps.iter().map(|k| *k as f64 * s.grid.dt).collect();
    let deviations = default_deviation_set(&s.grid)?;
    let dev = deviation_gain(st, lambda, model, &s.grid, &probes(cfg, &s.grid), &deviations, &eps, DeviationMethod::Pde)?;
    output::write_deviation(&dir.join("deviation.csv"), &dev)?;
    eprintln!("max deviation gain {:.4e}", dev.max_gain());

    let mut lemmas = lemma_checks(model, &s.grid, lambda)?;
    let name = cfg.model.name.clone();
    let c1 = c1_profile(
        |h| catalog::by_name(&name, h).map(|e| e.model),
        &s.grid,
        lambda,
        &[1.0, 0.5, 0.25, 0.125],
        s.entry.initial,
        0.05,
    )?;
    for (k, p) in c1.iter().enumerate() {
        let decreasing = k == 0 || p.ratio < c1[k - 1].ratio;
        lemmas.rows.push(LemmaRow {
            check: "c1_ratio".into(),
            probe: format!("T={}", p.horizon),
            value: p.ratio,
            bound: if k == 0 { f64::INFINITY } else { c1[k - 1].ratio },
            pass: decreasing,
        });
    }
    let mut gaps = vec![
        ("gibbs_consistency", "max L1", gibbs_gap, GIBBS_CONSISTENCY_TOL),
        ("fp_gap", "flow distance", gap.fp_gap, 2.0 * cfg.solver.tol),
    ];
    if let Some(mc) = gap.mc_gap {
        gaps.push(("mc_gap", "flow distance", mc, MC_GAP_TOL));
    }
    for (check, probe, value, bound) in gaps {
        lemmas.rows.push(LemmaRow {
            check: check.into(),
            probe: probe.into(),
            value,
            bound,
            pass: value <= bound,
        });
    }
    output::write_lemmas(&dir.join("lemmas.csv"), &lemmas)?;
    let failed = lemmas.rows.iter().filter(|r| !r.pass).count();
    eprintln!("lemma checks: {} rows, {} flagged", lemmas.rows.len(), failed);
    Ok(convergence_status(cfg, out.converged))
}

fn run_mc_check(cfg: &RunConfig) -> Result<RunStatus> {
    let s = setup(cfg)?;
    let dir = prepare_out(cfg)?;
    let out = solve(cfg, &s)?;
    let st = &out.state;
    let lambda = cfg.solver.lambda;
    let model = &s.entry.model;
    let mut queries = Vec::new();
    for (q, (t, x)) in probes(cfg, &s.grid).into_iter().enumerate() {
        let j_t = s.grid.time_index(t)?;
        let slab = solve_slice(model, &s.grid, &st.policy, &st.frozen, lambda, j_t)?;
        let estimate = mc_value(
            model,
            &s.grid,
            &st.policy,
            &st.frozen,
            lambda,
            t,
            t,
            x,
            cfg.mc.n_paths,
            cfg.mc.seed.wrapping_add(q as u64),
        )?;
        let pde = s.grid.space.interpolate(&slab[0], x);
        eprintln!(
            "t {t:.4} x {x:+.3}  mc {:.6} +- {:.2e}  pde {:.6}",
            estimate.estimate, estimate.stderr, pde
        );
        queries.push(McQuery {
            t,
            s: t,
            x,
            estimate,
            pde,
        });
    }
    output::write_mc_report(&dir.join("mc_report.csv"), &queries)?;
    Ok(convergence_status(cfg, out.converged))
}

fn run_selftest_command() -> RunStatus {
    let outcomes = run_selftest();
    for o in &outcomes {
        match &o.error {
            None => println!("ok    {}", o.name),
            Some(e) => println!("FAIL  {}: {e}", o.name),
        }
    }
    if outcomes.iter().all(|o| o.passed()) {
        RunStatus::Ok
    } else {
        RunStatus::SelfTestFailed
    }
}

/// Validates the configuration and runs one command.
pub fn run(command: Command, cfg: &RunConfig) -> Result<RunStatus> {
    if command == Command::Selftest {
        return Ok(run_selftest_command());
    }
    cfg.validate()?;
    let go = || match command {
        Command::Pia => run_pia_command(cfg),
        Command::Vanish => run_vanish(cfg),
        Command::Verify => run_verify(cfg),
        Command::McCheck => run_mc_check(cfg),
        Command::Selftest => unreachable!("handled above"),
    };
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("threads: {e}")))?
            .install(go),
        None => go(),
    }
}
