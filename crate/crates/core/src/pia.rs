//! Policy iteration: the fixed-point map, the iteration driver with its
//! contraction diagnostics, and the vanishing-entropy continuation.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::gibbs::{gibbs_field, RelaxedPolicyField};
use crate::grid::{GridSpec, TimeSpaceField};
use crate::measure_flow::{flow_distance, solve_fokker_planck, MeasureFlow};
use crate::model::ModelSpec;
use crate::value_pde::{solve_all_slices, AuxValueField};
use crate::verify::eehjb_residual;

/// One iterate `(J^k, D_x J^k, m^k)` together with the policy and value that
/// produced it.
#[derive(Debug, Clone)]
pub struct PiaState {
    pub diagonal: TimeSpaceField,
    pub diagonal_gradient: TimeSpaceField,
    pub flow: MeasureFlow,
    /// `pi^k = Gamma(D_x J^{k-1}, m^{k-1})`; uniform for the initial state.
    pub policy: RelaxedPolicyField,
    /// `V^{pi^k, m^{k-1}}`; absent for the initial state.
    pub value: Option<AuxValueField>,
    /// Flow frozen in the coefficients when `value` and `flow` were computed.
    pub frozen: MeasureFlow,
    pub iteration: usize,
}

impl PiaState {
    /// `J^0 = 0` and `m^0 = nu` at every time.
    pub fn initial(grid: &GridSpec, nu: &[f64]) -> Result<Self> {
        let flow = MeasureFlow::constant(grid, nu)?;
        Ok(Self {
            diagonal: TimeSpaceField::for_grid(grid),
            diagonal_gradient: TimeSpaceField::for_grid(grid),
            frozen: flow.clone(),
            flow,
            policy: RelaxedPolicyField::uniform(grid),
            value: None,
            iteration: 0,
        })
    }

    /// Initial law, read off the flow at time zero.
    pub fn nu(&self) -> &[f64] {
        self.flow.density(0)
    }

    /// Discrete `C^{0,1}` gap `max|dJ| + max|dD_xJ|`.
    pub fn value_gap(&self, other: &PiaState) -> f64 {
        self.diagonal.max_abs_diff(&other.diagonal) + self.diagonal_gradient.max_abs_diff(&other.diagonal_gradient)
    }
}

/// Stopping tolerance and iteration cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiaOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for PiaOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 50,
        }
    }
}

impl PiaOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    pub d_m: f64,
    pub d_j: f64,
    /// `(d_m + d_J)_k / (d_m + d_J)_{k-1}`, defined for `k >= 2` with a nonzero predecessor.
    pub ratio: Option<f64>,
    pub seconds: f64,
}

impl IterationRecord {
    pub fn total(&self) -> f64 {
        self.d_m + self.d_j
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceReport {
    pub records: Vec<IterationRecord>,
}

impl ConvergenceReport {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn last_gap(&self) -> Option<f64> {
        self.records.last().map(IterationRecord::total)
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.ratio).collect()
    }

    pub fn max_ratio(&self) -> Option<f64> {
        self.records.iter().filter_map(|r| r.ratio).reduce(f64::max)
    }

    fn push(&mut self, k: usize, d_m: f64, d_j: f64, seconds: f64) {
        let ratio = match self.records.last() {
            Some(prev) if prev.total() > 0.0 => Some((d_m + d_j) / prev.total()),
            _ => None,
        };
        self.records.push(IterationRecord {
            k,
            d_m,
            d_j,
            ratio,
            seconds,
        });
    }
}

#[derive(Debug, Clone)]
pub struct PiaOutcome {
    pub state: PiaState,
    pub report: ConvergenceReport,
    pub converged: bool,
}

/// One application of the fixed-point map. Both the value evaluation and the
/// Fokker-Planck solve use `state.flow` in their coefficients.
pub fn phi_step(state: &PiaState, lambda: f64, model: &ModelSpec, grid: &GridSpec) -> Result<PiaState> {
    let policy = gibbs_field(model, grid, &state.diagonal_gradient, &state.flow, lambda).map_err(|e| e.in_stage("gibbs policy"))?;
    let (value, flow) = rayon::join(
        || solve_all_slices(model, grid, &policy, &state.flow, lambda).map_err(|e| e.in_stage("value equation")),
        || solve_fokker_planck(model, grid, &policy, &state.flow, state.nu()).map_err(|e| e.in_stage("fokker-planck")),
    );
    let value = value?;
    let flow = flow?;
    Ok(PiaState {
        diagonal: value.diagonal.clone(),
        diagonal_gradient: value.diagonal_gradient.clone(),
        flow,
        policy,
        value: Some(value),
        frozen: state.flow.clone(),
        iteration: state.iteration + 1,
    })
}

/// Iterates [`phi_step`] until `d_m + d_J <= tol` or `max_iters` steps.
/// Running out of iterations is reported through `converged`, not as an error.
pub fn run_pia(init: PiaState, lambda: f64, model: &ModelSpec, grid: &GridSpec, opts: PiaOptions) -> Result<PiaOutcome> {
    run_pia_with(init, lambda, model, grid, opts, |_| {})
}

/// [`run_pia`] with a callback invoked after every iteration.
pub fn run_pia_with(
    init: PiaState,
    lambda: f64,
    model: &ModelSpec,
    grid: &GridSpec,
    opts: PiaOptions,
    mut on_iter: impl FnMut(&IterationRecord),
) -> Result<PiaOutcome> {
    opts.validate()?;
    if !(lambda > 0.0) {
        return Err(Error::Parameter(format!("lambda must be positive, got {lambda}")));
    }
    let mut state = init;
    let mut report = ConvergenceReport::default();
    for k in 1..=opts.max_iters {
        let clock = Instant::now();
        let next = phi_step(&state, lambda, model, grid)?;
        let d_m = flow_distance(&next.flow, &state.flow).map_err(|e| e.in_stage("flow distance"))?;
        let d_j = next.value_gap(&state);
        report.push(k, d_m, d_j, clock.elapsed().as_secs_f64());
        on_iter(report.records.last().expect("record just pushed"));
        state = next;
        if d_m + d_j <= opts.tol {
            return Ok(PiaOutcome {
                state,
                report,
                converged: true,
            });
        }
    }
    Ok(PiaOutcome {
        state,
        report,
        converged: false,
    })
}

/// Per-lambda summary of the vanishing-entropy continuation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VanishingEntry {
    pub lambda: f64,
    /// `max_{t,x} lambda |H(pi_lambda(t, x))|`.
    pub max_lambda_entropy: f64,
    /// `max|J_lambda - J_prev|`; absent for the first lambda.
    pub j_gap: Option<f64>,
    /// Flow distance to the previous lambda's flow.
    pub m_gap: Option<f64>,
    /// Maximal residual of the value equation at the computed state.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct VanishingOutcome {
    pub entries: Vec<VanishingEntry>,
    pub reports: Vec<ConvergenceReport>,
    /// State at the last lambda.
    pub last: PiaState,
}

/// `lambda_n = lambda0 * 2^-n` for `n = 0..=halvings`.
pub fn halving_schedule(lambda0: f64, halvings: usize) -> Vec<f64> {
    (0..=halvings).map(|n| lambda0 * 0.5f64.powi(n as i32)).collect()
}

/// Solves the regularized problem along a strictly decreasing schedule.
/// With `warm_start` each run starts from the previous fixed point; otherwise
/// from `J = 0`, `m = nu`. Non-convergence at one lambda is recorded and the
/// schedule continues.
pub fn vanishing_lambda(
    schedule: &[f64],
    model: &ModelSpec,
    grid: &GridSpec,
    nu: &[f64],
    opts: PiaOptions,
    warm_start: bool,
) -> Result<VanishingOutcome> {
    if schedule.is_empty() {
        return Err(Error::Config("empty lambda schedule".into()));
    }
    if schedule.iter().any(|l| !(*l > 0.0)) || schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("lambda schedule must be positive and strictly decreasing".into()));
    }
    let cold = PiaState::initial(grid, nu)?;
    let mut prev: Option<PiaState> = None;
    let mut entries = Vec::with_capacity(schedule.len());
    let mut reports = Vec::with_capacity(schedule.len());
    for &lambda in schedule {
        let init = match (&prev, warm_start) {
            (Some(p), true) => p.clone(),
            _ => cold.clone(),
        };
        let out = run_pia(init, lambda, model, grid, opts)?;
        let st = &out.state;
        let entropy = st.policy.entropy_field()?;
        let max_lambda_entropy = lambda * entropy.max_abs();
        let value = st.value.as_ref().expect("state after at least one step");
        let residual = eehjb_residual(value, &st.policy, &st.frozen, lambda, model, grid)?.max_abs;
        let (j_gap, m_gap) = match &prev {
            Some(p) => (
                Some(st.diagonal.max_abs_diff(&p.diagonal)),
                Some(flow_distance(&st.flow, &p.flow)?),
            ),
            None => (None, None),
        };
        entries.push(VanishingEntry {
            lambda,
            max_lambda_entropy,
            j_gap,
            m_gap,
            residual,
            iterations: out.report.iterations(),
            converged: out.converged,
        });
        reports.push(out.report);
        prev = Some(out.state);
    }
    Ok(VanishingOutcome {
        entries,
        reports,
        last: prev.expect("nonempty schedule"),
    })
}
