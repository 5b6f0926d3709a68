//! Policy-averaged coefficient fields on the (time, space) grid.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gibbs::{entropy_of, RelaxedPolicyField};
use crate::grid::{GridSpec, TimeSpaceField};
use crate::measure_flow::MeasureFlow;
use crate::model::ModelSpec;

/// `b~(t_j, x_i) = sum_k b(t_j, x_i, m_j, a_k) pi(j, i, a_k) w_k`, `sigma(t_j, x_i, m_j)`
/// and the entropy of `pi(j, i, .)`.
#[derive(Debug, Clone)]
pub struct CoefficientFields {
    pub drift: TimeSpaceField,
    pub sigma: TimeSpaceField,
    pub entropy: TimeSpaceField,
}

pub(crate) fn check_shapes(grid: &GridSpec, policy: &RelaxedPolicyField, flow: &MeasureFlow) -> Result<()> {
    if policy.n_time() != grid.n_time || policy.nx() != grid.nx() || policy.na() != grid.na() {
        return Err(Error::Config("policy field does not match the grid".into()));
    }
    if flow.n_time() != grid.n_time || flow.nx() != grid.nx() {
        return Err(Error::Config("measure flow does not match the grid".into()));
    }
    Ok(())
}

pub fn coefficient_fields(
    model: &ModelSpec,
    grid: &GridSpec,
    policy: &RelaxedPolicyField,
    flow: &MeasureFlow,
) -> Result<CoefficientFields> {
    check_shapes(grid, policy, flow)?;
    let nx = grid.nx();
    let rows: Result<Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>> = (0..=grid.n_time)
        .into_par_iter()
        .map(|j| {
            let t = grid.times[j];
            let stats = flow.stats(j);
            let mut drift = vec![0.0; nx];
            let mut sigma = vec![0.0; nx];
            let mut ent = vec![0.0; nx];
            for i in 0..nx {
                let x = grid.space.nodes[i];
                let b = policy.average(j, i, |k| model.drift(t, x, &stats, grid.action.nodes[k]));
                let s = model.diffusion(t, x, &stats);
                if !b.is_finite() {
                    return Err(Error::ModelEvaluation {
                        what: "drift",
                        point: format!("(t={t}, x={x})"),
                    });
                }
                if !s.is_finite() {
                    return Err(Error::ModelEvaluation {
                        what: "diffusion",
                        point: format!("(t={t}, x={x})"),
                    });
                }
                drift[i] = b;
                sigma[i] = s;
                ent[i] = entropy_of(policy.density(j, i), policy.weights())?;
            }
            Ok((drift, sigma, ent))
        })
        .collect();
    let rows = rows?;
    let mut drift = Vec::with_capacity(rows.len());
    let mut sigma = Vec::with_capacity(rows.len());
    let mut entropy = Vec::with_capacity(rows.len());
    for (b, s, h) in rows {
        drift.push(b);
        sigma.push(s);
        entropy.push(h);
    }
    Ok(CoefficientFields {
        drift: TimeSpaceField::from_rows(drift),
        sigma: TimeSpaceField::from_rows(sigma),
        entropy: TimeSpaceField::from_rows(entropy),
    })
}

/// `r~(tau, x_i, m_j, pi(j, i))` for one time row.
pub(crate) fn averaged_reward_row(
    model: &ModelSpec,
    grid: &GridSpec,
    policy: &RelaxedPolicyField,
    flow: &MeasureFlow,
    j: usize,
    tau: f64,
    out: &mut [f64],
) -> Result<()> {
    let stats = flow.stats(j);
    for (i, o) in out.iter_mut().enumerate() {
        let x = grid.space.nodes[i];
        let v = policy.average(j, i, |k| model.running_reward(tau, x, &stats, grid.action.nodes[k]));
        if !v.is_finite() {
            return Err(Error::ModelEvaluation {
                what: "running_reward",
                point: format!("(tau={tau}, x={x}, t={})", grid.times[j]),
            });
        }
        *o = v;
    }
    Ok(())
}

/// `d r~ / d tau` for one time row.
pub(crate) fn averaged_reward_dtau_row(
    model: &ModelSpec,
    grid: &GridSpec,
    policy: &RelaxedPolicyField,
    flow: &MeasureFlow,
    j: usize,
    tau: f64,
    out: &mut [f64],
) -> Result<()> {
    let stats = flow.stats(j);
    for (i, o) in out.iter_mut().enumerate() {
        let x = grid.space.nodes[i];
        let v = policy.average(j, i, |k| model.running_reward_dtau(tau, x, &stats, grid.action.nodes[k]));
        if !v.is_finite() {
            return Err(Error::ModelEvaluation {
                what: "running_reward_dtau",
                point: format!("(tau={tau}, x={x}, t={})", grid.times[j]),
            });
        }
        *o = v;
    }
    Ok(())
}
