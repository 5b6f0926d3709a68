//! Built-in models selectable by name.
//!
//! | name             | drift            | reward                          | discount        |
//! |------------------|------------------|---------------------------------|-----------------|
//! | `lq_mean`        | `a + c * mean`   | quadratic, hyperbolic in `tau`  | `1/(1+beta tau)`|
//! | `decoupled`      | `0.2 cos x`      | action and measure free         | `1/(1+beta tau)`|
//! | `timeconsistent` | `a + c * mean`   | quadratic, `tau`-free           | `1`             |

use crate::error::{Error, Result};
use crate::measure_flow::InitialLaw;
use crate::model::{AssumptionConstants, ModelSpec};

pub const NAMES: [&str; 3] = ["lq_mean", "decoupled", "timeconsistent"];

/// A catalog model with its default truncation box and initial law.
#[derive(Debug, Clone)]
pub struct CatalogEntry {
    pub model: ModelSpec,
    pub x_lo: f64,
    pub x_hi: f64,
    pub initial: InitialLaw,
}

/// Parameters of the linear-quadratic mean-interaction model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqMeanParams {
    pub horizon: f64,
    /// Weight of the population mean in the drift.
    pub mean_drift: f64,
    pub sigma: f64,
    /// Action cost curvature.
    pub action_cost: f64,
    /// Weight of the tracking cost `(x - mean)^2`.
    pub tracking: f64,
    pub terminal_weight: f64,
    /// Pull of the population mean inside the terminal reward; zero makes
    /// `F` measure-independent.
    pub terminal_mean_coupling: f64,
    /// Hyperbolic discount rate `beta` in `1 / (1 + beta tau)`.
    pub hyperbolic_rate: f64,
    pub action_lo: f64,
    pub action_hi: f64,
}

impl Default for LqMeanParams {
    fn default() -> Self {
        Self {
            horizon: 0.25,
            mean_drift: 0.5,
            sigma: 0.5,
            action_cost: 2.0,
            tracking: 1.0,
            terminal_weight: 1.0,
            terminal_mean_coupling: 0.0,
            hyperbolic_rate: 2.0,
            action_lo: -1.0,
            action_hi: 1.0,
        }
    }
}

const BOX: (f64, f64) = (-3.0, 3.0);

fn default_initial() -> InitialLaw {
    InitialLaw::Gaussian {
        mean: 0.0,
        variance: 0.16,
    }
}

/// Linear-quadratic model with a mean-field drift and hyperbolic discounting
/// of both the running reward and the entropy bonus.
pub fn lq_mean(p: LqMeanParams) -> Result<ModelSpec> {
    let LqMeanParams {
        horizon,
        mean_drift: c,
        sigma,
        action_cost: kappa,
        tracking: q,
        terminal_weight: qt,
        terminal_mean_coupling: theta,
        hyperbolic_rate: beta,
        ..
    } = p;
    let span = BOX.1 - BOX.0;
    let amax = p.action_lo.abs().max(p.action_hi.abs());
    let k1 = (amax + c * BOX.1.abs())
        .max(0.5 * kappa * amax * amax + 0.5 * q * span * span)
        .max(0.5 * qt * span * span)
        .max(sigma);
    let k2 = q * span + c + 2.0 * beta * q * span;
    let k6 = theta * qt * (span + 1.0);
    ModelSpec::new("lq_mean", horizon, p.action_lo, p.action_hi).map(|m| {
        m.with_drift(move |_, _, m, a| a + c * m.mean)
            .with_diffusion(move |_, _, _| sigma)
            .with_running_reward(move |tau, x, m, a| {
                let d = 1.0 / (1.0 + beta * tau);
                -d * (0.5 * kappa * a * a + 0.5 * q * (x - m.mean) * (x - m.mean))
            })
            .with_running_reward_dtau(move |tau, x, m, a| {
                let d = 1.0 / (1.0 + beta * tau);
                beta * d * d * (0.5 * kappa * a * a + 0.5 * q * (x - m.mean) * (x - m.mean))
            })
            .with_terminal_reward(move |t, x, m| {
                let d = 1.0 / (1.0 + beta * (horizon - t));
                let y = x - theta * m.mean;
                -0.5 * qt * d * y * y
            })
            .with_terminal_reward_dt(move |t, x, m| {
                let d = 1.0 / (1.0 + beta * (horizon - t));
                let y = x - theta * m.mean;
                -0.5 * qt * beta * d * d * y * y
            })
            .with_discount(move |tau| 1.0 / (1.0 + beta * tau))
            .with_discount_derivative(move |tau| -beta / ((1.0 + beta * tau) * (1.0 + beta * tau)))
            .with_constants(AssumptionConstants {
                k1_bound: k1,
                k2_lipschitz: k2,
                eta_ellipticity: sigma * sigma,
                k6_terminal_lipschitz: k6,
            })
    })
}

/// Drift and reward ignore both the action and the population; the Gibbs
/// policy is uniform on `U = [0, 1]`.
pub fn decoupled(horizon: f64) -> Result<ModelSpec> {
    let beta = 1.0;
    ModelSpec::new("decoupled", horizon, 0.0, 1.0).map(|m| {
        m.with_drift(|_, x, _, _| 0.2 * x.cos())
            .with_diffusion(|_, _, _| 0.5)
            .with_running_reward(move |tau, x, _, _| -0.5 * x * x / (1.0 + beta * tau))
            .with_terminal_reward(|_, x, _| -0.5 * x * x)
            .with_discount(move |tau| 1.0 / (1.0 + beta * tau))
            .with_constants(AssumptionConstants {
                k1_bound: 4.5,
                k2_lipschitz: 3.0 + 0.2 + beta * 3.0,
                eta_ellipticity: 0.25,
                k6_terminal_lipschitz: 0.0,
            })
    })
}

/// Same dynamics as `lq_mean` with `tau`-free reward, `t`-free terminal
/// reward and no discounting: the triangular problem collapses to a
/// classical one.
pub fn timeconsistent(horizon: f64) -> Result<ModelSpec> {
    let p = LqMeanParams {
        horizon,
        ..LqMeanParams::default()
    };
    let (c, sigma, kappa, q, qt) = (p.mean_drift, p.sigma, p.action_cost, p.tracking, p.terminal_weight);
    let base = lq_mean(p)?;
    let constants = base.constants;
    ModelSpec::new("timeconsistent", horizon, p.action_lo, p.action_hi).map(|m| {
        m.with_drift(move |_, _, m, a| a + c * m.mean)
            .with_diffusion(move |_, _, _| sigma)
            .with_running_reward(move |_, x, m, a| -(0.5 * kappa * a * a + 0.5 * q * (x - m.mean) * (x - m.mean)))
            .with_running_reward_dtau(|_, _, _, _| 0.0)
            .with_terminal_reward(move |_, x, _| -0.5 * qt * x * x)
            .with_terminal_reward_dt(|_, _, _| 0.0)
            .with_discount(|_| 1.0)
            .with_discount_derivative(|_| 0.0)
            .with_constants(constants)
    })
}

/// Looks up a catalog model for the given horizon.
pub fn by_name(name: &str, horizon: f64) -> Result<CatalogEntry> {
    let model = match name {
        "lq_mean" => lq_mean(LqMeanParams {
            horizon,
            ..LqMeanParams::default()
        })?,
        "decoupled" => decoupled(horizon)?,
        "timeconsistent" => timeconsistent(horizon)?,
        other => {
            return Err(Error::Config(format!(
                "unknown model '{other}', expected one of {}",
                NAMES.join(", ")
            )))
        }
    };
    Ok(CatalogEntry {
        model,
        x_lo: BOX.0,
        x_hi: BOX.1,
        initial: default_initial(),
    })
}
