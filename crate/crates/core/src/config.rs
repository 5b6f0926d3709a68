//! Run configuration: a TOML file with optional sections, overridable from
//! the command line, validated before any solve starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{build_grid, GridConfig, GridSpec, MIN_N_ACTION, MIN_N_SPACE};
use crate::model::catalog::{self, CatalogEntry};
use crate::pia::PiaOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Catalog name.
    pub name: String,
    pub horizon: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            name: "lq_mean".into(),
            horizon: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub n_time: usize,
    pub n_space: usize,
    pub n_action: usize,
    /// Truncation box; the catalog default is used when absent.
    pub x_lo: Option<f64>,
    pub x_hi: Option<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            n_time: 200,
            n_space: 200,
            n_action: 32,
            x_lo: None,
            x_hi: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub lambda: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub allow_nonconverged: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            tol: 1e-6,
            max_iters: 50,
            allow_nonconverged: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VanishSection {
    pub lambda0: f64,
    pub halvings: usize,
    pub warm_start: bool,
}

impl Default for VanishSection {
    fn default() -> Self {
        Self {
            lambda0: 0.5,
            halvings: 8,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    pub seed: u64,
    /// Particles for flow comparisons.
    pub n_particles: usize,
    /// Paths per value estimate.
    pub n_paths: usize,
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            seed: 42,
            n_particles: 200_000,
            n_paths: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    /// Deviation windows in time steps.
    pub epsilon_steps: Vec<usize>,
    /// Probe times as fractions of the horizon.
    pub probe_times: Vec<f64>,
    pub probe_points: Vec<f64>,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            epsilon_steps: vec![4, 2],
            probe_times: vec![0.0, 0.25, 0.5],
            probe_points: vec![-0.5, 0.0, 0.5],
        }
    }
}

/// Everything a command needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    /// Worker threads; hardware count when absent.
    pub threads: Option<usize>,
    pub model: ModelSection,
    pub grid: GridSection,
    pub solver: SolverSection,
    pub vanish: VanishSection,
    pub mc: McSection,
    pub verify: VerifySection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn catalog_entry(&self) -> Result<CatalogEntry> {
        catalog::by_name(&self.model.name, self.model.horizon)
    }

    pub fn grid_config(&self, entry: &CatalogEntry) -> GridConfig {
        GridConfig {
            horizon: self.model.horizon,
            n_time: self.grid.n_time,
            x_lo: self.grid.x_lo.unwrap_or(entry.x_lo),
            x_hi: self.grid.x_hi.unwrap_or(entry.x_hi),
            n_space: self.grid.n_space,
            action_lo: entry.model.action_lo,
            action_hi: entry.model.action_hi,
            n_action: self.grid.n_action,
            boundary_policy: Default::default(),
        }
    }

    pub fn build_grid(&self, entry: &CatalogEntry) -> Result<GridSpec> {
        build_grid(&self.grid_config(entry))
    }

    pub fn pia_options(&self) -> PiaOptions {
        PiaOptions {
            tol: self.solver.tol,
            max_iters: self.solver.max_iters,
        }
    }

    /// Checks every numeric field against the solver preconditions.
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::Config(format!("{key}: {msg}")));
        if !catalog::NAMES.contains(&self.model.name.as_str()) {
            return fail(
                "model.name",
                format!("unknown model '{}', expected one of {}", self.model.name, catalog::NAMES.join(", ")),
            );
        }
        if !(self.model.horizon > 0.0 && self.model.horizon.is_finite()) {
            return fail("model.horizon", format!("must be positive, got {}", self.model.horizon));
        }
        if self.grid.n_time < 1 {
            return fail("grid.n_time", "must be at least 1".into());
        }
        if self.grid.n_space < MIN_N_SPACE {
            return fail("grid.n_space", format!("must be at least {MIN_N_SPACE}, got {}", self.grid.n_space));
        }
        if self.grid.n_action < MIN_N_ACTION {
            return fail("grid.n_action", format!("must be at least {MIN_N_ACTION}, got {}", self.grid.n_action));
        }
        if let (Some(lo), Some(hi)) = (self.grid.x_lo, self.grid.x_hi) {
            if !(lo < hi) {
                return fail("grid.x_lo", format!("must be below grid.x_hi ({lo} >= {hi})"));
            }
        }
        if !(self.solver.lambda > 0.0 && self.solver.lambda.is_finite()) {
            return fail("solver.lambda", format!("must be positive, got {}", self.solver.lambda));
        }
        if !(self.solver.tol > 0.0 && self.solver.tol.is_finite()) {
            return fail("solver.tol", format!("must be positive, got {}", self.solver.tol));
        }
        if self.solver.max_iters == 0 {
            return fail("solver.max_iters", "must be at least 1".into());
        }
        if !(self.vanish.lambda0 > 0.0 && self.vanish.lambda0.is_finite()) {
            return fail("vanish.lambda0", format!("must be positive, got {}", self.vanish.lambda0));
        }
        if self.vanish.halvings > 60 {
            return fail("vanish.halvings", format!("at most 60, got {}", self.vanish.halvings));
        }
        if self.mc.n_particles < crate::mc_oracle::MIN_PARTICLES {
            return fail(
                "mc.n_particles",
                format!("must be at least {}, got {}", crate::mc_oracle::MIN_PARTICLES, self.mc.n_particles),
            );
        }
        if self.mc.n_paths < 2 {
            return fail("mc.n_paths", "must be at least 2".into());
        }
        if self.threads == Some(0) {
            return fail("threads", "must be at least 1".into());
        }
        if self.verify.epsilon_steps.is_empty() || self.verify.epsilon_steps.contains(&0) {
            return fail("verify.epsilon_steps", "must be a nonempty list of positive step counts".into());
        }
        let max_eps = *self.verify.epsilon_steps.iter().max().expect("nonempty");
        for &f in &self.verify.probe_times {
            if !(0.0..1.0).contains(&f) {
                return fail("verify.probe_times", format!("fractions must lie in [0, 1), got {f}"));
            }
            let j = (f * self.grid.n_time as f64).round() as usize;
            if j + max_eps > self.grid.n_time {
                return fail(
                    "verify.probe_times",
                    format!("probe at fraction {f} leaves no room for a window of {max_eps} steps"),
                );
            }
        }
        Ok(())
    }
}
