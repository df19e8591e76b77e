//! TOML experiment configuration, validation with field paths, and hashing.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::kernel::RbfKernel;
use crate::models::{CirModel, LangevinModel, SdeModel};
use crate::sampling::{sample_invariant_with, SampleSet, SamplingMethod, TrajectoryOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Repetitions for `repro`; the first one is used by single-run commands.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Worker threads for seed repetitions; 0 uses the available parallelism.
    #[serde(default)]
    pub threads: usize,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub kernel: KernelConfig,
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub predict: Option<PredictConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    FourWell {
        #[serde(default = "default_kbt")]
        kbt: f64,
    },
    MullerBrown {
        #[serde(default = "default_kbt")]
        kbt: f64,
        #[serde(default = "default_energy_scale")]
        energy_scale: f64,
    },
    Cir {
        a: f64,
        b: f64,
        sigma: f64,
    },
}

fn default_kbt() -> f64 {
    2.0
}

fn default_energy_scale() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub method: SamplingMethod,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    /// Defaults to one model time unit, `round(1/dt)`.
    #[serde(default)]
    pub stride: Option<usize>,
}

fn default_dt() -> f64 {
    1e-3
}

fn default_burn_in() -> usize {
    100_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub lengthscale: f64,
    /// Second lengthscale fitted on the same samples for spectral-bias selection.
    #[serde(default)]
    pub compare_lengthscale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub mu: f64,
    pub gamma: f64,
    pub rank: usize,
    /// Also fit the full-rank estimator and count eigenvalues in the spurious window.
    #[serde(default)]
    pub krr_contrast: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_grid_n")]
    pub grid_n: usize,
    #[serde(default = "default_grid_2d")]
    pub nx: usize,
    #[serde(default = "default_grid_2d")]
    pub ny: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { enabled: true, grid_n: default_grid_n(), nx: default_grid_2d(), ny: default_grid_2d() }
    }
}

fn yes() -> bool {
    true
}

fn default_grid_n() -> usize {
    4000
}

fn default_grid_2d() -> usize {
    201
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    pub horizon: f64,
    /// Training sizes for the RMSE curve (CIR only); empty skips it.
    #[serde(default)]
    pub n_list: Vec<usize>,
    #[serde(default)]
    pub held_out_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Run directory, relative to the output root unless absolute.
    #[serde(default)]
    pub dir: Option<String>,
    /// Evaluation points per axis for `eigenfunctions.csv`.
    #[serde(default = "default_eval_points")]
    pub eval_points: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: None, eval_points: default_eval_points() }
    }
}

fn default_eval_points() -> usize {
    201
}

/// A rejected field: dotted path and reason.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Built-in experiment presets.
pub const PRESETS: [(&str, &str); 3] = [
    ("fourwell", include_str!("../../configs/fourwell.toml")),
    ("muller_brown", include_str!("../../configs/muller_brown.toml")),
    ("cir", include_str!("../../configs/cir.toml")),
];

pub fn preset_source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

impl ExperimentConfig {
    pub fn from_toml(src: &str) -> std::result::Result<Self, Vec<ConfigIssue>> {
        let cfg: Self = toml::from_str(src).map_err(|e| {
            vec![ConfigIssue { path: "<toml>".into(), message: e.to_string().trim().replace('\n', " ") }]
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> std::result::Result<Self, Vec<ConfigIssue>> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| vec![ConfigIssue { path: path.display().to_string(), message: e.to_string() }])?;
        Self::from_toml(&src)
    }

    pub fn preset(name: &str) -> std::result::Result<Self, Vec<ConfigIssue>> {
        let src = preset_source(name).ok_or_else(|| {
            vec![ConfigIssue { path: "experiment".into(), message: format!("unknown preset `{name}`") }]
        })?;
        Self::from_toml(src)
    }

    /// Checks every range constraint of the downstream modules.
    pub fn validate(&self) -> std::result::Result<(), Vec<ConfigIssue>> {
        let mut out = Vec::new();
        let mut bad = |path: &str, message: String| out.push(ConfigIssue { path: path.into(), message });
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if self.name.trim().is_empty() {
            bad("name", "must be nonempty".into());
        }
        match &self.model {
            ModelConfig::FourWell { kbt } | ModelConfig::MullerBrown { kbt, .. } if !pos(*kbt) => {
                bad("model.kbt", format!("must be > 0, got {kbt}"))
            }
            _ => {}
        }
        if let ModelConfig::MullerBrown { energy_scale, .. } = &self.model {
            if !pos(*energy_scale) {
                bad("model.energy_scale", format!("must be > 0, got {energy_scale}"));
            }
        }
        if let ModelConfig::Cir { a, b, sigma } = &self.model {
            if !pos(*a) {
                bad("model.a", format!("must be > 0, got {a}"));
            }
            if !(b.is_finite() && *b < 0.0) {
                bad("model.b", format!("must be < 0, got {b}"));
            }
            if !pos(*sigma) {
                bad("model.sigma", format!("must be > 0, got {sigma}"));
            }
        }
        let s = &self.sampler;
        if s.n == 0 {
            bad("sampler.n", "must be positive".into());
        }
        let is_cir = matches!(self.model, ModelConfig::Cir { .. });
        if s.method == SamplingMethod::ExactGamma && !is_cir {
            bad("sampler.method", "exact_gamma requires the cir preset".into());
        }
        if !pos(s.dt) {
            bad("sampler.dt", format!("must be > 0, got {}", s.dt));
        }
        if s.stride == Some(0) {
            bad("sampler.stride", "must be positive".into());
        }
        if !pos(self.kernel.lengthscale) {
            bad("kernel.lengthscale", format!("must be > 0, got {}", self.kernel.lengthscale));
        }
        if let Some(l) = self.kernel.compare_lengthscale {
            if !pos(l) {
                bad("kernel.compare_lengthscale", format!("must be > 0, got {l}"));
            }
        }
        let e = &self.estimator;
        if !pos(e.mu) {
            bad("estimator.mu", format!("must be > 0, got {}", e.mu));
        }
        if !pos(e.gamma) {
            bad("estimator.gamma", format!("must be > 0, got {}", e.gamma));
        }
        if e.rank == 0 || e.rank > s.n {
            bad("estimator.rank", format!("must be in 1..={}, got {}", s.n, e.rank));
        }
        if self.oracle.grid_n < 100 {
            bad("oracle.grid_n", format!("must be at least 100, got {}", self.oracle.grid_n));
        }
        if self.oracle.nx < 3 || self.oracle.ny < 3 {
            bad("oracle.nx", "nx and ny must be at least 3".into());
        } else if self.oracle.nx * self.oracle.ny > 1_000_000 {
            bad("oracle.nx", "nx * ny must not exceed 1e6".into());
        }
        if let Some(p) = &self.predict {
            if !(p.horizon.is_finite() && p.horizon >= 0.0) {
                bad("predict.horizon", format!("must be finite and >= 0, got {}", p.horizon));
            }
            if !p.n_list.is_empty() && !is_cir {
                bad("predict.n_list", "the RMSE curve needs the analytic cir mean".into());
            }
            if p.n_list.iter().any(|n| *n < e.rank) {
                bad("predict.n_list", "every n must be at least estimator.rank".into());
            }
            if p.n_list.windows(2).any(|w| w[0] >= w[1]) {
                bad("predict.n_list", "must be strictly ascending".into());
            }
        }
        if self.output.eval_points < 2 {
            bad("output.eval_points", "must be at least 2".into());
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    /// Seeds for repetitions: `seeds`, or the sampler seed alone.
    pub fn repetition_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.sampler.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// Hex SHA-256 of the canonical JSON form (defaults filled in).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn build_model(&self) -> Result<Arc<dyn SdeModel>> {
        Ok(match &self.model {
            ModelConfig::FourWell { kbt } => Arc::new(LangevinModel::four_well(*kbt)?),
            ModelConfig::MullerBrown { kbt, energy_scale } => Arc::new(LangevinModel::muller_brown(*kbt, *energy_scale)?),
            ModelConfig::Cir { .. } => Arc::new(self.cir_model()?.expect("cir preset")),
        })
    }

    pub fn cir_model(&self) -> Result<Option<CirModel>> {
        match &self.model {
            ModelConfig::Cir { a, b, sigma } => Ok(Some(CirModel::new(*a, *b, *sigma)?)),
            _ => Ok(None),
        }
    }

    pub fn kernel(&self) -> RbfKernel {
        RbfKernel::from_lengthscale(self.kernel.lengthscale)
    }

    pub fn sample(&self, model: &dyn SdeModel, seed: u64) -> Result<SampleSet> {
        let s = &self.sampler;
        let mut traj = TrajectoryOptions::with_dt(s.dt);
        traj.burn_in = s.burn_in;
        if let Some(k) = s.stride {
            traj.stride = k;
        }
        sample_invariant_with(model, s.n, seed, s.method, &traj)
    }
}
