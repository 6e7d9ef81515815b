//! JSON experiment configurations (schema version 1).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::ensemble::Curvature;
use crate::error::{Error, Result};
use crate::problems::LinearVariant;
use crate::svn::{BlockUpdate, Strategy, SvnOptions, DENSE_LIMIT};

pub const SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_SVGD_STEP: f64 = 0.05;
pub const DEFAULT_SVN_STEP: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemConfig {
    DoubleBanana,
    NonlinearRegression,
    ConditionedDiffusion,
    LinearGaussian { variant: LinearVariant, dim: usize },
}

impl ProblemConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemConfig::DoubleBanana => "double-banana",
            ProblemConfig::NonlinearRegression => "nonlinear-regression",
            ProblemConfig::ConditionedDiffusion => "conditioned-diffusion",
            ProblemConfig::LinearGaussian { .. } => "linear-gaussian",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ProblemConfig::DoubleBanana | ProblemConfig::NonlinearRegression => 2,
            ProblemConfig::ConditionedDiffusion => 100,
            ProblemConfig::LinearGaussian { dim, .. } => *dim,
        }
    }
}

fn default_cg_tol() -> f64 {
    1e-3
}

fn default_dense_limit() -> usize {
    DENSE_LIMIT
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AlgorithmConfig {
    Svgd,
    Svn {
        strategy: Strategy,
        #[serde(default)]
        curvature: Curvature,
        #[serde(default = "default_cg_tol")]
        cg_tol: f64,
        #[serde(default)]
        max_cg_iters: Option<usize>,
        #[serde(default = "default_dense_limit")]
        dense_limit: usize,
        #[serde(default)]
        block_update: BlockUpdate,
    },
}

impl AlgorithmConfig {
    pub fn svn(strategy: Strategy) -> Self {
        let o = SvnOptions::default();
        AlgorithmConfig::Svn {
            strategy,
            curvature: o.curvature,
            cg_tol: o.cg_tol,
            max_cg_iters: o.max_cg_iters,
            dense_limit: o.dense_limit,
            block_update: o.block_update,
        }
    }

    pub fn svn_options(&self) -> Option<SvnOptions> {
        match *self {
            AlgorithmConfig::Svgd => None,
            AlgorithmConfig::Svn {
                strategy,
                curvature,
                cg_tol,
                max_cg_iters,
                dense_limit,
                block_update,
            } => Some(SvnOptions {
                strategy,
                curvature,
                cg_tol,
                max_cg_iters,
                dense_limit,
                block_update,
            }),
        }
    }

    pub fn default_step(&self) -> f64 {
        match self {
            AlgorithmConfig::Svgd => DEFAULT_SVGD_STEP,
            AlgorithmConfig::Svn { .. } => DEFAULT_SVN_STEP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelConfig {
    /// Median-heuristic isotropic Gaussian kernel.
    Isotropic,
    /// Metric from the averaged Gauss-Newton curvature; `g` defaults to `d`.
    ScaledHessian {
        #[serde(default)]
        g: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Budget {
    Iterations(usize),
    WallclockSeconds(f64),
}

/// The sampler half of a run: algorithm, kernel, and step schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub algorithm: AlgorithmConfig,
    pub kernel: KernelConfig,
    /// Defaults to 0.05 for SVGD and 1 for SVN.
    #[serde(default)]
    pub step_size: Option<f64>,
    /// Geometric decay `ρ` in `ε_l = ε₀ ρ^l`.
    #[serde(default = "one")]
    pub step_decay: f64,
}

fn one() -> f64 {
    1.0
}

impl SamplerConfig {
    pub fn step_at(&self, iteration: usize) -> f64 {
        let base = self.step_size.unwrap_or_else(|| self.algorithm.default_step());
        base * self.step_decay.powi(iteration as i32)
    }

    fn validate(&self, prefix: &str) -> Result<()> {
        if let Some(e) = self.step_size {
            if !(e.is_finite() && e >= 0.0) {
                return Err(Error::config(format!("{prefix}step_size"), "must be finite and non-negative"));
            }
        }
        if !(self.step_decay.is_finite() && self.step_decay > 0.0) {
            return Err(Error::config(format!("{prefix}step_decay"), "must be positive and finite"));
        }
        if let KernelConfig::ScaledHessian { g: Some(g) } = self.kernel {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::config(format!("{prefix}kernel.g"), "must be positive and finite"));
            }
        }
        if let AlgorithmConfig::Svn { cg_tol, max_cg_iters, .. } = self.algorithm {
            if !(cg_tol.is_finite() && cg_tol > 0.0) {
                return Err(Error::config(format!("{prefix}algorithm.cg_tol"), "must be positive and finite"));
            }
            if max_cg_iters == Some(0) {
                return Err(Error::config(format!("{prefix}algorithm.max_cg_iters"), "must be at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub problem: ProblemConfig,
    pub algorithm: AlgorithmConfig,
    pub kernel: KernelConfig,
    /// Defaults to 0.05 for SVGD and 1 for SVN.
    #[serde(default)]
    pub step_size: Option<f64>,
    /// Geometric decay `ρ` in `ε_l = ε₀ ρ^l`.
    #[serde(default = "one")]
    pub step_decay: f64,
    pub n: usize,
    pub budget: Budget,
    pub seed: u64,
    /// Iterations whose particles are written. Defaults to every iteration
    /// under an iteration budget and to the initial state otherwise; the
    /// final state is always written.
    #[serde(default)]
    pub checkpoints: Option<Vec<usize>>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn check_version(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::config(
            "schema_version",
            format!("unsupported version {v}, expected {SCHEMA_VERSION}"),
        ));
    }
    Ok(())
}

fn validate_problem(p: &ProblemConfig, field: &str) -> Result<()> {
    if let ProblemConfig::LinearGaussian { dim, .. } = p {
        if *dim < 2 {
            return Err(Error::config(format!("{field}.dim"), "must be at least 2"));
        }
    }
    Ok(())
}

fn sampler_of(algorithm: AlgorithmConfig, kernel: KernelConfig, step_size: Option<f64>, step_decay: f64) -> SamplerConfig {
    SamplerConfig {
        algorithm,
        kernel,
        step_size,
        step_decay,
    }
}

impl ValidateSampler {
    pub fn sampler(&self) -> SamplerConfig {
        sampler_of(self.algorithm, self.kernel, self.step_size, self.step_decay)
    }
}

impl RunConfig {
    pub fn sampler(&self) -> SamplerConfig {
        sampler_of(self.algorithm, self.kernel, self.step_size, self.step_decay)
    }

    pub fn validate(&self) -> Result<()> {
        check_version(self.schema_version)?;
        validate_problem(&self.problem, "problem")?;
        self.sampler().validate("")?;
        if self.n == 0 {
            return Err(Error::config("n", "must be at least 1"));
        }
        if self.kernel == KernelConfig::Isotropic && self.n < 2 {
            return Err(Error::config("n", "the isotropic kernel needs at least 2 particles"));
        }
        match self.budget {
            Budget::Iterations(k) => {
                if let Some(bad) = self.checkpoints.iter().flatten().find(|&&c| c > k) {
                    return Err(Error::config(
                        "checkpoints",
                        format!("checkpoint {bad} exceeds the iteration budget {k}"),
                    ));
                }
            }
            Budget::WallclockSeconds(t) => {
                if !(t.is_finite() && t > 0.0) {
                    return Err(Error::config("budget.wallclock_seconds", "must be positive and finite"));
                }
            }
        }
        Ok(())
    }

    /// Checkpoint iterations in ascending order without duplicates.
    pub fn checkpoint_list(&self) -> Vec<usize> {
        let mut list = match (&self.checkpoints, self.budget) {
            (Some(c), _) => c.clone(),
            (None, Budget::Iterations(k)) => (0..=k).collect(),
            (None, Budget::WallclockSeconds(_)) => vec![0],
        };
        list.sort_unstable();
        list.dedup();
        list
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareVariant {
    pub label: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub schema_version: u32,
    pub variants: Vec<CompareVariant>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        check_version(self.schema_version)?;
        if self.variants.len() < 2 {
            return Err(Error::config("variants", "need at least two variants"));
        }
        let first = &self.variants[0].config;
        for (i, v) in self.variants.iter().enumerate() {
            v.config.validate().map_err(|e| match e {
                Error::Config { field, message } => Error::config(format!("variants[{i}].config.{field}"), message),
                other => other,
            })?;
            if v.config.problem != first.problem {
                return Err(Error::config(
                    format!("variants[{i}].config.problem"),
                    "all variants must share the same problem",
                ));
            }
            if v.config.seed != first.seed {
                return Err(Error::config(format!("variants[{i}].config.seed"), "all variants must share the same seed"));
            }
            if v.config.budget != first.budget {
                return Err(Error::config(format!("variants[{i}].config.budget"), "all variants must share the same budget"));
            }
            if self.variants[..i].iter().any(|o| o.label == v.label) {
                return Err(Error::config(format!("variants[{i}].label"), "labels must be unique"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSampler {
    pub label: String,
    pub algorithm: AlgorithmConfig,
    pub kernel: KernelConfig,
    /// Defaults to 0.05 for SVGD and 1 for SVN.
    #[serde(default)]
    pub step_size: Option<f64>,
    /// Geometric decay `ρ` in `ε_l = ε₀ ρ^l`.
    #[serde(default = "one")]
    pub step_decay: f64,
}

fn default_dims() -> Vec<usize> {
    vec![40, 60, 80, 100]
}

/// Discretization study on the linear-Gaussian problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    pub schema_version: u32,
    pub variant: LinearVariant,
    #[serde(default = "default_dims")]
    pub dims: Vec<usize>,
    pub samplers: Vec<ValidateSampler>,
    pub n: usize,
    pub iterations: usize,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ValidateConfig {
    pub fn validate(&self) -> Result<()> {
        check_version(self.schema_version)?;
        if self.dims.is_empty() {
            return Err(Error::config("dims", "must list at least one dimension"));
        }
        if let Some(d) = self.dims.iter().find(|&&d| d < 2) {
            return Err(Error::config("dims", format!("dimension {d} is below 2")));
        }
        if self.samplers.is_empty() {
            return Err(Error::config("samplers", "must list at least one sampler"));
        }
        for (i, s) in self.samplers.iter().enumerate() {
            s.sampler().validate(&format!("samplers[{i}]."))?;
        }
        if self.n < 2 {
            return Err(Error::config("n", "must be at least 2"));
        }
        Ok(())
    }

    /// The run configuration for one sampler at one dimension.
    pub fn run_config(&self, sampler: &SamplerConfig, dim: usize) -> RunConfig {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            problem: ProblemConfig::LinearGaussian {
                variant: self.variant,
                dim,
            },
            algorithm: sampler.algorithm,
            kernel: sampler.kernel,
            step_size: sampler.step_size,
            step_decay: sampler.step_decay,
            n: self.n,
            budget: Budget::Iterations(self.iterations),
            seed: self.seed,
            checkpoints: Some(vec![0, self.iterations]),
            out_dir: None,
        }
    }
}

fn parse_with_path<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let message = e.inner().to_string();
        Error::Config {
            field: if field == "." { "<root>".into() } else { field },
            message,
        }
    })
}

/// Parses and validates a run config. A run report is accepted as well, in
/// which case its embedded config is used.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?;
    let cfg: RunConfig = match value.get("config") {
        Some(inner) if value.get("schema_version").is_none() => {
            let mut cfg: RunConfig = parse_with_path(&inner.to_string()).map_err(|e| match e {
                Error::Config { field, message } => Error::config(format!("config.{field}"), message),
                other => other,
            })?;
            pin_wallclock_budget(&mut cfg, &value);
            cfg
        }
        _ => parse_with_path(text)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// A wall-clock run is replayed as an iteration-budgeted run with the
/// iteration count and checkpoints the report recorded.
fn pin_wallclock_budget(cfg: &mut RunConfig, report: &serde_json::Value) {
    if !matches!(cfg.budget, Budget::WallclockSeconds(_)) {
        return;
    }
    let Some(done) = report.get("iterations_completed").and_then(|v| v.as_u64()) else {
        return;
    };
    cfg.budget = Budget::Iterations(done as usize);
    if let Some(list) = report.get("checkpoints").and_then(|v| v.as_array()) {
        let its: Vec<usize> = list
            .iter()
            .filter_map(|c| c.get("iteration").and_then(|i| i.as_u64()))
            .map(|i| i as usize)
            .filter(|&i| i <= done as usize)
            .collect();
        cfg.checkpoints = Some(its);
    }
}

pub fn parse_compare_config(text: &str) -> Result<CompareConfig> {
    let cfg: CompareConfig = parse_with_path(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_validate_config(text: &str) -> Result<ValidateConfig> {
    let cfg: ValidateConfig = parse_with_path(text)?;
    cfg.validate()?;
    Ok(cfg)
}
