//! Benchmark run configuration shared by the CLI and tests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use steer_core::baseline::LatentPolicy;
use steer_core::diffusion::DiffusionPolicy;
use steer_core::steering::{GuidanceConfig, Method};

use crate::env::Env;
use crate::error::{BenchError, Result};
use crate::metrics::MetricsReport;
use crate::pipeline::{load_dp, load_vae, DpSpec};
use crate::runner::{run_benchmark, BenchOptions, MethodSpec, Policies};
use crate::trials::{gen_trials, TrialConfig, TrialKind, TrialSpec};

pub const DEFAULT_BETA_GD: f64 = 20.0;
pub const DEFAULT_BETA_SS: f64 = 60.0;
pub const DEFAULT_MCMC: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub ckpt: PathBuf,
    pub ckpt_vae: Option<PathBuf>,
    pub methods: Vec<Method>,
    /// Explicit method rows; replaces `methods` and the beta settings when non-empty.
    pub method_specs: Vec<MethodSpec>,
    pub trials: usize,
    pub batch: usize,
    pub seed: u64,
    /// Defaults to goal trials on multi-goal mazes and sketches elsewhere.
    pub kind: Option<TrialKind>,
    pub beta_gd: f64,
    pub beta_ss: f64,
    pub mcmc: usize,
    pub cutoff_step: usize,
    pub trial_config: TrialConfig,
    pub record_timing: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ckpt: PathBuf::new(),
            ckpt_vae: None,
            methods: Method::ALL.to_vec(),
            method_specs: Vec::new(),
            trials: 100,
            batch: 32,
            seed: 0,
            kind: None,
            beta_gd: DEFAULT_BETA_GD,
            beta_ss: DEFAULT_BETA_SS,
            mcmc: DEFAULT_MCMC,
            cutoff_step: 0,
            trial_config: TrialConfig::default(),
            record_timing: false,
        }
    }
}

impl BenchConfig {
    /// Method rows: the explicit list, or one diffusion row per method plus
    /// RS and PR rows for the baseline when a baseline checkpoint is set.
    pub fn method_rows(&self) -> Vec<MethodSpec> {
        if !self.method_specs.is_empty() {
            return self.method_specs.clone();
        }
        let mut rows: Vec<MethodSpec> = self
            .methods
            .iter()
            .map(|&m| {
                let cfg = GuidanceConfig::new(m).with_cutoff(self.cutoff_step);
                let cfg = match m {
                    Method::Gd => cfg.with_beta(self.beta_gd),
                    Method::Ss => cfg.with_beta(self.beta_ss).with_mcmc(self.mcmc),
                    _ => cfg,
                };
                MethodSpec::dp(m.name(), cfg)
            })
            .collect();
        if self.ckpt_vae.is_some() {
            rows.push(MethodSpec::vae("vae-rs", GuidanceConfig::new(Method::Rs)));
            rows.push(MethodSpec::vae("vae-pr", GuidanceConfig::new(Method::Pr)));
        }
        rows
    }
}

/// Loaded checkpoints and the environment they were trained on.
pub struct Loaded {
    pub env: Env,
    pub env_name: String,
    pub dp: DiffusionPolicy<f32>,
    pub spec: DpSpec,
    pub vae: Option<LatentPolicy<f32>>,
}

pub fn load(ckpt: &Path, ckpt_vae: Option<&Path>) -> Result<Loaded> {
    let (dp, spec, _) = load_dp(ckpt)?;
    let env = Env::resolve(&spec.env)?;
    let vae = ckpt_vae.map(|p| load_vae(p).map(|v| v.0)).transpose()?;
    Ok(Loaded { env, env_name: spec.env.name.clone(), dp, spec, vae })
}

pub fn trials_for(loaded: &Loaded, cfg: &BenchConfig) -> Result<Vec<TrialSpec>> {
    let kind = cfg.kind.unwrap_or(if loaded.env.task.is_some() { TrialKind::Goal } else { TrialKind::Sketch });
    // Sketches and nudges move at the speed the policy was trained on.
    let tc = TrialConfig { demo: loaded.spec.demo, ..cfg.trial_config.clone() };
    gen_trials(&loaded.env, &loaded.dp, cfg.trials, kind, cfg.seed, &tc)
}

pub fn run_loaded(loaded: &Loaded, cfg: &BenchConfig) -> Result<MetricsReport> {
    if cfg.trials == 0 || cfg.batch == 0 {
        return Err(BenchError::Config("trials and batch must be positive".into()));
    }
    let trials = trials_for(loaded, cfg)?;
    let policies = Policies { dp: &loaded.dp, vae: loaded.vae.as_ref() };
    let opts = BenchOptions { batch: cfg.batch, seed: cfg.seed, record_timing: cfg.record_timing };
    run_benchmark(&loaded.env, &loaded.env_name, policies, &cfg.method_rows(), &trials, &opts)
}

pub fn run_bench(cfg: &BenchConfig) -> Result<MetricsReport> {
    let loaded = load(&cfg.ckpt, cfg.ckpt_vae.as_deref())?;
    run_loaded(&loaded, cfg)
}
