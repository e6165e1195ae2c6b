//! Dataset generation, training and checkpoint caching.

use std::path::Path;

use serde::{Deserialize, Serialize};
use steer_core::baseline::{LatentPolicy, VaeConfig, VaeReport};
use steer_core::checkpoint::Checkpoint;
use steer_core::demos::{generate_demos, generate_goal_demos, DemoConfig, DemoDataset};
use steer_core::diffusion::{DiffusionPolicy, PolicyConfig, TrainConfig, TrainReport};

use crate::env::{Env, EnvSpec};
use crate::error::{BenchError, Result};

/// Everything that determines a trained diffusion policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpSpec {
    pub env: EnvSpec,
    /// Route states for random-goal mazes; window count times horizon for
    /// multi-goal mazes.
    pub demo_states: usize,
    pub demo_seed: u64,
    pub demo: DemoConfig,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl DpSpec {
    pub fn new(env: EnvSpec, demo_states: usize, steps: usize, seed: u64) -> Self {
        Self {
            demo: demo_config(&env),
            env,
            demo_states,
            demo_seed: seed,
            hidden: vec![256; 4],
            train: TrainConfig { steps, seed, lr: 1e-3, lr_floor: 0.0, ema: Some(0.999), ..TrainConfig::default() },
        }
    }
}

/// Goal-reaching windows on multi-goal mazes, free navigation elsewhere.
pub fn demo_config(env: &EnvSpec) -> DemoConfig {
    match Env::resolve(env) {
        Ok(e) if e.task.is_some() => DemoConfig::goal_reaching(),
        _ => DemoConfig::default(),
    }
}

pub fn demos_for(env: &Env, states: usize, seed: u64, cfg: &DemoConfig) -> Result<DemoDataset> {
    Ok(match &env.task {
        Some(task) => generate_goal_demos(task, (states / cfg.horizon).max(1), seed, cfg)?,
        None => generate_demos(&env.map, states, seed, cfg)?,
    })
}

/// Trains a policy from scratch; `progress` receives `(step, mean loss)`.
pub fn train_dp(
    spec: &DpSpec,
    progress: impl FnMut(usize, f64),
) -> Result<(DiffusionPolicy<f32>, TrainReport, DemoDataset)> {
    let env = Env::resolve(&spec.env)?;
    let data = demos_for(&env, spec.demo_states, spec.demo_seed, &spec.demo)?;
    let cfg = PolicyConfig {
        hidden: spec.hidden.clone(),
        ..PolicyConfig::for_bounds(env.map.bounds(), spec.demo.horizon)
    };
    let mut policy = DiffusionPolicy::<f32>::new(cfg, spec.train.seed)?;
    let report = policy.train_with(&data, &spec.train, progress)?;
    Ok((policy, report, data))
}

pub fn dp_checkpoint(policy: &DiffusionPolicy<f32>, spec: &DpSpec, report: &TrainReport, data: &DemoDataset) -> Checkpoint {
    policy.to_checkpoint(serde_json::json!({
        "spec": spec,
        "dataset_hash": data.content_hash(),
        "dataset_windows": data.trajectories.len(),
        "dataset_states": data.route_states,
        "train_report": report,
    }))
}

/// Loads `path` if its sidecar records the same spec, otherwise trains and
/// writes it.
pub fn load_or_train_dp(
    path: &Path,
    spec: &DpSpec,
    progress: impl FnMut(usize, f64),
) -> Result<(DiffusionPolicy<f32>, Checkpoint)> {
    if path.exists() {
        if let Ok(ck) = Checkpoint::load(path) {
            if serde_json::from_value::<DpSpec>(ck.meta["spec"].clone()).ok().as_ref() == Some(spec) {
                let policy = DiffusionPolicy::from_checkpoint(&ck)?;
                // `DpSpec` only names the maze; the bounds catch an edited asset.
                if policy.config.bounds == Env::resolve(&spec.env)?.map.bounds() {
                    return Ok((policy, ck));
                }
            }
        }
    }
    let (policy, report, data) = train_dp(spec, progress)?;
    let ck = dp_checkpoint(&policy, spec, &report, &data);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    ck.save(path)?;
    Ok((policy, ck))
}

/// Everything that determines a trained latent-variable baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeSpec {
    pub env: EnvSpec,
    pub demo_states: usize,
    pub demo_seed: u64,
    pub demo: DemoConfig,
    pub latent: usize,
    pub hidden: Vec<usize>,
    pub kl_weight: f64,
    pub train: TrainConfig,
}

impl VaeSpec {
    pub fn new(env: EnvSpec, demo_states: usize, steps: usize, seed: u64) -> Self {
        Self {
            demo: demo_config(&env),
            env,
            demo_states,
            demo_seed: seed,
            latent: 8,
            hidden: vec![256, 256],
            // Strong enough that the latent collapses and decoding averages modes.
            kl_weight: 100.0,
            train: TrainConfig { steps, seed, lr: 1e-3, lr_floor: 0.1, ..TrainConfig::default() },
        }
    }

    /// The baseline that matches a diffusion policy's data.
    pub fn matching(dp: &DpSpec, steps: usize) -> Self {
        Self { demo: dp.demo, demo_seed: dp.demo_seed, ..Self::new(dp.env.clone(), dp.demo_states, steps, dp.train.seed) }
    }
}

pub fn train_vae(spec: &VaeSpec) -> Result<(LatentPolicy<f32>, VaeReport, DemoDataset)> {
    let env = Env::resolve(&spec.env)?;
    let data = demos_for(&env, spec.demo_states, spec.demo_seed, &spec.demo)?;
    let cfg = VaeConfig {
        horizon: spec.demo.horizon,
        latent: spec.latent,
        hidden: spec.hidden.clone(),
        kl_weight: spec.kl_weight,
        bounds: env.map.bounds(),
    };
    let (p, report) = steer_core::baseline::train_vae(cfg, &data, &spec.train)?;
    Ok((p, report, data))
}

pub fn load_or_train_vae(path: &Path, spec: &VaeSpec) -> Result<(LatentPolicy<f32>, Checkpoint)> {
    if let Ok(ck) = Checkpoint::load(path) {
        if serde_json::from_value::<VaeSpec>(ck.meta["spec"].clone()).ok().as_ref() == Some(spec) {
            let policy = LatentPolicy::from_checkpoint(&ck)?;
            if policy.config.bounds == Env::resolve(&spec.env)?.map.bounds() {
                return Ok((policy, ck));
            }
        }
    }
    let (p, report, data) = train_vae(spec)?;
    let ck = p.to_checkpoint(serde_json::json!({
        "spec": spec,
        "dataset_hash": data.content_hash(),
        "train_report": report,
    }));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    ck.save(path)?;
    Ok((p, ck))
}

pub fn load_vae(path: &Path) -> Result<(LatentPolicy<f32>, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    Ok((LatentPolicy::from_checkpoint(&ck)?, ck))
}

/// Loads a diffusion policy and the environment it was trained on.
pub fn load_dp(path: &Path) -> Result<(DiffusionPolicy<f32>, DpSpec, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let spec: DpSpec = serde_json::from_value(ck.meta["spec"].clone())
        .map_err(|e| BenchError::Mismatch(format!("{}: no training spec ({e})", path.display())))?;
    Ok((DiffusionPolicy::from_checkpoint(&ck)?, spec, ck))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dp.ckpt");
        let mut spec = DpSpec::new(EnvSpec::large(), 2_000, 3, 1);
        spec.hidden = vec![16];
        spec.train.batch = 8;
        let (a, _) = load_or_train_dp(&path, &spec, |_, _| {}).unwrap();
        let (b, _) = load_or_train_dp(&path, &spec, |_, _| panic!("cached checkpoint should be reused")).unwrap();
        assert_eq!(a, b);
        let (c, loaded_spec, _) = load_dp(&path).unwrap();
        assert_eq!(c, a);
        assert_eq!(loaded_spec, spec);
    }
}
