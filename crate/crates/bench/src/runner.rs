//! Runs steering methods over a trial set.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use steer_core::baseline::LatentPolicy;
use steer_core::diffusion::{Denoiser, DiffusionPolicy};
use steer_core::maze::{task_label, GoalRegion, MazeMap};
use steer_core::objectives::Objective;
use steer_core::steering::{steer, ChainOutput, GuidanceConfig, Method, Request, Silent, SteeredBatch};
use steer_core::trajectory::{distance, Trajectory};

use crate::env::Env;
use crate::error::{BenchError, Result};
use crate::metrics::{summarize, MetricsReport, Timing, TrialRecord};
use crate::trials::TrialSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Dp,
    Vae,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Dp => "dp",
            Self::Vae => "vae",
        }
    }
}

/// One row of the benchmark: a policy and a sampler configuration. The
/// configuration's seed is replaced by each trial's seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub label: String,
    pub policy: PolicyKind,
    pub config: GuidanceConfig,
}

impl MethodSpec {
    pub fn dp(label: &str, config: GuidanceConfig) -> Self {
        Self { label: label.into(), policy: PolicyKind::Dp, config }
    }

    pub fn vae(label: &str, config: GuidanceConfig) -> Self {
        Self { label: label.into(), policy: PolicyKind::Vae, config }
    }
}

#[derive(Clone, Copy)]
pub struct Policies<'a> {
    pub dp: &'a DiffusionPolicy<f32>,
    pub vae: Option<&'a LatentPolicy<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub batch: usize,
    pub seed: u64,
    pub record_timing: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { batch: 32, seed: 0, record_timing: false }
    }
}

fn check_compatible(env: &Env, policies: &Policies<'_>, methods: &[MethodSpec], trials: &[TrialSpec]) -> Result<()> {
    let b = env.map.bounds();
    if policies.dp.bounds() != b {
        return Err(BenchError::Mismatch(format!("policy bounds {:?} differ from maze bounds {:?}", policies.dp.bounds(), b)));
    }
    for m in methods {
        if m.policy == PolicyKind::Vae {
            let vae = policies.vae.ok_or_else(|| BenchError::Config(format!("{} needs a vae checkpoint", m.label)))?;
            if vae.config.bounds != b {
                return Err(BenchError::Mismatch("vae bounds differ from maze bounds".into()));
            }
            if !matches!(m.config.method, Method::Rs | Method::Pr) {
                return Err(BenchError::Config(format!("{}: the vae baseline supports rs and pr only", m.label)));
            }
        }
        m.config.validate(policies.dp.schedule().inference_levels().len())?;
    }
    for t in trials {
        if !b.contains(t.cond) || t.interaction.validate(&b).is_err() {
            return Err(BenchError::Mismatch(format!("trial {} lies outside the maze", t.id)));
        }
    }
    Ok(())
}

fn endpoint_spread(trajs: &[Trajectory<f32>]) -> f64 {
    let ends: Vec<[f64; 2]> = trajs.iter().map(|t| t.last()).map(|s| [s[0] as f64, s[1] as f64]).collect();
    let n = ends.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += distance(ends[i], ends[j]);
        }
    }
    total / (n * (n - 1) / 2) as f64
}

pub fn run_method(
    policies: &Policies<'_>,
    spec: &MethodSpec,
    trial: &TrialSpec,
    map: &MazeMap,
    batch: usize,
) -> Result<SteeredBatch<f32>> {
    let horizon = policies.dp.horizon();
    let objective = Objective::<f32>::from_interaction(&trial.interaction, horizon)?;
    let cfg = GuidanceConfig { batch, seed: trial.seed, ..spec.config.clone() };
    let cond = [trial.cond[0] as f32, trial.cond[1] as f32];
    match spec.policy {
        PolicyKind::Dp => {
            let nudge: Vec<[f32; 2]> = trial.nudge.iter().map(|p| [p[0] as f32, p[1] as f32]).collect();
            let req = Request { cond, objective: Some(&objective), nudge: Some(&nudge), map: Some(map) };
            Ok(steer(policies.dp, &req, &cfg, &mut Silent)?)
        }
        PolicyKind::Vae => {
            let vae = policies.vae.ok_or_else(|| BenchError::Config("no vae policy".into()))?;
            let trajectories = vae.sample(cond, batch, trial.seed)?;
            let diagnostics = vec![None; trajectories.len()];
            Ok(SteeredBatch::assemble(ChainOutput { trajectories, diagnostics }, Some(&objective), Some(map), cfg)?)
        }
    }
}

pub fn record(
    spec: &MethodSpec,
    trial: &TrialSpec,
    batch: &SteeredBatch<f32>,
    objective: &Objective<f32>,
    goals: Option<&[GoalRegion]>,
) -> Result<TrialRecord> {
    let l2: Vec<Option<f64>> = batch
        .trajectories
        .iter()
        .zip(&batch.diagnostics)
        .map(|(t, d)| match d {
            Some(_) => Ok(None),
            None => objective.mean_distance(t).map(|v| Some(v as f64)),
        })
        .collect::<steer_core::Result<_>>()?;
    let finite: Vec<f64> = l2.iter().flatten().copied().collect();
    let exec = batch.executed_index();
    let avg = |v: &[f64]| if v.is_empty() { f64::INFINITY } else { v.iter().sum::<f64>() / v.len() as f64 };
    let costs: Vec<f64> = batch.costs.iter().map(|&c| c as f64).filter(|c| c.is_finite()).collect();
    Ok(TrialRecord {
        method: spec.label.clone(),
        trial: trial.id,
        executed_index: exec,
        executed_l2: l2[exec].unwrap_or(f64::INFINITY),
        batch_min_l2: finite.iter().copied().fold(f64::INFINITY, f64::min),
        avg_l2: avg(&finite),
        mean_cost: avg(&costs),
        collision_rate: batch.collision_rate(),
        executed_collision: batch.collisions[exec],
        diverged: batch.diagnostics.iter().filter(|d| d.is_some()).count(),
        goal_label: goals.and_then(|g| task_label(&batch.trajectories[exec], g)),
        intended_goal: trial.intended_goal,
        endpoint_spread: endpoint_spread(&batch.trajectories),
    })
}

/// Samples every (method, trial) pair. Trials run in parallel; records are
/// ordered by method, then trial id, so the report does not depend on
/// scheduling.
pub fn run_benchmark(
    env: &Env,
    env_name: &str,
    policies: Policies<'_>,
    methods: &[MethodSpec],
    trials: &[TrialSpec],
    opts: &BenchOptions,
) -> Result<MetricsReport> {
    check_compatible(env, &policies, methods, trials)?;
    let goals = env.task.as_ref().map(|t| t.goals.as_slice());
    let horizon = policies.dp.horizon();
    let per_trial: Vec<Vec<(TrialRecord, f64)>> = trials
        .par_iter()
        .map(|trial| {
            let objective = Objective::<f32>::from_interaction(&trial.interaction, horizon)?;
            methods
                .iter()
                .map(|m| {
                    let start = Instant::now();
                    let batch = run_method(&policies, m, trial, &env.map, opts.batch)?;
                    let ms = start.elapsed().as_secs_f64() * 1e3;
                    Ok((record(m, trial, &batch, &objective, goals)?, ms))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(methods.len() * trials.len());
    let mut timing = Vec::new();
    let mut summaries = Vec::new();
    for (k, m) in methods.iter().enumerate() {
        let start = rows.len();
        rows.extend(per_trial.iter().map(|t| t[k].0.clone()));
        let refs: Vec<&TrialRecord> = rows[start..].iter().collect();
        summaries.push(summarize(&m.label, m.policy.name(), &m.config, &refs));
        let ms = per_trial.iter().map(|t| t[k].1).sum::<f64>() / per_trial.len().max(1) as f64;
        timing.push(Timing { label: m.label.clone(), ms_per_batch: ms });
    }
    Ok(MetricsReport {
        env: env_name.into(),
        trials: trials.len(),
        batch: opts.batch,
        seed: opts.seed,
        methods: summaries,
        rows,
        timing: opts.record_timing.then_some(timing),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvSpec;
    use crate::trials::{sketch_trials, TrialConfig};
    use steer_core::diffusion::PolicyConfig;

    fn tiny(env: &Env) -> DiffusionPolicy<f32> {
        DiffusionPolicy::new(PolicyConfig { hidden: vec![16], ..PolicyConfig::for_bounds(env.map.bounds(), 64) }, 3).unwrap()
    }

    #[test]
    fn report_invariants_and_repeatability() {
        let env = Env::resolve(&EnvSpec::large()).unwrap();
        let dp = tiny(&env);
        let trials = sketch_trials(&env.map, 6, 64, 2, &TrialConfig::default()).unwrap();
        let methods: Vec<MethodSpec> = Method::ALL
            .iter()
            .map(|&m| MethodSpec::dp(m.name(), GuidanceConfig::new(m).with_beta(20.0).with_mcmc(2)))
            .collect();
        let opts = BenchOptions { batch: 4, ..BenchOptions::default() };
        let pol = Policies { dp: &dp, vae: None };
        let a = run_benchmark(&env, "large", pol, &methods, &trials, &opts).unwrap();
        let b = run_benchmark(&env, "large", pol, &methods, &trials, &opts).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.rows.len(), 36);
        for r in &a.rows {
            assert!(r.batch_min_l2 <= r.avg_l2 + 1e-12 && r.batch_min_l2 <= r.executed_l2 + 1e-12);
        }
        let rs: Vec<_> = a.rows_for("rs").collect();
        let pr: Vec<_> = a.rows_for("pr").collect();
        for (x, y) in rs.iter().zip(&pr) {
            assert_eq!(x.batch_min_l2, y.batch_min_l2);
            assert_eq!(x.avg_l2, y.avg_l2);
            assert!(y.executed_l2 <= x.executed_l2);
        }
    }

    #[test]
    fn wall_nudges_always_collide() {
        let env = Env::resolve(&EnvSpec::large()).unwrap();
        let dp = tiny(&env);
        let mut trials = sketch_trials(&env.map, 3, 64, 5, &TrialConfig::default()).unwrap();
        let wall = env.map.cell_center((0, 0));
        for t in &mut trials {
            t.nudge = vec![t.cond, wall];
        }
        let methods = [MethodSpec::dp("op", GuidanceConfig::new(Method::Op))];
        let opts = BenchOptions { batch: 4, ..BenchOptions::default() };
        let r = run_benchmark(&env, "large", Policies { dp: &dp, vae: None }, &methods, &trials, &opts).unwrap();
        assert_eq!(r.methods[0].collision, 1.0);
    }

    #[test]
    fn mismatches_rejected() {
        let env = Env::resolve(&EnvSpec::large()).unwrap();
        let other = Env::resolve(&EnvSpec::large().with_cell_size(0.5)).unwrap();
        let dp = tiny(&other);
        let trials = sketch_trials(&env.map, 1, 64, 5, &TrialConfig::default()).unwrap();
        let methods = [MethodSpec::dp("rs", GuidanceConfig::new(Method::Rs))];
        let pol = Policies { dp: &dp, vae: None };
        assert!(matches!(
            run_benchmark(&env, "large", pol, &methods, &trials, &BenchOptions::default()),
            Err(BenchError::Mismatch(_))
        ));
        let dp = tiny(&env);
        let vae_methods = [MethodSpec::vae("vae-rs", GuidanceConfig::new(Method::Rs))];
        let pol = Policies { dp: &dp, vae: None };
        assert!(run_benchmark(&env, "large", pol, &vae_methods, &trials, &BenchOptions::default()).is_err());
    }
}
