//! Synthetic interaction trials.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use steer_core::demos::{random_route, DemoConfig};
use steer_core::diffusion::Denoiser;
use steer_core::maze::{check_collision, task_label, MazeMap};
use steer_core::objectives::{resample_sketch, Interaction};
use steer_core::steering::{sample_rs, GuidanceConfig, Method, Request};
use steer_core::trajectory::{Bounds, Trajectory};

use crate::env::Env;
use crate::error::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialKind {
    /// Perturbed route sketches from random free starts.
    Sketch,
    /// Point goals at a goal region the policy does not usually pick.
    Goal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub id: usize,
    pub cond: [f64; 2],
    pub interaction: Interaction,
    /// Prefix used by OP.
    pub nudge: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intended_goal: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialConfig {
    /// Peak sketch displacement from its route, in cells.
    pub amplitude: f64,
    /// Number of smooth basis functions per axis.
    pub harmonics: usize,
    /// Longest OP prefix taken from a sketch, in states.
    pub nudge_states: usize,
    /// Longest straight-line goal nudge, in states. Nudges end at the goal
    /// center, ignoring walls.
    pub goal_nudge_states: usize,
    /// Batch used to find the policy's usual goal.
    pub probe_batch: usize,
    /// Start jitter for goal trials, in cells.
    pub start_jitter: f64,
    pub demo: DemoConfig,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            harmonics: 3,
            nudge_states: 16,
            goal_nudge_states: 64,
            probe_batch: 32,
            start_jitter: 0.15,
            demo: DemoConfig::default(),
        }
    }
}

fn trial_seed(seed: u64, id: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (id as u64).wrapping_add(0xD1B5_4A32_D192_ED03)
}

/// Smooth displacement field vanishing at the first state.
fn smooth_offsets(len: usize, cfg: &TrialConfig, cell: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let coef: Vec<[f64; 2]> = (0..cfg.harmonics.max(1))
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let raw: Vec<[f64; 2]> = (0..len)
        .map(|t| {
            let u = t as f64 / (len - 1) as f64;
            let mut d = [0.0; 2];
            for (j, c) in coef.iter().enumerate() {
                let b = (std::f64::consts::PI * (j as f64 + 0.5) * u).sin() / (j + 1) as f64;
                d[0] += c[0] * b;
                d[1] += c[1] * b;
            }
            d
        })
        .collect();
    let peak = raw.iter().map(|d| d[0].hypot(d[1])).fold(0.0, f64::max);
    let scale = if peak > 0.0 { cfg.amplitude * cell * rng.random_range(0.25..1.0) / peak } else { 0.0 };
    raw.iter().map(|d| [d[0] * scale, d[1] * scale]).collect()
}

/// Longest sketch prefix (up to `max`) whose endpoint is in free space.
pub fn sketch_nudge(map: &MazeMap, sketch: &[[f64; 2]], horizon: usize, max: usize) -> Result<Vec<[f64; 2]>> {
    let target = resample_sketch(sketch, horizon)?;
    let k = (1..=max.min(horizon)).rev().find(|&k| !map.is_wall_at(target.states[k - 1])).unwrap_or(1);
    Ok(target.states[..k].to_vec())
}

pub fn sketch_trials(map: &MazeMap, num: usize, horizon: usize, seed: u64, cfg: &TrialConfig) -> Result<Vec<TrialSpec>> {
    let free = map.free_cells();
    let bounds = map.bounds();
    (0..num)
        .map(|id| {
            let seed = trial_seed(seed, id);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let route = random_route(map, &free, horizon, &cfg.demo, &mut rng);
            let offsets = smooth_offsets(route.len(), cfg, map.cell_size, &mut rng);
            let points: Vec<[f64; 2]> =
                route.iter().zip(&offsets).map(|(p, d)| bounds.clamp([p[0] + d[0], p[1] + d[1]])).collect();
            let nudge = sketch_nudge(map, &points, horizon, cfg.nudge_states)?;
            Ok(TrialSpec { id, cond: route[0], interaction: Interaction::Sketch { points }, nudge, intended_goal: None, seed })
        })
        .collect()
}

/// Goal choice trials. Each trial probes the policy with an unguided batch
/// and asks for a goal other than the most frequent label.
pub fn goal_trials<D: Denoiser<f32> + ?Sized>(
    env: &Env,
    policy: &D,
    num: usize,
    seed: u64,
    cfg: &TrialConfig,
) -> Result<Vec<TrialSpec>> {
    let task = env.task.as_ref().ok_or_else(|| BenchError::Config("goal trials need a multi-goal environment".into()))?;
    let cs = task.map.cell_size;
    let step = cfg.demo.speed * cs;
    let horizon = policy.horizon();
    (0..num)
        .map(|id| {
            let seed = trial_seed(seed, id);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let j = cfg.start_jitter * cs;
            let cond = [task.start[0] + rng.random_range(-j..=j), task.start[1] + rng.random_range(-j..=j)];
            let probe = sample_rs(
                policy,
                &Request { cond: [cond[0] as f32, cond[1] as f32], objective: None, nudge: None, map: None },
                &GuidanceConfig::new(Method::Rs).with_batch(cfg.probe_batch).with_seed(seed),
            )?;
            let mut counts = vec![0usize; task.goals.len()];
            for t in &probe.trajectories {
                if let Some(g) = task_label(t, &task.goals) {
                    counts[g] += 1;
                }
            }
            let majority = (0..counts.len()).max_by_key(|&g| (counts[g], std::cmp::Reverse(g))).expect("goals exist");
            let others: Vec<usize> = (0..task.goals.len()).filter(|&g| g != majority || counts[g] == 0).collect();
            let goal = others[rng.random_range(0..others.len())];
            let z = task.goals[goal].center;
            let (dx, dy) = (z[0] - cond[0], z[1] - cond[1]);
            let len = dx.hypot(dy);
            let states = ((len / step).ceil() as usize + 1).min(cfg.goal_nudge_states).min(horizon);
            let nudge = (0..states)
                .map(|t| {
                    let s = (t as f64 * step).min(len) / len;
                    [cond[0] + dx * s, cond[1] + dy * s]
                })
                .collect();
            Ok(TrialSpec { id, cond, interaction: Interaction::Point { z }, nudge, intended_goal: Some(goal), seed })
        })
        .collect()
}

pub fn gen_trials<D: Denoiser<f32> + ?Sized>(
    env: &Env,
    policy: &D,
    num: usize,
    kind: TrialKind,
    seed: u64,
    cfg: &TrialConfig,
) -> Result<Vec<TrialSpec>> {
    match kind {
        TrialKind::Sketch => sketch_trials(&env.map, num, policy.horizon(), seed, cfg),
        TrialKind::Goal => goal_trials(env, policy, num, seed, cfg),
    }
}

/// Fraction of sketch trials whose polyline enters a wall.
pub fn wall_crossing_fraction(map: &MazeMap, trials: &[TrialSpec]) -> f64 {
    let sketches: Vec<&Vec<[f64; 2]>> = trials
        .iter()
        .filter_map(|t| match &t.interaction {
            Interaction::Sketch { points } => Some(points),
            _ => None,
        })
        .collect();
    let hits = sketches.iter().filter(|p| check_collision(&Trajectory { states: p.to_vec() }, map)).count();
    hits as f64 / sketches.len().max(1) as f64
}

/// All trial coordinates inside `bounds`.
pub fn trials_in_bounds(trials: &[TrialSpec], bounds: &Bounds) -> bool {
    trials.iter().all(|t| bounds.contains(t.cond) && t.interaction.validate(bounds).is_ok())
}
