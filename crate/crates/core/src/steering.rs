//! Inference-time steering of a frozen denoiser.
//!
//! All six samplers share one reverse chain. They differ in where the chain
//! starts (pure noise or a noised target), whether the alignment gradient is
//! added to the noise estimate, how many re-noising sweeps run per level,
//! and what happens after sampling (ranking, prefix overwrite).

use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::maze::{check_collision, MazeMap};
use crate::objectives::{apply_nudge, AlignmentCost};
use crate::rng::{lane, normal_vec};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::trajectory::{State, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rs,
    Op,
    Pr,
    Bi,
    Gd,
    Ss,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Rs, Method::Op, Method::Pr, Method::Bi, Method::Gd, Method::Ss];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rs => "rs",
            Self::Op => "op",
            Self::Pr => "pr",
            Self::Bi => "bi",
            Self::Gd => "gd",
            Self::Ss => "ss",
        }
    }

    /// Whether the method needs a differentiable objective.
    pub fn needs_objective(self) -> bool {
        matches!(self, Self::Pr | Self::Bi | Self::Gd | Self::Ss)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Parse(format!("unknown method {s:?}")))
    }
}

/// How the configured guide ratio maps to the ratio applied at a level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaScale {
    /// `beta_i = beta * sqrt(1 - abar_i)`: the gradient enters the noise
    /// estimate in score units, so the re-noising sweeps target
    /// `p_i(x) exp(-beta xi(x))` at every level.
    #[default]
    NoiseStd,
    /// `beta_i = beta` at every level.
    Constant,
}

/// Guide ratio: one value for every level or one per inference step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Beta {
    Constant(f64),
    PerStep(Vec<f64>),
}

impl Default for Beta {
    fn default() -> Self {
        Beta::Constant(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub method: Method,
    #[serde(default)]
    pub beta: Beta,
    /// Guidance is switched off at levels `i <= cutoff_step`.
    #[serde(default)]
    pub cutoff_step: usize,
    #[serde(default = "default_mcmc")]
    pub mcmc_steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    /// Norm cap on the alignment gradient in normalized coordinates.
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub beta_scale: BetaScale,
}

fn default_mcmc() -> usize {
    1
}
fn default_batch() -> usize {
    32
}
fn default_clip() -> f64 {
    10.0
}

impl GuidanceConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            beta: Beta::Constant(0.0),
            cutoff_step: 0,
            mcmc_steps: 1,
            batch: default_batch(),
            seed: 0,
            grad_clip: default_clip(),
            beta_scale: BetaScale::NoiseStd,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = Beta::Constant(beta);
        self
    }

    pub fn with_mcmc(mut self, m: usize) -> Self {
        self.mcmc_steps = m;
        self
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_cutoff(mut self, cutoff: usize) -> Self {
        self.cutoff_step = cutoff;
        self
    }

    pub fn validate(&self, inference_steps: usize) -> Result<()> {
        if self.mcmc_steps == 0 {
            return Err(Error::InvalidInput("mcmc_steps must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidInput("batch must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::InvalidInput("grad_clip must be positive".into()));
        }
        match &self.beta {
            Beta::Constant(b) if !(b.is_finite() && *b >= 0.0) => {
                Err(Error::InvalidInput(format!("beta must be finite and non-negative, got {b}")))
            }
            Beta::PerStep(v) if v.len() != inference_steps => {
                Err(Error::DimensionMismatch { expected: inference_steps, got: v.len() })
            }
            Beta::PerStep(v) if v.iter().any(|b| !(b.is_finite() && *b >= 0.0)) => {
                Err(Error::InvalidInput("beta entries must be finite and non-negative".into()))
            }
            _ => Ok(()),
        }
    }

    /// Configured guide ratio at inference step `index` (diffusion level
    /// `level`), before level scaling.
    pub fn beta_at(&self, index: usize, level: usize) -> f64 {
        if level <= self.cutoff_step {
            return 0.0;
        }
        match &self.beta {
            Beta::Constant(b) => *b,
            Beta::PerStep(v) => v[index],
        }
    }

    /// Ratio multiplying the alignment gradient at a level.
    pub fn effective_beta(&self, index: usize, level: usize, sched: &NoiseSchedule) -> f64 {
        let b = self.beta_at(index, level);
        match self.beta_scale {
            BetaScale::NoiseStd => b * (1.0 - sched.alpha_bar(level)).sqrt(),
            BetaScale::Constant => b,
        }
    }
}

/// Where the reverse chain starts.
#[derive(Debug, Clone, PartialEq)]
pub enum Initialization<S> {
    /// Standard normal at the top level.
    Noise,
    /// Target (workspace units) diffused to the top level with the same draw.
    Biased(Trajectory<S>),
}

/// Intermediate chain state handed to observers after each inference step.
#[derive(Debug, Clone)]
pub struct Snapshot<'a, S> {
    /// Index into the inference subsequence.
    pub step: usize,
    pub level: usize,
    /// Current iterates in workspace units.
    pub trajectories: &'a [Trajectory<S>],
}

/// Receives snapshots; returning `Break` cancels the request.
pub trait Observer<S> {
    fn on_step(&mut self, snapshot: &Snapshot<'_, S>) -> ControlFlow<()>;
}

impl<S, F: FnMut(&Snapshot<'_, S>) -> ControlFlow<()>> Observer<S> for F {
    fn on_step(&mut self, snapshot: &Snapshot<'_, S>) -> ControlFlow<()> {
        self(snapshot)
    }
}

/// Observer that never cancels.
pub struct Silent;

impl<S> Observer<S> for Silent {
    fn on_step(&mut self, _: &Snapshot<'_, S>) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }
}

/// Raw chain output before scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput<S> {
    pub trajectories: Vec<Trajectory<S>>,
    /// Per-member abort reason; aborted members keep their last iterate.
    pub diagnostics: Vec<Option<String>>,
}

struct Guide<'a, S> {
    objective: &'a dyn AlignmentCost<S>,
    cfg: &'a GuidanceConfig,
}

/// Runs the (optionally guided) reverse chain for every batch member.
///
/// Member `m` draws from lane `m` of `cfg.seed`: first its initial noise,
/// then one re-noising draw per extra sweep, in chain order.
pub fn run_chain<S: Scalar, D: Denoiser<S> + ?Sized>(
    policy: &D,
    cond: State<S>,
    init: &Initialization<S>,
    objective: Option<&dyn AlignmentCost<S>>,
    cfg: &GuidanceConfig,
    sweeps: usize,
    observer: &mut dyn Observer<S>,
) -> Result<ChainOutput<S>> {
    let sched = policy.schedule();
    cfg.validate(sched.inference_levels().len())?;
    let d = policy.sample_dim();
    let bounds = policy.bounds();
    let n = cfg.batch;
    let ncond = vec![bounds.normalize_state(cond); n];
    let mut lanes: Vec<_> = (0..n).map(|m| lane(cfg.seed, m)).collect();

    let target = match init {
        Initialization::Noise => None,
        Initialization::Biased(t) => {
            if t.horizon() != policy.horizon() {
                return Err(Error::DimensionMismatch { expected: policy.horizon(), got: t.horizon() });
            }
            Some(bounds.normalize(t).to_flat())
        }
    };
    let mut x: Vec<Vec<S>> = Vec::with_capacity(n);
    for l in lanes.iter_mut() {
        let eta: Vec<S> = normal_vec(l, d);
        x.push(match &target {
            None => eta,
            Some(t) => sched.forward_diffuse(t, sched.top_level(), &eta)?,
        });
    }
    let guide = objective.map(|objective| Guide { objective, cfg });
    let mut diagnostics: Vec<Option<String>> = vec![None; n];
    let stochastic = sched.config().ddim_eta > 0.0;

    for (step, &level) in sched.inference_levels().iter().enumerate() {
        let beta = guide.as_ref().map_or(0.0, |_| cfg.effective_beta(step, level, sched));
        let next = sched.next_level(level);
        for sweep in 0..sweeps {
            let last = sweep + 1 == sweeps;
            let active: Vec<usize> = (0..n).filter(|&m| diagnostics[m].is_none()).collect();
            if active.is_empty() {
                break;
            }
            let flat: Vec<S> = active.iter().flat_map(|&m| x[m].iter().copied()).collect();
            let conds: Vec<State<S>> = active.iter().map(|&m| ncond[m]).collect();
            let eps = policy.predict_noise(&flat, &conds, level)?;
            for (row, &m) in eps.chunks_exact(d).zip(&active) {
                let mut e = row.to_vec();
                if beta > 0.0 {
                    let g = guide.as_ref().expect("beta is zero without an objective");
                    match guidance_direction(g, &x[m], bounds) {
                        Ok(dir) => {
                            let b = S::of(beta);
                            e.iter_mut().zip(&dir).for_each(|(e, &g)| *e += b * g);
                        }
                        Err(err) => {
                            diagnostics[m] = Some(format!("level {level}: {err}"));
                            continue;
                        }
                    }
                }
                let stepped = if last {
                    let noise: Option<Vec<S>> = stochastic.then(|| normal_vec(&mut lanes[m], d));
                    sched.reverse_step(&x[m], level, next, &e, noise.as_deref())?
                } else {
                    let noise: Vec<S> = normal_vec(&mut lanes[m], d);
                    sched.reverse_step(&x[m], level, level, &e, Some(&noise))?
                };
                if stepped.iter().any(|v| !v.is_finite()) {
                    diagnostics[m] = Some(format!("level {level}: non-finite iterate"));
                    continue;
                }
                x[m] = stepped;
            }
        }
        let snaps: Vec<Trajectory<S>> = x.iter().map(|r| bounds.denormalize(&Trajectory::from_flat(r))).collect();
        if observer.on_step(&Snapshot { step, level, trajectories: &snaps }).is_break() {
            return Err(Error::Cancelled);
        }
    }
    let trajectories = x.iter().map(|r| bounds.denormalize(&Trajectory::from_flat(r))).collect();
    Ok(ChainOutput { trajectories, diagnostics })
}

/// Alignment gradient at the (denormalized) noisy iterate, chain-ruled to
/// normalized coordinates and norm-clipped.
fn guidance_direction<S: Scalar>(g: &Guide<'_, S>, x: &[S], bounds: crate::trajectory::Bounds) -> Result<Vec<S>> {
    let ws = bounds.denormalize(&Trajectory::from_flat(x));
    let mut grad = g.objective.gradient(&ws)?;
    if grad.len() != x.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: grad.len() });
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("alignment gradient"));
    }
    bounds.gradient_to_normalized(&mut grad);
    clip_norm(&mut grad, S::of(g.cfg.grad_clip));
    Ok(grad)
}

pub fn clip_norm<S: Scalar>(v: &mut [S], max: S) {
    let norm = v.iter().map(|&a| a * a).sum::<S>().sqrt();
    if norm > max {
        let s = max / norm;
        v.iter_mut().for_each(|a| *a *= s);
    }
}

/// Scored and ranked sampler output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteeredBatch<S> {
    pub trajectories: Vec<Trajectory<S>>,
    /// Objective value per member; zero when no objective was given.
    pub costs: Vec<S>,
    pub collisions: Vec<bool>,
    /// Member indices by ascending cost, ties by lower index.
    pub ranking: Vec<usize>,
    pub diagnostics: Vec<Option<String>>,
    pub config: GuidanceConfig,
}

impl<S: Scalar> SteeredBatch<S> {
    pub fn assemble(
        out: ChainOutput<S>,
        objective: Option<&dyn AlignmentCost<S>>,
        map: Option<&MazeMap>,
        config: GuidanceConfig,
    ) -> Result<Self> {
        let ChainOutput { trajectories, diagnostics } = out;
        let mut costs = Vec::with_capacity(trajectories.len());
        for (t, diag) in trajectories.iter().zip(&diagnostics) {
            costs.push(match (objective, diag) {
                (_, Some(_)) => S::infinity(),
                (Some(o), None) => o.cost(t)?,
                (None, None) => S::zero(),
            });
        }
        let collisions = trajectories
            .iter()
            .zip(&diagnostics)
            .map(|(t, diag)| {
                diag.is_some()
                    || map.is_some_and(|m| {
                        let b = m.bounds();
                        check_collision(&Trajectory { states: t.states.iter().map(|&s| b.clamp(s)).collect() }, m)
                    })
            })
            .collect();
        let mut ranking: Vec<usize> = (0..trajectories.len()).collect();
        ranking.sort_by(|&a, &b| {
            costs[a].partial_cmp(&costs[b]).unwrap_or_else(|| costs[a].is_nan().cmp(&costs[b].is_nan()))
        });
        Ok(Self { trajectories, costs, collisions, ranking, diagnostics, config })
    }

    /// The member that would be executed: the first sample for methods that
    /// do not select, the best-ranked one otherwise.
    pub fn executed_index(&self) -> usize {
        match self.config.method {
            Method::Rs | Method::Op => 0,
            _ => self.ranking[0],
        }
    }

    pub fn best(&self) -> &Trajectory<S> {
        &self.trajectories[self.ranking[0]]
    }

    pub fn collision_rate(&self) -> f64 {
        self.collisions.iter().filter(|&&c| c).count() as f64 / self.collisions.len() as f64
    }
}

fn require<S>(objective: Option<&dyn AlignmentCost<S>>, method: Method) -> Result<&dyn AlignmentCost<S>> {
    objective.ok_or_else(|| Error::InvalidInput(format!("{} needs a point or sketch objective", method.name())))
}

/// What a steering request carries besides the policy.
pub struct Request<'a, S> {
    pub cond: State<S>,
    /// Used to steer (BI, GD, SS), to rank (PR) and to score every method.
    pub objective: Option<&'a dyn AlignmentCost<S>>,
    /// Prefix for OP.
    pub nudge: Option<&'a [State<S>]>,
    pub map: Option<&'a MazeMap>,
}

/// Dispatches on `cfg.method`.
pub fn steer<S: Scalar, D: Denoiser<S> + ?Sized>(
    policy: &D,
    req: &Request<'_, S>,
    cfg: &GuidanceConfig,
    observer: &mut dyn Observer<S>,
) -> Result<SteeredBatch<S>> {
    let method = cfg.method;
    let (out, objective) = match method {
        Method::Rs => (run_chain(policy, req.cond, &Initialization::Noise, None, cfg, 1, observer)?, req.objective),
        Method::Pr => {
            let o = require(req.objective, method)?;
            (run_chain(policy, req.cond, &Initialization::Noise, None, cfg, 1, observer)?, Some(o))
        }
        Method::Bi => {
            let o = require(req.objective, method)?;
            let init = Initialization::Biased(o.target(policy.horizon())?);
            (run_chain(policy, req.cond, &init, None, cfg, 1, observer)?, Some(o))
        }
        Method::Gd => {
            let o = require(req.objective, method)?;
            (run_chain(policy, req.cond, &Initialization::Noise, Some(o), cfg, 1, observer)?, Some(o))
        }
        Method::Ss => {
            let o = require(req.objective, method)?;
            let sweeps = cfg.mcmc_steps;
            (run_chain(policy, req.cond, &Initialization::Noise, Some(o), cfg, sweeps, observer)?, Some(o))
        }
        Method::Op => {
            let prefix = req.nudge.ok_or_else(|| Error::InvalidInput("op needs a nudge prefix".into()))?;
            (output_perturbation(policy, prefix, cfg, observer)?, req.objective)
        }
    };
    SteeredBatch::assemble(out, objective, req.map, cfg.clone())
}

/// Prefix overwrite followed by a rollout conditioned on the prefix end.
fn output_perturbation<S: Scalar, D: Denoiser<S> + ?Sized>(
    policy: &D,
    prefix: &[State<S>],
    cfg: &GuidanceConfig,
    observer: &mut dyn Observer<S>,
) -> Result<ChainOutput<S>> {
    let horizon = policy.horizon();
    if prefix.is_empty() || prefix.len() > horizon {
        return Err(Error::InvalidInput(format!("nudge length must be in 1..={horizon}, got {}", prefix.len())));
    }
    let k = prefix.len();
    let zk = prefix[k - 1];
    let rollout = run_chain(policy, zk, &Initialization::Noise, None, cfg, 1, observer)?;
    let trajectories = rollout
        .trajectories
        .iter()
        .map(|r| {
            // The rollout starts at z_k; its states after the first continue the plan.
            let shifted = Trajectory { states: [prefix, &r.states[1..=horizon - k]].concat() };
            apply_nudge(&shifted, prefix)
        })
        .collect::<Result<_>>()?;
    Ok(ChainOutput { trajectories, diagnostics: rollout.diagnostics })
}

pub fn sample_rs<S: Scalar, D: Denoiser<S> + ?Sized>(
    policy: &D,
    req: &Request<'_, S>,
    cfg: &GuidanceConfig,
) -> Result<SteeredBatch<S>> {
    steer(policy, req, &GuidanceConfig { method: Method::Rs, ..cfg.clone() }, &mut Silent)
}

pub fn sample_op<S: Scalar, D: Denoiser<S> + ?Sized>(
    policy: &D,
    req: &Request<'_, S>,
    cfg: &GuidanceConfig,
) -> Result<SteeredBatch<S>> {
    steer(policy, req, &GuidanceConfig { method: Method::Op, ..cfg.clone() }, &mut Silent)
}

pub fn sample_pr<S: Scalar, D: Denoiser<S> + ?Sized>(
    policy: &D,
    req: &Request<'_, S>,
    cfg: &GuidanceConfig,
) -> Result<SteeredBatch<S>> {
    steer(policy, req, &GuidanceConfig { method: Method::Pr, ..cfg.clone() }, &mut Silent)
}

pub fn sample_bi<S: Scalar, D: Denoiser<S> + ?Sized>(
    policy: &D,
    req: &Request<'_, S>,
    cfg: &GuidanceConfig,
) -> Result<SteeredBatch<S>> {
    steer(policy, req, &GuidanceConfig { method: Method::Bi, ..cfg.clone() }, &mut Silent)
}

pub fn sample_gd<S: Scalar, D: Denoiser<S> + ?Sized>(
    policy: &D,
    req: &Request<'_, S>,
    cfg: &GuidanceConfig,
) -> Result<SteeredBatch<S>> {
    steer(policy, req, &GuidanceConfig { method: Method::Gd, ..cfg.clone() }, &mut Silent)
}

pub fn sample_ss<S: Scalar, D: Denoiser<S> + ?Sized>(
    policy: &D,
    req: &Request<'_, S>,
    cfg: &GuidanceConfig,
) -> Result<SteeredBatch<S>> {
    steer(policy, req, &GuidanceConfig { method: Method::Ss, ..cfg.clone() }, &mut Silent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{sample_unguided, DiffusionPolicy, PolicyConfig};
    use crate::objectives::Objective;
    use crate::schedule::ScheduleConfig;
    use crate::trajectory::Bounds;

    fn policy() -> DiffusionPolicy<f64> {
        let cfg = PolicyConfig {
            horizon: 8,
            hidden: vec![16, 16],
            schedule: ScheduleConfig::default(),
            bounds: Bounds::new([0.0, 0.0], [4.0, 3.0]).unwrap(),
            prediction: Default::default(),
        };
        DiffusionPolicy::new(cfg, 7).unwrap()
    }

    fn point() -> Objective<f64> {
        Objective::Point([3.0, 2.5])
    }

    fn req<'a>(o: &'a Objective<f64>) -> Request<'a, f64> {
        Request { cond: [1.0, 1.0], objective: Some(o), nudge: None, map: None }
    }

    #[test]
    fn config_wire_format() {
        let c: GuidanceConfig =
            serde_json::from_str(r#"{"method":"ss","beta":60,"cutoff_step":0,"mcmc_steps":4,"batch":32,"seed":9}"#)
                .unwrap();
        assert_eq!(c, GuidanceConfig::new(Method::Ss).with_beta(60.0).with_mcmc(4).with_seed(9));
        let p: GuidanceConfig = serde_json::from_str(r#"{"method":"gd","beta":[1,2,3,4,5,6,7,8,9,10]}"#).unwrap();
        assert_eq!(p.beta_at(2, 71), 3.0);
        assert!(p.validate(10).is_ok());
        assert!(p.validate(9).is_err());
        assert!("SS".parse::<Method>().is_ok());
        let k: GuidanceConfig = serde_json::from_str(r#"{"method":"gd","beta":2,"beta_scale":"constant"}"#).unwrap();
        assert_eq!(k.beta_scale, BetaScale::Constant);
        assert!("xx".parse::<Method>().is_err());
    }

    #[test]
    fn noise_scaling_shrinks_late_ratios() {
        let sched = NoiseSchedule::cosine(ScheduleConfig::default()).unwrap();
        let c = GuidanceConfig::new(Method::Gd).with_beta(20.0);
        let top = c.effective_beta(0, 91, &sched);
        let low = c.effective_beta(9, 1, &sched);
        assert!(top < 20.0 && top > 19.0 && low < 1.0);
        let k = GuidanceConfig { beta_scale: BetaScale::Constant, ..c };
        assert_eq!(k.effective_beta(9, 1, &sched), 20.0);
    }

    #[test]
    fn cutoff_disables_late_levels() {
        let c = GuidanceConfig::new(Method::Gd).with_beta(20.0).with_cutoff(30);
        assert_eq!(c.beta_at(0, 91), 20.0);
        assert_eq!(c.beta_at(7, 31), 20.0);
        assert_eq!(c.beta_at(8, 21), 0.0);
    }

    #[test]
    fn rs_matches_unguided_and_ignores_beta() {
        let p = policy();
        let o = point();
        let cfg = GuidanceConfig::new(Method::Rs).with_beta(50.0).with_batch(4).with_seed(3);
        let rs = sample_rs(&p, &req(&o), &cfg).unwrap();
        let un = sample_unguided(&p, [1.0, 1.0], 4, 3).unwrap();
        assert_eq!(rs.trajectories, un);
    }

    #[test]
    fn reduction_chain_is_bit_exact() {
        let p = policy();
        let o = point();
        let base = GuidanceConfig::new(Method::Rs).with_batch(5).with_seed(11);
        let rs = sample_rs(&p, &req(&o), &base).unwrap();
        let gd0 = sample_gd(&p, &req(&o), &base.clone().with_beta(0.0)).unwrap();
        assert_eq!(gd0.trajectories, rs.trajectories);
        let gd = sample_gd(&p, &req(&o), &base.clone().with_beta(20.0)).unwrap();
        let ss1 = sample_ss(&p, &req(&o), &base.clone().with_beta(20.0).with_mcmc(1)).unwrap();
        assert_eq!(gd.trajectories, ss1.trajectories);
        assert_ne!(gd.trajectories, rs.trajectories);
        let pr = sample_pr(&p, &req(&o), &base).unwrap();
        assert_eq!(pr.trajectories, rs.trajectories);
        let noise_init = run_chain(&p, [1.0, 1.0], &Initialization::Noise, None, &base, 1, &mut Silent).unwrap();
        assert_eq!(noise_init.trajectories, rs.trajectories);
    }

    #[test]
    fn pr_selects_batch_minimum() {
        let p = policy();
        let o = point();
        let b = sample_pr(&p, &req(&o), &GuidanceConfig::new(Method::Pr).with_batch(9)).unwrap();
        let min = b.costs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(b.costs[b.ranking[0]], min);
        assert!(b.ranking.windows(2).all(|w| b.costs[w[0]] <= b.costs[w[1]]));
        let one = sample_pr(&p, &req(&o), &GuidanceConfig::new(Method::Pr).with_batch(1)).unwrap();
        assert_eq!(one.ranking, vec![0]);
    }

    #[test]
    fn ties_rank_by_index() {
        let out = ChainOutput { trajectories: vec![Trajectory::constant([1.0, 1.0], 8); 3], diagnostics: vec![None; 3] };
        let o = point();
        let b = SteeredBatch::assemble(out, Some(&o), None, GuidanceConfig::new(Method::Pr)).unwrap();
        assert_eq!(b.ranking, vec![0, 1, 2]);
    }

    #[test]
    fn op_prefix_is_exact() {
        let p = policy();
        let prefix = [[1.0, 1.0], [1.25, 1.1], [1.5, 1.2]];
        let r = Request { cond: [1.0, 1.0], objective: None, nudge: Some(&prefix), map: None };
        let b = sample_op(&p, &r, &GuidanceConfig::new(Method::Op).with_batch(4)).unwrap();
        for t in &b.trajectories {
            assert_eq!(t.horizon(), 8);
            assert_eq!(&t.states[..3], &prefix[..]);
        }
        let rollout = sample_unguided(&p, [1.5, 1.2], 4, 0).unwrap();
        assert_eq!(&b.trajectories[0].states[3..], &rollout[0].states[1..6]);
    }

    #[test]
    fn missing_inputs_are_rejected() {
        let p = policy();
        let r = Request { cond: [1.0, 1.0], objective: None, nudge: None, map: None };
        for m in [Method::Pr, Method::Bi, Method::Gd, Method::Ss, Method::Op] {
            assert!(steer(&p, &r, &GuidanceConfig::new(m), &mut Silent).is_err());
        }
        let o = point();
        assert!(sample_ss(&p, &req(&o), &GuidanceConfig::new(Method::Ss).with_mcmc(0)).is_err());
    }

    #[test]
    fn bi_is_repeatable() {
        let p = policy();
        let o = Objective::Sketch(Trajectory::new((0..8).map(|k| [0.5 + 0.4 * k as f64, 1.5]).collect()).unwrap());
        let cfg = GuidanceConfig::new(Method::Bi).with_batch(3).with_seed(2);
        let a = sample_bi(&p, &req(&o), &cfg).unwrap();
        assert_eq!(a, sample_bi(&p, &req(&o), &cfg).unwrap());
        assert_ne!(a.trajectories, sample_rs(&p, &req(&o), &cfg).unwrap().trajectories);
    }

    struct Poisoned;

    impl AlignmentCost<f64> for Poisoned {
        fn cost(&self, _: &Trajectory<f64>) -> Result<f64> {
            Ok(0.0)
        }
        fn gradient(&self, t: &Trajectory<f64>) -> Result<Vec<f64>> {
            Ok(vec![f64::NAN; t.horizon() * 2])
        }
        fn target(&self, h: usize) -> Result<Trajectory<f64>> {
            Ok(Trajectory::constant([0.0, 0.0], h))
        }
    }

    #[test]
    fn non_finite_gradient_aborts_member() {
        let p = policy();
        let r = Request { cond: [1.0, 1.0], objective: Some(&Poisoned), nudge: None, map: None };
        let b = sample_gd(&p, &r, &GuidanceConfig::new(Method::Gd).with_beta(1.0).with_batch(2)).unwrap();
        assert!(b.diagnostics.iter().all(|d| d.as_deref().is_some_and(|s| s.contains("non-finite"))));
        assert!(b.costs.iter().all(|c| c.is_infinite()));
    }

    #[test]
    fn observer_sees_every_step_and_can_cancel() {
        let p = policy();
        let o = point();
        let mut seen = Vec::new();
        let cfg = GuidanceConfig::new(Method::Ss).with_beta(5.0).with_mcmc(2).with_batch(2);
        let mut obs = |s: &Snapshot<'_, f64>| {
            seen.push(s.level);
            ControlFlow::Continue(())
        };
        steer(&p, &req(&o), &cfg, &mut obs).unwrap();
        assert_eq!(seen, vec![91, 81, 71, 61, 51, 41, 31, 21, 11, 1]);
        let mut stop = |s: &Snapshot<'_, f64>| if s.step == 2 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) };
        assert!(matches!(steer(&p, &req(&o), &cfg, &mut stop), Err(Error::Cancelled)));
    }

    #[test]
    fn clip_norm_caps_length() {
        let mut v = vec![3.0f64, 4.0];
        clip_norm(&mut v, 1.0);
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
        let mut w = vec![0.1, 0.1];
        clip_norm(&mut w, 1.0);
        assert_eq!(w, vec![0.1, 0.1]);
    }
}
