//! Trajectory diffusion policy: denoiser interface, training and the
//! unguided reverse chain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::demos::DemoDataset;
use crate::error::{Error, Result};
use crate::nn::{Activation, Net, TrainState};
use crate::rng::{lane, normal_vec};
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::trajectory::{Bounds, State, Trajectory};

/// A noise predictor over flattened, normalized trajectories.
pub trait Denoiser<S: Scalar>: Sync {
    fn horizon(&self) -> usize;

    fn schedule(&self) -> &NoiseSchedule;

    /// Workspace box mapped to the normalized sampling space.
    fn bounds(&self) -> Bounds;

    /// Noise estimates for `batch` samples at `level`. `x` holds the
    /// normalized samples back to back; `cond` holds one normalized
    /// condition state per sample.
    fn predict_noise(&self, x: &[S], cond: &[State<S>], level: usize) -> Result<Vec<S>>;

    fn sample_dim(&self) -> usize {
        self.horizon() * 2
    }
}

pub const EMBED_DIM: usize = 32;

/// Sinusoidal embedding of a diffusion level.
pub fn level_embedding<S: Scalar>(level: usize, dim: usize) -> Vec<S> {
    let half = dim / 2;
    let scale = (10_000f64).ln() / (half.max(2) - 1) as f64;
    let t = level as f64;
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|k| S::of((t * (-scale * k as f64).exp()).sin())));
    out.extend((0..half).map(|k| S::of((t * (-scale * k as f64).exp()).cos())));
    out
}

/// What the network regresses. Either way the policy exposes noise
/// estimates to the samplers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    /// The injected noise.
    Noise,
    /// The clean trajectory; noise is recovered from the forward relation.
    #[default]
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub horizon: usize,
    pub hidden: Vec<usize>,
    pub schedule: ScheduleConfig,
    pub bounds: Bounds,
    #[serde(default)]
    pub prediction: Prediction,
}

impl PolicyConfig {
    pub fn for_bounds(bounds: Bounds, horizon: usize) -> Self {
        Self { horizon, hidden: vec![256; 4], schedule: ScheduleConfig::default(), bounds, prediction: Prediction::default() }
    }

    pub fn input_dim(&self) -> usize {
        self.horizon * 2 + 2 + EMBED_DIM
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(&self.hidden);
        w.push(self.horizon * 2);
        w
    }
}

/// Trained denoiser plus everything needed to sample from it.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPolicy<S> {
    pub net: Net<S>,
    pub config: PolicyConfig,
    schedule: NoiseSchedule,
    embeddings: Vec<Vec<S>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` under cosine decay; 1 keeps it constant.
    pub lr_floor: f64,
    /// Decay of an exponential moving average of the weights; the average
    /// replaces the raw weights at the end.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 20_000, batch: 256, lr: 1e-4, lr_floor: 1.0, ema: None, seed: 0 }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.lr_floor >= 1.0 || self.steps <= 1 {
            return self.lr;
        }
        let p = step as f64 / (self.steps - 1) as f64;
        let w = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        self.lr * (self.lr_floor + (1.0 - self.lr_floor) * w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over consecutive blocks of steps.
    pub loss_curve: Vec<f64>,
    pub block: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl<S: Scalar> DiffusionPolicy<S> {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Net::new(&config.widths(), Activation::Silu, &mut rng)?;
        Self::from_net(net, config)
    }

    pub fn from_net(net: Net<S>, config: PolicyConfig) -> Result<Self> {
        if net.widths() != config.widths().as_slice() {
            return Err(Error::DimensionMismatch { expected: config.input_dim(), got: net.input_dim() });
        }
        let schedule = NoiseSchedule::cosine(config.schedule)?;
        let embeddings = (0..=schedule.train_steps()).map(|l| level_embedding(l, EMBED_DIM)).collect();
        Ok(Self { net, config, schedule, embeddings })
    }

    fn assemble_input(&self, x: &[S], cond: &[State<S>], level: usize) -> Vec<S> {
        let d = self.sample_dim();
        let mut input = Vec::with_capacity(cond.len() * self.net.input_dim());
        for (row, c) in x.chunks_exact(d).zip(cond) {
            input.extend_from_slice(row);
            input.extend_from_slice(c);
            input.extend_from_slice(&self.embeddings[level]);
        }
        input
    }

    /// One regression step on a random minibatch.
    fn train_batch(
        &self,
        net: &Net<S>,
        data: &[Vec<S>],
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
        grad: &mut [S],
    ) -> Result<f64> {
        let d = self.sample_dim();
        let n = self.schedule.train_steps();
        let mut input = Vec::with_capacity(cfg.batch * net.input_dim());
        let mut targets = Vec::with_capacity(cfg.batch * d);
        for _ in 0..cfg.batch {
            let x0 = &data[rng.random_range(0..data.len())];
            let level = rng.random_range(1..=n);
            let eta: Vec<S> = normal_vec(rng, d);
            let xi = self.schedule.forward_diffuse(x0, level, &eta)?;
            input.extend_from_slice(&xi);
            input.extend_from_slice(&x0[..2]);
            input.extend_from_slice(&self.embeddings[level]);
            match self.config.prediction {
                Prediction::Noise => targets.extend_from_slice(&eta),
                Prediction::Sample => targets.extend_from_slice(x0),
            }
        }
        let (pred, tape) = net.forward_tape(&input, cfg.batch)?;
        let scale = S::of(2.0 / (cfg.batch * d) as f64);
        let mut loss = 0.0;
        let cot: Vec<S> = pred
            .iter()
            .zip(&targets)
            .map(|(&p, &t)| {
                let r = p - t;
                loss += (r * r).to_f64_lossy();
                r * scale
            })
            .collect();
        grad.iter_mut().for_each(|g| *g = S::zero());
        net.backward_tape(&tape, &cot, grad, false)?;
        Ok(loss / (cfg.batch * d) as f64)
    }

    /// Minimizes the squared regression error over uniform levels and random
    /// minibatches. Conditioning is the first state of each window.
    pub fn train(&mut self, data: &DemoDataset, cfg: &TrainConfig) -> Result<TrainReport> {
        self.train_with(data, cfg, |_, _| {})
    }

    pub fn train_with(
        &mut self,
        data: &DemoDataset,
        cfg: &TrainConfig,
        mut progress: impl FnMut(usize, f64),
    ) -> Result<TrainReport> {
        if data.trajectories.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let bounds = self.config.bounds;
        let normalized: Vec<Vec<S>> = data
            .trajectories
            .iter()
            .map(|t| {
                if t.horizon() != self.horizon() {
                    return Err(Error::DimensionMismatch { expected: self.horizon(), got: t.horizon() });
                }
                Ok(bounds.normalize(&t.cast::<S>()).to_flat())
            })
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut state = TrainState::new(self.net.clone(), cfg.lr);
        let mut grad = vec![S::zero(); self.net.params().len()];
        let block = (cfg.steps / 100).max(1);
        let mut curve = Vec::new();
        let mut acc = 0.0;
        let mut average = cfg.ema.map(|d| (S::of(d), state.net.params().to_vec()));
        for step in 0..cfg.steps {
            state.lr = cfg.lr_at(step);
            let loss = self.train_batch(&state.net, &normalized, cfg, &mut rng, &mut grad)?;
            state.opt_step(&grad)?;
            if let Some((d, avg)) = average.as_mut() {
                for (a, &p) in avg.iter_mut().zip(state.net.params()) {
                    *a = *d * *a + (S::one() - *d) * p;
                }
            }
            acc += loss;
            if (step + 1) % block == 0 {
                curve.push(acc / block as f64);
                progress(step + 1, acc / block as f64);
                acc = 0.0;
            }
        }
        self.net = state.net;
        if let Some((_, avg)) = average {
            self.net.params_mut().copy_from_slice(&avg);
        }
        let initial_loss = curve.first().copied().unwrap_or(f64::NAN);
        let final_loss = curve.last().copied().unwrap_or(f64::NAN);
        Ok(TrainReport { loss_curve: curve, block, initial_loss, final_loss })
    }

    /// Mean squared regression error on `data`, with fixed draws.
    pub fn eval_loss(&self, data: &DemoDataset, samples: usize, seed: u64) -> Result<f64> {
        let bounds = self.config.bounds;
        let normalized: Vec<Vec<S>> =
            data.trajectories.iter().map(|t| bounds.normalize(&t.cast::<S>()).to_flat()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = TrainConfig { batch: samples, ..TrainConfig::default() };
        let mut grad = vec![S::zero(); self.net.params().len()];
        self.train_batch(&self.net, &normalized, &cfg, &mut rng, &mut grad)
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut meta = meta;
        meta["kind"] = "dp".into();
        meta["policy"] = serde_json::to_value(&self.config).expect("config serializes");
        meta["scalar"] = S::NAME.into();
        Checkpoint { nets: vec![("denoiser".into(), self.net.cast())], meta }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta["kind"] != "dp" {
            return Err(Error::Checkpoint(format!("expected a dp checkpoint, got {}", ck.meta["kind"])));
        }
        let config: PolicyConfig = serde_json::from_value(ck.meta["policy"].clone())?;
        Self::from_net(ck.net("denoiser")?, config)
    }
}

impl<S: Scalar> Denoiser<S> for DiffusionPolicy<S> {
    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn bounds(&self) -> Bounds {
        self.config.bounds
    }

    fn predict_noise(&self, x: &[S], cond: &[State<S>], level: usize) -> Result<Vec<S>> {
        let d = self.sample_dim();
        if x.len() != cond.len() * d {
            return Err(Error::DimensionMismatch { expected: cond.len() * d, got: x.len() });
        }
        if level == 0 || level > self.schedule.train_steps() {
            return Err(Error::StepOutOfRange { step: level, max: self.schedule.train_steps() });
        }
        let input = self.assemble_input(x, cond, level);
        let out = self.net.forward_batch(&input, cond.len())?;
        Ok(match self.config.prediction {
            Prediction::Noise => out,
            Prediction::Sample => {
                let ab = self.schedule.alpha_bar(level);
                let (a, b) = (S::of(ab.sqrt()), S::of((1.0 - ab).sqrt()));
                x.iter().zip(&out).map(|(&xi, &x0)| (xi - a * x0) / b).collect()
            }
        })
    }
}

/// Unguided reverse chain from standard-normal noise for each member of a
/// batch. Member `m` draws from lane `m` of `seed`. Output is in workspace
/// units.
pub fn sample_unguided<S: Scalar, D: Denoiser<S> + ?Sized>(
    policy: &D,
    cond: State<S>,
    batch: usize,
    seed: u64,
) -> Result<Vec<Trajectory<S>>> {
    let d = policy.sample_dim();
    let bounds = policy.bounds();
    let sched = policy.schedule();
    let ncond = vec![bounds.normalize_state(cond); batch];
    let mut lanes: Vec<_> = (0..batch).map(|m| lane(seed, m)).collect();
    let mut x: Vec<S> = Vec::with_capacity(batch * d);
    for l in lanes.iter_mut() {
        x.extend(normal_vec::<S, _>(l, d));
    }
    for &level in sched.inference_levels() {
        let eps = policy.predict_noise(&x, &ncond, level)?;
        let next = sched.next_level(level);
        let mut out = Vec::with_capacity(x.len());
        for (m, (row, e)) in x.chunks_exact(d).zip(eps.chunks_exact(d)).enumerate() {
            let noise: Option<Vec<S>> = (sched.config().ddim_eta > 0.0).then(|| normal_vec(&mut lanes[m], d));
            out.extend(sched.reverse_step(row, level, next, e, noise.as_deref())?);
        }
        x = out;
    }
    Ok(x.chunks_exact(d).map(|row| bounds.denormalize(&Trajectory::from_flat(row))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(horizon: usize) -> PolicyConfig {
        PolicyConfig {
            horizon,
            hidden: vec![32, 32],
            schedule: ScheduleConfig::default(),
            bounds: Bounds::new([0.0, 0.0], [4.0, 4.0]).unwrap(),
            prediction: Prediction::Noise,
        }
    }

    #[test]
    fn embedding_shape_and_range() {
        let e: Vec<f64> = level_embedding(37, EMBED_DIM);
        assert_eq!(e.len(), EMBED_DIM);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(e, level_embedding::<f64>(38, EMBED_DIM));
    }

    #[test]
    fn config_widths_match_denoiser_layout() {
        let c = PolicyConfig::for_bounds(Bounds::unit(), 64);
        assert_eq!(c.widths(), vec![64 * 2 + 2 + 32, 256, 256, 256, 256, 128]);
    }

    #[test]
    fn predict_noise_checks_shapes() {
        let p: DiffusionPolicy<f64> = DiffusionPolicy::new(tiny_config(4), 0).unwrap();
        assert!(p.predict_noise(&[0.0; 8], &[[0.0, 0.0]], 5).is_ok());
        assert!(p.predict_noise(&[0.0; 7], &[[0.0, 0.0]], 5).is_err());
        assert!(p.predict_noise(&[0.0; 8], &[[0.0, 0.0]], 0).is_err());
    }

    #[test]
    fn unguided_sampling_is_repeatable() {
        let p: DiffusionPolicy<f64> = DiffusionPolicy::new(tiny_config(4), 1).unwrap();
        let a = sample_unguided(&p, [1.0, 1.0], 3, 42).unwrap();
        let b = sample_unguided(&p, [1.0, 1.0], 3, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        // Lane independence: a smaller batch reproduces the leading members.
        let c = sample_unguided(&p, [1.0, 1.0], 2, 42).unwrap();
        assert_eq!(&a[..2], &c[..]);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut p: DiffusionPolicy<f64> = DiffusionPolicy::new(tiny_config(4), 0).unwrap();
        let data = DemoDataset { trajectories: vec![], map_id: "x".into(), seed: 0, route_states: 0 };
        assert!(matches!(p.train(&data, &TrainConfig::default()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p: DiffusionPolicy<f32> = DiffusionPolicy::new(tiny_config(4), 3).unwrap();
        let ck = p.to_checkpoint(serde_json::json!({"dataset_hash": "h"}));
        let back: DiffusionPolicy<f32> =
            DiffusionPolicy::from_checkpoint(&Checkpoint::decode(&ck.encode(), ck.meta.clone()).unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
