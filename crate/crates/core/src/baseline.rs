//! Conditional VAE trajectory policy with a small latent.
//!
//! A strong KL weight squeezes the latent, so the decoder learns something
//! close to the conditional mean trajectory and samples barely vary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::demos::DemoDataset;
use crate::diffusion::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{Activation, Net, TrainState};
use crate::rng::{lane, normal_vec};
use crate::scalar::Scalar;
use crate::trajectory::{Bounds, State, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub horizon: usize,
    pub latent: usize,
    pub hidden: Vec<usize>,
    /// Weight of the KL term relative to the summed squared reconstruction error.
    pub kl_weight: f64,
    pub bounds: Bounds,
}

impl VaeConfig {
    pub fn for_bounds(bounds: Bounds, horizon: usize) -> Self {
        Self { horizon, latent: 8, hidden: vec![256, 256], kl_weight: 1.0, bounds }
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.horizon * 2 + 2];
        w.extend(&self.hidden);
        w.push(self.latent * 2);
        w
    }

    fn decoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.latent + 2];
        w.extend(&self.hidden);
        w.push(self.horizon * 2);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPolicy<S> {
    pub encoder: Net<S>,
    pub decoder: Net<S>,
    pub config: VaeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeReport {
    /// Mean per-sample squared reconstruction error over blocks of steps.
    pub recon_curve: Vec<f64>,
    pub kl_curve: Vec<f64>,
    pub block: usize,
    pub initial_recon: f64,
    pub final_recon: f64,
}

impl<S: Scalar> LatentPolicy<S> {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        if config.latent == 0 {
            return Err(Error::InvalidInput("latent dimension must be positive".into()));
        }
        if !(config.kl_weight.is_finite() && config.kl_weight >= 0.0) {
            return Err(Error::InvalidInput("kl_weight must be non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Net::new(&config.encoder_widths(), Activation::Silu, &mut rng)?;
        let decoder = Net::new(&config.decoder_widths(), Activation::Silu, &mut rng)?;
        Ok(Self { encoder, decoder, config })
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    /// Reconstruction plus weighted KL on random minibatches.
    pub fn train(&mut self, data: &DemoDataset, cfg: &TrainConfig) -> Result<VaeReport> {
        if data.trajectories.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let bounds = self.config.bounds;
        let d = self.horizon() * 2;
        let k = self.config.latent;
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
        let mut enc = TrainState::new(self.encoder.clone(), cfg.lr);
        let mut dec = TrainState::new(self.decoder.clone(), cfg.lr);
        let mut genc = vec![S::zero(); enc.net.params().len()];
        let mut gdec = vec![S::zero(); dec.net.params().len()];
        let w = S::of(self.config.kl_weight);
        let half = S::of(0.5);
        let inv_b = S::of(1.0 / cfg.batch as f64);
        let block = (cfg.steps / 100).max(1);
        let (mut recon_curve, mut kl_curve) = (Vec::new(), Vec::new());
        let (mut acc_r, mut acc_k) = (0.0, 0.0);
        for step in 0..cfg.steps {
            enc.lr = cfg.lr_at(step);
            dec.lr = cfg.lr_at(step);
            let mut enc_in = Vec::with_capacity(cfg.batch * (d + 2));
            let mut rows = Vec::with_capacity(cfg.batch);
            for _ in 0..cfg.batch {
                let x = &normalized[rng.random_range(0..normalized.len())];
                enc_in.extend_from_slice(x);
                enc_in.extend_from_slice(&x[..2]);
                rows.push(x);
            }
            let (stats, enc_tape) = enc.net.forward_tape(&enc_in, cfg.batch)?;
            let mut dec_in = Vec::with_capacity(cfg.batch * (k + 2));
            let mut noise = Vec::with_capacity(cfg.batch * k);
            for (b, st) in stats.chunks_exact(2 * k).enumerate() {
                let eps: Vec<S> = normal_vec(&mut rng, k);
                for j in 0..k {
                    let (mu, lv) = (st[j], st[k + j]);
                    dec_in.push(mu + (half * lv).exp() * eps[j]);
                }
                dec_in.extend_from_slice(&rows[b][..2]);
                noise.extend(eps);
            }
            let (recon, dec_tape) = dec.net.forward_tape(&dec_in, cfg.batch)?;
            let mut cot = Vec::with_capacity(recon.len());
            let mut r_loss = 0.0;
            for (b, out) in recon.chunks_exact(d).enumerate() {
                for (o, t) in out.iter().zip(rows[b].iter()) {
                    let r = *o - *t;
                    r_loss += (r * r).to_f64_lossy();
                    cot.push(S::of(2.0) * r * inv_b);
                }
            }
            gdec.iter_mut().for_each(|g| *g = S::zero());
            let dz = dec.net.backward_tape(&dec_tape, &cot, &mut gdec, true)?.expect("input gradient requested");
            let mut dstats = vec![S::zero(); stats.len()];
            let mut k_loss = 0.0;
            for b in 0..cfg.batch {
                for j in 0..k {
                    let (mu, lv) = (stats[b * 2 * k + j], stats[b * 2 * k + k + j]);
                    let e = noise[b * k + j];
                    let g = dz[b * (k + 2) + j];
                    let var = lv.exp();
                    k_loss += (half * (var + mu * mu - S::one() - lv)).to_f64_lossy();
                    dstats[b * 2 * k + j] = g + w * mu * inv_b;
                    dstats[b * 2 * k + k + j] = g * e * half * (half * lv).exp() + w * half * (var - S::one()) * inv_b;
                }
            }
            genc.iter_mut().for_each(|g| *g = S::zero());
            enc.net.backward_tape(&enc_tape, &dstats, &mut genc, false)?;
            enc.opt_step(&genc)?;
            dec.opt_step(&gdec)?;
            acc_r += r_loss / cfg.batch as f64;
            acc_k += k_loss / cfg.batch as f64;
            if (step + 1) % block == 0 {
                recon_curve.push(acc_r / block as f64);
                kl_curve.push(acc_k / block as f64);
                acc_r = 0.0;
                acc_k = 0.0;
            }
        }
        self.encoder = enc.net;
        self.decoder = dec.net;
        let initial_recon = recon_curve.first().copied().unwrap_or(f64::NAN);
        let final_recon = recon_curve.last().copied().unwrap_or(f64::NAN);
        Ok(VaeReport { recon_curve, kl_curve, block, initial_recon, final_recon })
    }

    /// Decodes prior latents; member `m` draws from lane `m` of `seed`.
    pub fn sample(&self, cond: State<S>, batch: usize, seed: u64) -> Result<Vec<Trajectory<S>>> {
        let k = self.config.latent;
        let bounds = self.config.bounds;
        let c = bounds.normalize_state(cond);
        let mut input = Vec::with_capacity(batch * (k + 2));
        for m in 0..batch {
            input.extend(normal_vec::<S, _>(&mut lane(seed, m), k));
            input.extend_from_slice(&c);
        }
        let out = self.decoder.forward_batch(&input, batch)?;
        Ok(out
            .chunks_exact(self.horizon() * 2)
            .map(|row| {
                let mut t = bounds.denormalize(&Trajectory::from_flat(row));
                t.states.iter_mut().for_each(|s| *s = bounds.clamp(*s));
                t
            })
            .collect())
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut meta = meta;
        meta["kind"] = "vae".into();
        meta["vae"] = serde_json::to_value(&self.config).expect("config serializes");
        Checkpoint { nets: vec![("encoder".into(), self.encoder.cast()), ("decoder".into(), self.decoder.cast())], meta }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta["kind"] != "vae" {
            return Err(Error::Checkpoint(format!("expected a vae checkpoint, got {}", ck.meta["kind"])));
        }
        let config: VaeConfig = serde_json::from_value(ck.meta["vae"].clone())?;
        Ok(Self { encoder: ck.net("encoder")?, decoder: ck.net("decoder")?, config })
    }
}

pub fn train_vae<S: Scalar>(
    config: VaeConfig,
    data: &DemoDataset,
    cfg: &TrainConfig,
) -> Result<(LatentPolicy<S>, VaeReport)> {
    let mut p = LatentPolicy::new(config, cfg.seed)?;
    let report = p.train(data, cfg)?;
    Ok((p, report))
}

pub fn sample_vae<S: Scalar>(policy: &LatentPolicy<S>, cond: State<S>, batch: usize, seed: u64) -> Result<Vec<Trajectory<S>>> {
    policy.sample(cond, batch, seed)
}
