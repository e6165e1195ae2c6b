//! Noise schedules and the forward / reverse diffusion updates.
//!
//! Levels are 1-indexed: level `i` in `1..=N` has cumulative signal
//! `abar[i]`, and level 0 is the clean data (`abar[0] = 1`). A reverse step
//! from level `i` to level `j < i` uses the implicit (DDIM) update
//!
//! ```text
//! x0   = clip((x - sqrt(1 - abar_i) e) / sqrt(abar_i))
//! x_j  = sqrt(abar_j) x0 + sqrt(1 - abar_j - s^2) e + s n
//! ```
//!
//! Without clipping this is exactly `x_j = alpha (x - gamma e) + sigma n`
//! with the coefficients returned by [`NoiseSchedule::coefficients`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub inference_steps: usize,
    /// Stochasticity of the implicit sampler; 0 gives deterministic steps.
    pub ddim_eta: f64,
    /// Clamp for the clean-sample prediction, in normalized units.
    pub clip_sample: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { train_steps: 100, inference_steps: 10, ddim_eta: 0.0, clip_sample: Some(1.0) }
    }
}

/// `x_next = alpha * (x - gamma * e) + sigma * n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseCoefficients {
    pub alpha: f64,
    pub gamma: f64,
    pub sigma: f64,
}

impl ReverseCoefficients {
    pub fn apply<S: Scalar>(&self, x: &[S], eps: &[S], noise: Option<&[S]>) -> Vec<S> {
        let (a, g, s) = (S::of(self.alpha), S::of(self.gamma), S::of(self.sigma));
        x.iter()
            .zip(eps)
            .enumerate()
            .map(|(k, (&x, &e))| {
                let n = noise.map_or(S::zero(), |n| n[k]);
                a * (x - g * e) + s * n
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    /// `abar[0] = 1`, `abar[i]` for levels `1..=N`.
    abar: Vec<f64>,
    /// Inference levels, strictly decreasing, ending at 1.
    levels: Vec<usize>,
}

impl NoiseSchedule {
    /// Squared-cosine cumulative signal with per-step noise capped at 0.999.
    pub fn cosine(config: ScheduleConfig) -> Result<Self> {
        let n = config.train_steps;
        let k = config.inference_steps;
        if n == 0 || k == 0 || k > n {
            return Err(Error::InvalidInput(format!("need 0 < inference_steps <= train_steps, got {k}/{n}")));
        }
        let f = |t: f64| ((t + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let mut abar = Vec::with_capacity(n + 1);
        abar.push(1.0);
        let mut acc = 1.0;
        for i in 1..=n {
            let beta = (1.0 - f(i as f64 / n as f64) / f((i - 1) as f64 / n as f64)).min(0.999);
            acc *= 1.0 - beta;
            abar.push(acc);
        }
        let stride = n / k;
        let levels = (0..k).rev().map(|s| s * stride + 1).collect();
        Ok(Self { config, abar, levels })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn train_steps(&self) -> usize {
        self.config.train_steps
    }

    pub fn inference_levels(&self) -> &[usize] {
        &self.levels
    }

    /// The level the reverse chain starts from.
    pub fn top_level(&self) -> usize {
        self.levels[0]
    }

    /// Level following `level` in the inference subsequence (0 after the last).
    pub fn next_level(&self, level: usize) -> usize {
        match self.levels.iter().position(|&l| l == level) {
            Some(p) if p + 1 < self.levels.len() => self.levels[p + 1],
            _ => 0,
        }
    }

    pub fn alpha_bar(&self, level: usize) -> f64 {
        self.abar[level]
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level == 0 || level > self.config.train_steps {
            return Err(Error::StepOutOfRange { step: level, max: self.config.train_steps });
        }
        Ok(())
    }

    fn sigma(&self, level: usize, next: usize) -> f64 {
        let (ai, aj) = (self.abar[level], self.abar[next]);
        self.config.ddim_eta * ((1.0 - aj) / (1.0 - ai) * (1.0 - ai / aj)).max(0.0).sqrt()
    }

    /// Coefficients of the unclipped update from `level` to `next`.
    pub fn coefficients(&self, level: usize, next: usize) -> Result<ReverseCoefficients> {
        self.check_level(level)?;
        if next >= level {
            return Err(Error::StepOutOfRange { step: next, max: level - 1 });
        }
        let (ai, aj) = (self.abar[level], self.abar[next]);
        let sigma = self.sigma(level, next);
        let alpha = (aj / ai).sqrt();
        let gamma = (1.0 - ai).sqrt() - (1.0 - aj - sigma * sigma).max(0.0).sqrt() * (ai / aj).sqrt();
        Ok(ReverseCoefficients { alpha, gamma, sigma })
    }

    /// `sqrt(abar_i) x0 + sqrt(1 - abar_i) noise`.
    pub fn forward_diffuse<S: Scalar>(&self, x0: &[S], level: usize, noise: &[S]) -> Result<Vec<S>> {
        self.check_level(level)?;
        if noise.len() != x0.len() {
            return Err(Error::DimensionMismatch { expected: x0.len(), got: noise.len() });
        }
        let a = S::of(self.abar[level].sqrt());
        let b = S::of((1.0 - self.abar[level]).sqrt());
        Ok(x0.iter().zip(noise).map(|(&x, &n)| a * x + b * n).collect())
    }

    /// Clean-sample prediction from a noisy sample and a noise estimate.
    pub fn predict_clean<S: Scalar>(&self, x: &[S], level: usize, eps: &[S]) -> Result<Vec<S>> {
        self.check_level(level)?;
        let a = S::of(self.abar[level].sqrt());
        let b = S::of((1.0 - self.abar[level]).sqrt());
        let clip = self.config.clip_sample.map(S::of);
        Ok(x.iter()
            .zip(eps)
            .map(|(&x, &e)| {
                let x0 = (x - b * e) / a;
                match clip {
                    Some(c) => x0.max(-c).min(c),
                    None => x0,
                }
            })
            .collect())
    }

    /// Reverse update from `level` using `eps` in place of the raw network
    /// output. With `next < level` this is the implicit step above; with
    /// `next == level` the clean prediction is re-noised to the same level
    /// with the supplied `noise`.
    pub fn reverse_step<S: Scalar>(
        &self,
        x: &[S],
        level: usize,
        next: usize,
        eps: &[S],
        noise: Option<&[S]>,
    ) -> Result<Vec<S>> {
        self.check_level(level)?;
        if eps.len() != x.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), got: eps.len() });
        }
        if next > level {
            return Err(Error::StepOutOfRange { step: next, max: level });
        }
        let x0 = self.predict_clean(x, level, eps)?;
        if next == level {
            let noise = noise.ok_or_else(|| Error::InvalidInput("re-noising needs a noise draw".into()))?;
            return self.forward_diffuse(&x0, level, noise);
        }
        let aj = self.abar[next];
        let sigma = self.sigma(level, next);
        let a = S::of(aj.sqrt());
        let d = S::of((1.0 - aj - sigma * sigma).max(0.0).sqrt());
        let s = S::of(sigma);
        Ok(x0
            .iter()
            .zip(eps)
            .enumerate()
            .map(|(k, (&x0, &e))| {
                let n = if sigma > 0.0 { noise.map_or(S::zero(), |n| n[k]) } else { S::zero() };
                a * x0 + d * e + s * n
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sched(clip: Option<f64>) -> NoiseSchedule {
        NoiseSchedule::cosine(ScheduleConfig { clip_sample: clip, ..ScheduleConfig::default() }).unwrap()
    }

    #[test]
    fn cumulative_signal_strictly_decreases() {
        let s = sched(None);
        for i in 1..=100 {
            assert!(s.alpha_bar(i) < s.alpha_bar(i - 1));
        }
        assert!(s.alpha_bar(100) < 1e-3);
    }

    #[test]
    fn inference_levels_decrease_to_one() {
        let s = sched(None);
        let l = s.inference_levels();
        assert_eq!(l.len(), 10);
        assert_eq!(l[0], 91);
        assert_eq!(*l.last().unwrap(), 1);
        assert!(l.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.next_level(1), 0);
        assert_eq!(s.next_level(91), 81);
    }

    #[test]
    fn first_level_with_zero_noise_is_near_identity() {
        let s = sched(None);
        let x0 = [0.3f64, -0.7];
        let xi = s.forward_diffuse(&x0, 1, &[0.0, 0.0]).unwrap();
        assert!((xi[0] - 0.3).abs() < 1e-3 && (xi[1] + 0.7).abs() < 1e-3);
        assert_eq!(xi, s.forward_diffuse(&x0, 1, &[0.0, 0.0]).unwrap());
        assert!(s.forward_diffuse(&x0, 0, &[0.0, 0.0]).is_err());
        assert!(s.forward_diffuse(&x0, 101, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn top_level_statistics_are_standard_normal() {
        let s = sched(None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = [0.8f64, -0.5];
        let n = 10_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eta: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            let x = s.forward_diffuse(&x0, 100, &eta).unwrap();
            for d in 0..2 {
                sum[d] += x[d];
                sq[d] += x[d] * x[d];
            }
        }
        for d in 0..2 {
            let mean = sum[d] / n as f64;
            let var = sq[d] / n as f64 - mean * mean;
            assert!(mean.abs() < 0.05, "mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
    }

    #[test]
    fn scalar_toy_update() {
        let c = ReverseCoefficients { alpha: 1.0, gamma: 0.1, sigma: 0.0 };
        let out = c.apply(&[1.0f64], &[1.0], None);
        assert!((out[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn unclipped_reverse_step_matches_coefficient_form() {
        let s = sched(None);
        let x = [0.4f64, -1.2, 2.0];
        let e = [0.1, 0.5, -0.3];
        for w in s.inference_levels().windows(2) {
            let direct = s.reverse_step(&x, w[0], w[1], &e, None).unwrap();
            let coef = s.coefficients(w[0], w[1]).unwrap().apply(&x, &e, None);
            for (a, b) in direct.iter().zip(&coef) {
                assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn reverse_step_is_monotone_in_sample() {
        let s = sched(None);
        let c = s.coefficients(51, 41).unwrap();
        assert!(c.alpha > 0.0);
        let lo = s.reverse_step(&[0.1f64], 51, 41, &[0.3], None).unwrap()[0];
        let hi = s.reverse_step(&[0.2f64], 51, 41, &[0.3], None).unwrap()[0];
        assert!(hi > lo);
    }

    #[test]
    fn renoise_in_place_and_range_errors() {
        let s = sched(Some(1.0));
        let x = [0.2f64, 0.3];
        let e = [0.0, 0.0];
        let out = s.reverse_step(&x, 31, 31, &e, Some(&[0.0, 0.0])).unwrap();
        let x0 = s.predict_clean(&x, 31, &e).unwrap();
        assert_eq!(out, s.forward_diffuse(&x0, 31, &[0.0, 0.0]).unwrap());
        assert!(s.reverse_step(&x, 31, 31, &e, None).is_err());
        assert!(s.reverse_step(&x, 31, 41, &e, None).is_err());
        assert!(s.reverse_step(&x, 0, 0, &e, None).is_err());
    }

    #[test]
    fn clipped_prediction_stays_in_range() {
        let s = sched(Some(1.0));
        let x0 = s.predict_clean(&[5.0f64, -5.0], 91, &[0.0, 0.0]).unwrap();
        assert_eq!(x0, vec![1.0, -1.0]);
    }
}
