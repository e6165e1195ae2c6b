//! Analytic Gaussian-mixture denoiser for the 2D composition toy.
//!
//! Noising a mixture with the schedule's Gaussian keeps it a mixture, so
//! the score (and from it the exact noise prediction) is closed-form at
//! every level.

use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::trajectory::{Bounds, State};

/// Mixture of axis-aligned Gaussians in the plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    /// Per-axis variances.
    pub variances: Vec<[f64; 2]>,
}

impl Gmm {
    pub fn new(weights: Vec<f64>, means: Vec<[f64; 2]>, variances: Vec<[f64; 2]>) -> Result<Self> {
        let g = Self { weights, means, variances };
        g.validate()?;
        Ok(g)
    }

    /// Two equally weighted isotropic modes.
    pub fn two_modes(a: [f64; 2], b: [f64; 2], std: f64) -> Result<Self> {
        Self::new(vec![0.5, 0.5], vec![a, b], vec![[std * std; 2]; 2])
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.variances.len() != k {
            return Err(Error::InvalidMixture(format!(
                "{} weights, {} means, {} variances",
                k,
                self.means.len(),
                self.variances.len()
            )));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidMixture("weights must be positive".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMixture(format!("weights sum to {total}")));
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMixture("means must be finite".into()));
        }
        if self.variances.iter().flatten().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidMixture("variances must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Marginal after forward diffusion with cumulative signal `abar`.
    pub fn noised(&self, abar: f64) -> Gmm {
        let s = abar.sqrt();
        Gmm {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| [s * m[0], s * m[1]]).collect(),
            variances: self.variances.iter().map(|v| [abar * v[0] + 1.0 - abar, abar * v[1] + 1.0 - abar]).collect(),
        }
    }

    /// Affine image under `x -> (x - center) / half_extent`.
    pub fn normalized(&self, bounds: &Bounds) -> Gmm {
        let (c, h) = (bounds.center(), bounds.half_extent());
        Gmm {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| [(m[0] - c[0]) / h[0], (m[1] - c[1]) / h[1]]).collect(),
            variances: self.variances.iter().map(|v| [v[0] / (h[0] * h[0]), v[1] / (h[1] * h[1])]).collect(),
        }
    }

    fn component_logs(&self, x: [f64; 2]) -> Vec<f64> {
        (0..self.len())
            .map(|k| {
                let (m, v) = (self.means[k], self.variances[k]);
                let q = (x[0] - m[0]).powi(2) / v[0] + (x[1] - m[1]).powi(2) / v[1];
                self.weights[k].ln() - 0.5 * q - (2.0 * std::f64::consts::PI).ln() - 0.5 * (v[0] * v[1]).ln()
            })
            .collect()
    }

    pub fn log_density(&self, x: [f64; 2]) -> f64 {
        log_sum_exp(&self.component_logs(x))
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: [f64; 2]) -> Vec<f64> {
        let logs = self.component_logs(x);
        let z = log_sum_exp(&logs);
        logs.iter().map(|l| (l - z).exp()).collect()
    }

    /// `grad log p(x)`.
    pub fn score(&self, x: [f64; 2]) -> [f64; 2] {
        let r = self.responsibilities(x);
        let mut s = [0.0; 2];
        for k in 0..self.len() {
            for d in 0..2 {
                s[d] -= r[k] * (x[d] - self.means[k][d]) / self.variances[k][d];
            }
        }
        s
    }

    /// Index of the mean closest to `x`.
    pub fn nearest_mode(&self, x: [f64; 2]) -> usize {
        let d = |k: usize| (x[0] - self.means[k][0]).powi(2) + (x[1] - self.means[k][1]).powi(2);
        (0..self.len()).min_by(|&a, &b| d(a).total_cmp(&d(b))).expect("mixture is non-empty")
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Score of the level-`level` marginal of `mixture` (level 0 is the data).
pub fn gmm_score(x: [f64; 2], mixture: &Gmm, level: usize, sched: &NoiseSchedule) -> Result<[f64; 2]> {
    mixture.validate()?;
    if level > sched.train_steps() {
        return Err(Error::StepOutOfRange { step: level, max: sched.train_steps() });
    }
    Ok(mixture.noised(sched.alpha_bar(level)).score(x))
}

/// The exact noise prediction `-sqrt(1 - abar) * score`.
pub fn gmm_noise_prediction(x: [f64; 2], mixture: &Gmm, level: usize, sched: &NoiseSchedule) -> Result<[f64; 2]> {
    let s = gmm_score(x, mixture, level, sched)?;
    let c = -(1.0 - sched.alpha_bar(level)).sqrt();
    Ok([c * s[0], c * s[1]])
}

/// Single-state denoiser backed by a mixture given in workspace units.
#[derive(Debug, Clone)]
pub struct GmmDenoiser {
    pub mixture: Gmm,
    normalized: Gmm,
    bounds: Bounds,
    schedule: NoiseSchedule,
}

impl GmmDenoiser {
    pub fn new(mixture: Gmm, bounds: Bounds, schedule: ScheduleConfig) -> Result<Self> {
        mixture.validate()?;
        let normalized = mixture.normalized(&bounds);
        Ok(Self { mixture, normalized, bounds, schedule: NoiseSchedule::cosine(schedule)? })
    }

    /// Mixture in sampler coordinates.
    pub fn normalized_mixture(&self) -> &Gmm {
        &self.normalized
    }
}

impl<S: Scalar> Denoiser<S> for GmmDenoiser {
    fn horizon(&self) -> usize {
        1
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn bounds(&self) -> Bounds {
        self.bounds
    }

    fn predict_noise(&self, x: &[S], cond: &[State<S>], level: usize) -> Result<Vec<S>> {
        if x.len() != cond.len() * 2 {
            return Err(Error::DimensionMismatch { expected: cond.len() * 2, got: x.len() });
        }
        if level == 0 || level > self.schedule.train_steps() {
            return Err(Error::StepOutOfRange { step: level, max: self.schedule.train_steps() });
        }
        let noised = self.normalized.noised(self.schedule.alpha_bar(level));
        let c = -(1.0 - self.schedule.alpha_bar(level)).sqrt();
        Ok(x.chunks_exact(2)
            .flat_map(|p| {
                let s = noised.score([p[0].to_f64_lossy(), p[1].to_f64_lossy()]);
                [S::of(c * s[0]), S::of(c * s[1])]
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::sample_unguided;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::cosine(ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn single_gaussian_closed_form() {
        let g = Gmm::new(vec![1.0], vec![[0.3, -0.2]], vec![[0.04, 0.09]]).unwrap();
        let s = gmm_score([0.5, 0.1], &g, 0, &sched()).unwrap();
        assert!((s[0] + 0.2 / 0.04).abs() < 1e-12);
        assert!((s[1] + 0.3 / 0.09).abs() < 1e-12);
        // Clean data has no noise to predict.
        assert_eq!(gmm_noise_prediction([0.5, 0.1], &g, 0, &sched()).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn symmetric_midpoint_has_zero_score() {
        let g = Gmm::two_modes([-0.5, 0.0], [0.5, 0.0], 0.1).unwrap();
        for level in [0, 10, 50, 100] {
            let s = gmm_score([0.0, 0.0], &g, level, &sched()).unwrap();
            assert!(s[0].abs() < 1e-12 && s[1].abs() < 1e-12);
        }
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sched = sched();
        for _ in 0..200 {
            let k = rng.random_range(1..5);
            let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let t: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= t);
            let means = (0..k).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let vars = (0..k).map(|_| [rng.random_range(0.05..0.5), rng.random_range(0.05..0.5)]).collect();
            let g = Gmm::new(w, means, vars).unwrap();
            let level = rng.random_range(0..=100);
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let n = g.noised(sched.alpha_bar(level));
            let s = gmm_score(x, &g, level, &sched).unwrap();
            let h = 1e-5;
            for d in 0..2 {
                let (mut a, mut b) = (x, x);
                a[d] += h;
                b[d] -= h;
                let fd = (n.log_density(a) - n.log_density(b)) / (2.0 * h);
                assert!((fd - s[d]).abs() <= 1e-5 * s[d].abs().max(1.0), "{fd} vs {}", s[d]);
            }
        }
    }

    #[test]
    fn invalid_mixtures_rejected() {
        assert!(Gmm::new(vec![0.5, 0.4], vec![[0.0, 0.0]; 2], vec![[1.0, 1.0]; 2]).is_err());
        assert!(Gmm::new(vec![1.0], vec![[0.0, 0.0]], vec![[0.0, 1.0]]).is_err());
        assert!(Gmm::new(vec![], vec![], vec![]).is_err());
        assert!(Gmm::new(vec![1.0], vec![[f64::NAN, 0.0]], vec![[1.0, 1.0]]).is_err());
    }

    #[test]
    fn unguided_sampling_reproduces_weights() {
        let mix = Gmm::new(vec![0.3, 0.7], vec![[-0.1, 0.0], [0.1, 0.0]], vec![[0.004f64.powi(2); 2]; 2]).unwrap();
        let bounds = Bounds::new([-0.2, -0.2], [0.2, 0.2]).unwrap();
        let den = GmmDenoiser::new(mix.clone(), bounds, ScheduleConfig::default()).unwrap();
        let samples = sample_unguided::<f64, _>(&den, [0.0, 0.0], 5000, 1).unwrap();
        let first = samples.iter().filter(|t| mix.nearest_mode(t.states[0]) == 0).count() as f64 / 5000.0;
        assert!((first - 0.3).abs() < 0.05, "mode frequency {first}");
    }
}
