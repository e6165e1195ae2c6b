//! Sum-versus-product composition on an analytic two-mode mixture.
//!
//! Samples are scored against grid-normalized reference densities: the
//! product `p0 * q` and the sum `(p0 + q) / 2`, with `q ∝ exp(-|x - z|)`.

use serde::{Deserialize, Serialize};
use steer_core::gmm::{log_sum_exp, Gmm, GmmDenoiser};
use steer_core::objectives::Objective;
use steer_core::schedule::ScheduleConfig;
use steer_core::steering::{steer, GuidanceConfig, Method, Request, Silent};
use steer_core::trajectory::{distance, Bounds};

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmDemoConfig {
    /// Mixture in workspace units.
    pub mixture: Gmm,
    pub bounds: Bounds,
    pub target: [f64; 2],
    pub beta_gd: f64,
    pub beta_ss: f64,
    pub mcmc: usize,
    pub seeds: usize,
    pub samples: usize,
    pub grid: usize,
    /// Product density below this fraction of its peak counts as low density.
    pub low_fraction: f64,
    pub seed: u64,
}

impl Default for GmmDemoConfig {
    fn default() -> Self {
        let h = 0.2;
        Self {
            mixture: Gmm::two_modes([-0.5 * h, 0.0], [0.5 * h, 0.0], 0.02 * h).expect("valid mixture"),
            bounds: Bounds::new([-h, -h], [h, h]).expect("valid bounds"),
            target: [0.8 * h, 0.8 * h],
            beta_gd: 20.0,
            beta_ss: 60.0,
            mcmc: 4,
            seeds: 20,
            samples: 256,
            grid: 512,
            low_fraction: 0.01,
            seed: 0,
        }
    }
}

/// Reference densities tabulated on a cell-centred grid over the bounds.
#[derive(Debug, Clone)]
pub struct GridOracle {
    n: usize,
    bounds: Bounds,
    log_product: Vec<f64>,
    /// Log normalizers of the product and the target energy.
    log_z_product: f64,
    log_z_q: f64,
    peak: f64,
}

impl GridOracle {
    pub fn new(mixture: &Gmm, target: [f64; 2], bounds: Bounds, n: usize) -> Self {
        let (lo, hi) = (bounds.lo, bounds.hi);
        let (dx, dy) = ((hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64);
        let log_area = (dx * dy).ln();
        let mut log_product = Vec::with_capacity(n * n);
        let mut log_q = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                let x = [lo[0] + (i as f64 + 0.5) * dx, lo[1] + (j as f64 + 0.5) * dy];
                let lq = -distance(x, target);
                log_q.push(lq + log_area);
                log_product.push(mixture.log_density(x) + lq);
            }
        }
        let peak = log_product.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let with_area: Vec<f64> = log_product.iter().map(|v| v + log_area).collect();
        Self { n, bounds, log_z_product: log_sum_exp(&with_area), log_z_q: log_sum_exp(&log_q), log_product, peak }
    }

    fn cell(&self, x: [f64; 2]) -> Option<usize> {
        if !self.bounds.contains(x) {
            return None;
        }
        let f = |d: usize| {
            let t = (x[d] - self.bounds.lo[d]) / (self.bounds.hi[d] - self.bounds.lo[d]);
            ((t * self.n as f64) as usize).min(self.n - 1)
        };
        Some(f(1) * self.n + f(0))
    }

    pub fn log_product(&self, mixture: &Gmm, target: [f64; 2], x: [f64; 2]) -> f64 {
        mixture.log_density(x) - distance(x, target) - self.log_z_product
    }

    pub fn log_sum(&self, mixture: &Gmm, target: [f64; 2], x: [f64; 2]) -> f64 {
        let lq = -distance(x, target) - self.log_z_q;
        log_sum_exp(&[mixture.log_density(x), lq]) - std::f64::consts::LN_2
    }

    /// Whether `x` sits in a grid cell whose product density is below
    /// `fraction` of the peak cell. Points off the grid count as low.
    pub fn is_low(&self, x: [f64; 2], fraction: f64) -> bool {
        self.cell(x).is_none_or(|c| self.log_product[c] < self.peak + fraction.ln())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionStats {
    pub method: String,
    pub beta: f64,
    pub mcmc_steps: usize,
    pub samples: usize,
    pub mean_log_product: f64,
    pub mean_log_sum: f64,
    /// Fraction assigned to each mixture mode by nearest mean.
    pub mode_histogram: Vec<f64>,
    /// Nearest the target's mode and outside the low-density region.
    pub near_mode_fraction: f64,
    pub low_region_fraction: f64,
    pub mean_distance: f64,
    /// One entry per seed.
    pub per_seed_log_product: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmDemoReport {
    pub config: GmmDemoConfig,
    pub target_mode: usize,
    pub methods: Vec<CompositionStats>,
}

impl GmmDemoReport {
    pub fn method(&self, name: &str) -> Option<&CompositionStats> {
        self.methods.iter().find(|m| m.method == name)
    }
}

pub fn composition_stats(
    cfg: &GmmDemoConfig,
    oracle: &GridOracle,
    den: &GmmDenoiser,
    guide: &GuidanceConfig,
) -> Result<CompositionStats> {
    let mix = &cfg.mixture;
    let objective = Objective::<f64>::Point(cfg.target);
    let near = mix.nearest_mode(cfg.target);
    let mut hist = vec![0usize; mix.len()];
    let (mut lp, mut ls, mut dist, mut near_n, mut low_n) = (0.0, 0.0, 0.0, 0usize, 0usize);
    let mut per_seed = Vec::with_capacity(cfg.seeds);
    for s in 0..cfg.seeds {
        let gc = GuidanceConfig { batch: cfg.samples, seed: cfg.seed + s as u64, ..guide.clone() };
        let req = Request { cond: [0.0, 0.0], objective: Some(&objective), nudge: None, map: None };
        let batch = steer(den, &req, &gc, &mut Silent)?;
        let mut seed_lp = 0.0;
        for t in &batch.trajectories {
            let x = t.states[0];
            let v = oracle.log_product(mix, cfg.target, x);
            lp += v;
            seed_lp += v;
            ls += oracle.log_sum(mix, cfg.target, x);
            dist += distance(x, cfg.target);
            let m = mix.nearest_mode(x);
            hist[m] += 1;
            let low = oracle.is_low(x, cfg.low_fraction);
            low_n += low as usize;
            near_n += (m == near && !low) as usize;
        }
        per_seed.push(seed_lp / cfg.samples as f64);
    }
    let n = (cfg.seeds * cfg.samples) as f64;
    Ok(CompositionStats {
        method: guide.method.name().into(),
        beta: match &guide.beta {
            steer_core::steering::Beta::Constant(b) => *b,
            steer_core::steering::Beta::PerStep(v) => v.iter().copied().fold(0.0, f64::max),
        },
        mcmc_steps: guide.mcmc_steps,
        samples: n as usize,
        mean_log_product: lp / n,
        mean_log_sum: ls / n,
        mode_histogram: hist.iter().map(|&c| c as f64 / n).collect(),
        near_mode_fraction: near_n as f64 / n,
        low_region_fraction: low_n as f64 / n,
        mean_distance: dist / n,
        per_seed_log_product: per_seed,
    })
}

/// Guided and stochastic sampling against the same oracle, plus unguided
/// sampling for reference.
pub fn run_gmm_demo(cfg: &GmmDemoConfig) -> Result<GmmDemoReport> {
    cfg.mixture.validate()?;
    if cfg.mixture.len() < 2 {
        return Err(BenchError::Config("the composition demo needs at least two modes".into()));
    }
    if !cfg.bounds.contains(cfg.target) || cfg.seeds == 0 || cfg.samples == 0 || cfg.grid < 2 {
        return Err(BenchError::Config("target must lie in bounds; seeds, samples and grid must be positive".into()));
    }
    let den = GmmDenoiser::new(cfg.mixture.clone(), cfg.bounds, ScheduleConfig::default())?;
    let oracle = GridOracle::new(&cfg.mixture, cfg.target, cfg.bounds, cfg.grid);
    let guides = [
        GuidanceConfig::new(Method::Rs),
        GuidanceConfig::new(Method::Gd).with_beta(cfg.beta_gd),
        GuidanceConfig::new(Method::Ss).with_beta(cfg.beta_ss).with_mcmc(cfg.mcmc),
    ];
    let methods = guides.iter().map(|g| composition_stats(cfg, &oracle, &den, g)).collect::<Result<_>>()?;
    Ok(GmmDemoReport { config: cfg.clone(), target_mode: cfg.mixture.nearest_mode(cfg.target), methods })
}
