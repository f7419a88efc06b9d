use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gaussian_kde, EstimatorId, KdeCurve, MetricsRow, Prepared, RunData, BLOCK};
use crate::error::{invalid, Result};
use crate::rng::{stream_rng, SimRng};
use crate::stats::PowerSums;

/// AR(1) observations X_t = (1−ρ)μ + ρX_{t−1} + ε_t, ε_t ~ N(0, (1−ρ²)σ²),
/// tracked by the exponentially weighted mean μ̂_t = μ̂_{t−1} + τ(X_t − μ̂_{t−1}).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArConfig {
    pub rho: f64,
    pub tau: f64,
    pub horizon: usize,
    pub mu: Vec<f64>,
    pub sigma_sq: f64,
    pub runs: usize,
    pub seed: u64,
}

impl Default for ArConfig {
    fn default() -> Self {
        Self { rho: 0.0, tau: 0.1, horizon: 100, mu: vec![1.0, 0.0], sigma_sq: 100.0, runs: 100_000, seed: 0 }
    }
}

impl ArConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(invalid("rho must lie in [0, 1]"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(invalid("tau must lie in (0, 1]"));
        }
        if self.horizon < 2 {
            return Err(invalid("horizon must be at least 2"));
        }
        if self.mu.len() < 2 || self.mu.iter().any(|m| !m.is_finite()) {
            return Err(invalid("mu needs at least two finite values"));
        }
        if !(self.sigma_sq.is_finite() && self.sigma_sq >= 0.0) {
            return Err(invalid("sigma_sq must be finite and non-negative"));
        }
        if self.runs < 2 {
            return Err(invalid("runs must be at least 2"));
        }
        Ok(())
    }

    fn innovation_sd(&self) -> f64 {
        ((1.0 - self.rho * self.rho) * self.sigma_sq).max(0.0).sqrt()
    }

    pub fn truth(&self) -> f64 {
        self.mu.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Observation and mean-estimate paths for t = 0..=T, one row per variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArPaths {
    pub x: Vec<Vec<f64>>,
    pub mu_hat: Vec<Vec<f64>>,
}

/// Final mean estimate and sample variance of the μ̂ path (t = 0..=horizon).
fn simulate_summary<R: Rng + ?Sized>(mu: f64, cfg: &ArConfig, horizon: usize, rng: &mut R) -> (f64, f64) {
    let sd = cfg.innovation_sd();
    let (mut x, mut m) = (mu, mu);
    let mut path = PowerSums::new(mu);
    path.push(m);
    for _ in 0..horizon {
        let z: f64 = rng.sample(StandardNormal);
        x = (1.0 - cfg.rho) * mu + cfg.rho * x + sd * z;
        m += cfg.tau * (x - m);
        path.push(m);
    }
    let n = path.n as f64;
    (m, path.variance() * n / (n - 1.0))
}

/// Simulates every variable's recursions with the stream keyed by `run_seed`.
pub fn simulate_ar_pair(cfg: &ArConfig, run_seed: u64) -> Result<ArPaths> {
    cfg.validate()?;
    let mut rng = stream_rng(run_seed, &[]);
    let sd = cfg.innovation_sd();
    let mut xs = Vec::with_capacity(cfg.mu.len());
    let mut ms = Vec::with_capacity(cfg.mu.len());
    for &mu in &cfg.mu {
        let mut x = vec![mu; cfg.horizon + 1];
        let mut m = vec![mu; cfg.horizon + 1];
        for t in 1..=cfg.horizon {
            let z: f64 = rng.sample(StandardNormal);
            x[t] = (1.0 - cfg.rho) * mu + cfg.rho * x[t - 1] + sd * z;
            m[t] = m[t - 1] + cfg.tau * (x[t] - m[t - 1]);
        }
        xs.push(x);
        ms.push(m);
    }
    Ok(ArPaths { x: xs, mu_hat: ms })
}

/// Raw estimates, summary metrics and density curves per estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoniidResult {
    pub estimators: Vec<EstimatorId>,
    /// `estimates[e][r]`: estimate of estimator `e` in run `r`.
    pub estimates: Vec<Vec<f64>>,
    pub metrics: Vec<MetricsRow>,
    pub kde: Vec<KdeCurve>,
}

fn fill_run(cfg: &ArConfig, r: usize, data: &mut RunData) -> SimRng {
    let mut rng = stream_rng(cfg.seed, &[r as u64]);
    let half = cfg.horizon / 2;
    for (i, &mu) in cfg.mu.iter().enumerate() {
        let (m, v) = simulate_summary(mu, cfg, cfg.horizon, &mut rng);
        data.means[i] = m;
        // plain sample variance of the path, used as the variance of the mean
        data.mean_vars[i] = v;
    }
    for (i, &mu) in cfg.mu.iter().enumerate() {
        data.half_a[i] = simulate_summary(mu, cfg, half, &mut rng).0;
        data.half_b[i] = simulate_summary(mu, cfg, half, &mut rng).0;
    }
    rng
}

/// Repeats the AR simulation `runs` times and applies each estimator to the
/// final mean estimates. The double estimators use two independent processes
/// of half the horizon per variable.
pub fn run_noniid_experiment(cfg: &ArConfig, estimators: &[EstimatorId]) -> Result<NoniidResult> {
    cfg.validate()?;
    let prepared = Prepared::all(estimators)?;
    let m = cfg.mu.len();
    let blocks = cfg.runs.div_ceil(BLOCK);
    let parts: Vec<Result<Vec<Vec<f64>>>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let range = b * BLOCK..((b + 1) * BLOCK).min(cfg.runs);
            let mut out = vec![Vec::with_capacity(range.len()); prepared.len()];
            let mut data = RunData::with_len(m);
            for r in range {
                let mut rng = fill_run(cfg, r, &mut data);
                for (p, o) in prepared.iter().zip(out.iter_mut()) {
                    o.push(p.eval(&data, &mut rng)?);
                }
            }
            Ok(out)
        })
        .collect();
    let mut estimates = vec![Vec::with_capacity(cfg.runs); prepared.len()];
    for part in parts {
        for (e, p) in estimates.iter_mut().zip(part?) {
            e.extend(p);
        }
    }
    let truth = cfg.truth();
    let metrics = estimators
        .iter()
        .zip(&estimates)
        .map(|(&id, xs)| {
            let mut s = PowerSums::new(truth);
            xs.iter().for_each(|&x| s.push(x));
            MetricsRow::from_sums(id, &s, truth)
        })
        .collect();
    let kde = estimates.iter().map(|xs| gaussian_kde(xs, None)).collect::<Result<_>>()?;
    Ok(NoniidResult { estimators: estimators.to_vec(), estimates, metrics, kde })
}
