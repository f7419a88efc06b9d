use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{accumulate, EstimatorId, MetricsRow, Prepared};
use crate::error::{invalid, Result};
use crate::rng::stream_rng;

/// Gaussian sweep over the first mean; the other means stay fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IidSweepConfig {
    /// Means of the M variables; the first is overwritten by each grid value.
    pub means: Vec<f64>,
    pub sigma_sq: f64,
    pub sample_sizes: Vec<usize>,
    /// Values of μ₁ to sweep.
    pub gap_grid: Vec<f64>,
    pub runs: usize,
    pub seed: u64,
    /// Give the TE, KE and WE the true σ²/|S_i| instead of the sample estimate.
    pub known_variance: bool,
}

impl Default for IidSweepConfig {
    fn default() -> Self {
        Self {
            means: vec![0.0, 0.0],
            sigma_sq: 100.0,
            sample_sizes: vec![100, 100],
            gap_grid: (0..=20).map(|i| i as f64 * 0.25).collect(),
            runs: 100_000,
            seed: 0,
            known_variance: true,
        }
    }
}

impl IidSweepConfig {
    pub fn m(&self) -> usize {
        self.means.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.len() < 2 {
            return Err(invalid("the sweep needs at least two variables"));
        }
        if self.sample_sizes.len() != self.means.len() {
            return Err(invalid("sample_sizes must have one entry per mean"));
        }
        if self.sample_sizes.iter().any(|&n| n < 2) {
            return Err(invalid("every sample size must be at least 2"));
        }
        if !(self.sigma_sq.is_finite() && self.sigma_sq >= 0.0) {
            return Err(invalid("sigma_sq must be finite and non-negative"));
        }
        if self.means.iter().chain(&self.gap_grid).any(|x| !x.is_finite()) {
            return Err(invalid("means and grid values must be finite"));
        }
        if self.gap_grid.is_empty() {
            return Err(invalid("gap_grid must not be empty"));
        }
        if self.runs < 2 {
            return Err(invalid("runs must be at least 2"));
        }
        Ok(())
    }
}

/// Metrics of every estimator at one grid value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mu1: f64,
    pub truth: f64,
    pub metrics: Vec<MetricsRow>,
}

/// Per-variable samplers of half means and sample variance.
struct VariableSampler {
    mu: f64,
    sd_a: f64,
    sd_b: f64,
    n_a: f64,
    n_b: f64,
    n: f64,
    chi_a: Option<ChiSquared<f64>>,
    chi_b: Option<ChiSquared<f64>>,
}

impl VariableSampler {
    fn new(mu: f64, sigma_sq: f64, n: usize) -> Result<Self> {
        let (n_a, n_b) = (n - n / 2, n / 2);
        let chi = |k: usize| -> Result<Option<ChiSquared<f64>>> {
            if k == 0 {
                Ok(None)
            } else {
                ChiSquared::new(k as f64).map(Some).map_err(|e| invalid(e.to_string()))
            }
        };
        Ok(Self {
            mu,
            sd_a: (sigma_sq / n_a as f64).sqrt(),
            sd_b: (sigma_sq / n_b as f64).sqrt(),
            n_a: n_a as f64,
            n_b: n_b as f64,
            n: n as f64,
            chi_a: chi(n_a - 1)?,
            chi_b: chi(n_b - 1)?,
        })
    }

    /// Draws (half-A mean, half-B mean, full mean, unbiased sample variance)
    /// with the exact joint law of an iid Gaussian sample.
    fn draw<R: Rng + ?Sized>(&self, sigma_sq: f64, want_variance: bool, rng: &mut R) -> (f64, f64, f64, f64) {
        let za: f64 = rng.sample(StandardNormal);
        let zb: f64 = rng.sample(StandardNormal);
        let a = self.mu + self.sd_a * za;
        let b = self.mu + self.sd_b * zb;
        let full = a + self.n_b / self.n * (b - a);
        let var = if want_variance {
            let q = |c: &Option<ChiSquared<f64>>, rng: &mut R| c.as_ref().map_or(0.0, |c| c.sample(rng));
            let within = sigma_sq * (q(&self.chi_a, rng) + q(&self.chi_b, rng));
            let between = self.n_a * self.n_b / self.n * (a - b) * (a - b);
            (within + between) / (self.n - 1.0)
        } else {
            sigma_sq
        };
        (a, b, full, var)
    }
}

/// Bias, variance and MSE of each estimator at every grid value of μ₁.
///
/// Run `r` at grid index `g` draws from the stream keyed by (seed, g, r).
pub fn run_iid_sweep(cfg: &IidSweepConfig, estimators: &[EstimatorId]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let prepared = Prepared::all(estimators)?;
    let m = cfg.m();
    let mut out = Vec::with_capacity(cfg.gap_grid.len());
    for (g, &mu1) in cfg.gap_grid.iter().enumerate() {
        let mut means = cfg.means.clone();
        means[0] = mu1;
        let truth = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let samplers: Vec<VariableSampler> = means
            .iter()
            .zip(&cfg.sample_sizes)
            .map(|(&mu, &n)| VariableSampler::new(mu, cfg.sigma_sq, n))
            .collect::<Result<_>>()?;
        let sums = accumulate(&prepared, cfg.runs, truth, m, |r, data| {
            let mut rng = stream_rng(cfg.seed, &[g as u64, r as u64]);
            for (i, s) in samplers.iter().enumerate() {
                let (a, b, full, var) = s.draw(cfg.sigma_sq, !cfg.known_variance, &mut rng);
                data.half_a[i] = a;
                data.half_b[i] = b;
                data.means[i] = full;
                data.mean_vars[i] = var / s.n;
            }
            Ok(rng)
        })?;
        let metrics = estimators
            .iter()
            .zip(&sums)
            .map(|(&id, s)| MetricsRow::from_sums(id, s, truth))
            .collect();
        out.push(SweepRow { mu1, truth, metrics });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::default_estimators;

    fn small(runs: usize, grid: Vec<f64>) -> IidSweepConfig {
        IidSweepConfig { gap_grid: grid, runs, seed: 17, ..Default::default() }
    }

    #[test]
    fn te_beats_me_on_equal_means() {
        let rows = run_iid_sweep(&small(20_000, vec![0.0]), &[EstimatorId::Me, EstimatorId::Te { alpha: 0.05 }])
            .unwrap();
        let (me, te) = (&rows[0].metrics[0], &rows[0].metrics[1]);
        assert!(te.mse < me.mse, "{te:?} vs {me:?}");
    }

    #[test]
    fn large_gap_is_unbiased() {
        let rows = run_iid_sweep(&small(20_000, vec![5.0]), &default_estimators()).unwrap();
        // |S| = 100 and σ² = 100 give sd 1 per mean; a gap of 5 leaves little selection error
        for r in &rows[0].metrics {
            assert!(r.bias.abs() < 0.05, "{r:?}");
        }
        let rows = run_iid_sweep(&IidSweepConfig { sigma_sq: 1.0, ..small(20_000, vec![5.0]) }, &default_estimators())
            .unwrap();
        for r in &rows[0].metrics {
            assert!(r.bias.abs() < 2.0 * r.se.max(1e-12), "{r:?}");
        }
    }

    #[test]
    fn zero_variance_is_exact() {
        let cfg = IidSweepConfig { sigma_sq: 0.0, known_variance: false, ..small(50, vec![0.0, 0.3, 2.0]) };
        let mut ids = default_estimators();
        ids.push(EstimatorId::Ae);
        let rows = run_iid_sweep(&cfg, &ids).unwrap();
        for row in &rows {
            for m in &row.metrics {
                if m.estimator == EstimatorId::Ae {
                    continue;
                }
                assert_eq!(m.bias, 0.0, "{m:?}");
                assert_eq!(m.variance, 0.0, "{m:?}");
            }
        }
    }

    #[test]
    fn metrics_identity_and_determinism() {
        let cfg = IidSweepConfig {
            means: vec![0.0, 0.5, -1.0],
            sample_sizes: vec![10, 7, 30],
            known_variance: false,
            ..small(3000, vec![0.0, 1.0])
        };
        let a = run_iid_sweep(&cfg, &default_estimators()).unwrap();
        let b = run_iid_sweep(&cfg, &default_estimators()).unwrap();
        assert_eq!(a, b);
        for row in &a {
            for m in &row.metrics {
                assert!((m.mse - (m.bias * m.bias + m.variance)).abs() <= 1e-9 * m.mse);
            }
        }
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = single.install(|| run_iid_sweep(&cfg, &default_estimators()).unwrap());
        assert_eq!(a, c);
    }

    #[test]
    fn sampled_variance_is_unbiased() {
        let s = VariableSampler::new(3.0, 4.0, 9).unwrap();
        let mut rng = stream_rng(2, &[]);
        let n = 200_000;
        let (mut sum_var, mut sum_mean, mut sum_sq) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let (_, _, full, var) = s.draw(4.0, true, &mut rng);
            sum_var += var;
            sum_mean += full;
            sum_sq += (full - 3.0) * (full - 3.0);
        }
        let nf = n as f64;
        // Var(s²) = 2σ⁴/(n−1) = 4 for σ² = 4, n = 9
        assert!((sum_var / nf - 4.0).abs() < 4.0 * (4.0 / nf).sqrt());
        assert!((sum_mean / nf - 3.0).abs() < 4.0 * (4.0 / 9.0 / nf).sqrt());
        assert!((sum_sq / nf - 4.0 / 9.0).abs() < 0.01);
    }

    #[test]
    fn invalid_configs() {
        assert!(run_iid_sweep(&IidSweepConfig { means: vec![0.0], ..Default::default() }, &[EstimatorId::Me]).is_err());
        assert!(run_iid_sweep(&IidSweepConfig { sample_sizes: vec![1, 5], ..Default::default() }, &[EstimatorId::Me])
            .is_err());
        assert!(run_iid_sweep(&small(10, vec![0.0]), &[]).is_err());
    }
}
