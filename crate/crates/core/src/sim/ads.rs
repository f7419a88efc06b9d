use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use super::{accumulate, EstimatorId, MetricsRow, Prepared};
use crate::error::{invalid, MevError, Result};
use crate::rng::stream_rng;

/// Lower end of the click-rate interval.
pub const ADS_LOWER_LIMIT: f64 = 0.02;

/// `n_ads` Bernoulli ads with click rates equally spaced in [0.02, mu_hi], each
/// shown to ⌊n_customers / n_ads⌋ customers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdsConfig {
    pub n_customers: usize,
    pub n_ads: usize,
    pub mu_hi: f64,
    pub runs: usize,
    pub seed: u64,
}

impl Default for AdsConfig {
    fn default() -> Self {
        Self { n_customers: 1000, n_ads: 5, mu_hi: 0.05, runs: 2000, seed: 0 }
    }
}

impl AdsConfig {
    pub fn per_ad(&self) -> usize {
        if self.n_ads == 0 {
            0
        } else {
            self.n_customers / self.n_ads
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ads < 2 {
            return Err(invalid("at least two ads are required"));
        }
        if !(self.mu_hi >= ADS_LOWER_LIMIT && self.mu_hi < 1.0) {
            return Err(invalid("mu_hi must lie in [0.02, 1)"));
        }
        if self.per_ad() < 2 {
            return Err(MevError::InsufficientSample { needed: 2, got: self.per_ad() });
        }
        if self.runs < 2 {
            return Err(invalid("runs must be at least 2"));
        }
        Ok(())
    }

    /// True click rates, equally spaced from 0.02 to `mu_hi`.
    pub fn click_rates(&self) -> Vec<f64> {
        let m = self.n_ads;
        (0..m)
            .map(|i| ADS_LOWER_LIMIT + (self.mu_hi - ADS_LOWER_LIMIT) * i as f64 / (m - 1) as f64)
            .collect()
    }
}

/// The six configurations: pairs varying only N, only M, or only the upper limit.
pub fn default_ads_grid() -> Vec<AdsConfig> {
    let c = |n_customers, n_ads, mu_hi| AdsConfig { n_customers, n_ads, mu_hi, ..AdsConfig::default() };
    vec![
        c(1_000, 5, 0.05),
        c(10_000, 5, 0.05),
        c(1_000, 5, 0.1),
        c(1_000, 10, 0.1),
        c(10_000, 10, 0.05),
        c(10_000, 10, 0.1),
    ]
}

/// Metrics of the estimators on one ads configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdsRow {
    pub config: AdsConfig,
    pub metrics: Vec<MetricsRow>,
}

/// Estimates the largest click rate from binomial click counts; run `r` uses
/// the stream keyed by (seed, r).
pub fn run_internet_ads(cfg: &AdsConfig, estimators: &[EstimatorId]) -> Result<AdsRow> {
    cfg.validate()?;
    let prepared = Prepared::all(estimators)?;
    let rates = cfg.click_rates();
    let k = cfg.per_ad();
    let (k_a, k_b) = (k - k / 2, k / 2);
    let bin = |n: usize, p: f64| Binomial::new(n as u64, p).map_err(|e| invalid(e.to_string()));
    let halves: Vec<(Binomial, Binomial)> =
        rates.iter().map(|&p| Ok((bin(k_a, p)?, bin(k_b, p)?))).collect::<Result<_>>()?;
    let truth = cfg.mu_hi;
    let kf = k as f64;
    let sums = accumulate(&prepared, cfg.runs, truth, rates.len(), |r, data| {
        let mut rng = stream_rng(cfg.seed, &[r as u64]);
        for (i, (da, db)) in halves.iter().enumerate() {
            let ca = da.sample(&mut rng) as f64;
            let cb = db.sample(&mut rng) as f64;
            let p = (ca + cb) / kf;
            data.half_a[i] = ca / k_a as f64;
            data.half_b[i] = cb / k_b as f64;
            data.means[i] = p;
            // unbiased Bernoulli sample variance divided by the count
            data.mean_vars[i] = p * (1.0 - p) / (kf - 1.0);
        }
        Ok(rng)
    })?;
    let metrics = estimators.iter().zip(&sums).map(|(&id, s)| MetricsRow::from_sums(id, s, truth)).collect();
    Ok(AdsRow { config: *cfg, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::KernelSpec;
    use crate::sim::default_estimators;

    #[test]
    fn click_rates_are_equally_spaced() {
        let cfg = AdsConfig { n_ads: 4, mu_hi: 0.08, ..Default::default() };
        let r = cfg.click_rates();
        assert_eq!(r.len(), 4);
        assert!((r[0] - 0.02).abs() < 1e-15 && (r[3] - 0.08).abs() < 1e-15);
        assert!((r[1] - 0.04).abs() < 1e-15);
    }

    #[test]
    fn degenerate_interval_is_unbiased() {
        let cfg = AdsConfig { n_ads: 2, mu_hi: 0.02, n_customers: 2000, runs: 4000, seed: 4 };
        let row = run_internet_ads(&cfg, &[EstimatorId::De, EstimatorId::Cve, EstimatorId::Ae]).unwrap();
        for m in &row.metrics {
            assert!(m.bias.abs() < 2.5 * m.se, "{m:?}");
        }
    }

    #[test]
    fn more_customers_lower_mse() {
        let base = AdsConfig { runs: 3000, seed: 8, ..Default::default() };
        let twice = AdsConfig { n_customers: 2 * base.n_customers, ..base };
        let a = run_internet_ads(&base, &default_estimators()).unwrap();
        let b = run_internet_ads(&twice, &default_estimators()).unwrap();
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert!(y.mse < x.mse, "{x:?} {y:?}");
        }
    }

    #[test]
    fn frequencies_converge() {
        let cfg = AdsConfig { n_customers: 1_000_000, n_ads: 2, mu_hi: 0.3, runs: 2, seed: 1 };
        let row = run_internet_ads(&cfg, &[EstimatorId::Ae]).unwrap();
        // AE of the two frequencies estimates the mean rate 0.16
        let estimate = row.metrics[0].bias + 0.3;
        assert!((estimate - 0.16).abs() < 4.0 * (0.3 * 0.7 / 5e5_f64).sqrt());
    }

    #[test]
    fn too_few_customers_per_ad() {
        let cfg = AdsConfig { n_customers: 5, n_ads: 3, ..Default::default() };
        assert!(matches!(run_internet_ads(&cfg, &[EstimatorId::Me]), Err(MevError::InsufficientSample { .. })));
    }

    #[test]
    fn kernel_estimators_against_me_and_de() {
        let ids = [
            EstimatorId::Me,
            EstimatorId::De,
            EstimatorId::Te { alpha: 0.1 },
            EstimatorId::Ke(KernelSpec::GaussianCdf { lambda: 1.0 }),
        ];
        for cfg in default_ads_grid() {
            let row = run_internet_ads(&cfg, &ids).unwrap();
            let mse: Vec<f64> = row.metrics.iter().map(|m| m.mse).collect();
            assert!(mse[2] < mse[1] && mse[3] < mse[1], "{cfg:?}: {mse:?}");
            // many ads with few customers each: the ME overestimates most
            if cfg.n_ads == 10 && cfg.n_customers == 1000 {
                assert!(mse[2] < mse[0] && mse[3] < mse[0], "{cfg:?}: {mse:?}");
            }
        }
    }
}
