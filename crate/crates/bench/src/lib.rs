//! Shared inputs for the benchmarks.

use mevrl_core::estimators::SampleSummary;
use rand::Rng;
use rand_distr::StandardNormal;

/// `m` summaries with means spaced 0.1 apart and unit-scale noise, 100 samples each.
pub fn summaries(m: usize, seed: u64) -> Vec<SampleSummary> {
    let mut rng = mevrl_core::rng::stream_rng(seed, &[]);
    (0..m)
        .map(|i| {
            let noise: f64 = rng.sample(StandardNormal);
            SampleSummary::new(0.1 * i as f64 + 0.1 * noise, 1.0 + rng.random::<f64>(), 100).expect("valid summary")
        })
        .collect()
}
