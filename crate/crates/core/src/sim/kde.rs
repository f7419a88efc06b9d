use serde::{Deserialize, Serialize};

use crate::error::{MevError, Result};
use crate::stats::normal_pdf;

pub const KDE_GRID_POINTS: usize = 512;
const MIN_BANDWIDTH: f64 = 1e-9;

/// Density estimate on an evenly spaced grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub bandwidth: f64,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

impl KdeCurve {
    /// Trapezoid-rule integral of the density over the grid.
    pub fn integral(&self) -> f64 {
        self.x
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, f)| 0.5 * (x[1] - x[0]) * (f[0] + f[1]))
            .sum()
    }

    /// Grid point of maximal density.
    pub fn mode(&self) -> f64 {
        let i = crate::estimators::argmax(&self.density);
        self.x[i]
    }
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn bandwidth_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let sd = crate::stats::sample_variance(sorted).sqrt();
    let iqr = (quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25)) / 1.34;
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr),
        _ => sd.max(iqr),
    };
    (0.9 * spread * n.powf(-0.2)).max(MIN_BANDWIDTH)
}

/// Silverman's rule of thumb, 0.9·min(sd, IQR/1.34)·n^(−1/5).
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    let sorted = sorted_copy(values)?;
    Ok(bandwidth_sorted(&sorted))
}

fn sorted_copy(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(MevError::InsufficientSample { needed: 2, got: values.len() });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(crate::error::invalid("density estimation needs finite values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Gaussian kernel density estimate on 512 points spanning the data range
/// widened by three bandwidths on each side.
pub fn gaussian_kde(values: &[f64], bandwidth: Option<f64>) -> Result<KdeCurve> {
    let sorted = sorted_copy(values)?;
    let bw = match bandwidth {
        Some(b) if b.is_finite() && b > 0.0 => b.max(MIN_BANDWIDTH),
        Some(_) => return Err(crate::error::invalid("bandwidth must be positive")),
        None => bandwidth_sorted(&sorted),
    };
    let lo = sorted[0] - 3.0 * bw;
    let hi = sorted[sorted.len() - 1] + 3.0 * bw;
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let norm = 1.0 / (sorted.len() as f64 * bw);
    let reach = 9.0 * bw;
    let mut x = Vec::with_capacity(KDE_GRID_POINTS);
    let mut density = Vec::with_capacity(KDE_GRID_POINTS);
    for k in 0..KDE_GRID_POINTS {
        let xk = lo + step * k as f64;
        let start = sorted.partition_point(|&v| v < xk - reach);
        let end = sorted.partition_point(|&v| v <= xk + reach);
        let f: f64 = sorted[start..end].iter().map(|&v| normal_pdf((xk - v) / bw)).sum();
        x.push(xk);
        density.push(f * norm);
    }
    Ok(KdeCurve { bandwidth: bw, x, density })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn integrates_to_one() {
        let mut rng = stream_rng(1, &[]);
        let xs: Vec<f64> = (0..2000).map(|_| rng.sample(StandardNormal)).collect();
        let kde = gaussian_kde(&xs, None).unwrap();
        assert_eq!(kde.x.len(), 512);
        assert!((kde.integral() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn symmetric_pair() {
        let kde = gaussian_kde(&[-1.0, 1.0], None).unwrap();
        for k in 0..256 {
            assert!((kde.density[k] - kde.density[511 - k]).abs() < 1e-12);
        }
    }

    #[test]
    fn recovers_standard_normal() {
        let mut rng = stream_rng(2, &[]);
        let xs: Vec<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
        let kde = gaussian_kde(&xs, None).unwrap();
        let worst = kde.x.iter().zip(&kde.density).map(|(&x, &f)| (f - normal_pdf(x)).abs()).fold(0.0, f64::max);
        assert!(worst < 0.02, "{worst}");
    }

    #[test]
    fn constant_data_uses_the_floor() {
        let kde = gaussian_kde(&[2.0; 10], None).unwrap();
        assert_eq!(kde.bandwidth, 1e-9);
        assert!((kde.mode() - 2.0).abs() < 1e-8);
        assert!(kde.density.iter().all(|f| f.is_finite()));
        assert!(gaussian_kde(&[1.0], None).is_err());
    }

    #[test]
    fn silverman_matches_hand_computation() {
        // sd of 1..=5 is sqrt(2.5); IQR = 4 - 2 = 2, /1.34 = 1.4925...
        let bw = silverman_bandwidth(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((bw - 0.9 * (2.0 / 1.34) * 5f64.powf(-0.2)).abs() < 1e-12);
    }
}
