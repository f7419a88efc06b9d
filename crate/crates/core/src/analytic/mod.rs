//! Quadrature oracles for the moments of the estimators on two Gaussian
//! variables with a common known variance.

mod fit;
mod quadrature;

pub use fit::{default_gap_grid, fit_min_bias_kernel, FitResult, KernelFamily};
pub use quadrature::{integrate_1d, integrate_piecewise, MAX_SUBDIVISIONS};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::estimators::{Kernel, KernelSpec};
use crate::stats::{gaussian_cdf, gaussian_pdf, normal_cdf, normal_pdf};

/// Truncation radius, in standard deviations, for Gaussian integrals.
pub const TRUNCATION_SDS: f64 = 8.0;

/// Default absolute tolerance of the oracles.
pub const DEFAULT_TOLERANCE: f64 = 1e-10;

/// Two Gaussian variables X_i ~ N(mu_i, sigma_sq), each observed `n_i` times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoGaussianConfig {
    pub mu1: f64,
    pub mu2: f64,
    pub sigma_sq: f64,
    pub n1: usize,
    pub n2: usize,
}

impl TwoGaussianConfig {
    pub fn new(mu1: f64, mu2: f64, sigma_sq: f64, n1: usize, n2: usize) -> Result<Self> {
        let cfg = Self { mu1, mu2, sigma_sq, n1, n2 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu1.is_finite() && self.mu2.is_finite()) {
            return Err(invalid("means must be finite"));
        }
        if !(self.sigma_sq.is_finite() && self.sigma_sq > 0.0) {
            return Err(invalid("sigma_sq must be positive"));
        }
        if self.n1 == 0 || self.n2 == 0 {
            return Err(invalid("sample sizes must be positive"));
        }
        Ok(())
    }

    /// Variance of the first sample mean, σ²/n₁.
    pub fn var1(&self) -> f64 {
        self.sigma_sq / self.n1 as f64
    }

    pub fn var2(&self) -> f64 {
        self.sigma_sq / self.n2 as f64
    }

    /// Standard deviation of the difference of the sample means.
    pub fn theta(&self) -> f64 {
        (self.var1() + self.var2()).sqrt()
    }

    pub fn true_max(&self) -> f64 {
        self.mu1.max(self.mu2)
    }

    /// Sizes of the two halves used by the double estimators; the first half
    /// takes the extra element of an odd count.
    pub fn half_counts(&self) -> Result<([usize; 2], [usize; 2])> {
        if self.n1 < 2 || self.n2 < 2 {
            return Err(invalid("the double estimator needs at least two observations per variable"));
        }
        let split = |n: usize| (n - n / 2, n / 2);
        let (a1, b1) = split(self.n1);
        let (a2, b2) = split(self.n2);
        Ok(([a1, a2], [b1, b2]))
    }
}

/// Expectation and variance of an estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentPair {
    pub expectation: f64,
    pub variance: f64,
}

impl MomentPair {
    /// Builds the pair from first and second raw moments.
    pub fn from_raw(first: f64, second: f64) -> Self {
        Self { expectation: first, variance: (second - first * first).max(0.0) }
    }

    pub fn bias(&self, truth: f64) -> f64 {
        self.expectation - truth
    }

    pub fn mse(&self, truth: f64) -> f64 {
        let b = self.bias(truth);
        b * b + self.variance
    }
}

/// Closed-form moments of max(μ̂₁, μ̂₂).
pub fn me_moments_two_gaussians(cfg: &TwoGaussianConfig) -> Result<MomentPair> {
    cfg.validate()?;
    let (m1, m2) = (cfg.mu1, cfg.mu2);
    let theta = cfg.theta();
    let z = (m1 - m2) / theta;
    let (p1, p2, dens) = (normal_cdf(z), normal_cdf(-z), normal_pdf(z));
    let first = m1 * p1 + m2 * p2 + theta * dens;
    let second = (m1 * m1 + cfg.var1()) * p1 + (m2 * m2 + cfg.var2()) * p2 + (m1 + m2) * theta * dens;
    Ok(MomentPair::from_raw(first, second))
}

/// Moments of the average estimator (μ̂₁ + μ̂₂)/2.
pub fn ae_moments_two_gaussians(cfg: &TwoGaussianConfig) -> Result<MomentPair> {
    cfg.validate()?;
    Ok(MomentPair {
        expectation: 0.5 * (cfg.mu1 + cfg.mu2),
        variance: 0.25 * (cfg.var1() + cfg.var2()),
    })
}

fn window(mean: f64, sd: f64) -> (f64, f64) {
    (mean - TRUNCATION_SDS * sd, mean + TRUNCATION_SDS * sd)
}

/// Selection integrals of one half: P(i wins) and E[X_i · 1(i wins)].
struct HalfIntegrals {
    p: [f64; 2],
    j: [f64; 2],
}

fn half_integrals(mu: [f64; 2], var: [f64; 2], tol: f64) -> Result<HalfIntegrals> {
    let sd = [var[0].sqrt(), var[1].sqrt()];
    let mut p = [0.0; 2];
    let mut j = [0.0; 2];
    for i in 0..2 {
        let o = 1 - i;
        let (lo, hi) = window(mu[i], sd[i]);
        let dens = |x: f64| gaussian_pdf(x, mu[i], sd[i]) * gaussian_cdf(x, mu[o], sd[o]);
        p[i] = integrate_piecewise(dens, &[lo, mu[i], hi], tol)?;
        j[i] = integrate_piecewise(|x| x * dens(x), &[lo, mu[i], hi], tol)?;
    }
    Ok(HalfIntegrals { p, j })
}

impl HalfIntegrals {
    /// E[X_col · 1(row wins)] for the half these integrals came from.
    fn cross(&self, mu: [f64; 2], row: usize, col: usize) -> f64 {
        if row == col {
            self.j[row]
        } else {
            mu[col] - self.j[col]
        }
    }
}

/// Moments of the 2-fold cross-validation estimator.
///
/// DE^A evaluates on half B the variable that wins on half A, DE^B the
/// reverse, and the estimate is their average. The covariance of the two
/// directions is kept.
pub fn cve_moments_two_gaussians(cfg: &TwoGaussianConfig) -> Result<MomentPair> {
    cve_moments_with_tolerance(cfg, DEFAULT_TOLERANCE)
}

pub fn cve_moments_with_tolerance(cfg: &TwoGaussianConfig, tol: f64) -> Result<MomentPair> {
    cfg.validate()?;
    let ([a1, a2], [b1, b2]) = cfg.half_counts()?;
    let mu = [cfg.mu1, cfg.mu2];
    let var_a = [cfg.sigma_sq / a1 as f64, cfg.sigma_sq / a2 as f64];
    let var_b = [cfg.sigma_sq / b1 as f64, cfg.sigma_sq / b2 as f64];
    let ha = half_integrals(mu, var_a, tol)?;
    let hb = half_integrals(mu, var_b, tol)?;

    // DE^A: winner on A, value on B (independent halves)
    let e_a = mu[0] * ha.p[0] + mu[1] * ha.p[1];
    let e2_a = (var_b[0] + mu[0] * mu[0]) * ha.p[0] + (var_b[1] + mu[1] * mu[1]) * ha.p[1];
    let e_b = mu[0] * hb.p[0] + mu[1] * hb.p[1];
    let e2_b = (var_a[0] + mu[0] * mu[0]) * hb.p[0] + (var_a[1] + mu[1] * mu[1]) * hb.p[1];

    // E[DE^A DE^B] = Σ_ij E[A_j 1(i wins A)] E[B_i 1(j wins B)]
    let mut e_ab = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            e_ab += ha.cross(mu, i, j) * hb.cross(mu, j, i);
        }
    }
    let var_a_dir = e2_a - e_a * e_a;
    let var_b_dir = e2_b - e_b * e_b;
    let cov = e_ab - e_a * e_b;
    Ok(MomentPair {
        expectation: 0.5 * (e_a + e_b),
        variance: (0.25 * (var_a_dir + var_b_dir) + 0.5 * cov).max(0.0),
    })
}

/// Value of the kernel estimator for realized means (x1, x2), θ known.
#[inline]
fn ke_value(kernel: &Kernel, k0: f64, x1: f64, x2: f64, theta: f64) -> f64 {
    let (c, o) = if x1 >= x2 { (x1, x2) } else { (x2, x1) };
    let w = kernel.eval((o - c) / theta);
    c + w * (o - c) / (k0 + w)
}

/// Moments of the kernel estimator (and hence the TE) by nested quadrature
/// over the two regions x₂ ≤ x₁ and x₂ > x₁.
pub fn ke_moments_two_gaussians(cfg: &TwoGaussianConfig, spec: KernelSpec) -> Result<MomentPair> {
    ke_moments_with_tolerance(cfg, spec, 1e-9)
}

pub fn ke_moments_with_tolerance(cfg: &TwoGaussianConfig, spec: KernelSpec, tol: f64) -> Result<MomentPair> {
    cfg.validate()?;
    let kernel = Kernel::new(spec)?;
    let k0 = kernel.eval(0.0);
    let theta = cfg.theta();
    let (sd1, sd2) = (cfg.var1().sqrt(), cfg.var2().sqrt());
    let (lo1, hi1) = window(cfg.mu1, sd1);
    let (lo2, hi2) = window(cfg.mu2, sd2);
    let kinks: Vec<f64> = kernel.breakpoints();

    let inner_breaks = |x1: f64| -> Vec<f64> {
        let mut pts = vec![lo2, hi2, x1];
        for &b in &kinks {
            pts.push(x1 + b * theta);
            pts.push(x1 - b * theta);
        }
        let mut pts: Vec<f64> = pts.into_iter().map(|p| p.clamp(lo2, hi2)).collect();
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        pts
    };
    let outer_breaks = {
        let mut pts = vec![lo1, hi1, cfg.mu1];
        let mut push = |p: f64| {
            if p > lo1 && p < hi1 {
                pts.push(p);
            }
        };
        push(cfg.mu2);
        for &b in &kinks {
            push(cfg.mu2 - b * theta);
            push(cfg.mu2 + b * theta);
        }
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        pts
    };

    let inner_tol = 0.1 * tol;
    let moment = |power: i32| -> Result<f64> {
        let mut failure = None;
        let outer = integrate_piecewise(
            |x1| {
                let inner = integrate_piecewise(
                    |x2| ke_value(&kernel, k0, x1, x2, theta).powi(power) * gaussian_pdf(x2, cfg.mu2, sd2),
                    &inner_breaks(x1),
                    inner_tol,
                );
                match inner {
                    Ok(v) => v * gaussian_pdf(x1, cfg.mu1, sd1),
                    Err(e) => {
                        failure.get_or_insert(e);
                        0.0
                    }
                }
            },
            &outer_breaks,
            tol,
        )?;
        match failure {
            Some(e) => Err(e),
            None => Ok(outer),
        }
    };
    let first = moment(1)?;
    let second = moment(2)?;
    Ok(MomentPair::from_raw(first, second))
}

/// Bias of the kernel estimator, computed from the one-dimensional law of
/// D = μ̂₁ − μ̂₂: the estimate equals max(μ̂₁, μ̂₂) − r(|D|)·|D| with
/// r(u) = κ(−u/θ) / (κ(0) + κ(−u/θ)).
pub fn ke_bias_two_gaussians(cfg: &TwoGaussianConfig, kernel: &Kernel, tol: f64) -> Result<f64> {
    cfg.validate()?;
    let theta = cfg.theta();
    let d = cfg.mu1 - cfg.mu2;
    let k0 = kernel.eval(0.0);
    let shrink = |x: f64| {
        let u = x.abs();
        let w = kernel.eval(-u / theta);
        u * w / (k0 + w) * gaussian_pdf(x, d, theta)
    };
    let (lo, hi) = window(d, theta);
    let mut pts = vec![lo, hi];
    for b in std::iter::once(0.0).chain(kernel.breakpoints()) {
        for p in [b * theta, -b * theta] {
            if p > lo && p < hi {
                pts.push(p);
            }
        }
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let me = me_moments_two_gaussians(cfg)?;
    Ok(me.expectation - integrate_piecewise(shrink, &pts, tol)? - cfg.true_max())
}
