//! Small numeric helpers: the normal distribution and streaming moments.

use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density φ(x).
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal cdf Φ(x), accurate in both tails.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    if x == f64::INFINITY {
        return 1.0;
    }
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile Φ⁻¹(p) for p in (0, 1). Exact zero at p = 0.5.
pub fn normal_quantile(p: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    let x = statrs::distribution::Normal::standard().inverse_cdf(p);
    if !x.is_finite() {
        return x;
    }
    // one Newton step polishes the ~1e-9 accuracy of the initial guess
    x - (normal_cdf(x) - p) / normal_pdf(x)
}

/// Density of Normal(mean, sd²) at x.
#[inline]
pub fn gaussian_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    normal_pdf((x - mean) / sd) / sd
}

/// Cdf of Normal(mean, sd²) at x; a zero sd degenerates to a step at the mean.
#[inline]
pub fn gaussian_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return if x >= mean { 1.0 } else { 0.0 };
    }
    normal_cdf((x - mean) / sd)
}

/// Student-t cdf with `nu` degrees of freedom.
pub fn student_t_cdf(t: f64, nu: f64) -> f64 {
    // nu is validated by the caller.
    StudentsT::new(0.0, 1.0, nu)
        .map(|d| d.cdf(t))
        .unwrap_or(f64::NAN)
}

/// Regularized incomplete beta I_x(a, b) with x clamped into [0, 1].
pub fn beta_cdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        beta_reg(a, b, x)
    }
}

/// Arithmetic mean; NaN for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance (divisor n - 1); NaN for fewer than two values.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(values);
    values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Power sums of `x - shift`, mergeable by addition.
///
/// Blocks merged in a fixed order give bit-identical results regardless of
/// how the blocks were scheduled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerSums {
    pub shift: f64,
    pub n: u64,
    s1: f64,
    s2: f64,
    s3: f64,
    s4: f64,
}

impl PowerSums {
    pub fn new(shift: f64) -> Self {
        Self { shift, n: 0, s1: 0.0, s2: 0.0, s3: 0.0, s4: 0.0 }
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        let d = x - self.shift;
        let d2 = d * d;
        self.n += 1;
        self.s1 += d;
        self.s2 += d2;
        self.s3 += d2 * d;
        self.s4 += d2 * d2;
    }

    pub fn merge(&mut self, other: &PowerSums) {
        debug_assert_eq!(self.shift, other.shift);
        self.n += other.n;
        self.s1 += other.s1;
        self.s2 += other.s2;
        self.s3 += other.s3;
        self.s4 += other.s4;
    }

    pub fn mean(&self) -> f64 {
        self.shift + self.s1 / self.n as f64
    }

    /// Mean of `x - shift`.
    pub fn shifted_mean(&self) -> f64 {
        self.s1 / self.n as f64
    }

    /// Mean of `(x - shift)^2`.
    pub fn shifted_second_moment(&self) -> f64 {
        self.s2 / self.n as f64
    }

    /// Mean of `(x - shift)^4`.
    pub fn shifted_fourth_moment(&self) -> f64 {
        self.s4 / self.n as f64
    }

    /// Population variance (divisor n).
    pub fn variance(&self) -> f64 {
        let m = self.shifted_mean();
        (self.shifted_second_moment() - m * m).max(0.0)
    }

    /// Standard error of the mean.
    pub fn mean_se(&self) -> f64 {
        let n = self.n as f64;
        (self.variance() * n / (n - 1.0)).sqrt() / n.sqrt()
    }

    /// Fourth central moment.
    pub fn fourth_central_moment(&self) -> f64 {
        let n = self.n as f64;
        let m = self.s1 / n;
        let e2 = self.s2 / n;
        let e3 = self.s3 / n;
        let e4 = self.s4 / n;
        e4 - 4.0 * m * e3 + 6.0 * m * m * e2 - 3.0 * m.powi(4)
    }

    /// Asymptotic standard error of the variance estimate.
    pub fn variance_se(&self) -> f64 {
        let v = self.variance();
        ((self.fourth_central_moment() - v * v).max(0.0) / self.n as f64).sqrt()
    }
}
