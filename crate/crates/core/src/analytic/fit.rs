//! Bias-optimal kernel parameters over a range of mean gaps.

use serde::{Deserialize, Serialize};

use super::{ke_bias_two_gaussians, TwoGaussianConfig};
use crate::error::{invalid, Result};
use crate::estimators::{Kernel, KernelSpec, DEFAULT_BETA_LO};

/// Kernel families whose parameters can be fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    IndicatorAlpha,
    GaussianCdf,
    ShiftedBetaCdf,
}

impl std::str::FromStr for KernelFamily {
    type Err = crate::error::MevError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "indicator" | "indicator-alpha" | "te" => Ok(Self::IndicatorAlpha),
            "gaussian" | "gaussian-cdf" => Ok(Self::GaussianCdf),
            "beta" | "shifted-beta" | "shifted-beta-cdf" => Ok(Self::ShiftedBetaCdf),
            other => Err(invalid(format!("unknown kernel family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: KernelSpec,
    /// Sum over the gap grid of the squared analytic bias.
    pub objective: f64,
}

/// Gaps 0, 0.05, …, 5 between the two means.
pub fn default_gap_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 * 0.05).collect()
}

const BIAS_TOL: f64 = 1e-11;
const ALPHA_RANGE: (f64, f64) = (1e-3, 0.5);
const LAMBDA_RANGE: (f64, f64) = (0.01, 10.0);
const BETA_RANGE: (f64, f64) = (0.05, 20.0);

fn objective(spec: KernelSpec, gaps: &[f64], base: &TwoGaussianConfig) -> Result<f64> {
    let kernel = Kernel::new(spec)?;
    let mut total = 0.0;
    for &g in gaps {
        let cfg = TwoGaussianConfig { mu1: base.mu2 + g, ..*base };
        let b = ke_bias_two_gaussians(&cfg, &kernel, BIAS_TOL)?;
        total += b * b;
    }
    Ok(total)
}

/// Minimizes `f` on [lo, hi]: a coarse grid (log-spaced when `log` is set)
/// locates the best bracket, golden-section search refines it.
fn minimize_scalar<F: FnMut(f64) -> Result<f64>>(mut f: F, lo: f64, hi: f64, log: bool) -> Result<(f64, f64)> {
    const GRID: usize = 40;
    let (to, from): (fn(f64) -> f64, fn(f64) -> f64) = if log { (f64::ln, f64::exp) } else { (|x| x, |x| x) };
    let (a, b) = (to(lo), to(hi));
    let xs: Vec<f64> = (0..=GRID).map(|i| a + (b - a) * i as f64 / GRID as f64).collect();
    let mut best = (0, f64::INFINITY);
    for (i, &x) in xs.iter().enumerate() {
        let v = f(from(x))?;
        if v < best.1 {
            best = (i, v);
        }
    }
    let (mut l, mut r) = (xs[best.0.saturating_sub(1)], xs[(best.0 + 1).min(GRID)]);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = r - phi * (r - l);
    let mut x2 = l + phi * (r - l);
    let mut f1 = f(from(x1))?;
    let mut f2 = f(from(x2))?;
    while (r - l).abs() > 1e-7 * (1.0 + l.abs().max(r.abs())) {
        if f1 <= f2 {
            r = x2;
            x2 = x1;
            f2 = f1;
            x1 = r - phi * (r - l);
            f1 = f(from(x1))?;
        } else {
            l = x1;
            x1 = x2;
            f1 = f2;
            x2 = l + phi * (r - l);
            f2 = f(from(x2))?;
        }
    }
    let (x, v) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    // the grid point can beat the refined one when the objective is flat or kinked
    if best.1 < v {
        Ok((from(xs[best.0]), best.1))
    } else {
        Ok((from(x).clamp(lo, hi), v))
    }
}

/// Fits the family's parameter(s) minimizing the summed squared bias over
/// configurations `base` with μ₁ = μ₂ + gap for each gap in `gaps`.
pub fn fit_min_bias_kernel(family: KernelFamily, gaps: &[f64], base: &TwoGaussianConfig) -> Result<FitResult> {
    base.validate()?;
    if gaps.is_empty() {
        return Err(invalid("gap grid must not be empty"));
    }
    if gaps.iter().any(|g| !g.is_finite()) {
        return Err(invalid("gap grid values must be finite"));
    }
    let fit = match family {
        KernelFamily::IndicatorAlpha => {
            let (alpha, objective) = minimize_scalar(
                |alpha| objective(KernelSpec::IndicatorAlpha { alpha }, gaps, base),
                ALPHA_RANGE.0,
                ALPHA_RANGE.1,
                false,
            )?;
            FitResult { spec: KernelSpec::IndicatorAlpha { alpha }, objective }
        }
        KernelFamily::GaussianCdf => {
            let (lambda, objective) = minimize_scalar(
                |lambda| objective(KernelSpec::GaussianCdf { lambda }, gaps, base),
                LAMBDA_RANGE.0,
                LAMBDA_RANGE.1,
                true,
            )?;
            FitResult { spec: KernelSpec::GaussianCdf { lambda }, objective }
        }
        KernelFamily::ShiftedBetaCdf => {
            let lo = DEFAULT_BETA_LO;
            let spec = |a, b| KernelSpec::ShiftedBetaCdf { a, b, lo };
            let (mut a, mut b) = (1.0, 1.0);
            let mut current = objective(spec(a, b), gaps, base)?;
            for _ in 0..12 {
                let (na, _) = minimize_scalar(|x| objective(spec(x, b), gaps, base), BETA_RANGE.0, BETA_RANGE.1, true)?;
                let (nb, v) =
                    minimize_scalar(|x| objective(spec(na, x), gaps, base), BETA_RANGE.0, BETA_RANGE.1, true)?;
                let improved = current - v;
                if v <= current {
                    a = na;
                    b = nb;
                    current = v;
                }
                if improved <= 1e-12 * (1.0 + current) {
                    break;
                }
            }
            FitResult { spec: spec(a, b), objective: current }
        }
    };
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> TwoGaussianConfig {
        TwoGaussianConfig::new(0.0, 0.0, 100.0, 100, 100).unwrap()
    }

    #[test]
    fn large_separation_is_unbiased_for_any_parameter() {
        for family in [KernelFamily::IndicatorAlpha, KernelFamily::GaussianCdf] {
            let fit = fit_min_bias_kernel(family, &[40.0, 50.0], &base()).unwrap();
            assert!(fit.objective < 1e-4, "{fit:?}");
        }
    }

    #[test]
    fn degenerate_grids_are_rejected() {
        assert!(fit_min_bias_kernel(KernelFamily::GaussianCdf, &[], &base()).is_err());
        assert!(fit_min_bias_kernel(KernelFamily::GaussianCdf, &[f64::NAN], &base()).is_err());
    }

    #[test]
    fn minimizer_finds_quadratic_vertex() {
        let (x, v) = minimize_scalar(|x| Ok((x - 0.3).powi(2)), 0.0, 1.0, false).unwrap();
        assert!((x - 0.3).abs() < 1e-6 && v < 1e-12);
        let (x, _) = minimize_scalar(|x: f64| Ok((x.ln() - 1.0).powi(2)), 0.01, 10.0, true).unwrap();
        assert!((x - 1f64.exp()).abs() < 1e-5);
    }

    #[test]
    fn family_names_parse() {
        assert_eq!("te".parse::<KernelFamily>().unwrap(), KernelFamily::IndicatorAlpha);
        assert_eq!("gaussian".parse::<KernelFamily>().unwrap(), KernelFamily::GaussianCdf);
        assert!("cosine".parse::<KernelFamily>().is_err());
    }
}
