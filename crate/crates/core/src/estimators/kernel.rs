//! Weighting kernels applied to the one-sided test statistics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, MevError, Result};
use crate::stats::{beta_cdf, normal_cdf, normal_quantile};

/// Default lower edge of the shifted beta-cdf kernel's support.
pub const DEFAULT_BETA_LO: f64 = -5.0;

/// Description of a kernel κ: (-∞, 0] → [0, ∞).
///
/// The textual form (used by the CLI and config files) is
/// `indicator:<alpha>`, `gaussian:<lambda>`, `student_t:<nu>`, `epanechnikov`,
/// `laplace`, `triangle` or `beta:<a>:<b>[:<lo>]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum KernelSpec {
    /// κ(T) = 1(T ≥ z_α); turns the K-estimator into the T-estimator.
    IndicatorAlpha { alpha: f64 },
    /// Normal cdf with standard deviation λ.
    GaussianCdf { lambda: f64 },
    /// Student-t cdf with ν degrees of freedom.
    StudentTCdf { nu: f64 },
    Epanechnikov,
    Laplace,
    Triangle,
    /// Beta(a, b) cdf mapped affinely from [0, 1] onto [lo, 0].
    ShiftedBetaCdf { a: f64, b: f64, lo: f64 },
}

impl KernelSpec {
    pub fn indicator(alpha: f64) -> Result<Self> {
        let spec = KernelSpec::IndicatorAlpha { alpha };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gaussian(lambda: f64) -> Result<Self> {
        let spec = KernelSpec::GaussianCdf { lambda };
        spec.validate()?;
        Ok(spec)
    }

    pub fn shifted_beta(a: f64, b: f64) -> Result<Self> {
        let spec = KernelSpec::ShiftedBetaCdf { a, b, lo: DEFAULT_BETA_LO };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::IndicatorAlpha { alpha } => validate_alpha(alpha),
            KernelSpec::GaussianCdf { lambda } => {
                if lambda.is_finite() && lambda > 0.0 {
                    Ok(())
                } else {
                    Err(invalid("lambda must be positive"))
                }
            }
            KernelSpec::StudentTCdf { nu } => {
                if nu.is_finite() && nu > 0.0 {
                    Ok(())
                } else {
                    Err(invalid("nu must be positive"))
                }
            }
            KernelSpec::ShiftedBetaCdf { a, b, lo } => {
                if !(a.is_finite() && a > 0.0 && b.is_finite() && b > 0.0) {
                    Err(invalid("beta shape parameters must be positive"))
                } else if !(lo.is_finite() && lo < 0.0) {
                    Err(invalid("beta kernel lower edge must be negative"))
                } else {
                    Ok(())
                }
            }
            KernelSpec::Epanechnikov | KernelSpec::Laplace | KernelSpec::Triangle => Ok(()),
        }
    }
}

/// Checks the significance level domain shared by every T-estimator entry point.
pub fn validate_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 0.5 {
        Ok(())
    } else {
        Err(invalid("alpha must lie in (0, 0.5]"))
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            KernelSpec::IndicatorAlpha { alpha } => write!(f, "indicator:{alpha}"),
            KernelSpec::GaussianCdf { lambda } => write!(f, "gaussian:{lambda}"),
            KernelSpec::StudentTCdf { nu } => write!(f, "student_t:{nu}"),
            KernelSpec::Epanechnikov => write!(f, "epanechnikov"),
            KernelSpec::Laplace => write!(f, "laplace"),
            KernelSpec::Triangle => write!(f, "triangle"),
            KernelSpec::ShiftedBetaCdf { a, b, lo } => write!(f, "beta:{a}:{b}:{lo}"),
        }
    }
}

impl FromStr for KernelSpec {
    type Err = MevError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .ok_or_else(|| invalid(format!("kernel `{s}` is missing a parameter")))?
                .parse::<f64>()
                .map_err(|_| invalid(format!("kernel `{s}` has a non-numeric parameter")))
        };
        let expect_len = |n: usize| -> Result<()> {
            if parts.len() == n {
                Ok(())
            } else {
                Err(invalid(format!("kernel `{s}` has the wrong number of parameters")))
            }
        };
        let spec = match parts[0].to_ascii_lowercase().as_str() {
            "indicator" | "te" => {
                expect_len(2)?;
                KernelSpec::IndicatorAlpha { alpha: num(1)? }
            }
            "gaussian" | "phi" => {
                if parts.len() == 1 {
                    KernelSpec::GaussianCdf { lambda: 1.0 }
                } else {
                    expect_len(2)?;
                    KernelSpec::GaussianCdf { lambda: num(1)? }
                }
            }
            "student_t" | "t" => {
                expect_len(2)?;
                KernelSpec::StudentTCdf { nu: num(1)? }
            }
            "epanechnikov" => {
                expect_len(1)?;
                KernelSpec::Epanechnikov
            }
            "laplace" => {
                expect_len(1)?;
                KernelSpec::Laplace
            }
            "triangle" => {
                expect_len(1)?;
                KernelSpec::Triangle
            }
            "beta" => {
                let lo = match parts.len() {
                    3 => DEFAULT_BETA_LO,
                    4 => num(3)?,
                    _ => return Err(invalid(format!("kernel `{s}` has the wrong number of parameters"))),
                };
                KernelSpec::ShiftedBetaCdf { a: num(1)?, b: num(2)?, lo }
            }
            other => return Err(invalid(format!("unknown kernel `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl TryFrom<String> for KernelSpec {
    type Error = MevError;

    fn try_from(value: String) -> Result<Self> {
        value.parse()
    }
}

impl From<KernelSpec> for String {
    fn from(spec: KernelSpec) -> String {
        spec.to_string()
    }
}

/// A validated kernel with its constants precomputed.
#[derive(Debug, Clone)]
pub struct Kernel {
    spec: KernelSpec,
    z_alpha: f64,
    student: Option<StudentsT>,
}

impl Kernel {
    pub fn new(spec: KernelSpec) -> Result<Self> {
        spec.validate()?;
        let z_alpha = match spec {
            KernelSpec::IndicatorAlpha { alpha } => normal_quantile(alpha),
            _ => f64::NAN,
        };
        let student = match spec {
            KernelSpec::StudentTCdf { nu } => {
                Some(StudentsT::new(0.0, 1.0, nu).map_err(|e| invalid(e.to_string()))?)
            }
            _ => None,
        };
        Ok(Self { spec, z_alpha, student })
    }

    pub fn spec(&self) -> KernelSpec {
        self.spec
    }

    /// Rejection threshold z_α of the indicator kernel (NaN for other kernels).
    pub fn z_alpha(&self) -> f64 {
        self.z_alpha
    }

    /// κ(t). Positive inputs are clamped to zero.
    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        let t = t.min(0.0);
        match self.spec {
            KernelSpec::IndicatorAlpha { .. } => {
                if t >= self.z_alpha {
                    1.0
                } else {
                    0.0
                }
            }
            KernelSpec::GaussianCdf { lambda } => normal_cdf(t / lambda),
            KernelSpec::StudentTCdf { .. } => match &self.student {
                Some(d) if t.is_finite() => d.cdf(t),
                _ => 0.0,
            },
            KernelSpec::Epanechnikov => {
                if t >= -1.0 {
                    0.75 * (1.0 - t * t)
                } else {
                    0.0
                }
            }
            KernelSpec::Laplace => 0.5 * t.exp(),
            KernelSpec::Triangle => {
                if t >= -1.0 {
                    1.0 + t
                } else {
                    0.0
                }
            }
            KernelSpec::ShiftedBetaCdf { a, b, lo } => {
                if t <= lo {
                    0.0
                } else {
                    beta_cdf((t - lo) / -lo, a, b)
                }
            }
        }
    }

    /// Points in T-space where κ is discontinuous or non-smooth.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self.spec {
            KernelSpec::IndicatorAlpha { .. } => vec![self.z_alpha],
            KernelSpec::Epanechnikov | KernelSpec::Triangle => vec![-1.0],
            KernelSpec::ShiftedBetaCdf { lo, .. } => vec![lo],
            _ => Vec::new(),
        }
    }
}

/// Evaluates κ(t) for a spec, validating it first.
pub fn kernel_eval(spec: KernelSpec, t: f64) -> Result<f64> {
    Ok(Kernel::new(spec)?.eval(t))
}
