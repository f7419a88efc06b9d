//! Monte-Carlo studies of the estimators: iid Gaussian sweeps, auto-correlated
//! mean processes, and the Bernoulli ads benchmark.

mod ads;
mod iid;
mod kde;
mod noniid;

pub use ads::{default_ads_grid, run_internet_ads, AdsConfig, AdsRow, ADS_LOWER_LIMIT};
pub use iid::{run_iid_sweep, IidSweepConfig, SweepRow};
pub use kde::{gaussian_kde, silverman_bandwidth, KdeCurve, KDE_GRID_POINTS};
pub use noniid::{run_noniid_experiment, simulate_ar_pair, ArConfig, ArPaths, NoniidResult};

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, MevError, Result};
use crate::estimators::{
    argmax, double_estimator_from_halves, kernel_weighted_value, weighted_value, DeMode, Kernel, KernelSpec, WE_DEFAULT_DRAWS,
};
use crate::stats::PowerSums;

/// Runs per parallel work unit; fixed so results do not depend on scheduling.
pub(crate) const BLOCK: usize = 1024;

/// An estimator selectable in the studies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EstimatorId {
    Me,
    Ae,
    De,
    Cve,
    We,
    Te { alpha: f64 },
    Ke(KernelSpec),
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorId::Me => write!(f, "ME"),
            EstimatorId::Ae => write!(f, "AE"),
            EstimatorId::De => write!(f, "DE"),
            EstimatorId::Cve => write!(f, "CVE"),
            EstimatorId::We => write!(f, "WE"),
            EstimatorId::Te { alpha } => write!(f, "TE({alpha})"),
            EstimatorId::Ke(spec) => write!(f, "KE({spec})"),
        }
    }
}

impl FromStr for EstimatorId {
    type Err = MevError;

    /// Accepts `me`, `ae`, `de`, `cve`, `we`, `te:0.1`, `ke:gaussian:1`, and
    /// the display forms `TE(0.1)` / `KE(gaussian:1)`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let lower = t.to_ascii_lowercase();
        let (head, arg) = if let Some(open) = lower.find('(') {
            if !lower.ends_with(')') {
                return Err(invalid(format!("unknown estimator `{t}`")));
            }
            (&lower[..open], Some(&t[open + 1..t.len() - 1]))
        } else if let Some(colon) = lower.find(':') {
            (&lower[..colon], Some(&t[colon + 1..]))
        } else {
            (lower.as_str(), None)
        };
        let id = match (head, arg) {
            ("me", None) => EstimatorId::Me,
            ("ae", None) => EstimatorId::Ae,
            ("de", None) => EstimatorId::De,
            ("cve", None) => EstimatorId::Cve,
            ("we", None) => EstimatorId::We,
            ("te", Some(a)) => {
                let alpha: f64 = a.trim().parse().map_err(|_| invalid(format!("bad alpha in `{t}`")))?;
                crate::estimators::validate_alpha(alpha)?;
                EstimatorId::Te { alpha }
            }
            ("ke", Some(k)) => EstimatorId::Ke(k.parse()?),
            _ => return Err(invalid(format!("unknown estimator `{t}`"))),
        };
        Ok(id)
    }
}

impl TryFrom<String> for EstimatorId {
    type Error = MevError;

    fn try_from(value: String) -> Result<Self> {
        value.parse()
    }
}

impl From<EstimatorId> for String {
    fn from(id: EstimatorId) -> String {
        id.to_string()
    }
}

/// ME, DE, CVE, WE, TE(0.05/0.10/0.15), KE(Φ).
pub fn default_estimators() -> Vec<EstimatorId> {
    vec![
        EstimatorId::Me,
        EstimatorId::De,
        EstimatorId::Cve,
        EstimatorId::We,
        EstimatorId::Te { alpha: 0.05 },
        EstimatorId::Te { alpha: 0.10 },
        EstimatorId::Te { alpha: 0.15 },
        EstimatorId::Ke(KernelSpec::GaussianCdf { lambda: 1.0 }),
    ]
}

/// Per-run inputs shared by all estimators.
#[derive(Debug, Clone, Default)]
pub(crate) struct RunData {
    pub means: Vec<f64>,
    /// Variance of each mean as seen by the TE, KE and WE.
    pub mean_vars: Vec<f64>,
    pub half_a: Vec<f64>,
    pub half_b: Vec<f64>,
}

impl RunData {
    pub fn with_len(m: usize) -> Self {
        Self { means: vec![0.0; m], mean_vars: vec![0.0; m], half_a: vec![0.0; m], half_b: vec![0.0; m] }
    }
}

/// An estimator with its kernel precomputed.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    id: EstimatorId,
    kernel: Option<Kernel>,
}

impl Prepared {
    pub fn new(id: EstimatorId) -> Result<Self> {
        let kernel = match id {
            EstimatorId::Te { alpha } => Some(Kernel::new(KernelSpec::IndicatorAlpha { alpha })?),
            EstimatorId::Ke(spec) => Some(Kernel::new(spec)?),
            _ => None,
        };
        Ok(Self { id, kernel })
    }

    pub fn all(ids: &[EstimatorId]) -> Result<Vec<Self>> {
        if ids.is_empty() {
            return Err(invalid("at least one estimator is required"));
        }
        ids.iter().map(|&id| Self::new(id)).collect()
    }

    pub fn eval<R: Rng + ?Sized>(&self, d: &RunData, rng: &mut R) -> Result<f64> {
        match self.id {
            EstimatorId::Me => Ok(d.means[argmax(&d.means)]),
            EstimatorId::Ae => Ok(d.means.iter().sum::<f64>() / d.means.len() as f64),
            EstimatorId::De => double_estimator_from_halves(&d.half_a, &d.half_b, DeMode::Single),
            EstimatorId::Cve => double_estimator_from_halves(&d.half_a, &d.half_b, DeMode::Cve),
            EstimatorId::We => Ok(weighted_value(&d.means, &d.mean_vars, WE_DEFAULT_DRAWS, rng, None)?.0),
            EstimatorId::Te { .. } | EstimatorId::Ke(_) => {
                let k = self.kernel.as_ref().ok_or_else(|| MevError::Invariant("kernel not prepared".into()))?;
                Ok(kernel_weighted_value(&d.means, &d.mean_vars, k, None)?.0)
            }
        }
    }
}

/// Bias, variance and MSE of one estimator against a known target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimator: EstimatorId,
    pub bias: f64,
    /// Population variance of the estimates over the runs.
    pub variance: f64,
    pub mse: f64,
    /// Monte-Carlo standard error of the mean estimate (and of the bias).
    pub se: f64,
    /// Standard error of `variance`.
    pub variance_se: f64,
    /// Standard error of `mse`.
    pub mse_se: f64,
    pub runs: usize,
}

impl MetricsRow {
    pub(crate) fn from_sums(estimator: EstimatorId, sums: &PowerSums, truth: f64) -> Self {
        // sums are shifted by the truth, so the shifted moments are the error moments
        debug_assert_eq!(sums.shift, truth);
        let bias = sums.shifted_mean();
        let mse = sums.shifted_second_moment();
        let n = sums.n as f64;
        let fourth = sums.shifted_fourth_moment();
        let mse_se = ((fourth - mse * mse).max(0.0) / n).sqrt();
        Self {
            estimator,
            bias,
            variance: (mse - bias * bias).max(0.0),
            mse,
            se: sums.mean_se(),
            variance_se: sums.variance_se(),
            mse_se,
            runs: sums.n as usize,
        }
    }

    pub const CSV_HEADER: &'static str = "name,bias,var,mse,se,var_se,mse_se,runs";

    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            csv_escape(&self.estimator.to_string()),
            self.bias,
            self.variance,
            self.mse,
            self.se,
            self.variance_se,
            self.mse_se,
            self.runs
        )
    }
}

pub(crate) fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes rows with leading key columns, e.g. the sweep's `mu1`.
pub fn write_metrics_csv<W: Write>(
    mut out: W,
    key_header: &[&str],
    rows: &[(Vec<String>, MetricsRow)],
) -> std::io::Result<()> {
    let mut header: Vec<&str> = key_header.to_vec();
    header.push(MetricsRow::CSV_HEADER);
    writeln!(out, "{}", header.join(","))?;
    for (keys, row) in rows {
        let mut fields: Vec<String> = keys.iter().map(|k| csv_escape(k)).collect();
        fields.push(row.csv_fields());
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Runs `runs` simulations in fixed blocks and merges per-estimator error sums in
/// block order. `simulate` fills the run data for run `r` and may use its own rng.
pub(crate) fn accumulate<F>(
    estimators: &[Prepared],
    runs: usize,
    truth: f64,
    m: usize,
    simulate: F,
) -> Result<Vec<PowerSums>>
where
    F: Fn(usize, &mut RunData) -> Result<crate::rng::SimRng> + Sync,
{
    use rayon::prelude::*;
    let blocks = runs.div_ceil(BLOCK);
    let partial: Vec<Result<Vec<PowerSums>>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut sums = vec![PowerSums::new(truth); estimators.len()];
            let mut data = RunData::with_len(m);
            for r in b * BLOCK..((b + 1) * BLOCK).min(runs) {
                let mut rng = simulate(r, &mut data)?;
                for (est, s) in estimators.iter().zip(sums.iter_mut()) {
                    s.push(est.eval(&data, &mut rng)?);
                }
            }
            Ok(sums)
        })
        .collect();
    let mut total = vec![PowerSums::new(truth); estimators.len()];
    for p in partial {
        for (t, s) in total.iter_mut().zip(p?) {
            t.merge(&s);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimator_ids_round_trip() {
        for id in default_estimators().into_iter().chain([EstimatorId::Ae]) {
            let text = id.to_string();
            assert_eq!(text.parse::<EstimatorId>().unwrap(), id, "{text}");
        }
        assert_eq!("te:0.1".parse::<EstimatorId>().unwrap(), EstimatorId::Te { alpha: 0.1 });
        assert_eq!(
            "ke:beta:2:0.5".parse::<EstimatorId>().unwrap(),
            EstimatorId::Ke(KernelSpec::ShiftedBetaCdf { a: 2.0, b: 0.5, lo: -5.0 })
        );
        assert_eq!("te:0.6".parse::<EstimatorId>().unwrap_err().to_string(), "alpha must lie in (0, 0.5]");
        assert!("xe".parse::<EstimatorId>().is_err());
        assert!("TE(0.1".parse::<EstimatorId>().is_err());
    }

    #[test]
    fn metrics_identity() {
        let mut s = PowerSums::new(2.0);
        for x in [1.0, 2.5, 3.0, 7.25, -1.0] {
            s.push(x);
        }
        let row = MetricsRow::from_sums(EstimatorId::Me, &s, 2.0);
        assert!((row.mse - (row.bias * row.bias + row.variance)).abs() <= 1e-9 * row.mse);
        assert!((row.bias - 0.55).abs() < 1e-12);
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &["mu1"], &[(vec!["0".into()], row)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("mu1,name,bias,var,mse,se,var_se,mse_se,runs\n0,ME,"));
    }
}
