//! Estimators of the maximum expected value (MEV) of a set of random variables.
//!
//! Every estimator consumes per-variable sufficient statistics
//! ([`SampleSummary`]) except the double estimator, which needs the raw
//! samples (or the means of two disjoint halves of them).

mod kernel;

pub use kernel::{kernel_eval, validate_alpha, Kernel, KernelSpec, DEFAULT_BETA_LO};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, MevError, Result};
use crate::stats::normal_quantile;

/// Mean, unbiased variance and size of one variable's sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    mean: f64,
    variance: f64,
    count: usize,
}

impl SampleSummary {
    pub fn new(mean: f64, variance: f64, count: usize) -> Result<Self> {
        if !mean.is_finite() {
            return Err(invalid("sample mean must be finite"));
        }
        if !(variance.is_finite() && variance >= 0.0) {
            return Err(invalid("sample variance must be finite and non-negative"));
        }
        if count == 0 {
            return Err(invalid("sample count must be positive"));
        }
        Ok(Self { mean, variance, count })
    }

    /// Summary of a single point estimate whose own uncertainty is `mean_variance`
    /// (used for action values, where the variance is already that of the mean).
    pub fn point(mean: f64, mean_variance: f64) -> Result<Self> {
        Self::new(mean, mean_variance, 1)
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Estimated variance of the sample mean, σ̂²/|S|.
    pub fn mean_variance(&self) -> f64 {
        self.variance / self.count as f64
    }

    /// The same summary for samples multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.mean * c, self.variance * c * c, self.count)
    }
}

/// Summarizes raw values: arithmetic mean and unbiased variance.
pub fn summarize(values: &[f64]) -> Result<SampleSummary> {
    if values.len() < 2 {
        return Err(MevError::InsufficientSample { needed: 2, got: values.len() });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|x| (x - mean) * (x - mean)).sum();
    SampleSummary::new(mean, ss / (n - 1.0), values.len())
}

/// Output of a weighted estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MevEstimate {
    pub value: f64,
    /// Normalized weights, one per variable, summing to one.
    pub weights: Vec<f64>,
    /// Number of strictly positive weights.
    pub retained_count: usize,
}

fn non_empty<T>(xs: &[T]) -> Result<()> {
    if xs.is_empty() {
        Err(MevError::EmptyInput)
    } else {
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Index of the champion, the lowest-index maximizer of the sample means.
pub fn champion_index(summaries: &[SampleSummary]) -> usize {
    let mut best = 0;
    for (i, s) in summaries.iter().enumerate().skip(1) {
        if s.mean > summaries[best].mean {
            best = i;
        }
    }
    best
}

/// Maximum estimator: the largest sample mean.
pub fn max_estimator(summaries: &[SampleSummary]) -> Result<f64> {
    non_empty(summaries)?;
    Ok(summaries[champion_index(summaries)].mean)
}

/// Average estimator: the unweighted mean of the sample means.
pub fn average_estimator(summaries: &[SampleSummary]) -> Result<f64> {
    non_empty(summaries)?;
    Ok(summaries.iter().map(|s| s.mean).sum::<f64>() / summaries.len() as f64)
}

/// Test statistic from a mean difference and the two variances of the means.
///
/// A zero denominator maps to 0 for equal means and to -∞ otherwise.
#[inline]
pub fn t_statistic_parts(diff: f64, candidate_mean_var: f64, champion_mean_var: f64) -> f64 {
    let denom = (candidate_mean_var + champion_mean_var).sqrt();
    if denom > 0.0 {
        diff / denom
    } else if diff == 0.0 {
        0.0
    } else if diff < 0.0 {
        f64::NEG_INFINITY
    } else {
        f64::INFINITY
    }
}

/// One-sided two-sample statistic of `candidate` against the `champion`.
///
/// Non-positive whenever the champion's mean is at least the candidate's.
pub fn t_statistic(candidate: &SampleSummary, champion: &SampleSummary) -> f64 {
    t_statistic_parts(
        candidate.mean - champion.mean,
        candidate.mean_variance(),
        champion.mean_variance(),
    )
}

/// T-estimator: averages every sample mean whose test against the champion
/// is not rejected at level `alpha`.
pub fn t_estimator(summaries: &[SampleSummary], alpha: f64) -> Result<MevEstimate> {
    validate_alpha(alpha)?;
    non_empty(summaries)?;
    let z_alpha = normal_quantile(alpha);
    let champ = &summaries[champion_index(summaries)];
    let retained: Vec<bool> = summaries
        .iter()
        .map(|s| t_statistic(s, champ).min(0.0) >= z_alpha)
        .collect();
    let count = retained.iter().filter(|&&r| r).count();
    if count == 0 {
        return Err(MevError::Invariant("champion was rejected".into()));
    }
    let mut acc = 0.0;
    for (s, &keep) in summaries.iter().zip(&retained) {
        if keep {
            acc += s.mean - champ.mean;
        }
    }
    let n = count as f64;
    Ok(MevEstimate {
        value: champ.mean + acc / n,
        weights: retained.iter().map(|&r| if r { 1.0 / n } else { 0.0 }).collect(),
        retained_count: count,
    })
}

/// Kernel-weighted value over `(mean, variance of mean)` pairs.
///
/// Returns the estimate and the number of positive weights. `weights_out`,
/// when given, receives the unnormalized κ(T_i).
pub fn kernel_weighted_value(
    means: &[f64],
    mean_vars: &[f64],
    kernel: &Kernel,
    mut weights_out: Option<&mut Vec<f64>>,
) -> Result<(f64, usize)> {
    non_empty(means)?;
    if means.len() != mean_vars.len() {
        return Err(MevError::ShapeMismatch("means and variances differ in length".into()));
    }
    let champ = argmax(means);
    let (champ_mean, champ_var) = (means[champ], mean_vars[champ]);
    let mut total = 0.0;
    let mut acc = 0.0;
    let mut retained = 0;
    if let Some(w) = weights_out.as_deref_mut() {
        w.clear();
    }
    for (&m, &v) in means.iter().zip(mean_vars) {
        let diff = m - champ_mean;
        let w = kernel.eval(t_statistic_parts(diff, v, champ_var).min(0.0));
        total += w;
        acc += w * diff;
        if w > 0.0 {
            retained += 1;
        }
        if let Some(out) = weights_out.as_deref_mut() {
            out.push(w);
        }
    }
    if total <= 0.0 || !total.is_finite() {
        return Err(MevError::Invariant("kernel weights sum to zero".into()));
    }
    Ok((champ_mean + acc / total, retained))
}

/// K-estimator: sample means weighted by κ of their test statistics.
pub fn k_estimator(summaries: &[SampleSummary], kernel: &Kernel) -> Result<MevEstimate> {
    non_empty(summaries)?;
    let means: Vec<f64> = summaries.iter().map(|s| s.mean).collect();
    let vars: Vec<f64> = summaries.iter().map(|s| s.mean_variance()).collect();
    let mut weights = Vec::with_capacity(means.len());
    let (value, retained_count) = kernel_weighted_value(&means, &vars, kernel, Some(&mut weights))?;
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(MevEstimate { value, weights, retained_count })
}

/// Selection/evaluation scheme of the double estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeMode {
    /// Select on half A, evaluate on half B.
    Single,
    /// Average of both directions (2-fold cross-validation).
    Cve,
}

/// Raw samples split into two disjoint halves per variable.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSamples {
    pub half_a: Vec<Vec<f64>>,
    pub half_b: Vec<Vec<f64>>,
}

impl SplitSamples {
    pub fn means(&self) -> (Vec<f64>, Vec<f64>) {
        let m = |h: &Vec<Vec<f64>>| h.iter().map(|v| crate::stats::mean(v)).collect();
        (m(&self.half_a), m(&self.half_b))
    }
}

/// Shuffles each sample and splits it; half A gets the extra element of odd lengths.
pub fn split_samples<R: Rng + ?Sized>(samples: &[Vec<f64>], rng: &mut R) -> Result<SplitSamples> {
    non_empty(samples)?;
    let mut half_a = Vec::with_capacity(samples.len());
    let mut half_b = Vec::with_capacity(samples.len());
    for s in samples {
        if s.len() < 4 {
            return Err(MevError::InsufficientSample { needed: 4, got: s.len() });
        }
        let mut v = s.clone();
        v.shuffle(rng);
        let b = v.split_off(v.len().div_ceil(2));
        half_a.push(v);
        half_b.push(b);
    }
    Ok(SplitSamples { half_a, half_b })
}

/// Double estimator from the per-variable means of the two halves.
pub fn double_estimator_from_halves(means_a: &[f64], means_b: &[f64], mode: DeMode) -> Result<f64> {
    non_empty(means_a)?;
    if means_a.len() != means_b.len() {
        return Err(MevError::ShapeMismatch("halves differ in variable count".into()));
    }
    let a_on_b = means_b[argmax(means_a)];
    Ok(match mode {
        DeMode::Single => a_on_b,
        DeMode::Cve => 0.5 * (a_on_b + means_a[argmax(means_b)]),
    })
}

/// Double estimator on raw samples (each needs at least four values).
pub fn double_estimator<R: Rng + ?Sized>(samples: &[Vec<f64>], mode: DeMode, rng: &mut R) -> Result<f64> {
    let split = split_samples(samples, rng)?;
    let (a, b) = split.means();
    double_estimator_from_halves(&a, &b, mode)
}

/// Weighted estimator with Monte-Carlo weights.
///
/// Each draw samples every component from Normal(mean, σ̂²/|S|); the weight of a
/// component is the fraction of draws in which it is maximal, with joint maxima
/// sharing the draw evenly.
pub fn weighted_estimator<R: Rng + ?Sized>(
    summaries: &[SampleSummary],
    draws: usize,
    rng: &mut R,
) -> Result<MevEstimate> {
    non_empty(summaries)?;
    let means: Vec<f64> = summaries.iter().map(|s| s.mean).collect();
    let vars: Vec<f64> = summaries.iter().map(|s| s.mean_variance()).collect();
    let mut weights = Vec::with_capacity(means.len());
    let (value, retained_count) = weighted_value(&means, &vars, draws, rng, Some(&mut weights))?;
    Ok(MevEstimate { value, weights, retained_count })
}

/// Weighted-estimator value over `(mean, variance of mean)` pairs; returns the
/// estimate and the number of components with positive weight.
pub fn weighted_value<R: Rng + ?Sized>(
    means: &[f64],
    mean_vars: &[f64],
    draws: usize,
    rng: &mut R,
    weights_out: Option<&mut Vec<f64>>,
) -> Result<(f64, usize)> {
    non_empty(means)?;
    if means.len() != mean_vars.len() {
        return Err(MevError::ShapeMismatch("means and variances differ in length".into()));
    }
    if draws < 1 {
        return Err(invalid("Monte-Carlo sample count must be at least 1"));
    }
    let mut local = Vec::new();
    let counts = weights_out.unwrap_or(&mut local);
    counts.clear();
    counts.resize(means.len(), 0.0);
    let mut sample = vec![0.0; means.len()];
    for _ in 0..draws {
        let mut best = f64::NEG_INFINITY;
        for (x, (&m, &v)) in sample.iter_mut().zip(means.iter().zip(mean_vars)) {
            let z: f64 = rng.sample(StandardNormal);
            *x = m + v.sqrt() * z;
            best = best.max(*x);
        }
        let ties = sample.iter().filter(|&&x| x == best).count() as f64;
        for (c, &x) in counts.iter_mut().zip(&sample) {
            if x == best {
                *c += 1.0 / ties;
            }
        }
    }
    let n = draws as f64;
    counts.iter_mut().for_each(|c| *c /= n);
    let value = means.iter().zip(counts.iter()).map(|(m, w)| w * m).sum();
    let retained = counts.iter().filter(|&&w| w > 0.0).count();
    Ok((value, retained))
}

/// Default Monte-Carlo draw count of the weighted estimator.
pub const WE_DEFAULT_DRAWS: usize = 100;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use approx::assert_relative_eq;
    use proptest::prelude::{
        prop, prop_assert, prop_assert_eq, prop_oneof, proptest, Just, ProptestConfig, Strategy,
    };
    use rand_distr::{Distribution, Normal};

    fn s(mean: f64, variance: f64, count: usize) -> SampleSummary {
        SampleSummary::new(mean, variance, count).unwrap()
    }

    #[test]
    fn summarize_examples() {
        assert_eq!(summarize(&[1.0, 1.0, 1.0, 1.0]).unwrap(), s(1.0, 0.0, 4));
        assert_eq!(summarize(&[0.0, 2.0]).unwrap(), s(1.0, 2.0, 2));
        assert_eq!(
            summarize(&[3.0]).unwrap_err(),
            MevError::InsufficientSample { needed: 2, got: 1 }
        );
        assert!(summarize(&[3.0]).unwrap_err().to_string().contains("insufficient sample"));
    }

    #[test]
    fn summarize_standard_normal_draws() {
        let mut rng = stream_rng(11, &[]);
        let xs: Vec<f64> = (0..1_000_000).map(|_| rng.sample(StandardNormal)).collect();
        let sm = summarize(&xs).unwrap();
        let n = xs.len() as f64;
        // standard errors of the mean and of the variance for N(0, 1)
        assert!(sm.mean().abs() < 4.0 / n.sqrt());
        assert!((sm.variance() - 1.0).abs() < 4.0 * (2.0 / n).sqrt());
        assert_eq!(sm.count(), 1_000_000);
    }

    #[test]
    fn summary_validation() {
        assert!(SampleSummary::new(0.0, -1.0, 3).is_err());
        assert!(SampleSummary::new(0.0, 1.0, 0).is_err());
        assert!(SampleSummary::new(f64::NAN, 1.0, 3).is_err());
    }

    #[test]
    fn max_and_average() {
        let xs = [s(0.3, 1.0, 5), s(0.7, 1.0, 5)];
        assert_eq!(max_estimator(&xs).unwrap(), 0.7);
        assert_eq!(max_estimator(&[s(1.0, 0.0, 1)]).unwrap(), 1.0);
        assert_eq!(average_estimator(&[s(0.0, 1.0, 2), s(1.0, 1.0, 2), s(2.0, 1.0, 2)]).unwrap(), 1.0);
        assert_eq!(average_estimator(&[s(4.5, 1.0, 2)]).unwrap(), 4.5);
        assert_eq!(max_estimator(&[]).unwrap_err(), MevError::EmptyInput);
        assert_eq!(average_estimator(&[]).unwrap_err(), MevError::EmptyInput);
    }

    #[test]
    fn max_matches_exhaustive_scan() {
        let mut rng = stream_rng(3, &[]);
        let xs: Vec<SampleSummary> = (0..5).map(|_| s(rng.random_range(-5.0..5.0), 1.0, 10)).collect();
        let mut best = f64::NEG_INFINITY;
        for x in &xs {
            if x.mean() > best {
                best = x.mean();
            }
        }
        assert_eq!(max_estimator(&xs).unwrap(), best);
    }

    #[test]
    fn t_statistic_examples() {
        let a = s(1.0, 2.0, 10);
        assert_eq!(t_statistic(&a, &a), 0.0);
        let t = t_statistic(&s(0.0, 1.0, 100), &s(1.0, 1.0, 100));
        assert_relative_eq!(t, -1.0 / 0.02f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(t, -7.0711, epsilon = 1e-4);
        assert_eq!(t_statistic(&s(0.5, 0.0, 10), &s(0.5, 0.0, 10)), 0.0);
        assert_eq!(t_statistic(&s(0.4, 0.0, 10), &s(0.5, 0.0, 10)), f64::NEG_INFINITY);
    }

    #[test]
    fn t_estimator_examples() {
        let same = [s(2.0, 1.0, 10), s(2.0, 1.0, 10), s(2.0, 1.0, 10)];
        let te = t_estimator(&same, 0.05).unwrap();
        assert_eq!(te.value, 2.0);
        assert_eq!(te.retained_count, 3);
        let xs = [s(0.0, 4.0, 10), s(3.0, 1.0, 10), s(2.9, 1.0, 10)];
        assert_eq!(t_estimator(&xs, 0.5).unwrap().value, 3.0);
        assert_eq!(t_estimator(&xs, 0.5).unwrap().retained_count, 1);
        assert!(t_estimator(&xs, 0.0).is_err());
        assert!(t_estimator(&xs, 0.51).is_err());
        assert_eq!(t_estimator(&[], 0.1).unwrap_err(), MevError::EmptyInput);
    }

    #[test]
    fn k_estimator_examples() {
        let single = k_estimator(&[s(1.5, 2.0, 3)], &Kernel::new(KernelSpec::Laplace).unwrap()).unwrap();
        assert_eq!(single.value, 1.5);
        assert_eq!(single.weights, vec![1.0]);

        let xs = [s(0.0, 1.0, 10), s(1.0, 1.0, 10), s(0.5, 2.0, 10)];
        let k = Kernel::new(KernelSpec::GaussianCdf { lambda: 1.0 }).unwrap();
        let means: Vec<f64> = xs.iter().map(|x| x.mean()).collect();
        let vars: Vec<f64> = xs.iter().map(|x| x.mean_variance()).collect();
        let mut raw = Vec::new();
        kernel_weighted_value(&means, &vars, &k, Some(&mut raw)).unwrap();
        assert_eq!(raw[1], k.eval(0.0));
        let ke = k_estimator(&xs, &k).unwrap();
        assert_relative_eq!(ke.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let direct: f64 = raw.iter().zip(&means).map(|(w, m)| w * m).sum::<f64>() / raw.iter().sum::<f64>();
        assert_relative_eq!(ke.value, direct, epsilon = 1e-12);
    }

    #[test]
    fn tied_champions_all_get_full_weight() {
        let xs = [s(1.0, 1.0, 10), s(1.0, 3.0, 10), s(-4.0, 1.0, 10)];
        let k = Kernel::new(KernelSpec::Laplace).unwrap();
        let means: Vec<f64> = xs.iter().map(|x| x.mean()).collect();
        let vars: Vec<f64> = xs.iter().map(|x| x.mean_variance()).collect();
        let mut raw = Vec::new();
        kernel_weighted_value(&means, &vars, &k, Some(&mut raw)).unwrap();
        assert_eq!(raw[0], 0.5);
        assert_eq!(raw[1], 0.5);
    }

    #[test]
    fn double_estimator_examples() {
        let mut rng = stream_rng(5, &[]);
        let samples = vec![vec![10.0; 4], vec![0.0; 4]];
        for mode in [DeMode::Single, DeMode::Cve] {
            assert_eq!(double_estimator(&samples, mode, &mut rng).unwrap(), 10.0);
        }
        let constant = vec![vec![3.25; 7], vec![3.25; 5], vec![3.25; 9]];
        assert_eq!(double_estimator(&constant, DeMode::Cve, &mut rng).unwrap(), 3.25);
        assert!(matches!(
            double_estimator(&[vec![1.0, 2.0, 3.0]], DeMode::Single, &mut rng),
            Err(MevError::InsufficientSample { .. })
        ));
    }

    #[test]
    fn split_is_disjoint_and_balanced() {
        let mut rng = stream_rng(9, &[]);
        let samples = vec![(0..7).map(f64::from).collect::<Vec<_>>(), (10..20).map(f64::from).collect()];
        let split = split_samples(&samples, &mut rng).unwrap();
        for (i, original) in samples.iter().enumerate() {
            let (a, b) = (&split.half_a[i], &split.half_b[i]);
            assert!(a.len() >= b.len() && a.len() - b.len() <= 1);
            let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
            all.sort_by(f64::total_cmp);
            assert_eq!(&all, original);
        }
        assert_eq!(split.half_a[0].len(), 4);
    }

    #[test]
    fn double_estimator_argmax_ties_use_lowest_index() {
        assert_eq!(double_estimator_from_halves(&[1.0, 1.0], &[5.0, 7.0], DeMode::Single).unwrap(), 5.0);
    }

    #[test]
    fn weighted_estimator_examples() {
        let mut rng = stream_rng(1, &[]);
        let sep = [s(100.0, 1e-6, 10), s(0.0, 1e-6, 10)];
        let we = weighted_estimator(&sep, 100, &mut rng).unwrap();
        assert_eq!(we.value, 100.0);
        let same = [s(2.5, 1.0, 10), s(2.5, 1.0, 10)];
        let we = weighted_estimator(&same, 100, &mut rng).unwrap();
        assert_relative_eq!(we.value, 2.5, epsilon = 1e-12);
        assert!(weighted_estimator(&same, 0, &mut rng).is_err());
        // exact ties split the draw
        let degenerate = [s(1.0, 0.0, 4), s(1.0, 0.0, 4)];
        let we = weighted_estimator(&degenerate, 10, &mut rng).unwrap();
        assert_eq!(we.weights, vec![0.5, 0.5]);
    }

    fn summaries_strategy(min_len: usize, max_len: usize) -> impl Strategy<Value = Vec<SampleSummary>> {
        prop::collection::vec((-50.0..50.0f64, 0.0..30.0f64, 1usize..200), min_len..=max_len).prop_map(|v| {
            v.into_iter().map(|(m, var, n)| SampleSummary::new(m, var, n).unwrap()).collect()
        })
    }

    fn kernel_strategy() -> impl Strategy<Value = KernelSpec> {
        prop_oneof![
            (0.001..=0.5f64).prop_map(|alpha| KernelSpec::IndicatorAlpha { alpha }),
            (0.05..5.0f64).prop_map(|lambda| KernelSpec::GaussianCdf { lambda }),
            (0.5..30.0f64).prop_map(|nu| KernelSpec::StudentTCdf { nu }),
            Just(KernelSpec::Epanechnikov),
            Just(KernelSpec::Laplace),
            Just(KernelSpec::Triangle),
            (0.2..5.0f64, 0.2..5.0f64).prop_map(|(a, b)| KernelSpec::ShiftedBetaCdf { a, b, lo: -5.0 }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn te_half_is_me_and_ke_indicator_is_te(xs in summaries_strategy(1, 8), alpha in 0.001..=0.5f64) {
            let me = max_estimator(&xs).unwrap();
            prop_assert_eq!(t_estimator(&xs, 0.5).unwrap().value, me);
            let te = t_estimator(&xs, alpha).unwrap();
            let ke = k_estimator(&xs, &Kernel::new(KernelSpec::IndicatorAlpha { alpha }).unwrap()).unwrap();
            prop_assert_eq!(ke.value, te.value);
            prop_assert_eq!(ke.retained_count, te.retained_count);
        }

        #[test]
        fn weighted_values_stay_within_the_means(xs in summaries_strategy(1, 8), spec in kernel_strategy()) {
            let lo = xs.iter().map(|s| s.mean()).fold(f64::INFINITY, f64::min);
            let hi = max_estimator(&xs).unwrap();
            let ke = k_estimator(&xs, &Kernel::new(spec).unwrap()).unwrap();
            prop_assert!(ke.value <= hi);
            prop_assert!(ke.value >= lo - 1e-9);
            prop_assert!((ke.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(ke.retained_count >= 1);
        }

        #[test]
        fn two_variable_midrange_bound(xs in summaries_strategy(2, 2), spec in kernel_strategy()) {
            let mid = 0.5 * (xs[0].mean() + xs[1].mean());
            let ke = k_estimator(&xs, &Kernel::new(spec).unwrap()).unwrap();
            prop_assert!(ke.value >= mid - 1e-9);
        }

        #[test]
        fn equal_uncertainty_ordering(means in prop::collection::vec(-20.0..20.0f64, 1..8),
                                      var in 0.01..20.0f64, n in 1usize..100,
                                      a1 in 0.001..=0.5f64, a2 in 0.001..=0.5f64) {
            let xs: Vec<_> = means.iter().map(|&m| SampleSummary::new(m, var, n).unwrap()).collect();
            let (lo_a, hi_a) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let ae = average_estimator(&xs).unwrap();
            let te_lo = t_estimator(&xs, lo_a).unwrap().value;
            let te_hi = t_estimator(&xs, hi_a).unwrap().value;
            let me = max_estimator(&xs).unwrap();
            prop_assert!(ae <= te_lo + 1e-9);
            prop_assert!(te_lo <= te_hi + 1e-9);
            prop_assert!(te_hi <= me);
        }

        #[test]
        fn scale_equivariance(xs in summaries_strategy(1, 6), spec in kernel_strategy(), pow in -3i32..4) {
            // powers of two scale exactly, so the identity is bit-for-bit
            let c = 2f64.powi(pow);
            let scaled: Vec<_> = xs.iter().map(|s| s.scaled(c).unwrap()).collect();
            let k = Kernel::new(spec).unwrap();
            prop_assert_eq!(k_estimator(&scaled, &k).unwrap().value, c * k_estimator(&xs, &k).unwrap().value);
            prop_assert_eq!(max_estimator(&scaled).unwrap(), c * max_estimator(&xs).unwrap());
        }
    }

    #[test]
    fn scale_equivariance_on_raw_samples() {
        let mut rng = stream_rng(21, &[]);
        let normal = Normal::new(0.0, 3.0).unwrap();
        let raw: Vec<Vec<f64>> = (0..4).map(|i| (0..30).map(|_| normal.sample(&mut rng) + i as f64).collect()).collect();
        let c = 3.7;
        let scaled: Vec<Vec<f64>> = raw.iter().map(|v| v.iter().map(|x| x * c).collect()).collect();
        let summ = |r: &Vec<Vec<f64>>| r.iter().map(|v| summarize(v).unwrap()).collect::<Vec<_>>();
        let (a, b) = (summ(&raw), summ(&scaled));
        assert_relative_eq!(t_estimator(&b, 0.1).unwrap().value, c * t_estimator(&a, 0.1).unwrap().value, epsilon = 1e-9);
        let k = Kernel::new(KernelSpec::GaussianCdf { lambda: 1.0 }).unwrap();
        assert_relative_eq!(k_estimator(&b, &k).unwrap().value, c * k_estimator(&a, &k).unwrap().value, epsilon = 1e-9);
        let de_a = double_estimator(&raw, DeMode::Cve, &mut stream_rng(4, &[])).unwrap();
        let de_b = double_estimator(&scaled, DeMode::Cve, &mut stream_rng(4, &[])).unwrap();
        assert_relative_eq!(de_b, c * de_a, epsilon = 1e-9);
        let we_a = weighted_estimator(&a, 100, &mut stream_rng(8, &[])).unwrap().value;
        let we_b = weighted_estimator(&b, 100, &mut stream_rng(8, &[])).unwrap().value;
        assert_relative_eq!(we_b, c * we_a, epsilon = 1e-9);
    }
}
