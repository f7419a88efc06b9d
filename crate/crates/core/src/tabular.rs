//! Tabular Q-Learning, Double Q-Learning, and TE/KE/WE-target variants with
//! per-pair process-variance tracking.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, State};
use crate::error::{invalid, MevError, Result};
use crate::estimators::{argmax, kernel_weighted_value, weighted_value, Kernel, KernelSpec, WE_DEFAULT_DRAWS};
use crate::rng::{stream_rng, SimRng};

/// Action values with visit counts n(s) and n(s, a).
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    stride: usize,
    action_counts: Vec<usize>,
    values: Vec<f64>,
    state_visits: Vec<u64>,
    pair_updates: Vec<u64>,
}

impl QTable {
    pub fn new<E: Environment + ?Sized>(env: &E) -> Self {
        let n = env.state_count();
        let stride = env.max_action_count();
        Self {
            stride,
            action_counts: (0..n).map(|s| env.action_count(State(s))).collect(),
            values: vec![0.0; n * stride],
            state_visits: vec![0; n],
            pair_updates: vec![0; n * stride],
        }
    }

    fn idx(&self, s: State, a: usize) -> usize {
        s.0 * self.stride + a
    }

    /// Values of the actions available in `s`.
    pub fn row(&self, s: State) -> &[f64] {
        let start = s.0 * self.stride;
        &self.values[start..start + self.action_counts[s.0]]
    }

    pub fn get(&self, s: State, a: usize) -> f64 {
        self.values[self.idx(s, a)]
    }

    pub fn set(&mut self, s: State, a: usize, v: f64) {
        let i = self.idx(s, a);
        self.values[i] = v;
    }

    pub fn state_visits(&self, s: State) -> u64 {
        self.state_visits[s.0]
    }

    pub fn pair_updates(&self, s: State, a: usize) -> u64 {
        self.pair_updates[self.idx(s, a)]
    }

    /// Counts a visit of `s` and returns the new n(s).
    pub fn visit_state(&mut self, s: State) -> u64 {
        self.state_visits[s.0] += 1;
        self.state_visits[s.0]
    }

    /// Counts an update of (s, a) and returns the new n(s, a).
    pub fn count_update(&mut self, s: State, a: usize) -> u64 {
        let i = self.idx(s, a);
        self.pair_updates[i] += 1;
        self.pair_updates[i]
    }
}

/// Exponentially weighted process variance with Kish effective sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceTracker {
    pub process_var: f64,
    pub omega: f64,
    pub omega_sq: f64,
}

impl VarianceTracker {
    pub fn new(init_process_var: f64) -> Self {
        Self { process_var: init_process_var, omega: 0.0, omega_sq: 0.0 }
    }

    /// ω ← (1−τ)ω + τ and ω² ← (1−τ)²ω² + τ².
    pub fn update_weights(&mut self, tau: f64) {
        let keep = 1.0 - tau;
        self.omega = keep * self.omega + tau;
        self.omega_sq = keep * keep * self.omega_sq + tau * tau;
    }

    /// σ̂² ← (1−τ){σ̂² + τ(y − q)²}.
    pub fn update_process(&mut self, tau: f64, target: f64, q: f64) {
        let d = target - q;
        self.process_var = (1.0 - tau) * (self.process_var + tau * d * d);
    }

    /// Both updates in order.
    pub fn update(&mut self, tau: f64, target: f64, q: f64) {
        self.update_weights(tau);
        self.update_process(tau, target, q);
    }

    /// ω² / ω²-tracker; 1 before the first update.
    pub fn n_eff(&self) -> f64 {
        if self.omega_sq > 0.0 {
            self.omega * self.omega / self.omega_sq
        } else {
            1.0
        }
    }

    /// Variance of the value estimate, σ̂² / n_eff.
    pub fn variance(&self) -> f64 {
        self.process_var / self.n_eff()
    }
}

/// Learner selecting the bootstrap target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Algorithm {
    Q,
    DoubleQ,
    TeQ { alpha: f64 },
    KeQ(KernelSpec),
    WeQ,
}

impl Algorithm {
    pub fn validate(&self) -> Result<()> {
        match self {
            Algorithm::TeQ { alpha } => crate::estimators::validate_alpha(*alpha),
            Algorithm::KeQ(spec) => spec.validate(),
            _ => Ok(()),
        }
    }

    fn uses_trackers(&self) -> bool {
        matches!(self, Algorithm::TeQ { .. } | Algorithm::KeQ(_) | Algorithm::WeQ)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Algorithm::Q => write!(f, "Q"),
            Algorithm::DoubleQ => write!(f, "DoubleQ"),
            Algorithm::TeQ { alpha } => write!(f, "TE-Q({alpha})"),
            Algorithm::KeQ(spec) => write!(f, "KE-Q({spec})"),
            Algorithm::WeQ => write!(f, "WE-Q"),
        }
    }
}

/// Splits `name(arg)` or `name:arg` into its parts.
fn split_tag(s: &str) -> (String, Option<String>) {
    let s = s.trim();
    if let Some(open) = s.find('(') {
        if s.ends_with(')') {
            return (s[..open].to_ascii_lowercase(), Some(s[open + 1..s.len() - 1].to_string()));
        }
    }
    match s.split_once(':') {
        Some((a, b)) => (a.to_ascii_lowercase(), Some(b.to_string())),
        None => (s.to_ascii_lowercase(), None),
    }
}

impl FromStr for Algorithm {
    type Err = MevError;

    /// Accepts `q`, `double-q`, `te-q:<alpha>`, `ke-q:<kernel>`, `we-q` and the
    /// display forms.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = split_tag(s);
        let name = name.replace(['-', '_'], "");
        let alg = match (name.as_str(), arg) {
            ("q", None) => Algorithm::Q,
            ("doubleq" | "dq", None) => Algorithm::DoubleQ,
            ("weq", None) => Algorithm::WeQ,
            ("teq", Some(a)) => Algorithm::TeQ {
                alpha: a.trim().parse().map_err(|_| invalid(format!("bad alpha in `{s}`")))?,
            },
            ("keq", Some(k)) => Algorithm::KeQ(k.parse()?),
            _ => return Err(invalid(format!("unknown algorithm `{s}`"))),
        };
        alg.validate()?;
        Ok(alg)
    }
}

impl TryFrom<String> for Algorithm {
    type Error = MevError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Algorithm> for String {
    fn from(a: Algorithm) -> String {
        a.to_string()
    }
}

/// Exploration rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Exploration {
    EpsConstant(f64),
    /// ε = 1/√n(s), counting the current visit.
    EpsVisitAnnealed,
}

impl Exploration {
    pub fn epsilon(&self, state_visits: u64) -> f64 {
        match *self {
            Exploration::EpsConstant(e) => e,
            Exploration::EpsVisitAnnealed => 1.0 / (state_visits.max(1) as f64).sqrt(),
        }
    }
}

impl fmt::Display for Exploration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exploration::EpsConstant(e) => write!(f, "eps:{e}"),
            Exploration::EpsVisitAnnealed => write!(f, "anneal"),
        }
    }
}

impl FromStr for Exploration {
    type Err = MevError;

    /// `eps:<value>` or `anneal`.
    fn from_str(s: &str) -> Result<Self> {
        match split_tag(s) {
            (n, Some(v)) if n == "eps" || n == "const" => {
                let e: f64 = v.trim().parse().map_err(|_| invalid(format!("bad epsilon in `{s}`")))?;
                if !(0.0..=1.0).contains(&e) {
                    return Err(invalid("epsilon must lie in [0, 1]"));
                }
                Ok(Exploration::EpsConstant(e))
            }
            (n, None) if n == "anneal" || n == "annealed" => Ok(Exploration::EpsVisitAnnealed),
            _ => Err(invalid(format!("unknown exploration `{s}`"))),
        }
    }
}

impl TryFrom<String> for Exploration {
    type Error = MevError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Exploration> for String {
    fn from(e: Exploration) -> String {
        e.to_string()
    }
}

/// Step-size schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LearningRate {
    Constant(f64),
    /// τ = 0.1·101/(100 + n(s, a)), counting the current update.
    VisitPolynomial,
}

impl LearningRate {
    pub fn tau(&self, pair_updates: u64) -> f64 {
        match *self {
            LearningRate::Constant(t) => t,
            LearningRate::VisitPolynomial => 0.1 * 101.0 / (100.0 + pair_updates as f64),
        }
    }
}

impl fmt::Display for LearningRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LearningRate::Constant(t) => write!(f, "const:{t}"),
            LearningRate::VisitPolynomial => write!(f, "poly"),
        }
    }
}

impl FromStr for LearningRate {
    type Err = MevError;

    /// `const:<tau>` or `poly`.
    fn from_str(s: &str) -> Result<Self> {
        match split_tag(s) {
            (n, Some(v)) if n == "const" => {
                let t: f64 = v.trim().parse().map_err(|_| invalid(format!("bad step size in `{s}`")))?;
                if !(t > 0.0 && t <= 1.0) {
                    return Err(invalid("tau must lie in (0, 1]"));
                }
                Ok(LearningRate::Constant(t))
            }
            (n, None) if n == "poly" || n == "polynomial" => Ok(LearningRate::VisitPolynomial),
            _ => Err(invalid(format!("unknown learning rate `{s}`"))),
        }
    }
}

impl TryFrom<String> for LearningRate {
    type Error = MevError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LearningRate> for String {
    fn from(l: LearningRate) -> String {
        l.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabularConfig {
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub exploration: Exploration,
    pub learning_rate: LearningRate,
    pub episodes: usize,
    pub init_process_var: f64,
    /// Episodes are cut off after this many steps.
    pub max_steps: usize,
}

impl Default for TabularConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Q,
            gamma: 1.0,
            exploration: Exploration::EpsConstant(0.1),
            learning_rate: LearningRate::Constant(0.1),
            episodes: 300,
            init_process_var: 1.0,
            max_steps: 100_000,
        }
    }
}

impl TabularConfig {
    pub fn validate(&self) -> Result<()> {
        self.algorithm.validate()?;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid("gamma must lie in [0, 1]"));
        }
        if let Exploration::EpsConstant(e) = self.exploration {
            if !(0.0..=1.0).contains(&e) {
                return Err(invalid("epsilon must lie in [0, 1]"));
            }
        }
        if let LearningRate::Constant(t) = self.learning_rate {
            if !(t > 0.0 && t <= 1.0) {
                return Err(invalid("tau must lie in (0, 1]"));
            }
        }
        if self.episodes == 0 {
            return Err(invalid("episodes must be positive"));
        }
        if !(self.init_process_var.is_finite() && self.init_process_var > 0.0) {
            return Err(invalid("init_process_var must be positive"));
        }
        if self.max_steps == 0 {
            return Err(invalid("max_steps must be positive"));
        }
        Ok(())
    }
}

/// Algorithm with its kernel prepared.
#[derive(Debug, Clone)]
pub struct TargetRule {
    algorithm: Algorithm,
    kernel: Option<Kernel>,
}

impl TargetRule {
    pub fn new(algorithm: Algorithm) -> Result<Self> {
        let kernel = match algorithm {
            Algorithm::TeQ { alpha } => Some(Kernel::new(KernelSpec::indicator(alpha)?)?),
            Algorithm::KeQ(spec) => Some(Kernel::new(spec)?),
            _ => None,
        };
        Ok(Self { algorithm, kernel })
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }
}

/// Action values at s′ as seen by the target.
#[derive(Debug, Clone, Copy)]
pub struct NextValues<'a> {
    /// Table that picks the action (the updated table for Double Q).
    pub select: &'a [f64],
    /// Table that evaluates it; equal to `select` except for Double Q.
    pub evaluate: &'a [f64],
    /// Variance estimates of `select`, used by TE/KE/WE targets.
    pub mean_vars: &'a [f64],
}

/// Target value and the number of action values it averages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub value: f64,
    pub retained: usize,
}

/// y = r + γ·v(s′), with v = 0 when s′ is terminal (`next` is `None`).
pub fn compute_target(
    rule: &TargetRule,
    reward: f64,
    gamma: f64,
    next: Option<NextValues<'_>>,
    rng: &mut SimRng,
) -> Result<Target> {
    let Some(n) = next else {
        return Ok(Target { value: reward, retained: 0 });
    };
    let (v, retained) = match rule.algorithm {
        Algorithm::Q => (n.select[argmax(n.select)], 1),
        Algorithm::DoubleQ => (n.evaluate[argmax(n.select)], 1),
        Algorithm::TeQ { .. } | Algorithm::KeQ(_) => {
            let k = rule.kernel.as_ref().ok_or_else(|| MevError::Invariant("kernel not prepared".into()))?;
            kernel_weighted_value(n.select, n.mean_vars, k, None)?
        }
        Algorithm::WeQ => weighted_value(n.select, n.mean_vars, WE_DEFAULT_DRAWS, rng, None)?,
    };
    Ok(Target { value: reward + gamma * v, retained })
}

/// ε-greedy choice; ties among greedy actions are broken uniformly.
pub fn epsilon_greedy<R: Rng + ?Sized>(values: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if rng.random::<f64>() < epsilon {
        return rng.random_range(0..values.len());
    }
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties = values.iter().filter(|&&v| v == best).count();
    let mut k = if ties > 1 { rng.random_range(0..ties) } else { 0 };
    for (i, &v) in values.iter().enumerate() {
        if v == best {
            if k == 0 {
                return i;
            }
            k -= 1;
        }
    }
    0
}

/// Diagnostics of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// Undiscounted sum of rewards.
    pub ret: f64,
    pub steps: usize,
    /// Action taken in the start state.
    pub first_action: usize,
    /// max_a Q̂(S, a) after the episode (averaged tables for Double Q).
    pub max_q_start: f64,
    /// Q̂(S, 0) after the episode.
    pub q_start_first: f64,
    /// Number of averaged action values in the last target for (S, 0)
    /// during the episode, if that pair was updated.
    pub retained: Option<usize>,
}

/// Learner state of a single run.
pub struct TabularLearner<'e, E: Environment + ?Sized> {
    env: &'e E,
    cfg: TabularConfig,
    rule: TargetRule,
    tables: Vec<QTable>,
    trackers: Vec<VarianceTracker>,
    stride: usize,
    scratch_q: Vec<f64>,
    scratch_var: Vec<f64>,
}

impl<'e, E: Environment + ?Sized> TabularLearner<'e, E> {
    pub fn new(env: &'e E, cfg: TabularConfig) -> Result<Self> {
        cfg.validate()?;
        let n_tables = if cfg.algorithm == Algorithm::DoubleQ { 2 } else { 1 };
        let stride = env.max_action_count();
        Ok(Self {
            env,
            cfg,
            rule: TargetRule::new(cfg.algorithm)?,
            tables: (0..n_tables).map(|_| QTable::new(env)).collect(),
            trackers: vec![VarianceTracker::new(cfg.init_process_var); env.state_count() * stride],
            stride,
            scratch_q: Vec::with_capacity(stride),
            scratch_var: Vec::with_capacity(stride),
        })
    }

    pub fn tables(&self) -> &[QTable] {
        &self.tables
    }

    pub fn tracker(&self, s: State, a: usize) -> &VarianceTracker {
        &self.trackers[s.0 * self.stride + a]
    }

    /// Q̂(s, ·), averaged over the tables.
    pub fn values(&self, s: State) -> Vec<f64> {
        let k = self.tables.len() as f64;
        let mut v = self.tables[0].row(s).to_vec();
        for t in &self.tables[1..] {
            v.iter_mut().zip(t.row(s)).for_each(|(x, y)| *x += y);
        }
        if k > 1.0 {
            v.iter_mut().for_each(|x| *x /= k);
        }
        v
    }

    fn behaviour_values(&mut self, s: State) {
        self.scratch_q.clear();
        self.scratch_q.extend_from_slice(self.tables[0].row(s));
        for t in &self.tables[1..] {
            self.scratch_q.iter_mut().zip(t.row(s)).for_each(|(x, y)| *x += y);
        }
    }

    /// Runs one episode from the environment's start state.
    pub fn run_episode(&mut self, rng: &mut SimRng) -> Result<EpisodeRecord> {
        let start = self.env.reset(rng);
        let mut s = start;
        let mut ret = 0.0;
        let mut first_action = 0;
        let mut retained = None;
        let mut steps = 0;
        while steps < self.cfg.max_steps {
            let n_s = self.tables[0].visit_state(s);
            let eps = self.cfg.exploration.epsilon(n_s);
            self.behaviour_values(s);
            let a = epsilon_greedy(&self.scratch_q, eps, rng);
            if steps == 0 {
                first_action = a;
            }
            let step = self.env.step(s, a, rng)?;
            ret += step.reward;
            steps += 1;

            let u = if self.tables.len() == 2 { rng.random_range(0..2usize) } else { 0 };
            let n_sa = self.tables[u].count_update(s, a);
            let tau = self.cfg.learning_rate.tau(n_sa);
            let cell = s.0 * self.stride + a;
            let track = self.cfg.algorithm.uses_trackers();
            if track {
                self.trackers[cell].update_weights(tau);
            }
            let target = if step.done {
                compute_target(&self.rule, step.reward, self.cfg.gamma, None, rng)?
            } else {
                let s2 = step.next_state;
                if track {
                    self.scratch_var.clear();
                    let base = s2.0 * self.stride;
                    let count = self.tables[0].row(s2).len();
                    self.scratch_var.extend(self.trackers[base..base + count].iter().map(|t| t.variance()));
                }
                let select = self.tables[u].row(s2);
                let evaluate = self.tables[self.tables.len() - 1 - u].row(s2);
                let next = NextValues { select, evaluate, mean_vars: &self.scratch_var };
                compute_target(&self.rule, step.reward, self.cfg.gamma, Some(next), rng)?
            };
            let q = self.tables[u].get(s, a);
            if track {
                self.trackers[cell].update_process(tau, target.value, q);
            }
            self.tables[u].set(s, a, q + tau * (target.value - q));
            if s == start && a == 0 {
                retained = Some(target.retained);
            }
            if step.done {
                break;
            }
            s = step.next_state;
        }
        let v = self.values(start);
        Ok(EpisodeRecord {
            ret,
            steps,
            first_action,
            max_q_start: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            q_start_first: v[0],
            retained,
        })
    }
}

/// Per-episode records of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub run: usize,
    pub episodes: Vec<EpisodeRecord>,
}

/// Full training log over independent runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub algorithm: Algorithm,
    pub runs: Vec<RunLog>,
}

pub const TRAIN_LOG_CSV_HEADER: &str = "run,episode,return,steps,first_action,max_q_start,q_start_first,retained";

impl TrainLog {
    /// One row per (run, episode); `retained` is empty when undefined.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{TRAIN_LOG_CSV_HEADER}")?;
        for r in &self.runs {
            for (e, rec) in r.episodes.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    r.run,
                    e,
                    rec.ret,
                    rec.steps,
                    rec.first_action,
                    rec.max_q_start,
                    rec.q_start_first,
                    rec.retained.map(|x| x.to_string()).unwrap_or_default()
                )?;
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> Vec<EpisodeSummary> {
        let episodes = self.runs.first().map_or(0, |r| r.episodes.len());
        let mut acc = vec![EpisodeAcc::default(); episodes];
        for r in &self.runs {
            for (a, rec) in acc.iter_mut().zip(&r.episodes) {
                a.push(rec);
            }
        }
        acc.iter().enumerate().map(|(e, a)| a.finish(e)).collect()
    }

    /// Mean over runs of the per-run average return of the last `k` episodes,
    /// with its standard error.
    pub fn final_return(&self, k: usize) -> (f64, f64) {
        let per_run: Vec<f64> = self
            .runs
            .iter()
            .map(|r| {
                let tail = &r.episodes[r.episodes.len().saturating_sub(k)..];
                tail.iter().map(|x| x.ret).sum::<f64>() / tail.len().max(1) as f64
            })
            .collect();
        let n = per_run.len() as f64;
        let mean = crate::stats::mean(&per_run);
        let se = if per_run.len() > 1 { (crate::stats::sample_variance(&per_run) / n).sqrt() } else { f64::NAN };
        (mean, se)
    }
}

/// Cross-run averages for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub runs: usize,
    pub mean_return: f64,
    pub return_se: f64,
    /// Fraction of runs whose first action was action 0.
    pub first_action_zero: f64,
    pub mean_max_q_start: f64,
    pub mean_q_start_first: f64,
    /// Mean retained count over runs that updated (S, 0); NaN if none did.
    pub mean_retained: f64,
}

pub const SUMMARY_CSV_HEADER: &str =
    "episode,runs,mean_return,return_se,first_action_zero,mean_max_q_start,mean_q_start_first,mean_retained";

impl EpisodeSummary {
    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.episode,
            self.runs,
            self.mean_return,
            self.return_se,
            self.first_action_zero,
            self.mean_max_q_start,
            self.mean_q_start_first,
            self.mean_retained
        )
    }
}

pub fn write_summary_csv<W: Write>(mut out: W, rows: &[EpisodeSummary]) -> std::io::Result<()> {
    writeln!(out, "{SUMMARY_CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_fields())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
struct EpisodeAcc {
    n: usize,
    ret: f64,
    ret_sq: f64,
    zero: usize,
    max_q: f64,
    q_first: f64,
    retained: f64,
    n_retained: usize,
}

impl EpisodeAcc {
    fn push(&mut self, r: &EpisodeRecord) {
        self.n += 1;
        self.ret += r.ret;
        self.ret_sq += r.ret * r.ret;
        self.zero += (r.first_action == 0) as usize;
        self.max_q += r.max_q_start;
        self.q_first += r.q_start_first;
        if let Some(k) = r.retained {
            self.retained += k as f64;
            self.n_retained += 1;
        }
    }

    fn merge(&mut self, o: &EpisodeAcc) {
        self.n += o.n;
        self.ret += o.ret;
        self.ret_sq += o.ret_sq;
        self.zero += o.zero;
        self.max_q += o.max_q;
        self.q_first += o.q_first;
        self.retained += o.retained;
        self.n_retained += o.n_retained;
    }

    fn finish(&self, episode: usize) -> EpisodeSummary {
        let n = self.n as f64;
        let mean = self.ret / n;
        let var = if self.n > 1 { ((self.ret_sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { f64::NAN };
        EpisodeSummary {
            episode,
            runs: self.n,
            mean_return: mean,
            return_se: (var / n).sqrt(),
            first_action_zero: self.zero as f64 / n,
            mean_max_q_start: self.max_q / n,
            mean_q_start_first: self.q_first / n,
            mean_retained: if self.n_retained > 0 { self.retained / self.n_retained as f64 } else { f64::NAN },
        }
    }
}

/// Runs per parallel work unit of the summary trainer.
const RUN_BLOCK: usize = 64;

fn train_run<E: Environment + ?Sized>(env: &E, cfg: &TabularConfig, seed: u64, run: usize) -> Result<Vec<EpisodeRecord>> {
    let mut rng = stream_rng(seed, &[run as u64]);
    let mut learner = TabularLearner::new(env, *cfg)?;
    (0..cfg.episodes).map(|_| learner.run_episode(&mut rng)).collect()
}

/// Trains `runs` independent learners in parallel and keeps every episode
/// record. Run `r` uses the stream keyed by (seed, r).
pub fn train_tabular<E: Environment + ?Sized>(env: &E, cfg: &TabularConfig, runs: usize, seed: u64) -> Result<TrainLog> {
    cfg.validate()?;
    let logs: Vec<Result<RunLog>> = (0..runs)
        .into_par_iter()
        .map(|r| Ok(RunLog { run: r, episodes: train_run(env, cfg, seed, r)? }))
        .collect();
    Ok(TrainLog { algorithm: cfg.algorithm, runs: logs.into_iter().collect::<Result<_>>()? })
}

/// Same runs as [`train_tabular`] reduced to per-episode averages without
/// storing individual runs.
pub fn train_tabular_summary<E: Environment + ?Sized>(
    env: &E,
    cfg: &TabularConfig,
    runs: usize,
    seed: u64,
) -> Result<Vec<EpisodeSummary>> {
    cfg.validate()?;
    if runs == 0 {
        return Err(invalid("runs must be positive"));
    }
    let parts: Vec<Result<Vec<EpisodeAcc>>> = (0..runs.div_ceil(RUN_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![EpisodeAcc::default(); cfg.episodes];
            for r in b * RUN_BLOCK..((b + 1) * RUN_BLOCK).min(runs) {
                for (a, rec) in acc.iter_mut().zip(train_run(env, cfg, seed, r)?) {
                    a.push(&rec);
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![EpisodeAcc::default(); cfg.episodes];
    for p in parts {
        for (t, a) in total.iter_mut().zip(p?) {
            t.merge(&a);
        }
    }
    Ok(total.iter().enumerate().map(|(e, a)| a.finish(e)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{MaxBiasMdp, StepResult};
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    #[test]
    fn tracker_examples() {
        let mut t = VarianceTracker::new(1.0);
        t.update_weights(0.3);
        assert_eq!(t.n_eff(), 1.0);
        let mut t = VarianceTracker::new(1.0);
        t.update_weights(0.5);
        t.update_weights(0.5);
        assert_eq!(t.omega, 0.75);
        assert_eq!(t.omega_sq, 0.3125);
        assert!((t.n_eff() - 1.8).abs() < 1e-15);
        for tau in [0.05, 0.1, 0.5] {
            let mut t = VarianceTracker::new(1.0);
            for _ in 0..10_000 {
                t.update_weights(tau);
            }
            assert!((t.n_eff() - (2.0 - tau) / tau).abs() < 1e-6);
        }
    }

    #[test]
    fn process_variance_recursion() {
        let mut t = VarianceTracker::new(1.0);
        t.update(0.5, 3.0, 1.0);
        // (1 − 0.5)(1 + 0.5·4) = 1.5, n_eff = 1
        assert_eq!(t.process_var, 1.5);
        assert_eq!(t.variance(), 1.5);
    }

    #[test]
    fn tracker_closed_form() {
        for tau in [0.01, 0.1, 0.37, 1.0] {
            let mut t = VarianceTracker::new(1.0);
            for step in 1..=200i32 {
                t.update_weights(tau);
                let keep: f64 = 1.0 - tau;
                let omega = 1.0 - keep.powi(step);
                let omega_sq = if tau == 1.0 {
                    1.0
                } else {
                    tau * tau * (1.0 - keep.powi(2 * step)) / (1.0 - keep * keep)
                };
                assert!((t.omega - omega).abs() <= 1e-12 * omega, "{tau} {step}");
                assert!((t.omega_sq - omega_sq).abs() <= 1e-12 * omega_sq, "{tau} {step}");
            }
        }
    }

    #[test]
    fn parse_forms() {
        assert_eq!("q".parse::<Algorithm>().unwrap(), Algorithm::Q);
        assert_eq!("double-q".parse::<Algorithm>().unwrap(), Algorithm::DoubleQ);
        assert_eq!("te-q:0.05".parse::<Algorithm>().unwrap(), Algorithm::TeQ { alpha: 0.05 });
        assert_eq!(
            "ke-q:gaussian:1".parse::<Algorithm>().unwrap(),
            Algorithm::KeQ(KernelSpec::GaussianCdf { lambda: 1.0 })
        );
        for a in [Algorithm::Q, Algorithm::DoubleQ, Algorithm::WeQ, Algorithm::TeQ { alpha: 0.1 }] {
            assert_eq!(a.to_string().parse::<Algorithm>().unwrap(), a);
        }
        assert!("te-q:0.7".parse::<Algorithm>().is_err());
        assert_eq!("anneal".parse::<Exploration>().unwrap(), Exploration::EpsVisitAnnealed);
        assert_eq!("eps:0.1".parse::<Exploration>().unwrap(), Exploration::EpsConstant(0.1));
        assert_eq!("poly".parse::<LearningRate>().unwrap(), LearningRate::VisitPolynomial);
        assert!("const:0".parse::<LearningRate>().is_err());
    }

    #[test]
    fn schedules() {
        assert!((LearningRate::VisitPolynomial.tau(1) - 0.1).abs() < 1e-15);
        assert!((LearningRate::VisitPolynomial.tau(101) - 10.1 / 201.0).abs() < 1e-15);
        assert_eq!(Exploration::EpsVisitAnnealed.epsilon(1), 1.0);
        assert_eq!(Exploration::EpsVisitAnnealed.epsilon(4), 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(TabularConfig::default().validate().is_ok());
        assert!(TabularConfig { gamma: 1.5, ..Default::default() }.validate().is_err());
        assert!(TabularConfig { exploration: Exploration::EpsConstant(-0.1), ..Default::default() }
            .validate()
            .is_err());
        assert!(TabularConfig { learning_rate: LearningRate::Constant(0.0), ..Default::default() }
            .validate()
            .is_err());
        let toml_like: TabularConfig =
            serde_json::from_str(r#"{"algorithm":"te-q:0.1","exploration":"anneal"}"#).unwrap();
        assert_eq!(toml_like.algorithm, Algorithm::TeQ { alpha: 0.1 });
    }

    fn rule(a: Algorithm) -> TargetRule {
        TargetRule::new(a).unwrap()
    }

    fn all_rules() -> Vec<TargetRule> {
        [
            Algorithm::Q,
            Algorithm::DoubleQ,
            Algorithm::TeQ { alpha: 0.1 },
            Algorithm::KeQ(KernelSpec::GaussianCdf { lambda: 1.0 }),
            Algorithm::WeQ,
        ]
        .into_iter()
        .map(rule)
        .collect()
    }

    #[test]
    fn target_examples() {
        let mut rng = stream_rng(0, &[]);
        let q = [1.0, -2.0, 0.5];
        let v = [0.3, 0.2, 0.9];
        let next = NextValues { select: &q, evaluate: &q, mean_vars: &v };
        for r in all_rules() {
            let t = compute_target(&r, 1.5, 0.0, Some(next), &mut rng).unwrap();
            assert_eq!(t.value, 1.5, "{:?}", r.algorithm());
            let t = compute_target(&r, -4.0, 0.9, None, &mut rng).unwrap();
            assert_eq!(t.value, -4.0);
        }
        let flat = [0.7; 4];
        let vars = [0.4; 4];
        for a in [Algorithm::TeQ { alpha: 0.05 }, Algorithm::KeQ(KernelSpec::GaussianCdf { lambda: 1.0 })] {
            let next = NextValues { select: &flat, evaluate: &flat, mean_vars: &vars };
            let t = compute_target(&rule(a), 1.0, 0.5, Some(next), &mut rng).unwrap();
            assert_eq!(t, Target { value: 1.35, retained: 4 });
        }
        let qa = [1.0, 3.0];
        let qb = [10.0, 20.0];
        let next = NextValues { select: &qa, evaluate: &qb, mean_vars: &[1.0, 1.0] };
        assert_eq!(compute_target(&rule(Algorithm::DoubleQ), 0.0, 1.0, Some(next), &mut rng).unwrap().value, 20.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn target_orderings(
            rows in prop::collection::vec((-50.0f64..50.0, 0.0f64..20.0), 1..9),
            r in -5.0f64..5.0,
            gamma in 0.0f64..=1.0,
            a1 in 0.01f64..0.5,
            a2 in 0.01f64..0.5,
        ) {
            let q: Vec<f64> = rows.iter().map(|x| x.0).collect();
            let v: Vec<f64> = rows.iter().map(|x| x.1).collect();
            let mut rng = stream_rng(1, &[]);
            let next = NextValues { select: &q, evaluate: &q, mean_vars: &v };
            let mut tgt = |a: Algorithm| compute_target(&rule(a), r, gamma, Some(next), &mut rng).unwrap().value;
            let yq = tgt(Algorithm::Q);
            prop_assert_eq!(tgt(Algorithm::TeQ { alpha: 0.5 }), yq);
            prop_assert_eq!(tgt(Algorithm::DoubleQ), yq);
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let (t_lo, t_hi) = (tgt(Algorithm::TeQ { alpha: lo }), tgt(Algorithm::TeQ { alpha: hi }));
            prop_assert!(t_lo <= t_hi);
            prop_assert!(t_hi <= yq);
            let ke = tgt(Algorithm::KeQ(KernelSpec::GaussianCdf { lambda: 1.0 }));
            prop_assert!(ke <= yq);
        }
    }

    #[test]
    fn epsilon_greedy_frequencies() {
        let mut rng = stream_rng(5, &[]);
        let n = 200_000;
        let values = [0.0, 1.0, 0.5, -1.0];
        let hits = (0..n).filter(|_| epsilon_greedy(&values, 0.1, &mut rng) == 1).count();
        // greedy share is 0.9 + 0.1/4
        let p = hits as f64 / n as f64;
        assert!((p - 0.925).abs() < 4.0 * (0.925 * 0.075 / n as f64).sqrt(), "{p}");
        let tied = [2.0, 2.0, 0.0];
        let zero = (0..n).filter(|_| epsilon_greedy(&tied, 0.0, &mut rng) == 0).count();
        let p = zero as f64 / n as f64;
        assert!((p - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt(), "{p}");
        assert!((0..1000).all(|_| epsilon_greedy(&tied, 0.0, &mut rng) != 2));
    }

    /// 0 → 1 with reward 1, then 1 → end with reward 2; one action each.
    struct Chain;

    impl Environment for Chain {
        fn state_count(&self) -> usize {
            2
        }
        fn max_action_count(&self) -> usize {
            1
        }
        fn action_count(&self, _: State) -> usize {
            1
        }
        fn reset(&self, _: &mut SimRng) -> State {
            State(0)
        }
        fn step(&self, s: State, a: usize, _: &mut SimRng) -> Result<StepResult> {
            if a != 0 {
                return Err(MevError::InvalidAction { action: a, count: 1 });
            }
            Ok(match s.0 {
                0 => StepResult { next_state: State(1), reward: 1.0, done: false },
                1 => StepResult { next_state: State::TERMINAL, reward: 2.0, done: true },
                _ => return Err(MevError::TerminalStep),
            })
        }
    }

    #[test]
    fn chain_backups() {
        let cfg = TabularConfig { learning_rate: LearningRate::Constant(1.0), ..Default::default() };
        let mut rng = stream_rng(0, &[]);
        let mut l = TabularLearner::new(&Chain, cfg).unwrap();
        let rec = l.run_episode(&mut rng).unwrap();
        assert_eq!(rec.ret, 3.0);
        assert_eq!(rec.steps, 2);
        // Q(0) was backed up while Q(1) was still zero
        assert_eq!(l.tables()[0].get(State(0), 0), 1.0);
        assert_eq!(l.tables()[0].get(State(1), 0), 2.0);
        l.run_episode(&mut rng).unwrap();
        assert_eq!(l.tables()[0].get(State(0), 0), 3.0);
        assert_eq!(l.tables()[0].state_visits(State(0)), 2);
        assert_eq!(l.tables()[0].pair_updates(State(1), 0), 2);
    }

    #[test]
    fn trackers_follow_updates() {
        let cfg = TabularConfig {
            algorithm: Algorithm::TeQ { alpha: 0.1 },
            learning_rate: LearningRate::Constant(0.5),
            ..Default::default()
        };
        let mut rng = stream_rng(0, &[]);
        let mut l = TabularLearner::new(&Chain, cfg).unwrap();
        l.run_episode(&mut rng).unwrap();
        l.run_episode(&mut rng).unwrap();
        let t = l.tracker(State(1), 0);
        assert!((t.n_eff() - 1.8).abs() < 1e-15);
        // targets 2 and 2 against values 0 and 1
        let first = 0.5 * (1.0 + 0.5 * 4.0);
        assert_eq!(t.process_var, 0.5 * (first + 0.5 * 1.0));
    }

    #[test]
    fn maxbias_diagnostics_and_determinism() {
        let env = MaxBiasMdp::default();
        let cfg = TabularConfig { episodes: 50, algorithm: Algorithm::TeQ { alpha: 0.05 }, ..Default::default() };
        let log = train_tabular(&env, &cfg, 8, 3).unwrap();
        assert_eq!(log.runs.len(), 8);
        for r in &log.runs {
            for e in &r.episodes {
                assert!(e.steps <= 2 && e.first_action < 2);
                assert_eq!(e.retained.is_some(), e.first_action == 0);
                if let Some(k) = e.retained {
                    assert!((1..=8).contains(&k));
                }
            }
        }
        let summary = train_tabular_summary(&env, &cfg, 8, 3).unwrap();
        let from_log = log.summary();
        for (a, b) in summary.iter().zip(&from_log) {
            assert_eq!(a.runs, b.runs);
            assert!((a.mean_return - b.mean_return).abs() < 1e-12);
            assert_eq!(a.first_action_zero, b.first_action_zero);
        }
        assert_eq!(train_tabular(&env, &cfg, 8, 3).unwrap(), log);
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(TRAIN_LOG_CSV_HEADER));
        assert_eq!(text.lines().count(), 1 + 8 * 50);
    }

    #[test]
    fn double_q_learns_both_tables() {
        let env = MaxBiasMdp::default();
        let cfg = TabularConfig { episodes: 200, algorithm: Algorithm::DoubleQ, ..Default::default() };
        let mut rng = stream_rng(9, &[]);
        let mut l = TabularLearner::new(&env, cfg).unwrap();
        for _ in 0..200 {
            l.run_episode(&mut rng).unwrap();
        }
        let (a, b) = (&l.tables()[0], &l.tables()[1]);
        let total = a.pair_updates(MaxBiasMdp::A, 0) + b.pair_updates(MaxBiasMdp::A, 0)
            + a.pair_updates(MaxBiasMdp::A, 1)
            + b.pair_updates(MaxBiasMdp::A, 1);
        assert_eq!(total, 200);
        assert!(a.pair_updates(MaxBiasMdp::A, 1) > 0 && b.pair_updates(MaxBiasMdp::A, 1) > 0);
    }
}
