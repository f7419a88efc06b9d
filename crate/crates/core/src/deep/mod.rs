//! Bootstrapped deep Q-learning at toy scale: a small rectifier network with
//! K heads, replay, kernel-weighted targets, bias estimation and adaptive α.

mod adam;
mod ensemble;
mod mlp;
mod replay;

pub use adam::AdamState;
pub use ensemble::{EnsembleNet, TargetKind, TrainScratch, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mlp::{param_count_for, ForwardCache, Matrix, Mlp};
pub use replay::{ReplayBuffer, TransitionRef};

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{encode_features, Environment, State};
use crate::error::{invalid, MevError, Result};
use crate::estimators::{argmax, Kernel, KernelSpec};
use crate::rng::{stream_rng, SimRng};
use crate::tabular::{QTable, TabularLearner};

/// Per-head action values at a state.
pub trait ActionValues {
    fn head_count(&self) -> usize;
    fn values(&self, head: usize, state: State) -> Result<Vec<f64>>;
}

impl ActionValues for QTable {
    fn head_count(&self) -> usize {
        1
    }

    fn values(&self, _head: usize, state: State) -> Result<Vec<f64>> {
        Ok(self.row(state).to_vec())
    }
}

/// Values averaged over the learner's tables.
impl<E: Environment + ?Sized> ActionValues for TabularLearner<'_, E> {
    fn head_count(&self) -> usize {
        1
    }

    fn values(&self, _head: usize, state: State) -> Result<Vec<f64>> {
        Ok(TabularLearner::values(self, state))
    }
}

/// An ensemble read through one-hot state features.
pub struct EnsembleView<'a, E: Environment + ?Sized> {
    pub net: &'a EnsembleNet,
    pub env: &'a E,
}

impl<E: Environment + ?Sized> ActionValues for EnsembleView<'_, E> {
    fn head_count(&self) -> usize {
        self.net.heads()
    }

    fn values(&self, head: usize, state: State) -> Result<Vec<f64>> {
        let q = self.net.q_values(&encode_features(self.env, state)?)?;
        Ok(self.net.head(&q, head).to_vec())
    }
}

/// Greedy action over the actions available in `state`.
fn greedy<V: ActionValues + ?Sized, E: Environment + ?Sized>(
    view: &V,
    env: &E,
    head: usize,
    state: State,
) -> Result<(usize, Vec<f64>)> {
    let mut q = view.values(head, state)?;
    q.truncate(env.action_count(state));
    Ok((argmax(&q), q))
}

/// Uniformly drawn state an agent can occupy.
pub fn uniform_start<E: Environment + ?Sized>(env: &E, rng: &mut SimRng) -> Result<State> {
    for _ in 0..100_000 {
        let s = State(rng.random_range(0..env.state_count()));
        if env.is_valid_state(s) {
            return Ok(s);
        }
    }
    Err(invalid("no valid start state found"))
}

/// Mean of Q̂(s, a) − R over the greedy episodes of every head, averaged over
/// heads. R is the discounted return observed until termination or the step cap.
pub fn estimate_bias<V: ActionValues + ?Sized, E: Environment + ?Sized>(
    view: &V,
    env: &E,
    episodes_per_head: usize,
    gamma: f64,
    max_steps: usize,
    start: &mut dyn FnMut(&mut SimRng) -> Result<State>,
    rng: &mut SimRng,
) -> Result<f64> {
    let mut head_means = Vec::with_capacity(view.head_count());
    let mut qs = Vec::new();
    let mut rewards = Vec::new();
    for k in 0..view.head_count() {
        let (mut total, mut count) = (0.0, 0usize);
        for _ in 0..episodes_per_head {
            let mut s = env.set_state(start(rng)?)?;
            qs.clear();
            rewards.clear();
            for _ in 0..max_steps {
                let (a, q) = greedy(view, env, k, s)?;
                let step = env.step(s, a, rng)?;
                qs.push(q[a]);
                rewards.push(step.reward);
                if step.done {
                    break;
                }
                s = step.next_state;
            }
            let mut ret = 0.0;
            for (q, r) in qs.iter().zip(&rewards).rev() {
                ret = r + gamma * ret;
                total += q - ret;
                count += 1;
            }
        }
        if count > 0 {
            head_means.push(total / count as f64);
        }
    }
    if head_means.is_empty() {
        return Err(MevError::NoTuples);
    }
    Ok(head_means.iter().sum::<f64>() / head_means.len() as f64)
}

/// Visited pair of an n-step roll-out with its return and current estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NStepTuple {
    pub state: State,
    pub action: usize,
    pub ret: f64,
    pub q: f64,
}

/// Greedy roll-out of `horizon` steps under head `head`; each visited pair gets
/// the discounted rewards to the horizon plus γ^(remaining) max_a Q̂(s_end, a),
/// with no bootstrap after termination.
#[allow(clippy::too_many_arguments)]
pub fn n_step_return<V: ActionValues + ?Sized, E: Environment + ?Sized>(
    env: &E,
    view: &V,
    head: usize,
    start: State,
    horizon: usize,
    gamma: f64,
    rng: &mut SimRng,
) -> Result<Vec<NStepTuple>> {
    let mut s = env.set_state(start)?;
    let mut out = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut terminal = false;
    for _ in 0..horizon {
        let (a, q) = greedy(view, env, head, s)?;
        let step = env.step(s, a, rng)?;
        out.push(NStepTuple { state: s, action: a, ret: 0.0, q: q[a] });
        rewards.push(step.reward);
        if step.done {
            terminal = true;
            break;
        }
        s = step.next_state;
    }
    let mut ret = if terminal {
        0.0
    } else {
        let q = greedy(view, env, head, s)?.1;
        q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    };
    for (t, r) in out.iter_mut().zip(&rewards).rev() {
        ret = r + gamma * ret;
        t.ret = ret;
    }
    Ok(out)
}

pub const ALPHA_MIN: f64 = 0.01;
pub const ALPHA_MAX: f64 = 0.5;

/// Adaptive significance level of the TE targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaState {
    pub alpha: f64,
    pub step_size: f64,
    pub horizon: usize,
}

impl AdaState {
    /// α ← clamp(α + (τ_Ada/K)·Σ(R − Q̂), 0.01, 0.5).
    pub fn apply(&mut self, residual_sum: f64, heads: usize) {
        let next = self.alpha + self.step_size / heads as f64 * residual_sum;
        self.alpha = if next.is_nan() { self.alpha } else { next.clamp(ALPHA_MIN, ALPHA_MAX) };
    }
}

/// One α update from a buffer-sampled roll-out per head. Returns false when
/// the buffer is empty and nothing changed.
pub fn ada_alpha_update<V: ActionValues + ?Sized, E: Environment + ?Sized>(
    state: &mut AdaState,
    view: &V,
    env: &E,
    buffer: &ReplayBuffer,
    gamma: f64,
    rng: &mut SimRng,
) -> Result<bool> {
    if buffer.is_empty() {
        return Ok(false);
    }
    let mut sum = 0.0;
    for k in 0..view.head_count() {
        let start = buffer.sample_state(rng).ok_or(MevError::EmptyInput)?;
        for t in n_step_return(env, view, k, start, state.horizon, gamma, rng)? {
            sum += t.ret - t.q;
        }
    }
    state.apply(sum, view.head_count());
    Ok(true)
}

/// Deep learner family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DeepVariant {
    Dqn,
    Ddqn,
    Bdqn,
    TeBdqn { alpha: f64 },
    KeBdqn(KernelSpec),
    AdaTeBdqn,
}

impl DeepVariant {
    pub fn is_bootstrapped(&self) -> bool {
        !matches!(self, DeepVariant::Dqn | DeepVariant::Ddqn)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DeepVariant::TeBdqn { alpha } => crate::estimators::validate_alpha(*alpha),
            DeepVariant::KeBdqn(spec) => spec.validate(),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for DeepVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeepVariant::Dqn => write!(f, "DQN"),
            DeepVariant::Ddqn => write!(f, "DDQN"),
            DeepVariant::Bdqn => write!(f, "BDQN"),
            DeepVariant::TeBdqn { alpha } => write!(f, "TE-BDQN({alpha})"),
            DeepVariant::KeBdqn(spec) => write!(f, "KE-BDQN({spec})"),
            DeepVariant::AdaTeBdqn => write!(f, "Ada-TE-BDQN"),
        }
    }
}

impl FromStr for DeepVariant {
    type Err = MevError;

    /// `dqn`, `ddqn`, `bdqn`, `te-bdqn:<alpha>`, `ke-bdqn:<kernel>`, `ada-te-bdqn`
    /// or the display forms.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let (name, arg) = match (t.find('('), t.ends_with(')')) {
            (Some(i), true) => (&t[..i], Some(&t[i + 1..t.len() - 1])),
            _ => match t.split_once(':') {
                Some((a, b)) => (a, Some(b)),
                None => (t, None),
            },
        };
        let v = match (name.to_ascii_lowercase().replace(['-', '_'], "").as_str(), arg) {
            ("dqn", None) => DeepVariant::Dqn,
            ("ddqn", None) => DeepVariant::Ddqn,
            ("bdqn", None) => DeepVariant::Bdqn,
            ("adatebdqn", None) => DeepVariant::AdaTeBdqn,
            ("tebdqn", Some(a)) => DeepVariant::TeBdqn {
                alpha: a.trim().parse().map_err(|_| invalid(format!("bad alpha in `{s}`")))?,
            },
            ("kebdqn", Some(k)) => DeepVariant::KeBdqn(k.parse()?),
            _ => return Err(invalid(format!("unknown deep variant `{s}`"))),
        };
        v.validate()?;
        Ok(v)
    }
}

impl TryFrom<String> for DeepVariant {
    type Error = MevError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DeepVariant> for String {
    fn from(v: DeepVariant) -> String {
        v.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepConfig {
    /// Trunk widths.
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gamma: f64,
    /// Steps between target syncs (C).
    pub target_period: usize,
    pub buffer_capacity: usize,
    pub min_fill: usize,
    /// Bootstrap heads (K) of the BDQN variants.
    pub heads: usize,
    /// Bernoulli mask probability.
    pub mask_p: f64,
    pub alpha0: f64,
    pub ada_horizon: usize,
    pub ada_step_size: f64,
    pub eps_initial: f64,
    pub eps_final: f64,
    pub eps_steps: usize,
    pub total_steps: usize,
    /// Steps between evaluation and bias-estimation rounds.
    pub log_every: usize,
    pub eval_episodes: usize,
    /// Bias episodes of the single-head learners.
    pub bias_episodes: usize,
    /// Bias episodes per head of the bootstrapped learners.
    pub bias_episodes_per_head: usize,
    pub bias_max_steps: usize,
    pub eval_max_steps: usize,
    /// Training episodes are cut off after this many steps.
    pub max_episode_steps: usize,
    /// Divide the cross-head variance by K.
    pub head_variance_of_mean: bool,
    /// Act uniformly at random until the buffer holds `min_fill` transitions.
    pub random_warmup: bool,
}

impl Default for DeepConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            learning_rate: 1e-3,
            batch_size: 32,
            gamma: 0.99,
            target_period: 1000,
            buffer_capacity: 100_000,
            min_fill: 5000,
            heads: 10,
            mask_p: 1.0,
            alpha0: 0.25,
            ada_horizon: 32,
            ada_step_size: 1e-3,
            eps_initial: 1.0,
            eps_final: 0.1,
            eps_steps: 100_000,
            total_steps: 200_000,
            log_every: 10_000,
            eval_episodes: 10,
            bias_episodes: 10,
            bias_episodes_per_head: 3,
            bias_max_steps: 200,
            eval_max_steps: 200,
            max_episode_steps: 1000,
            head_variance_of_mean: false,
            random_warmup: true,
        }
    }
}

impl DeepConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("target_period", self.target_period),
            ("buffer_capacity", self.buffer_capacity),
            ("heads", self.heads),
            ("ada_horizon", self.ada_horizon),
            ("total_steps", self.total_steps),
            ("log_every", self.log_every),
            ("eval_episodes", self.eval_episodes),
            ("bias_max_steps", self.bias_max_steps),
            ("eval_max_steps", self.eval_max_steps),
            ("max_episode_steps", self.max_episode_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden widths must be positive"));
        }
        if self.min_fill > self.buffer_capacity {
            return Err(invalid("min_fill cannot exceed buffer_capacity"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid("gamma must lie in [0, 1]"));
        }
        if !(self.mask_p > 0.0 && self.mask_p <= 1.0) {
            return Err(invalid("mask_p must lie in (0, 1]"));
        }
        crate::estimators::validate_alpha(self.alpha0)?;
        if !(self.ada_step_size.is_finite() && self.ada_step_size >= 0.0) {
            return Err(invalid("ada_step_size must be non-negative"));
        }
        for e in [self.eps_initial, self.eps_final] {
            if !(0.0..=1.0).contains(&e) {
                return Err(invalid("epsilon must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Linearly annealed exploration rate of the single-head learners.
    pub fn epsilon(&self, step: usize) -> f64 {
        if step >= self.eps_steps {
            return self.eps_final;
        }
        let frac = step as f64 / self.eps_steps as f64;
        self.eps_initial + (self.eps_final - self.eps_initial) * frac
    }
}

/// Periodic evaluation record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeepLogRow {
    pub step: usize,
    /// Mean undiscounted return of the evaluation episodes.
    pub eval_return: f64,
    pub bias_estimate: f64,
    pub alpha: Option<f64>,
    /// Mean training loss since the previous row (NaN before training starts).
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepTrainLog {
    pub variant: DeepVariant,
    pub seed: u64,
    pub rows: Vec<DeepLogRow>,
    /// (step, α) after every adaptive update.
    pub alpha_trace: Vec<(usize, f64)>,
    /// Training episodes that ended in a terminal state.
    pub finished_episodes: usize,
}

pub const DEEP_LOG_CSV_HEADER: &str = "step,eval_return,bias_estimate,alpha,loss";

impl DeepTrainLog {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{DEEP_LOG_CSV_HEADER}")?;
        for r in &self.rows {
            let alpha = r.alpha.map(|a| a.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{},{}", r.step, r.eval_return, r.bias_estimate, alpha, r.loss)?;
        }
        Ok(())
    }
}

/// Training log plus the final network.
#[derive(Debug, Clone)]
pub struct DeepRun {
    pub log: DeepTrainLog,
    pub net: EnsembleNet,
}

fn target_kind(variant: DeepVariant, alpha: f64, cfg: &DeepConfig) -> Result<TargetKind> {
    let kernel = |spec: KernelSpec| -> Result<TargetKind> {
        Ok(TargetKind::Kernel { kernel: Kernel::new(spec)?, variance_of_mean: cfg.head_variance_of_mean })
    };
    match variant {
        DeepVariant::Dqn => Ok(TargetKind::Max),
        DeepVariant::Ddqn | DeepVariant::Bdqn => Ok(TargetKind::Double),
        DeepVariant::TeBdqn { alpha } => kernel(KernelSpec::indicator(alpha)?),
        DeepVariant::KeBdqn(spec) => kernel(spec),
        DeepVariant::AdaTeBdqn => kernel(KernelSpec::indicator(alpha)?),
    }
}

/// Mean undiscounted return of greedy episodes (majority vote across heads).
pub fn evaluate<E: Environment + ?Sized>(
    net: &EnsembleNet,
    env: &E,
    episodes: usize,
    max_steps: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut s = env.reset(rng);
        for _ in 0..max_steps {
            let a = net.majority_vote(&encode_features(env, s)?)?;
            let step = env.step(s, a, rng)?;
            total += step.reward;
            if step.done {
                break;
            }
            s = step.next_state;
        }
    }
    Ok(total / episodes.max(1) as f64)
}

/// Full training loop on one-hot state features. The learner acts from the
/// stream (seed, 0); evaluation and bias rounds at step t use (seed, 1, t).
pub fn train_deep<E: Environment + ?Sized>(
    env: &E,
    variant: DeepVariant,
    cfg: &DeepConfig,
    seed: u64,
) -> Result<DeepRun> {
    cfg.validate()?;
    variant.validate()?;
    let actions = env.max_action_count();
    if (0..env.state_count()).any(|s| env.is_valid_state(State(s)) && env.action_count(State(s)) != actions) {
        return Err(invalid("deep learners need the same action count in every state"));
    }
    let mut rng = stream_rng(seed, &[0]);
    let heads = if variant.is_bootstrapped() { cfg.heads } else { 1 };
    if heads < 2 && matches!(variant, DeepVariant::TeBdqn { .. } | DeepVariant::KeBdqn(_) | DeepVariant::AdaTeBdqn) {
        return Err(invalid("kernel targets need at least two heads"));
    }
    let obs_dim = env.state_count();
    let mut net = EnsembleNet::new(obs_dim, &cfg.hidden, actions, heads, &mut rng)?;
    let mut opt = AdamState::new(net.main().param_count(), cfg.learning_rate);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, cfg.min_fill, obs_dim, heads)?;
    let mut ada = (variant == DeepVariant::AdaTeBdqn).then_some(AdaState {
        alpha: cfg.alpha0,
        step_size: cfg.ada_step_size,
        horizon: cfg.ada_horizon,
    });
    let mut kind = target_kind(variant, cfg.alpha0, cfg)?;
    let mut scratch = TrainScratch::default();
    let mut log = DeepTrainLog { variant, seed, rows: Vec::new(), alpha_trace: Vec::new(), finished_episodes: 0 };
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let zeros = vec![0.0; obs_dim];
    let mut mask = vec![true; heads];
    let mut step = 0;
    while step < cfg.total_steps {
        let mut s = env.reset(&mut rng);
        let head = rng.random_range(0..heads);
        for _ in 0..cfg.max_episode_steps {
            let obs = encode_features(env, s)?;
            let warming = cfg.random_warmup && !buffer.ready();
            let a = if warming || (heads == 1 && rng.random::<f64>() < cfg.epsilon(step)) {
                rng.random_range(0..actions)
            } else {
                net.greedy_action(&obs, head)?
            };
            let res = env.step(s, a, &mut rng)?;
            let next_obs = if res.done { zeros.clone() } else { encode_features(env, res.next_state)? };
            if cfg.mask_p < 1.0 {
                mask.iter_mut().for_each(|m| *m = rng.random::<f64>() < cfg.mask_p);
            }
            buffer.push(&obs, s, a, res.reward, &next_obs, res.done, &mask)?;
            step += 1;
            if buffer.ready() {
                loss_sum += net.train_step(&buffer, cfg.batch_size, &kind, cfg.gamma, &mut opt, &mut rng, &mut scratch)?;
                loss_n += 1;
            }
            if step % cfg.target_period == 0 {
                net.sync_target();
                if let Some(state) = ada.as_mut() {
                    let view = EnsembleView { net: &net, env };
                    if ada_alpha_update(state, &view, env, &buffer, cfg.gamma, &mut rng)? {
                        kind = target_kind(variant, state.alpha, cfg)?;
                    }
                    log.alpha_trace.push((step, state.alpha));
                }
            }
            if step % cfg.log_every == 0 {
                let mut eval_rng = stream_rng(seed, &[1, step as u64]);
                let eval_return = evaluate(&net, env, cfg.eval_episodes, cfg.eval_max_steps, &mut eval_rng)?;
                let view = EnsembleView { net: &net, env };
                let episodes = if heads == 1 { cfg.bias_episodes } else { cfg.bias_episodes_per_head };
                let buf = &buffer;
                let mut start = |r: &mut SimRng| match buf.sample_state(r) {
                    Some(s) => Ok(s),
                    None => uniform_start(env, r),
                };
                let bias_estimate =
                    estimate_bias(&view, env, episodes, cfg.gamma, cfg.bias_max_steps, &mut start, &mut eval_rng)?;
                log.rows.push(DeepLogRow {
                    step,
                    eval_return,
                    bias_estimate,
                    alpha: ada.map(|a| a.alpha).or(match variant {
                        DeepVariant::TeBdqn { alpha } => Some(alpha),
                        _ => None,
                    }),
                    loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN },
                });
                loss_sum = 0.0;
                loss_n = 0;
            }
            if res.done {
                log.finished_episodes += 1;
                break;
            }
            if step >= cfg.total_steps {
                break;
            }
            s = res.next_state;
        }
    }
    Ok(DeepRun { log, net })
}

/// Largest relative gap between backpropagated and central-difference
/// gradients (h = 1e−5) of L = Σ g ⊙ f(x) on a random batch.
pub fn gradient_check(net: &Mlp, batch: usize, rng: &mut SimRng) -> Result<f64> {
    let x = Matrix {
        rows: batch,
        cols: net.input_dim(),
        data: (0..batch * net.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let g = Matrix {
        rows: batch,
        cols: net.output_dim(),
        data: (0..batch * net.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let loss = |n: &Mlp| -> Result<f64> {
        let out = n.forward(&x)?;
        Ok(out.output().data.iter().zip(&g.data).map(|(a, b)| a * b).sum())
    };
    let analytic = net.backprop(&net.forward(&x)?, &g)?;
    let h = 1e-5;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in 0..net.param_count() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = loss(&probe)?;
        probe.params_mut()[i] = orig - h;
        let down = loss(&probe)?;
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    Ok(worst)
}
