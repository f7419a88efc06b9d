use std::io::{Read, Write};

use rand::Rng;

use super::adam::AdamState;
use super::mlp::{ForwardCache, Matrix, Mlp};
use super::replay::ReplayBuffer;
use crate::error::{invalid, MevError, Result};
use crate::estimators::{argmax, kernel_weighted_value, Kernel};
use crate::stats::sample_variance;

/// Shared rectifier trunk with K linear heads of `actions` outputs each, plus a
/// target copy. The heads are the K column blocks of the last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleNet {
    main: Mlp,
    target: Mlp,
    heads: usize,
    actions: usize,
}

/// How the bootstrap value at s′ is formed from the head outputs.
#[derive(Debug, Clone)]
pub enum TargetKind {
    /// max over target-head values (DQN).
    Max,
    /// Select on the main head, evaluate on the target head (DDQN and BDQN).
    Double,
    /// Kernel-weighted target-head values with cross-head variances.
    Kernel { kernel: Kernel, variance_of_mean: bool },
}

/// Reused buffers of a training step.
#[derive(Debug, Clone, Default)]
pub struct TrainScratch {
    indices: Vec<usize>,
    obs: Matrix,
    next_obs: Matrix,
    cache: ForwardCache,
    next_main: ForwardCache,
    next_target: ForwardCache,
    targets: Vec<f64>,
    grad_out: Matrix,
    grads: Vec<f64>,
    vars: Vec<f64>,
    column: Vec<f64>,
    frozen: Vec<bool>,
}

impl EnsembleNet {
    /// `hidden` lists the trunk widths; target parameters start equal to the main ones.
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        actions: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || actions == 0 {
            return Err(invalid("head and action counts must be positive"));
        }
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(heads * actions);
        let main = Mlp::new(&sizes, rng)?;
        Ok(Self { target: main.clone(), main, heads, actions })
    }

    pub fn from_main(main: Mlp, heads: usize, actions: usize) -> Result<Self> {
        if heads == 0 || actions == 0 || main.output_dim() != heads * actions {
            return Err(MevError::ShapeMismatch("output width must equal heads × actions".into()));
        }
        Ok(Self { target: main.clone(), main, heads, actions })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn main(&self) -> &Mlp {
        &self.main
    }

    pub fn main_mut(&mut self) -> &mut Mlp {
        &mut self.main
    }

    pub fn target(&self) -> &Mlp {
        &self.target
    }

    /// θ⁻ ← θ.
    pub fn sync_target(&mut self) {
        self.target.params_mut().copy_from_slice(self.main.params());
    }

    /// Main-network outputs for one input, heads concatenated.
    pub fn q_values(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.main.predict(obs)
    }

    pub fn target_q_values(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.target.predict(obs)
    }

    /// Values of head `k` inside a concatenated output row.
    pub fn head<'a>(&self, row: &'a [f64], k: usize) -> &'a [f64] {
        &row[k * self.actions..(k + 1) * self.actions]
    }

    pub fn greedy_action(&self, obs: &[f64], k: usize) -> Result<usize> {
        let q = self.q_values(obs)?;
        Ok(argmax(self.head(&q, k)))
    }

    /// Action chosen by most heads; ties go to the lowest index.
    pub fn majority_vote(&self, obs: &[f64]) -> Result<usize> {
        let q = self.q_values(obs)?;
        let mut votes = vec![0usize; self.actions];
        for k in 0..self.heads {
            votes[argmax(self.head(&q, k))] += 1;
        }
        let mut best = 0;
        for (a, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = a;
            }
        }
        Ok(best)
    }

    /// Parameters of the trunk, i.e. every layer except the last.
    fn trunk_len(&self) -> usize {
        self.main.layer_range(self.main.layers() - 1).start
    }

    /// Per-head targets for a batch, `B × K` row-major, written to `out`.
    #[allow(clippy::too_many_arguments)]
    fn targets_into(
        &self,
        kind: &TargetKind,
        rewards: &[f64],
        dones: &[bool],
        next_main: Option<&Matrix>,
        next_target: &Matrix,
        gamma: f64,
        s: &mut TrainScratch,
    ) -> Result<()> {
        let (k_heads, a_count) = (self.heads, self.actions);
        s.targets.clear();
        for i in 0..rewards.len() {
            let r = rewards[i];
            if dones[i] {
                s.targets.extend(std::iter::repeat_n(r, k_heads));
                continue;
            }
            let trow = next_target.row(i);
            if let TargetKind::Kernel { variance_of_mean, .. } = kind {
                s.vars.clear();
                for a in 0..a_count {
                    s.column.clear();
                    s.column.extend((0..k_heads).map(|k| trow[k * a_count + a]));
                    let v = sample_variance(&s.column);
                    s.vars.push(if *variance_of_mean { v / k_heads as f64 } else { v });
                }
            }
            for k in 0..k_heads {
                let tk = &trow[k * a_count..(k + 1) * a_count];
                let v = match kind {
                    TargetKind::Max => tk[argmax(tk)],
                    TargetKind::Double => {
                        let m = next_main.ok_or_else(|| MevError::Invariant("missing main outputs".into()))?;
                        let mk = &m.row(i)[k * a_count..(k + 1) * a_count];
                        tk[argmax(mk)]
                    }
                    TargetKind::Kernel { kernel, .. } => {
                        let (v, _) = kernel_weighted_value(tk, &s.vars, kernel, None)?;
                        debug_assert!(v <= tk[argmax(tk)]);
                        v
                    }
                };
                s.targets.push(r + gamma * v);
            }
        }
        Ok(())
    }

    /// Per-head targets for explicit transitions (rows of `next_obs`).
    pub fn compute_targets(
        &self,
        kind: &TargetKind,
        rewards: &[f64],
        next_obs: &Matrix,
        dones: &[bool],
        gamma: f64,
    ) -> Result<Matrix> {
        if rewards.len() != next_obs.rows || dones.len() != next_obs.rows {
            return Err(MevError::ShapeMismatch("batch fields differ in length".into()));
        }
        self.check_kind(kind)?;
        let mut s = TrainScratch::default();
        let nt = self.target.forward(next_obs)?;
        let nm = match kind {
            TargetKind::Double => Some(self.main.forward(next_obs)?),
            _ => None,
        };
        self.targets_into(kind, rewards, dones, nm.as_ref().map(|c| c.output()), nt.output(), gamma, &mut s)?;
        Ok(Matrix { rows: rewards.len(), cols: self.heads, data: s.targets })
    }

    fn check_kind(&self, kind: &TargetKind) -> Result<()> {
        if matches!(kind, TargetKind::Kernel { .. }) && self.heads < 2 {
            return Err(invalid("kernel targets need at least two heads"));
        }
        Ok(())
    }

    /// Masked squared-error loss on a uniformly sampled batch followed by one
    /// Adam step. Trunk gradients are scaled by 1/K; a head with no active
    /// sample keeps its parameters. Returns the mean per-head loss.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        batch: usize,
        kind: &TargetKind,
        gamma: f64,
        opt: &mut AdamState,
        rng: &mut R,
        s: &mut TrainScratch,
    ) -> Result<f64> {
        self.check_kind(kind)?;
        if buffer.heads() != self.heads || buffer.obs_dim() != self.main.input_dim() {
            return Err(MevError::ShapeMismatch("buffer layout does not match the network".into()));
        }
        buffer.sample_indices(batch, rng, &mut s.indices)?;
        let d = buffer.obs_dim();
        s.obs.rows = batch;
        s.obs.cols = d;
        s.obs.data.clear();
        s.next_obs.rows = batch;
        s.next_obs.cols = d;
        s.next_obs.data.clear();
        let mut rewards = Vec::with_capacity(batch);
        let mut dones = Vec::with_capacity(batch);
        let mut actions = Vec::with_capacity(batch);
        for &i in &s.indices {
            let t = buffer.get(i);
            s.obs.data.extend_from_slice(t.obs);
            s.next_obs.data.extend_from_slice(t.next_obs);
            rewards.push(t.reward);
            dones.push(t.done);
            actions.push(t.action);
        }
        let mut cache = std::mem::take(&mut s.cache);
        let mut next_main = std::mem::take(&mut s.next_main);
        let mut next_target = std::mem::take(&mut s.next_target);
        self.main.forward_into(&s.obs, &mut cache)?;
        self.target.forward_into(&s.next_obs, &mut next_target)?;
        let nm = if matches!(kind, TargetKind::Double) {
            self.main.forward_into(&s.next_obs, &mut next_main)?;
            Some(next_main.output())
        } else {
            None
        };
        self.targets_into(kind, &rewards, &dones, nm, next_target.output(), gamma, s)?;

        let (k_heads, a_count) = (self.heads, self.actions);
        let out = cache.output();
        s.grad_out.rows = batch;
        s.grad_out.cols = k_heads * a_count;
        s.grad_out.data.clear();
        s.grad_out.data.resize(batch * k_heads * a_count, 0.0);
        let mut active = vec![false; k_heads];
        let mut loss = 0.0;
        let bf = batch as f64;
        for (r, &i) in s.indices.iter().enumerate() {
            let mask = buffer.get(i).mask;
            for k in 0..k_heads {
                if !mask[k] {
                    continue;
                }
                active[k] = true;
                let col = k * a_count + actions[r];
                let e = out.row(r)[col] - s.targets[r * k_heads + k];
                loss += e * e / bf;
                s.grad_out.data[r * k_heads * a_count + col] = 2.0 * e / bf;
            }
        }
        s.grads.clear();
        s.grads.resize(self.main.param_count(), 0.0);
        self.main.backprop_into(&cache, &s.grad_out, &mut s.grads)?;
        let trunk = self.trunk_len();
        let kf = k_heads as f64;
        s.grads[..trunk].iter_mut().for_each(|g| *g /= kf);
        let frozen = if active.iter().all(|&a| a) {
            None
        } else {
            let last = self.main.layers() - 1;
            let fan_in = self.main.sizes()[last];
            s.frozen.clear();
            s.frozen.resize(self.main.param_count(), false);
            for (k, _) in active.iter().enumerate().filter(|(_, &a)| !a) {
                for a in 0..a_count {
                    let col = k * a_count + a;
                    for i in 0..fan_in {
                        s.frozen[self.main.weight_index(last, i, col)] = true;
                    }
                    s.frozen[self.main.bias_index(last, col)] = true;
                }
            }
            Some(s.frozen.as_slice())
        };
        opt.step_except(self.main.params_mut(), &s.grads, frozen)?;
        s.cache = cache;
        s.next_main = next_main;
        s.next_target = next_target;
        Ok(loss / kf)
    }

    /// Writes the main parameters: magic `MEVRL1`, format version, head and
    /// action counts, the layer-size table, then little-endian f64 parameters.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| MevError::Checkpoint(e.to_string());
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.heads as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.actions as u32).to_le_bytes()).map_err(io)?;
        let sizes = self.main.sizes();
        w.write_all(&(sizes.len() as u32).to_le_bytes()).map_err(io)?;
        for &s in sizes {
            w.write_all(&(s as u64).to_le_bytes()).map_err(io)?;
        }
        w.write_all(&(self.main.param_count() as u64).to_le_bytes()).map_err(io)?;
        for &p in self.main.params() {
            w.write_all(&p.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    }

    /// Reads a checkpoint; the target copy equals the loaded parameters.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| MevError::Checkpoint(m.to_string());
        let mut read = |n: usize| -> Result<Vec<u8>> {
            let mut b = vec![0u8; n];
            r.read_exact(&mut b).map_err(|e| MevError::Checkpoint(e.to_string()))?;
            Ok(b)
        };
        if read(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("four bytes"));
        let u64_at = |b: Vec<u8>| u64::from_le_bytes(b.try_into().expect("eight bytes"));
        let version = u32_at(read(4)?);
        if version != CHECKPOINT_VERSION {
            return Err(MevError::Checkpoint(format!("unsupported version {version}")));
        }
        let heads = u32_at(read(4)?) as usize;
        let actions = u32_at(read(4)?) as usize;
        let n_sizes = u32_at(read(4)?) as usize;
        if !(2..=64).contains(&n_sizes) {
            return Err(bad("implausible layer count"));
        }
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            sizes.push(u64_at(read(8)?) as usize);
        }
        let n_params = u64_at(read(8)?) as usize;
        if sizes.contains(&0) || n_params != super::mlp::param_count_for(&sizes) {
            return Err(bad("parameter count does not match the layer sizes"));
        }
        let raw = read(n_params * 8)?;
        let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect();
        let main = Mlp::from_params(&sizes, params).map_err(|e| MevError::Checkpoint(e.to_string()))?;
        Self::from_main(main, heads, actions).map_err(|e| MevError::Checkpoint(e.to_string()))
    }
}

pub const CHECKPOINT_MAGIC: &[u8] = b"MEVRL1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::KernelSpec;
    use crate::rng::stream_rng;
    use crate::env::State;

    fn net(heads: usize, seed: u64) -> EnsembleNet {
        let mut rng = stream_rng(seed, &[]);
        EnsembleNet::new(4, &[8], 3, heads, &mut rng).unwrap()
    }

    fn random_obs(rows: usize, seed: u64) -> Matrix {
        let mut rng = stream_rng(seed, &[1]);
        Matrix { rows, cols: 4, data: (0..rows * 4).map(|_| rng.random_range(-1.0..1.0)).collect() }
    }

    fn te(alpha: f64) -> TargetKind {
        TargetKind::Kernel { kernel: Kernel::new(KernelSpec::IndicatorAlpha { alpha }).unwrap(), variance_of_mean: false }
    }

    #[test]
    fn gamma_zero_targets_are_rewards() {
        let e = net(4, 1);
        let obs = random_obs(5, 2);
        let rewards = [1.0, -2.0, 0.5, 3.0, 0.0];
        let dones = [false, true, false, false, true];
        for kind in [TargetKind::Max, TargetKind::Double, te(0.1)] {
            let t = e.compute_targets(&kind, &rewards, &obs, &dones, 0.0).unwrap();
            for i in 0..5 {
                assert!(t.row(i).iter().all(|&y| y == rewards[i]));
            }
        }
    }

    #[test]
    fn te_half_is_the_max_target() {
        let e = net(5, 3);
        let obs = random_obs(20, 4);
        let rewards = vec![0.3; 20];
        let dones = vec![false; 20];
        let a = e.compute_targets(&te(0.5), &rewards, &obs, &dones, 0.9).unwrap();
        let b = e.compute_targets(&TargetKind::Max, &rewards, &obs, &dones, 0.9).unwrap();
        assert_eq!(a, b);
        let c = e.compute_targets(&te(0.05), &rewards, &obs, &dones, 0.9).unwrap();
        assert!(c.data.iter().zip(&b.data).all(|(x, y)| x <= y));
    }

    #[test]
    fn identical_heads_keep_only_the_champion() {
        let mut rng = stream_rng(5, &[]);
        let one = Mlp::new(&[4, 6, 3], &mut rng).unwrap();
        // copy head 0 into heads 1 and 2 so the cross-head variance vanishes
        let mut sizes = one.sizes().to_vec();
        sizes[2] = 9;
        let mut big = Mlp::zeros(&sizes).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                let v = one.params()[one.weight_index(0, i, j)];
                let k = big.weight_index(0, i, j);
                big.params_mut()[k] = v;
            }
        }
        for j in 0..6 {
            let k = big.bias_index(0, j);
            big.params_mut()[k] = one.params()[one.bias_index(0, j)];
        }
        for h in 0..3 {
            for a in 0..3 {
                for i in 0..6 {
                    let k = big.weight_index(1, i, h * 3 + a);
                    big.params_mut()[k] = one.params()[one.weight_index(1, i, a)];
                }
                let k = big.bias_index(1, h * 3 + a);
                big.params_mut()[k] = one.params()[one.bias_index(1, a)];
            }
        }
        let e = EnsembleNet::from_main(big, 3, 3).unwrap();
        let obs = random_obs(10, 6);
        let rewards = vec![1.0; 10];
        let dones = vec![false; 10];
        let a = e.compute_targets(&te(0.05), &rewards, &obs, &dones, 0.5).unwrap();
        let b = e.compute_targets(&TargetKind::Max, &rewards, &obs, &dones, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kernel_targets_need_two_heads() {
        let e = net(1, 1);
        let obs = random_obs(2, 2);
        assert!(e.compute_targets(&te(0.1), &[0.0, 0.0], &obs, &[false, false], 0.9).is_err());
    }

    #[test]
    fn sync_copies_parameters() {
        let mut e = net(3, 7);
        let mut rng = stream_rng(8, &[]);
        for p in e.main_mut().params_mut() {
            *p += rng.random_range(-0.1..0.1);
        }
        let x = [0.2, -0.4, 1.0, 0.0];
        assert_ne!(e.q_values(&x).unwrap(), e.target_q_values(&x).unwrap());
        e.sync_target();
        for s in 0..20 {
            let obs = random_obs(1, 100 + s);
            let (m, t) = (e.q_values(&obs.data).unwrap(), e.target_q_values(&obs.data).unwrap());
            assert!(m.iter().zip(&t).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    fn filled_buffer(heads: usize, masks: impl Fn(usize) -> Vec<bool>) -> ReplayBuffer {
        let mut b = ReplayBuffer::new(50, 10, 4, heads).unwrap();
        let mut rng = stream_rng(9, &[]);
        for i in 0..20 {
            let o: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let o2: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            b.push(&o, State(i), i % 3, 1.0, &o2, i % 5 == 0, &masks(i)).unwrap();
        }
        b
    }

    #[test]
    fn zero_masks_change_nothing() {
        let mut e = net(3, 10);
        let before = e.clone();
        let b = filled_buffer(3, |_| vec![false; 3]);
        let mut opt = AdamState::new(e.main().param_count(), 1e-2);
        let mut rng = stream_rng(11, &[]);
        let loss = e.train_step(&b, 8, &TargetKind::Double, 0.9, &mut opt, &mut rng, &mut TrainScratch::default());
        assert_eq!(loss.unwrap(), 0.0);
        assert_eq!(e, before);
    }

    #[test]
    fn inactive_head_keeps_its_parameters() {
        let mut e = net(3, 12);
        let b = filled_buffer(3, |_| vec![true, false, true]);
        let mut opt = AdamState::new(e.main().param_count(), 1e-2);
        let mut rng = stream_rng(13, &[]);
        let before = e.main().clone();
        let mut scratch = TrainScratch::default();
        e.train_step(&b, 8, &TargetKind::Double, 0.9, &mut opt, &mut rng, &mut scratch).unwrap();
        let m = e.main();
        let mut moved = 0;
        for a in 0..3 {
            for i in 0..8 {
                let k = m.weight_index(1, i, 3 + a);
                assert_eq!(m.params()[k], before.params()[k]);
                let j = m.weight_index(1, i, a);
                moved += usize::from(m.params()[j] != before.params()[j]);
            }
        }
        assert!(moved > 0);
        assert_ne!(m.params()[0..4], before.params()[0..4]);
    }

    #[test]
    fn overfits_one_tuple() {
        let mut rng = stream_rng(14, &[]);
        let mut e = EnsembleNet::new(4, &[16], 2, 1, &mut rng).unwrap();
        let mut b = ReplayBuffer::new(1, 1, 4, 1).unwrap();
        b.push(&[0.5, -1.0, 0.2, 0.9], State(0), 1, 2.5, &[0.0; 4], true, &[true]).unwrap();
        let mut opt = AdamState::new(e.main().param_count(), 1e-2);
        let mut scratch = TrainScratch::default();
        let mut loss = f64::INFINITY;
        for _ in 0..500 {
            loss = e.train_step(&b, 1, &TargetKind::Max, 0.99, &mut opt, &mut rng, &mut scratch).unwrap();
        }
        let q = e.q_values(&[0.5, -1.0, 0.2, 0.9]).unwrap();
        let final_loss = (q[1] - 2.5).powi(2);
        assert!(final_loss < 1e-6, "{loss} {final_loss}");
    }

    #[test]
    fn full_masks_train_every_head() {
        let mut e = net(4, 15);
        let b = filled_buffer(4, |_| vec![true; 4]);
        let before = e.main().clone();
        let mut opt = AdamState::new(e.main().param_count(), 1e-2);
        let mut rng = stream_rng(16, &[]);
        e.train_step(&b, 16, &te(0.1), 0.9, &mut opt, &mut rng, &mut TrainScratch::default()).unwrap();
        let m = e.main();
        for h in 0..4 {
            let k = m.bias_index(1, h * 3);
            assert_ne!(m.params()[k], before.params()[k], "head {h}");
        }
    }

    #[test]
    fn majority_vote_counts_heads() {
        let mut big = Mlp::zeros(&[1, 6]).unwrap();
        // three heads over two actions: votes 1, 1, 0
        for (j, v) in [0.0, 1.0, -1.0, 2.0, 5.0, 0.0].into_iter().enumerate() {
            let k = big.bias_index(0, j);
            big.params_mut()[k] = v;
        }
        let e = EnsembleNet::from_main(big, 3, 2).unwrap();
        assert_eq!(e.majority_vote(&[0.0]).unwrap(), 1);
        assert_eq!(e.greedy_action(&[0.0], 2).unwrap(), 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let e = net(3, 17);
        let mut bytes = Vec::new();
        e.write_checkpoint(&mut bytes).unwrap();
        assert!(bytes.starts_with(b"MEVRL1"));
        let back = EnsembleNet::read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back.main(), e.main());
        assert_eq!(back.target(), e.main());
        assert!(EnsembleNet::read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(EnsembleNet::read_checkpoint(corrupt.as_slice()).is_err());
    }
}
