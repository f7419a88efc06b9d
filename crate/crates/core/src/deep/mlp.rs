use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MevError, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MevError::ShapeMismatch("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn reset(&mut self, rows: usize, cols: usize) {
        self.rows = rows;
        self.cols = cols;
        self.data.clear();
        self.data.resize(rows * cols, 0.0);
    }
}

/// Fully connected network with rectifier hidden layers and a linear output.
///
/// Parameters live in one flat vector; layer `l` stores its weights as a
/// fan_in × fan_out row-major block followed by fan_out biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Layer inputs and pre-activations of a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// `inputs[l]` feeds layer l; `inputs[0]` is the batch.
    inputs: Vec<Matrix>,
    /// Pre-activations per layer; the last one is the network output.
    pre: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.pre.last().expect("forward cache is empty")
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |m| m.rows)
    }
}

pub fn param_count_for(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl Mlp {
    /// Weights and biases drawn from U(−1/√fan_in, 1/√fan_in).
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        for l in 0..net.layers() {
            let bound = 1.0 / (sizes[l] as f64).sqrt();
            let range = net.layer_range(l);
            for p in &mut net.params[range] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(crate::error::invalid("a network needs at least two non-empty layers"));
        }
        Ok(Self { sizes: sizes.to_vec(), params: vec![0.0; param_count_for(sizes)] })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(MevError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        Ok(Self { sizes: sizes.to_vec(), params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, l: usize) -> usize {
        param_count_for(&self.sizes[..=l])
    }

    /// Flat range of layer `l`'s weights and biases.
    pub fn layer_range(&self, l: usize) -> std::ops::Range<usize> {
        let start = self.layer_offset(l);
        start..start + (self.sizes[l] + 1) * self.sizes[l + 1]
    }

    /// Flat index of weight (i → j) in layer `l`.
    pub fn weight_index(&self, l: usize, i: usize, j: usize) -> usize {
        self.layer_offset(l) + i * self.sizes[l + 1] + j
    }

    /// Flat index of bias j in layer `l`.
    pub fn bias_index(&self, l: usize, j: usize) -> usize {
        self.layer_offset(l) + self.sizes[l] * self.sizes[l + 1] + j
    }

    /// Forward pass reusing `cache`'s buffers.
    pub fn forward_into(&self, batch: &Matrix, cache: &mut ForwardCache) -> Result<()> {
        if batch.cols != self.input_dim() {
            return Err(MevError::ShapeMismatch(format!(
                "input width {} does not match {}",
                batch.cols,
                self.input_dim()
            )));
        }
        let layers = self.layers();
        cache.inputs.resize_with(layers, Matrix::default);
        cache.pre.resize_with(layers, Matrix::default);
        cache.inputs[0].clone_from(batch);
        for l in 0..layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.layer_offset(l);
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + (fan_in + 1) * fan_out];
            let (before, after) = cache.inputs.split_at_mut(l + 1);
            let x = &before[l];
            let z = &mut cache.pre[l];
            z.reset(x.rows, fan_out);
            for r in 0..x.rows {
                let zr = &mut z.data[r * fan_out..(r + 1) * fan_out];
                zr.copy_from_slice(b);
                for (i, &xi) in x.row(r).iter().enumerate() {
                    if xi != 0.0 {
                        let wi = &w[i * fan_out..(i + 1) * fan_out];
                        zr.iter_mut().zip(wi).for_each(|(z, &w)| *z += xi * w);
                    }
                }
            }
            if l + 1 < layers {
                let next = &mut after[0];
                next.reset(x.rows, fan_out);
                next.data.iter_mut().zip(&z.data).for_each(|(a, &p)| *a = p.max(0.0));
            }
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ForwardCache> {
        let mut cache = ForwardCache::default();
        self.forward_into(batch, &mut cache)?;
        Ok(cache)
    }

    /// Output for a single input row.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = Matrix { rows: 1, cols: x.len(), data: x.to_vec() };
        Ok(self.forward(&batch)?.output().data.clone())
    }

    /// Accumulates ∂L/∂θ into `grads` given ∂L/∂output; `grads` must have
    /// `param_count` entries.
    pub fn backprop_into(&self, cache: &ForwardCache, grad_out: &Matrix, grads: &mut [f64]) -> Result<()> {
        let layers = self.layers();
        if cache.pre.len() != layers || cache.inputs.len() != layers {
            return Err(MevError::ShapeMismatch("forward cache does not match the network".into()));
        }
        let out = cache.output();
        if grad_out.rows != out.rows || grad_out.cols != out.cols {
            return Err(MevError::ShapeMismatch("output gradient shape differs from the output".into()));
        }
        let widths_match = cache.pre.iter().zip(&self.sizes[1..]).all(|(m, &w)| m.cols == w);
        if cache.inputs[0].cols != self.input_dim() || !widths_match || grads.len() != self.params.len() {
            return Err(MevError::ShapeMismatch("forward cache does not match the network".into()));
        }
        let mut delta = grad_out.clone();
        let mut next = Matrix::default();
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.layer_offset(l);
            let x = &cache.inputs[l];
            {
                let (gw, gb) = grads[off..off + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
                for r in 0..x.rows {
                    let d = delta.row(r);
                    gb.iter_mut().zip(d).for_each(|(g, &d)| *g += d);
                    for (i, &xi) in x.row(r).iter().enumerate() {
                        if xi != 0.0 {
                            let gi = &mut gw[i * fan_out..(i + 1) * fan_out];
                            gi.iter_mut().zip(d).for_each(|(g, &d)| *g += xi * d);
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + fan_in * fan_out];
            let pre_prev = &cache.pre[l - 1];
            next.reset(x.rows, fan_in);
            for r in 0..x.rows {
                let d = delta.row(r);
                let nr = next.row_mut(r);
                let pr = pre_prev.row(r);
                for i in 0..fan_in {
                    if pr[i] > 0.0 {
                        let wi = &w[i * fan_out..(i + 1) * fan_out];
                        nr[i] = wi.iter().zip(d).map(|(&w, &d)| w * d).sum();
                    }
                }
            }
            std::mem::swap(&mut delta, &mut next);
        }
        Ok(())
    }

    pub fn backprop(&self, cache: &ForwardCache, grad_out: &Matrix) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.params.len()];
        self.backprop_into(cache, grad_out, &mut g)?;
        Ok(g)
    }
}
