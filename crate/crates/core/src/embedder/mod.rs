//! Fully connected embedding network with exact backpropagation, the Adam
//! optimizer, the step-then-exponential learning-rate schedule and the
//! training loop.

mod optim;
mod train;

pub use optim::{adam_step, lr_schedule, AdamState, OptimConfig};
pub use train::{train, EpochEval, MetricsRecord, TrainRun, TrainSpec};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_layers: usize,
    pub hidden: usize,
    pub d_emb: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 2,
            hidden: 64,
            d_emb: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || (self.hidden_layers > 0 && self.hidden == 0) {
            return Err(Error::Config("model widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Layer widths from input to embedding.
    pub fn dims(&self, d_in: usize) -> Vec<usize> {
        let mut dims = vec![d_in];
        dims.extend(std::iter::repeat_n(self.hidden, self.hidden_layers));
        dims.push(self.d_emb);
        dims
    }
}

/// Affine layers with rectifiers between them and none after the last.
///
/// Parameters live in one flat vector. Layer `l` maps `dims[l]` to
/// `dims[l + 1]`; its weight block is stored input-major (`dims[l]` rows of
/// `dims[l + 1]` values, so `y = x W + b`) and is followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    dims: Vec<usize>,
    params: Vec<f64>,
    generation: u64,
}

/// Per-layer inputs and rectifier masks recorded by [`Embedder::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    layer_inputs: Vec<Matrix>,
}

impl ForwardCache {
    /// Which hidden units were active, layer by layer in row-major order.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.layer_inputs[1..]
            .iter()
            .flat_map(|m| m.as_slice().iter().map(|&v| v > 0.0))
            .collect()
    }
}

impl Embedder {
    /// Zero-initialized network with the given layer widths.
    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {dims:?}")));
        }
        let n = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            dims,
            params: vec![0.0; n],
            generation: 0,
        })
    }

    /// Weights uniform in `+-sqrt(6 / fan_in)`, zero biases.
    pub fn init(dims: Vec<usize>, seed: u64) -> Result<Self> {
        let mut e = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..e.n_layers() {
            let bound = (6.0 / e.dims[l] as f64).sqrt();
            let (w, _) = e.layer_range(l);
            for p in &mut e.params[w] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(e)
    }

    pub fn from_config(d_in: usize, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Self::init(cfg.dims(d_in), seed)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn d_in(&self) -> usize {
        self.dims[0]
    }

    pub fn d_emb(&self) -> usize {
        *self.dims.last().expect("at least two widths")
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access. Invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    fn layer_range(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start: usize = self.dims[..l]
            .iter()
            .zip(&self.dims[1..=l])
            .map(|(a, b)| a * b + b)
            .sum();
        let w_end = start + self.dims[l] * self.dims[l + 1];
        (start..w_end, w_end..w_end + self.dims[l + 1])
    }

    pub fn weight(&self, l: usize) -> &[f64] {
        &self.params[self.layer_range(l).0]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        &self.params[self.layer_range(l).1]
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut [f64] {
        self.generation += 1;
        let r = self.layer_range(l).0;
        &mut self.params[r]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        self.generation += 1;
        let r = self.layer_range(l).1;
        &mut self.params[r]
    }

    fn affine(&self, l: usize, x: &Matrix) -> Matrix {
        let (d_in, d_out) = (self.dims[l], self.dims[l + 1]);
        let w = self.weight(l);
        let b = self.bias(l);
        let mut out = Matrix::zeros(x.rows(), d_out);
        for i in 0..x.rows() {
            let o = out.row_mut(i);
            o.copy_from_slice(b);
            for (k, &xk) in x.row(i).iter().enumerate().take(d_in) {
                if xk == 0.0 {
                    continue;
                }
                for (oj, &wkj) in o.iter_mut().zip(&w[k * d_out..(k + 1) * d_out]) {
                    *oj += xk * wkj;
                }
            }
        }
        out
    }

    /// Embeds each row of `inputs`.
    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if inputs.cols() != self.d_in() {
            return Err(Error::Shape(format!(
                "input width {} but embedder expects {}",
                inputs.cols(),
                self.d_in()
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.n_layers());
        let mut h = inputs.clone();
        for l in 0..self.n_layers() {
            let mut z = self.affine(l, &h);
            if l + 1 < self.n_layers() {
                z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            layer_inputs.push(h);
            h = z;
        }
        Ok((
            h,
            ForwardCache {
                generation: self.generation,
                layer_inputs,
            },
        ))
    }

    /// Forward pass without keeping a cache.
    pub fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward(inputs)?.0)
    }

    /// Gradient of `sum_ij grad_out[i][j] * emb[i][j]` with respect to every
    /// parameter, in the flat parameter layout.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Matrix) -> Result<Vec<f64>> {
        if cache.generation != self.generation || cache.layer_inputs.len() != self.n_layers() {
            return Err(Error::Shape("stale forward cache".into()));
        }
        let n = cache.layer_inputs[0].rows();
        if grad_out.rows() != n || grad_out.cols() != self.d_emb() {
            return Err(Error::Shape(format!(
                "grad_out is {}x{}, expected {}x{}",
                grad_out.rows(),
                grad_out.cols(),
                n,
                self.d_emb()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = grad_out.clone();
        for l in (0..self.n_layers()).rev() {
            let x = &cache.layer_inputs[l];
            let (wr, br) = self.layer_range(l);
            let d_out = self.dims[l + 1];
            let gw = x.t_matmul(&delta)?;
            grads[wr].copy_from_slice(gw.as_slice());
            let gb = &mut grads[br];
            for row in delta.iter_rows() {
                gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
            if l > 0 {
                let w = Matrix::from_vec(self.dims[l], d_out, self.weight(l).to_vec())?;
                let mut prev = delta.matmul_t(&w)?;
                // x is the rectified output of layer l - 1; zero entries were clipped
                for (p, &xv) in prev.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    if xv <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok(grads)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            activation: "relu".to_string(),
            layers: (0..self.n_layers())
                .map(|l| CheckpointLayer {
                    d_in: self.dims[l],
                    d_out: self.dims[l + 1],
                    weight: self.weight(l).to_vec(),
                    bias: self.bias(l).to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.layers.is_empty() {
            return Err(Error::Data("checkpoint has no layers".into()));
        }
        let mut dims = vec![ck.layers[0].d_in];
        for (l, layer) in ck.layers.iter().enumerate() {
            if layer.d_in != *dims.last().expect("non-empty")
                || layer.weight.len() != layer.d_in * layer.d_out
                || layer.bias.len() != layer.d_out
            {
                return Err(Error::Data(format!(
                    "checkpoint layer {l} has inconsistent shape"
                )));
            }
            dims.push(layer.d_out);
        }
        let mut e = Self::zeros(dims)?;
        for (l, layer) in ck.layers.iter().enumerate() {
            e.weight_mut(l).copy_from_slice(&layer.weight);
            e.bias_mut(l).copy_from_slice(&layer.bias);
        }
        if !e.is_finite() {
            return Err(Error::Data("checkpoint has non-finite parameters".into()));
        }
        Ok(e)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.to_checkpoint())
            .map_err(|e| Error::Serde(e.to_string()))?;
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&raw).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Self::from_checkpoint(&ck)
    }
}

pub const CHECKPOINT_FORMAT: &str = "mcnl-embedder";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint. `weight` is row-major with `d_in` rows of `d_out` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub activation: String,
    pub layers: Vec<CheckpointLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointLayer {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}
