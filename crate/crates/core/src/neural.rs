//! Dense tanh network with exact reverse-mode gradients and AdamW.
//!
//! Parameters live in one flat `Vec<f64>`, layer by layer, each layer storing
//! its weight matrix (row-major, `out x in`) followed by its bias. Views into
//! that buffer feed ndarray's matmul, and the optimizer, gradient clipping and
//! the checkpoint format all operate on the flat slice directly.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;

use crate::{Error, Result};

const MAGIC: &[u8; 6] = b"FCNET1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Layer inputs and outputs of one batched forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `acts[0]` is the input batch; `acts[l + 1]` is the output of layer `l`.
    acts: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("cache holds the input at least")
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl DenseNet {
    /// Glorot-uniform weights, zero biases. `dims` lists every layer width,
    /// input first; hidden layers use tanh, the last layer is linear.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        let mut offset = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_in * fan_out] {
                *p = rng.random_range(-limit..=limit);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {dims:?}")));
        }
        Ok(Self {
            dims: dims.to_vec(),
            params: vec![0.0; param_count(dims)],
        })
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        if params.len() != net.params.len() {
            return Err(Error::shape("parameter vector", net.params.len(), params.len()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            Activation::Identity
        } else {
            Activation::Tanh
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.dims[..=layer])
    }

    /// Weight (`out x in`) and bias of one layer.
    pub fn layer(&self, layer: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        split_layer(&self.params, &self.dims, layer, self.layer_offset(layer))
    }

    pub fn layer_mut(&mut self, layer: usize) -> (ArrayViewMut2<'_, f64>, ArrayViewMut1<'_, f64>) {
        let offset = self.layer_offset(layer);
        split_layer_mut(&mut self.params, &self.dims, layer, offset)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        Ok(self.forward_batch(batch)?.into_raw_vec_and_offset().0)
    }

    /// Rows of `x` are independent inputs.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut h = x.to_owned();
        for l in 0..self.num_layers() {
            h = self.apply_layer(l, h.view());
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.dims.len());
        acts.push(x.to_owned());
        for l in 0..self.num_layers() {
            let next = self.apply_layer(l, acts[l].view());
            acts.push(next);
        }
        Ok(ForwardCache { acts })
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), x.ncols()));
        }
        Ok(())
    }

    fn apply_layer(&self, l: usize, h: ArrayView2<'_, f64>) -> Array2<f64> {
        let (w, b) = self.layer(l);
        let mut z = h.dot(&w.t());
        z += &b;
        if self.activation(l) == Activation::Tanh {
            z.mapv_inplace(f64::tanh);
        }
        z
    }

    /// Gradients of `sum(upstream * output)` with respect to the parameters
    /// (flat, same layout as [`DenseNet::params`]) and to the input batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(Error::shape(
                "upstream gradient",
                format!("{:?}", out.dim()),
                format!("{:?}", upstream.dim()),
            ));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut g = upstream.to_owned();
        for l in (0..self.num_layers()).rev() {
            if self.activation(l) == Activation::Tanh {
                g.zip_mut_with(&cache.acts[l + 1], |gi, &y| *gi *= 1.0 - y * y);
            }
            let offset = self.layer_offset(l);
            let (mut gw, mut gb) = split_layer_mut(&mut grads, &self.dims, l, offset);
            gw.assign(&g.t().dot(&cache.acts[l]));
            gb.assign(&g.sum_axis(Axis(0)));
            let (w, _) = self.layer(l);
            g = g.dot(&w);
        }
        Ok((grads, g))
    }

    /// Forward and backward for a single input vector.
    pub fn backward_single(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let xb = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        let cache = self.forward_cached(xb)?;
        let ub = ArrayView2::from_shape((1, upstream.len()), upstream).expect("contiguous row");
        let (grads, gx) = self.backward(&cache, ub)?;
        Ok((grads, gx.into_raw_vec_and_offset().0))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &p in &self.params {
            w.write_all(&(p as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let n = read_u32(r)? as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::Checkpoint(format!("implausible layer count {n}")));
        }
        let dims = (0..n)
            .map(|_| read_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims.iter().any(|&d| d == 0 || d > 1 << 20) {
            return Err(Error::Checkpoint(format!("implausible layer widths {dims:?}")));
        }
        let params = read_f32s(r, param_count(&dims))?;
        Self::from_params(&dims, params)
    }
}

fn split_layer<'a>(
    params: &'a [f64],
    dims: &[usize],
    layer: usize,
    offset: usize,
) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
    let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
    let (w, rest) = params[offset..].split_at(fan_in * fan_out);
    (
        ArrayView2::from_shape((fan_out, fan_in), w).expect("layer layout"),
        ArrayView1::from(&rest[..fan_out]),
    )
}

fn split_layer_mut<'a>(
    params: &'a mut [f64],
    dims: &[usize],
    layer: usize,
    offset: usize,
) -> (ArrayViewMut2<'a, f64>, ArrayViewMut1<'a, f64>) {
    let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
    let (w, rest) = params[offset..].split_at_mut(fan_in * fan_out);
    (
        ArrayViewMut2::from_shape((fan_out, fan_in), w).expect("layer layout"),
        ArrayViewMut1::from(&mut rest[..fan_out]),
    )
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Rescales `grads` in place so its l2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// Bias-corrected Adam update with decoupled weight decay.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape("optimizer parameters", self.m.len(), params.len()));
        }
        if grads.len() != self.m.len() {
            return Err(Error::shape("optimizer gradients", self.m.len(), grads.len()));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            if weight_decay != 0.0 {
                *p -= lr * weight_decay * *p;
            }
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        }
        Ok(())
    }
}
