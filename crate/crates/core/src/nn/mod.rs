//! Small feed-forward networks with hand-written gradients.
//!
//! Public tensors are sample-major `[batch][channel][height][width]` flat
//! slices of `f64`. Parameters and gradients live in one flat vector each.

mod ops;

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use ops::{
    bilinear_taps, conv_backward, conv_forward, gemm, to_channel_major, to_sample_major, upsample, upsample_adjoint, ConvGeom,
};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape: {0}")]
    Shape(String),
    #[error("cache was produced by a different network or before a parameter change")]
    StaleCache,
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// 2-D convolution, odd `kernel` with `kernel / 2` zero padding.
    Conv { out_channels: usize, kernel: usize, stride: usize },
    Dense { out_dim: usize },
    Relu,
    Flatten,
    /// Bilinear upsampling with half-pixel centers.
    Upsample { factor: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone)]
enum Op {
    Conv { geom: ConvGeom, w: usize, b: usize },
    Dense { input: usize, output: usize, w: usize, b: usize },
    Relu,
    Flatten { channels: usize, plane: usize },
    Upsample { taps_y: Vec<(usize, usize, f64)>, taps_x: Vec<(usize, usize, f64)>, iw: usize },
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug)]
pub struct Network {
    specs: Vec<LayerSpec>,
    shapes: Vec<Shape>,
    ops: Vec<Op>,
    fan_in: Vec<Option<usize>>,
    params: Vec<f64>,
    grads: Vec<f64>,
    id: u64,
    version: u64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            specs: self.specs.clone(),
            shapes: self.shapes.clone(),
            ops: self.ops.clone(),
            fan_in: self.fan_in.clone(),
            params: self.params.clone(),
            grads: self.grads.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

/// Activations recorded by [`Network::forward`], valid for one parameter version.
#[derive(Debug, Clone)]
pub struct Cache {
    net_id: u64,
    version: u64,
    batch: usize,
    inputs: Vec<Vec<f64>>,
}

impl Cache {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl Network {
    /// Builds the network with all parameters zero.
    pub fn zeros(input_shape: Shape, specs: &[LayerSpec]) -> Result<Self> {
        if input_shape.is_empty() {
            return Err(NnError::Shape("input shape must be nonempty".into()));
        }
        let mut shapes = vec![input_shape];
        let mut ops = Vec::with_capacity(specs.len());
        let mut fan_in = Vec::with_capacity(specs.len());
        let mut n_params = 0;
        for spec in specs {
            let s = *shapes.last().unwrap();
            let (op, out, fan) = match *spec {
                LayerSpec::Conv { out_channels, kernel, stride } => {
                    if out_channels == 0 || kernel == 0 || kernel % 2 == 0 || stride == 0 {
                        return Err(NnError::Shape(format!("bad conv spec {spec:?}")));
                    }
                    let pad = kernel / 2;
                    let oh = (s.height + 2 * pad - kernel) / stride + 1;
                    let ow = (s.width + 2 * pad - kernel) / stride + 1;
                    let geom = ConvGeom {
                        cin: s.channels,
                        cout: out_channels,
                        kernel,
                        stride,
                        pad,
                        ih: s.height,
                        iw: s.width,
                        oh,
                        ow,
                    };
                    let w = n_params;
                    n_params += out_channels * geom.patch();
                    let b = n_params;
                    n_params += out_channels;
                    (Op::Conv { geom, w, b }, Shape::new(out_channels, oh, ow), Some(geom.patch()))
                }
                LayerSpec::Dense { out_dim } => {
                    if s.height != 1 || s.width != 1 {
                        return Err(NnError::Shape(format!("dense layer needs a flat input, got {s:?}")));
                    }
                    if out_dim == 0 {
                        return Err(NnError::Shape("dense out_dim must be positive".into()));
                    }
                    let w = n_params;
                    n_params += out_dim * s.channels;
                    let b = n_params;
                    n_params += out_dim;
                    (Op::Dense { input: s.channels, output: out_dim, w, b }, Shape::new(out_dim, 1, 1), Some(s.channels))
                }
                LayerSpec::Relu => (Op::Relu, s, None),
                LayerSpec::Flatten => (Op::Flatten { channels: s.channels, plane: s.plane() }, Shape::new(s.len(), 1, 1), None),
                LayerSpec::Upsample { factor } => {
                    if factor == 0 {
                        return Err(NnError::Shape("upsample factor must be positive".into()));
                    }
                    let op = Op::Upsample {
                        taps_y: bilinear_taps(s.height, factor),
                        taps_x: bilinear_taps(s.width, factor),
                        iw: s.width,
                    };
                    (op, Shape::new(s.channels, s.height * factor, s.width * factor), None)
                }
            };
            ops.push(op);
            shapes.push(out);
            fan_in.push(fan);
        }
        Ok(Self {
            specs: specs.to_vec(),
            shapes,
            ops,
            fan_in,
            params: vec![0.0; n_params],
            grads: vec![0.0; n_params],
            id: fresh_id(),
            version: 0,
        })
    }

    /// Weights and biases uniform in `+-1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(input_shape: Shape, specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(input_shape, specs)?;
        for (op, fan) in net.ops.iter().zip(&net.fan_in) {
            let (start, end) = match *op {
                Op::Conv { geom, w, .. } => (w, w + geom.cout * (geom.patch() + 1)),
                Op::Dense { input, output, w, .. } => (w, w + output * (input + 1)),
                _ => continue,
            };
            let bound = 1.0 / (fan.unwrap() as f64).sqrt();
            for p in &mut net.params[start..end] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().unwrap()
    }

    /// Output shape after each layer.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes[1..]
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters; invalidates every outstanding cache.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(NnError::Shape(format!("expected {} parameters, got {}", self.params.len(), params.len())));
        }
        self.params_mut().copy_from_slice(params);
        Ok(())
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Parameter ranges `(weights, biases)` of each parametrized layer, in order.
    pub fn param_ranges(&self) -> Vec<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        self.ops
            .iter()
            .filter_map(|op| match *op {
                Op::Conv { geom, w, b } => Some((w..b, b..b + geom.cout)),
                Op::Dense { output, w, b, .. } => Some((w..b, b..b + output)),
                _ => None,
            })
            .collect()
    }

    fn batch_of(&self, len: usize) -> Result<usize> {
        let per = self.input_shape().len();
        if len == 0 || len % per != 0 {
            return Err(NnError::Shape(format!("input of length {len} is not a batch of {:?}", self.input_shape())));
        }
        Ok(len / per)
    }

    /// Runs the batch and keeps what [`Network::backward`] needs.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Cache)> {
        let batch = self.batch_of(input.len())?;
        let s = self.input_shape();
        let mut x = to_channel_major(batch, s.channels, s.plane(), input);
        let mut inputs = Vec::with_capacity(self.ops.len());
        let mut col = Vec::new();
        for (op, out_shape) in self.ops.iter().zip(&self.shapes[1..]) {
            let y = self.apply(op, *out_shape, batch, &x, &mut col, true);
            inputs.push(x);
            x = y;
        }
        let o = self.output_shape();
        let out = to_sample_major(batch, o.channels, o.plane(), &x);
        Ok((out, Cache { net_id: self.id, version: self.version, batch, inputs }))
    }

    /// Forward pass without a cache.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        let batch = self.batch_of(input.len())?;
        let s = self.input_shape();
        let mut x = to_channel_major(batch, s.channels, s.plane(), input);
        let mut col = Vec::new();
        for (op, out_shape) in self.ops.iter().zip(&self.shapes[1..]) {
            x = self.apply(op, *out_shape, batch, &x, &mut col, true);
        }
        let o = self.output_shape();
        Ok(to_sample_major(batch, o.channels, o.plane(), &x))
    }

    /// Which ReLU inputs are positive, over every ReLU layer and the whole
    /// batch. Equal patterns mean the same piece of the piecewise map.
    pub fn relu_pattern(&self, input: &[f64]) -> Result<Vec<bool>> {
        let batch = self.batch_of(input.len())?;
        let s = self.input_shape();
        let mut x = to_channel_major(batch, s.channels, s.plane(), input);
        let mut col = Vec::new();
        let mut pattern = Vec::new();
        for (op, out_shape) in self.ops.iter().zip(&self.shapes[1..]) {
            if let Op::Relu = op {
                pattern.extend(x.iter().map(|&v| v > 0.0));
            }
            x = self.apply(op, *out_shape, batch, &x, &mut col, true);
        }
        Ok(pattern)
    }

    /// One layer on channel-major `x`. With `bias` false the affine layers
    /// drop their offsets, which is the layer's linear part.
    fn apply(&self, op: &Op, out: Shape, batch: usize, x: &[f64], col: &mut Vec<f64>, bias: bool) -> Vec<f64> {
        match op {
            Op::Conv { geom, w, b } => {
                let n = batch * geom.oh * geom.ow;
                let mut y = vec![0.0; geom.cout * n];
                conv_forward(geom, batch, x, &self.params[*w..*b], &mut y, col);
                if bias {
                    for (co, row) in y.chunks_exact_mut(n).enumerate() {
                        let bv = self.params[b + co];
                        row.iter_mut().for_each(|v| *v += bv);
                    }
                }
                y
            }
            Op::Dense { input, output, w, b } => {
                let mut y = vec![0.0; output * batch];
                gemm(*output, *input, batch, &self.params[*w..*b], (*input, 1), x, (batch, 1), 0.0, &mut y);
                if bias {
                    for (o, row) in y.chunks_exact_mut(batch).enumerate() {
                        let bv = self.params[b + o];
                        row.iter_mut().for_each(|v| *v += bv);
                    }
                }
                y
            }
            Op::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            Op::Flatten { channels, plane } => {
                let mut y = vec![0.0; x.len()];
                for c in 0..*channels {
                    for bi in 0..batch {
                        for p in 0..*plane {
                            y[(c * plane + p) * batch + bi] = x[(c * batch + bi) * plane + p];
                        }
                    }
                }
                y
            }
            Op::Upsample { taps_y, taps_x, iw } => {
                let mut y = vec![0.0; out.len() * batch];
                upsample(taps_y, taps_x, *iw, out.channels * batch, x, &mut y);
                y
            }
        }
    }

    fn check_cache(&self, cache: &Cache) -> Result<()> {
        if cache.net_id != self.id || cache.version != self.version {
            return Err(NnError::StaleCache);
        }
        Ok(())
    }

    fn check_output(&self, cache: &Cache, grad_output: &[f64]) -> Result<()> {
        let expected = cache.batch * self.output_shape().len();
        if grad_output.len() != expected {
            return Err(NnError::Shape(format!("output gradient has length {}, expected {expected}", grad_output.len())));
        }
        Ok(())
    }

    /// Reverse pass. Adds parameter gradients to `grads` when given and
    /// returns the channel-major input gradient plus, when `keep` is set, the
    /// gradient at every layer output.
    fn backprop(
        &self,
        cache: &Cache,
        grad_output: &[f64],
        mut grads: Option<&mut [f64]>,
        keep: bool,
        input_grad: bool,
    ) -> (Vec<f64>, Vec<Vec<f64>>) {
        let batch = cache.batch;
        let o = self.output_shape();
        let mut delta = to_channel_major(batch, o.channels, o.plane(), grad_output);
        let mut kept = vec![Vec::new(); if keep { self.ops.len() } else { 0 }];
        let mut col = Vec::new();
        for (l, op) in self.ops.iter().enumerate().rev() {
            let x = &cache.inputs[l];
            let skip_input = l == 0 && !input_grad;
            let din = match op {
                Op::Conv { geom, w, b } => {
                    let n = batch * geom.oh * geom.ow;
                    let dw = match grads.as_deref_mut() {
                        Some(g) => {
                            for (co, row) in delta.chunks_exact(n).enumerate() {
                                g[b + co] += row.iter().sum::<f64>();
                            }
                            Some(&mut g[*w..*b])
                        }
                        None => None,
                    };
                    let mut dx = if skip_input { Vec::new() } else { vec![0.0; x.len()] };
                    let target = (!skip_input).then_some(dx.as_mut_slice());
                    conv_backward(geom, batch, x, &self.params[*w..*b], &delta, dw, target, &mut col);
                    if skip_input {
                        break;
                    }
                    dx
                }
                Op::Dense { input, output, w, b } => {
                    if let Some(g) = grads.as_deref_mut() {
                        gemm(*output, batch, *input, &delta, (batch, 1), x, (1, batch), 1.0, &mut g[*w..*b]);
                        for (oi, row) in delta.chunks_exact(batch).enumerate() {
                            g[b + oi] += row.iter().sum::<f64>();
                        }
                    }
                    if skip_input {
                        break;
                    }
                    let mut dx = vec![0.0; input * batch];
                    gemm(*input, *output, batch, &self.params[*w..*b], (1, *input), &delta, (batch, 1), 0.0, &mut dx);
                    dx
                }
                Op::Relu => delta.iter().zip(x).map(|(&d, &v)| if v > 0.0 { d } else { 0.0 }).collect(),
                Op::Flatten { channels, plane } => {
                    let mut dx = vec![0.0; delta.len()];
                    for c in 0..*channels {
                        for bi in 0..batch {
                            for p in 0..*plane {
                                dx[(c * batch + bi) * plane + p] = delta[(c * plane + p) * batch + bi];
                            }
                        }
                    }
                    dx
                }
                Op::Upsample { taps_y, taps_x, iw } => {
                    let mut dx = vec![0.0; x.len()];
                    let planes = self.shapes[l].channels * batch;
                    upsample_adjoint(taps_y, taps_x, *iw, planes, &delta, &mut dx);
                    dx
                }
            };
            if keep {
                kept[l] = std::mem::replace(&mut delta, din);
            } else {
                delta = din;
            }
        }
        (delta, kept)
    }

    /// Accumulates into the parameter gradients the gradient of the scalar
    /// loss whose output gradient is `grad_output`; returns the input gradient.
    pub fn backward(&mut self, cache: &Cache, grad_output: &[f64]) -> Result<Vec<f64>> {
        self.check_cache(cache)?;
        self.check_output(cache, grad_output)?;
        let mut grads = std::mem::take(&mut self.grads);
        let (din, _) = self.backprop(cache, grad_output, Some(&mut grads), false, true);
        self.grads = grads;
        let s = self.input_shape();
        Ok(to_sample_major(cache.batch, s.channels, s.plane(), &din))
    }

    /// [`Network::backward`] without the input gradient.
    pub fn backward_params(&mut self, cache: &Cache, grad_output: &[f64]) -> Result<()> {
        self.check_cache(cache)?;
        self.check_output(cache, grad_output)?;
        let mut grads = std::mem::take(&mut self.grads);
        self.backprop(cache, grad_output, Some(&mut grads), false, false);
        self.grads = grads;
        Ok(())
    }

    /// Input gradient only; parameter gradients are left untouched.
    pub fn input_gradient(&self, cache: &Cache, grad_output: &[f64]) -> Result<Vec<f64>> {
        self.check_cache(cache)?;
        self.check_output(cache, grad_output)?;
        let (din, _) = self.backprop(cache, grad_output, None, false, true);
        let s = self.input_shape();
        Ok(to_sample_major(cache.batch, s.channels, s.plane(), &din))
    }

    /// For a scalar-output network, accumulates the parameter gradient of
    /// `(weight / 2) * mean_i |grad_x f(x_i)|^2` over the cached batch and
    /// returns that penalty value.
    ///
    /// Inside a linear region the input gradient is the product of the layer
    /// Jacobians, so its parameter derivative pairs the usual reverse-mode
    /// deltas with a forward tangent pass seeded by the scaled input gradient.
    pub fn input_gradient_penalty(&mut self, cache: &Cache, weight: f64) -> Result<f64> {
        self.check_cache(cache)?;
        if self.output_shape().len() != 1 {
            return Err(NnError::Argument("input gradient penalty needs a scalar-output network".into()));
        }
        let batch = cache.batch;
        let ones = vec![1.0; batch];
        let (gx, deltas) = self.backprop(cache, &ones, None, true, true);
        let penalty = 0.5 * weight * gx.iter().map(|g| g * g).sum::<f64>() / batch as f64;
        let scale = weight / batch as f64;
        let mut t: Vec<f64> = gx.iter().map(|g| g * scale).collect();
        let mut grads = std::mem::take(&mut self.grads);
        let mut col = Vec::new();
        for (l, (op, out_shape)) in self.ops.iter().zip(&self.shapes[1..]).enumerate() {
            let next = match op {
                Op::Relu => t.iter().zip(&cache.inputs[l]).map(|(&v, &x)| if x > 0.0 { v } else { 0.0 }).collect(),
                _ => self.apply(op, *out_shape, batch, &t, &mut col, false),
            };
            match op {
                Op::Conv { geom, w, b } => {
                    conv_backward(geom, batch, &t, &self.params[*w..*b], &deltas[l], Some(&mut grads[*w..*b]), None, &mut col);
                }
                Op::Dense { input, output, w, b } => {
                    gemm(*output, batch, *input, &deltas[l], (batch, 1), &t, (1, batch), 1.0, &mut grads[*w..*b]);
                }
                _ => {}
            }
            t = next;
        }
        self.grads = grads;
        Ok(penalty)
    }

    /// Per-sample parameter gradient of a scalar-output network.
    fn sample_param_grad(&self, input: &[f64]) -> Result<Vec<f64>> {
        let (_, cache) = self.forward(input)?;
        let mut g = vec![0.0; self.params.len()];
        self.backprop(&cache, &[1.0], Some(&mut g), false, false);
        Ok(g)
    }

    /// For a scalar-output network, accumulates the parameter gradient of
    /// `(weight / 2) * mean_i |grad_params f(x_i)|^2` using a central
    /// difference Hessian-vector product, and returns the penalty value.
    pub fn param_gradient_penalty(&mut self, input: &[f64], weight: f64) -> Result<f64> {
        if self.output_shape().len() != 1 {
            return Err(NnError::Argument("parameter gradient penalty needs a scalar-output network".into()));
        }
        let batch = self.batch_of(input.len())?;
        let per = self.input_shape().len();
        let base = self.params.clone();
        let mut probe = self.clone();
        let mut penalty = 0.0;
        let mut total = vec![0.0; base.len()];
        for x in input.chunks_exact(per) {
            let g = self.sample_param_grad(x)?;
            let norm2: f64 = g.iter().map(|v| v * v).sum();
            penalty += 0.5 * weight * norm2 / batch as f64;
            let norm = norm2.sqrt();
            if norm == 0.0 {
                continue;
            }
            let eps = 1e-5 / norm;
            let shifted = |sign: f64, probe: &mut Network| -> Result<Vec<f64>> {
                let p: Vec<f64> = base.iter().zip(&g).map(|(&p, &d)| p + sign * eps * d).collect();
                probe.set_params(&p)?;
                probe.sample_param_grad(x)
            };
            let plus = shifted(1.0, &mut probe)?;
            let minus = shifted(-1.0, &mut probe)?;
            for (t, (p, m)) in total.iter_mut().zip(plus.iter().zip(&minus)) {
                *t += weight / batch as f64 * (p - m) / (2.0 * eps);
            }
        }
        for (g, t) in self.grads.iter_mut().zip(&total) {
            *g += t;
        }
        Ok(penalty)
    }

    /// Checkpoint bytes: `u32` LE header length, JSON header, LE `f64` parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            input_shape: self.input_shape(),
            layers: self.specs.clone(),
            n_params: self.params.len(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(4 + json.len() + 8 * self.params.len());
        out.extend((json.len() as u32).to_le_bytes());
        out.extend(json);
        out.extend(self.params.iter().flat_map(|p| p.to_le_bytes()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| NnError::Format(m.to_string());
        let mut reader = bytes;
        let mut len = [0u8; 4];
        reader.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
        let len = u32::from_le_bytes(len) as usize;
        if reader.len() < len {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&reader[..len]).map_err(|e| NnError::Format(e.to_string()))?;
        let body = &reader[len..];
        let mut net = Self::zeros(header.input_shape, &header.layers)?;
        if header.n_params != net.n_params() || body.len() != 8 * net.n_params() {
            return Err(bad("parameter count does not match the layer specs"));
        }
        for (p, chunk) in net.params.iter_mut().zip(body.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    input_shape: Shape,
    layers: Vec<LayerSpec>,
    n_params: usize,
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl Adam {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
        }
    }

    pub fn step(&mut self, net: &mut Network) -> Result<()> {
        if self.first_moment.len() != net.n_params() {
            return Err(NnError::Shape("optimizer state does not match the network".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        let grads = std::mem::take(&mut net.grads);
        for (((p, g), m), v) in
            net.params_mut().iter_mut().zip(&grads).zip(&mut self.first_moment).zip(&mut self.second_moment)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
        net.grads = grads;
        Ok(())
    }
}

/// `-log softmax(logits)[target]` and its gradient `softmax - onehot`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(NnError::Argument(format!("target {target} outside {} logits", logits.len())));
    }
    let (arg, max) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let rest: f64 = exps.iter().enumerate().filter(|&(i, _)| i != arg).map(|(_, e)| e).sum();
    let loss = (max - logits[target]) + rest.ln_1p();
    let total = 1.0 + rest;
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Widths of the default pixel-score network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QNetWidths {
    pub enc1: usize,
    pub enc2: usize,
    pub enc3: usize,
    pub dec: usize,
}

impl Default for QNetWidths {
    fn default() -> Self {
        Self { enc1: 8, enc2: 16, enc3: 16, dec: 8 }
    }
}

/// Encoder-decoder mapping an observation to one score per pixel.
pub fn q_network_layers(w: QNetWidths) -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        Conv { out_channels: w.enc1, kernel: 3, stride: 1 },
        Relu,
        Conv { out_channels: w.enc2, kernel: 3, stride: 2 },
        Relu,
        Conv { out_channels: w.enc3, kernel: 3, stride: 2 },
        Relu,
        Upsample { factor: 2 },
        Conv { out_channels: w.dec, kernel: 3, stride: 1 },
        Relu,
        Upsample { factor: 2 },
        Conv { out_channels: 1, kernel: 3, stride: 1 },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorWidths {
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
}

impl Default for DiscriminatorWidths {
    fn default() -> Self {
        Self { conv1: 8, conv2: 16, hidden: 64 }
    }
}

/// Strided conv features then a linear-output MLP over stacked `(s, s')` channels.
pub fn discriminator_layers(w: DiscriminatorWidths) -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        Conv { out_channels: w.conv1, kernel: 3, stride: 2 },
        Relu,
        Conv { out_channels: w.conv2, kernel: 3, stride: 2 },
        Relu,
        Flatten,
        Dense { out_dim: w.hidden },
        Relu,
        Dense { out_dim: 1 },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut net = Network::zeros(Shape::new(3, 1, 1), &[LayerSpec::Dense { out_dim: 3 }]).unwrap();
        let p = net.params_mut();
        for i in 0..3 {
            p[i * 3 + i] = 1.0;
        }
        let x = [0.5, -2.0, 7.0, 1.0, 2.0, 3.0];
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn zero_relu_net_outputs_zero() {
        let specs = q_network_layers(QNetWidths::default());
        let net = Network::zeros(Shape::new(2, 28, 24), &specs).unwrap();
        let x: Vec<f64> = (0..2 * 28 * 24).map(|i| (i % 7) as f64).collect();
        assert!(net.predict(&x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_shapes() {
        let q = Network::zeros(Shape::new(2, 28, 24), &q_network_layers(QNetWidths::default())).unwrap();
        assert_eq!(q.output_shape(), Shape::new(1, 28, 24));
        let d = Network::zeros(Shape::new(4, 28, 24), &discriminator_layers(DiscriminatorWidths::default())).unwrap();
        assert_eq!(d.output_shape(), Shape::new(1, 1, 1));
        assert_eq!(d.shapes()[2], Shape::new(16, 7, 6));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = Network::new(Shape::new(2, 1, 1), &[LayerSpec::Dense { out_dim: 1 }], &mut rng(1)).unwrap();
        let (_, cache) = net.forward(&[1.0, 2.0]).unwrap();
        let other = net.clone();
        assert!(matches!(other.input_gradient(&cache, &[1.0]), Err(NnError::StaleCache)));
        net.params_mut()[0] += 1.0;
        assert!(matches!(net.backward(&cache, &[1.0]), Err(NnError::StaleCache)));
    }

    #[test]
    fn shape_errors() {
        let net = Network::zeros(Shape::new(2, 3, 3), &[LayerSpec::Relu]).unwrap();
        assert!(net.forward(&[0.0; 5]).is_err());
        assert!(Network::zeros(Shape::new(2, 3, 3), &[LayerSpec::Dense { out_dim: 1 }]).is_err());
        assert!(Network::zeros(Shape::new(2, 3, 3), &[LayerSpec::Conv { out_channels: 1, kernel: 2, stride: 1 }]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = Network::new(Shape::new(4, 28, 24), &discriminator_layers(Default::default()), &mut rng(2)).unwrap();
        let back = Network::from_bytes(&net.to_bytes()).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.layers(), net.layers());
        assert_eq!(back.to_bytes(), net.to_bytes());
        let bytes = net.to_bytes();
        assert!(Network::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn softmax_cases() {
        let (loss, _) = softmax_cross_entropy(&[0.3; 8], 2).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
        let mut logits = vec![0.0; 10];
        logits[4] = 50.0;
        let (loss, _) = softmax_cross_entropy(&logits, 4).unwrap();
        assert!(loss > 0.0 && loss < 1e-20);
        assert!(softmax_cross_entropy(&logits, 10).is_err());
    }

    #[test]
    fn adam_first_step_is_bounded_by_the_rate() {
        let mut net = Network::zeros(Shape::new(2, 1, 1), &[LayerSpec::Dense { out_dim: 1 }]).unwrap();
        let mut adam = Adam::new(net.n_params(), 1e-4);
        adam.step(&mut net).unwrap();
        assert!(net.params().iter().all(|&p| p == 0.0));
        net.grads_mut().copy_from_slice(&[0.3, -2.0, 5.0]);
        adam.step(&mut net).unwrap();
        for (&p, &g) in net.params().iter().zip(&[0.3f64, -2.0, 5.0]) {
            assert_eq!(p.signum(), -g.signum());
            assert!(p.abs() <= 1e-4 * (1.0 + 1e-6));
        }
    }
}
