//! A small deterministic neural-network engine.
//!
//! Supports valid (unpadded) strided 2D cross-correlation, dense layers,
//! ELU, inverted dropout and flatten, with exact reverse-mode gradients of
//! the mean squared error and an Adam optimizer. All arithmetic is `f64`.
//!
//! Determinism: samples in a batch are processed sequentially and their
//! gradients are accumulated in sample order; convolutions are lowered to
//! im2col matrix products with fixed shapes, so the reduction order is fixed
//! for a given machine.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MODEL_MAGIC: &[u8; 4] = b"LKN1";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation in layer {layer} ({kind})")]
    NonFinite { layer: usize, kind: &'static str },
    #[error("empty input")]
    Empty,
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("model file: {0}")]
    ModelFile(String),
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn chw(&self) -> Result<(usize, usize, usize), NnError> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(NnError::Shape(format!("expected [C, H, W], got {:?}", self.shape))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    Dense {
        in_units: usize,
        out_units: usize,
    },
    Elu,
    Dropout {
        keep_prob: f64,
    },
    Flatten,
    Identity,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Elu => "elu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Identity => "identity",
        }
    }

    fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::InvalidLayer(m));
        match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, stride } => {
                if in_channels == 0 || out_channels == 0 || kernel.0 == 0 || kernel.1 == 0 {
                    return bad("conv extents must be positive".into());
                }
                if stride.0 == 0 || stride.1 == 0 {
                    return bad("conv strides must be >= 1".into());
                }
            }
            LayerSpec::Dense { in_units, out_units } => {
                if in_units == 0 || out_units == 0 {
                    return bad("dense extents must be positive".into());
                }
            }
            LayerSpec::Dropout { keep_prob } if !(keep_prob > 0.0 && keep_prob <= 1.0) => {
                return bad(format!("keep probability {keep_prob} outside (0, 1]"));
            }
            _ => {}
        }
        Ok(())
    }

    /// (weight count, bias count).
    pub fn param_shape(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                (out_channels * in_channels * kernel.0 * kernel.1, out_channels)
            }
            LayerSpec::Dense { in_units, out_units } => (out_units * in_units, out_units),
            _ => (0, 0),
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                (in_channels * kernel.0 * kernel.1, out_channels * kernel.0 * kernel.1)
            }
            LayerSpec::Dense { in_units, out_units } => (in_units, out_units),
            _ => (0, 0),
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, stride } => {
                let [c, h, w] = input[..] else {
                    return Err(NnError::Shape(format!("conv expects [C, H, W], got {input:?}")));
                };
                if c != in_channels {
                    return Err(NnError::Shape(format!("conv expects {in_channels} channels, got {c}")));
                }
                if kernel.0 > h || kernel.1 > w {
                    return Err(NnError::Shape(format!("kernel {kernel:?} larger than input {h}x{w}")));
                }
                Ok(vec![out_channels, conv_out(h, kernel.0, stride.0), conv_out(w, kernel.1, stride.1)])
            }
            LayerSpec::Dense { in_units, out_units } => {
                let n: usize = input.iter().product();
                if input.len() != 1 || n != in_units {
                    return Err(NnError::Shape(format!("dense expects [{in_units}], got {input:?}")));
                }
                Ok(vec![out_units])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            _ => Ok(input.to_vec()),
        }
    }
}

/// Valid-convolution output extent.
pub fn conv_out(n: usize, k: usize, s: usize) -> usize {
    (n - k) / s + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeroed(spec: LayerSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let (nw, nb) = spec.param_shape();
        Ok(Self { spec, weights: vec![0.0; nw], bias: vec![0.0; nb] })
    }
}

/// Gradients with the same layout as a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net.layers.iter().map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()])).collect(),
        }
    }

    pub fn scale(&mut self, c: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|g| *g *= c);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.layers.iter().flat_map(|(w, b)| [w, b])
    }
}

/// Dropout masks (already scaled by 1/keep) for every dropout layer, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks(pub Vec<Vec<f64>>);

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    Inference,
    Train(&'a DropoutMasks),
}

/// Per-layer record of a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `outputs[i]` is the output of layer `i`; the input is kept separately.
    pub input: Tensor,
    pub outputs: Vec<Tensor>,
    cols: Vec<Option<Vec<f64>>>,
    masks: Vec<Option<Vec<f64>>>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.outputs.last().unwrap_or(&self.input)
    }

    fn layer_input(&self, i: usize) -> &Tensor {
        if i == 0 {
            &self.input
        } else {
            &self.outputs[i - 1]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(specs: &[LayerSpec]) -> Result<Self, NnError> {
        let layers = specs.iter().map(|s| Layer::zeroed(*s)).collect::<Result<_, _>>()?;
        Ok(Self { layers })
    }

    /// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases.
    pub fn initialized(specs: &[LayerSpec], seed: u64) -> Result<Self, NnError> {
        let mut net = Self::new(specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let (fan_in, fan_out) = layer.spec.fans();
            if fan_in == 0 {
                continue;
            }
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Output shape of every layer for the given input shape.
    pub fn shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>, NnError> {
        let mut cur = input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            cur = l.spec.output_shape(&cur)?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Parameter tensors in order: weights then bias of each layer.
    pub fn params(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias])
    }

    /// Draws fresh inverted-dropout masks for an input of the given shape.
    pub fn sample_masks<R: Rng>(&self, input: &[usize], rng: &mut R) -> Result<DropoutMasks, NnError> {
        let shapes = self.shapes(input)?;
        let mut masks = Vec::new();
        for (l, shape) in self.layers.iter().zip(&shapes) {
            if let LayerSpec::Dropout { keep_prob } = l.spec {
                let n: usize = shape.iter().product();
                let scale = 1.0 / keep_prob;
                masks.push(
                    (0..n)
                        .map(|_| if keep_prob >= 1.0 || rng.random::<f64>() < keep_prob { scale } else { 0.0 })
                        .collect(),
                );
            }
        }
        Ok(DropoutMasks(masks))
    }

    pub fn forward(&self, x: &Tensor, mode: Mode<'_>) -> Result<Tensor, NnError> {
        let trace = self.forward_trace(x, mode, false)?;
        Ok(trace.output().clone())
    }

    /// Forward pass that records every layer output; with `keep_cols` the
    /// im2col matrices are kept for a subsequent backward pass.
    pub fn forward_trace(&self, x: &Tensor, mode: Mode<'_>, keep_cols: bool) -> Result<Trace, NnError> {
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        let mut cols = Vec::with_capacity(self.layers.len());
        let mut masks_used = Vec::with_capacity(self.layers.len());
        let mut dropout_idx = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { x } else { &outputs[i - 1] };
            let out_shape = layer.spec.output_shape(input.shape())?;
            let mut col = None;
            let mut mask = None;
            let out = match layer.spec {
                LayerSpec::Conv { kernel, stride, .. } => {
                    let c = im2col(input, kernel, stride)?;
                    let out = conv_gemm(layer, &c, &out_shape);
                    if keep_cols {
                        col = Some(c);
                    }
                    out
                }
                LayerSpec::Dense { .. } => dense_forward(input, &layer.weights, &layer.bias)?,
                LayerSpec::Elu => elu(input),
                LayerSpec::Dropout { keep_prob } => match mode {
                    Mode::Inference => input.clone(),
                    Mode::Train(m) => {
                        let mk = m.0.get(dropout_idx).ok_or_else(|| {
                            NnError::Shape(format!("missing dropout mask {dropout_idx}"))
                        })?;
                        if mk.len() != input.len() {
                            return Err(NnError::Shape(format!(
                                "dropout mask has {} entries, activation has {}",
                                mk.len(),
                                input.len()
                            )));
                        }
                        dropout_idx += 1;
                        let _ = keep_prob;
                        let data = input.data.iter().zip(mk).map(|(a, b)| a * b).collect();
                        mask = Some(mk.clone());
                        Tensor { shape: input.shape.clone(), data }
                    }
                },
                LayerSpec::Flatten => Tensor { shape: out_shape.clone(), data: input.data.clone() },
                LayerSpec::Identity => input.clone(),
            };
            if out.data.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite { layer: i, kind: layer.spec.kind() });
            }
            outputs.push(out);
            cols.push(col);
            masks_used.push(mask);
        }
        Ok(Trace { input: x.clone(), outputs, cols, masks: masks_used })
    }

    /// Accumulates parameter gradients of a scalar objective into `grads`,
    /// given `d_out`, the derivative of the objective w.r.t. the network output.
    pub fn backward(&self, trace: &Trace, d_out: &[f64], grads: &mut Gradients) -> Result<(), NnError> {
        if d_out.len() != trace.output().len() {
            return Err(NnError::Shape("output gradient length mismatch".into()));
        }
        let mut delta = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = trace.layer_input(i);
            let need_input_grad = i > 0;
            let (gw, gb) = &mut grads.layers[i];
            delta = match layer.spec {
                LayerSpec::Conv { kernel, stride, .. } => {
                    let owned;
                    let cols = match &trace.cols[i] {
                        Some(c) => c,
                        None => {
                            owned = im2col(input, kernel, stride)?;
                            &owned
                        }
                    };
                    conv_backward(layer, input, cols, &delta, &trace.outputs[i], gw, gb, need_input_grad)
                }
                LayerSpec::Dense { in_units, out_units } => {
                    let x = input.data();
                    for o in 0..out_units {
                        let d = delta[o];
                        gb[o] += d;
                        let row = &mut gw[o * in_units..(o + 1) * in_units];
                        for (g, xi) in row.iter_mut().zip(x) {
                            *g += d * xi;
                        }
                    }
                    if need_input_grad {
                        let mut dx = vec![0.0; in_units];
                        for (d, row) in delta.iter().zip(layer.weights.chunks(in_units)) {
                            for (g, w) in dx.iter_mut().zip(row) {
                                *g += d * w;
                            }
                        }
                        dx
                    } else {
                        Vec::new()
                    }
                }
                LayerSpec::Elu => {
                    // d/dx (exp(x) - 1) = y + 1 on the negative branch.
                    let x = input.data();
                    let y = trace.outputs[i].data();
                    delta.iter().zip(x).zip(y).map(|((d, &xi), &yi)| if xi >= 0.0 { *d } else { d * (yi + 1.0) }).collect()
                }
                LayerSpec::Dropout { .. } => match &trace.masks[i] {
                    Some(m) => delta.iter().zip(m).map(|(d, k)| d * k).collect(),
                    None => delta,
                },
                LayerSpec::Flatten | LayerSpec::Identity => delta,
            };
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        let u = |buf: &mut Vec<u8>, v: usize| buf.extend_from_slice(&(v as u32).to_le_bytes());
        for l in &self.layers {
            match l.spec {
                LayerSpec::Conv { in_channels, out_channels, kernel, stride } => {
                    u(&mut buf, 0);
                    for v in [in_channels, out_channels, kernel.0, kernel.1, stride.0, stride.1] {
                        u(&mut buf, v);
                    }
                }
                LayerSpec::Dense { in_units, out_units } => {
                    u(&mut buf, 1);
                    u(&mut buf, in_units);
                    u(&mut buf, out_units);
                }
                LayerSpec::Elu => u(&mut buf, 2),
                LayerSpec::Dropout { keep_prob } => {
                    u(&mut buf, 3);
                    buf.extend_from_slice(&keep_prob.to_le_bytes());
                }
                LayerSpec::Flatten => u(&mut buf, 4),
                LayerSpec::Identity => u(&mut buf, 5),
            }
        }
        for p in self.params() {
            for v in p {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(NnError::ModelFile(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != MODEL_VERSION {
            return Err(NnError::ModelFile(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut specs = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let spec = match read_u32(&mut r)? {
                0 => {
                    let mut v = [0usize; 6];
                    for x in &mut v {
                        *x = read_u32(&mut r)? as usize;
                    }
                    LayerSpec::Conv {
                        in_channels: v[0],
                        out_channels: v[1],
                        kernel: (v[2], v[3]),
                        stride: (v[4], v[5]),
                    }
                }
                1 => LayerSpec::Dense { in_units: read_u32(&mut r)? as usize, out_units: read_u32(&mut r)? as usize },
                2 => LayerSpec::Elu,
                3 => {
                    let mut b = [0u8; 8];
                    read_exact(&mut r, &mut b)?;
                    LayerSpec::Dropout { keep_prob: f64::from_le_bytes(b) }
                }
                4 => LayerSpec::Flatten,
                5 => LayerSpec::Identity,
                k => return Err(NnError::ModelFile(format!("unknown layer kind {k}"))),
            };
            specs.push(spec);
        }
        let mut net = Network::new(&specs)?;
        for p in net.params_mut() {
            for v in p.iter_mut() {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                *v = f64::from_le_bytes(b);
            }
        }
        if !r.is_empty() {
            return Err(NnError::ModelFile(format!("{} trailing bytes", r.len())));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut f = fs::File::create(path).map_err(|e| NnError::ModelFile(format!("{}: {e}", path.display())))?;
        f.write_all(&self.to_bytes()).map_err(|e| NnError::ModelFile(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = fs::read(path).map_err(|e| NnError::ModelFile(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), NnError> {
    r.read_exact(buf).map_err(|_| NnError::ModelFile("truncated file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Unrolls receptive fields into a `[C*kh*kw, H'*W']` row-major matrix.
fn im2col(x: &Tensor, kernel: (usize, usize), stride: (usize, usize)) -> Result<Vec<f64>, NnError> {
    let (c, h, w) = x.chw()?;
    let (kh, kw) = kernel;
    let (oh, ow) = (conv_out(h, kh, stride.0), conv_out(w, kw, stride.1));
    let p = oh * ow;
    let mut cols = vec![0.0; c * kh * kw * p];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..oh {
                    let src = &x.data[(ci * h + oi * stride.0 + ki) * w..];
                    let d = &mut dst[oi * ow..(oi + 1) * ow];
                    for (oj, v) in d.iter_mut().enumerate() {
                        *v = src[oj * stride.1 + kj];
                    }
                }
            }
        }
    }
    Ok(cols)
}

/// `C = A * B (+ C if accumulate)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie within the given slices
    // (checked by the debug assertions at each call site's shapes).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_gemm(layer: &Layer, cols: &[f64], out_shape: &[usize]) -> Tensor {
    let k = layer.bias.len();
    let p = out_shape[1] * out_shape[2];
    let ckk = layer.weights.len() / k;
    debug_assert_eq!(cols.len(), ckk * p);
    let mut out = vec![0.0; k * p];
    gemm(k, ckk, p, &layer.weights, (ckk as isize, 1), cols, (p as isize, 1), &mut out, false);
    for (row, b) in out.chunks_mut(p).zip(&layer.bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
    Tensor { shape: out_shape.to_vec(), data: out }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    layer: &Layer,
    input: &Tensor,
    cols: &[f64],
    delta: &[f64],
    output: &Tensor,
    gw: &mut [f64],
    gb: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let LayerSpec::Conv { kernel, stride, .. } = layer.spec else { unreachable!() };
    let k = layer.bias.len();
    let p = output.shape[1] * output.shape[2];
    let ckk = layer.weights.len() / k;
    // dW += dY * cols^T
    gemm(k, p, ckk, delta, (p as isize, 1), cols, (1, p as isize), gw, true);
    for (g, row) in gb.iter_mut().zip(delta.chunks(p)) {
        *g += row.iter().sum::<f64>();
    }
    if !need_input_grad {
        return Vec::new();
    }
    // dcols = W^T * dY, then scatter back (col2im).
    let mut dcols = vec![0.0; ckk * p];
    gemm(ckk, k, p, &layer.weights, (1, ckk as isize), delta, (p as isize, 1), &mut dcols, false);
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (oh, ow) = (output.shape[1], output.shape[2]);
    let (kh, kw) = kernel;
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &dcols[row * p..(row + 1) * p];
                for oi in 0..oh {
                    let base = (ci * h + oi * stride.0 + ki) * w + kj;
                    for oj in 0..ow {
                        dx[base + oj * stride.1] += src[oi * ow + oj];
                    }
                }
            }
        }
    }
    dx
}

/// Cross-correlation of `x: [C,H,W]` with `w: [K,C,kh,kw]` plus bias.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: (usize, usize)) -> Result<Tensor, NnError> {
    let [k, c, kh, kw] = w.shape[..] else {
        return Err(NnError::Shape(format!("kernel must be [K, C, kh, kw], got {:?}", w.shape)));
    };
    if b.shape != [k] {
        return Err(NnError::Shape(format!("bias must be [{k}], got {:?}", b.shape)));
    }
    let spec = LayerSpec::Conv { in_channels: c, out_channels: k, kernel: (kh, kw), stride };
    spec.validate()?;
    let out_shape = spec.output_shape(x.shape())?;
    let layer = Layer { spec, weights: w.data.clone(), bias: b.data.clone() };
    Ok(conv_gemm(&layer, &im2col(x, (kh, kw), stride)?, &out_shape))
}

/// `w * x + b` for `x: [n]`, `w: [m, n]` (weights row-major, flat).
pub fn dense_forward(x: &Tensor, w: &[f64], b: &[f64]) -> Result<Tensor, NnError> {
    let n = x.len();
    let m = b.len();
    if w.len() != m * n || x.shape.len() != 1 {
        return Err(NnError::Shape(format!("dense: w has {} values for [{m}, {n}]", w.len())));
    }
    let data = (0..m)
        .map(|o| b[o] + w[o * n..(o + 1) * n].iter().zip(&x.data).map(|(a, v)| a * v).sum::<f64>())
        .collect();
    Ok(Tensor { shape: vec![m], data })
}

/// Exponential linear unit: `x` for `x >= 0`, `exp(x) - 1` otherwise.
pub fn elu(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| elu_scalar(v)).collect();
    Tensor { shape: x.shape.clone(), data }
}

// Branch-free so mixed-sign activations vectorize; the absolute error of
// `exp(v) - 1` is within a couple of ulps of one.
#[inline]
fn elu_scalar(v: f64) -> f64 {
    let neg = exp_nonpositive(v.min(0.0)) - 1.0;
    if v >= 0.0 {
        v
    } else {
        neg
    }
}

/// `exp(v)` for `v <= 0`, a few ulps from libm and several times cheaper.
/// Arguments below -700 are clamped (the result is then < 1e-304).
#[inline]
fn exp_nonpositive(v: f64) -> f64 {
    // ln 2 split so that n * LN2_HI is exact for |n| < 2^11.
    const LN2_HI: f64 = f64::from_bits(0x3FE6_2E42_FEE0_0000);
    const LN2_LO: f64 = f64::from_bits(0x3DEA_39EF_3579_3C76);
    // Adding 1.5 * 2^52 rounds to the nearest integer, left in the low bits.
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let v = v.max(-700.0);
    let t = v * std::f64::consts::LOG2_E + SHIFTER;
    let n = t - SHIFTER;
    let r = (v - n * LN2_HI) - n * LN2_LO;
    // Taylor series to r^13 / 13!; |r| <= ln2 / 2 keeps the tail below 2e-16.
    let mut p = INV_FACT[13];
    for c in INV_FACT[..13].iter().rev() {
        p = p * r + c;
    }
    let scale = f64::from_bits(t.to_bits().wrapping_add(1023) << 52);
    p * scale
}

const INV_FACT: [f64; 14] = [
    1.0,
    1.0,
    0.5,
    0.16666666666666666,
    0.041666666666666664,
    0.008333333333333333,
    0.001388888888888889,
    0.0001984126984126984,
    2.48015873015873e-05,
    2.7557319223985893e-06,
    2.755731922398589e-07,
    2.505210838544172e-08,
    2.08767569878681e-09,
    1.6059043836821613e-10,
];

/// Inverted dropout; identity outside training or when `keep_prob == 1`.
pub fn dropout(x: &Tensor, keep_prob: f64, training: bool, seed: u64) -> Result<Tensor, NnError> {
    LayerSpec::Dropout { keep_prob }.validate()?;
    if !training || keep_prob >= 1.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = x
        .data
        .iter()
        .map(|&v| if rng.random::<f64>() < keep_prob { v / keep_prob } else { 0.0 })
        .collect();
    Ok(Tensor { shape: x.shape.clone(), data })
}

/// Mean squared error.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64, NnError> {
    if pred.is_empty() {
        return Err(NnError::Empty);
    }
    if pred.len() != target.len() {
        return Err(NnError::Shape(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (t - p).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Gradients of the batch MSE over `(inputs, targets)` for a scalar-output
/// network. Returns the loss; gradients are written into `grads` (which is
/// zeroed first).
pub fn batch_gradients(
    net: &Network,
    inputs: &[&Tensor],
    targets: &[f64],
    masks: &[DropoutMasks],
    grads: &mut Gradients,
) -> Result<f64, NnError> {
    if inputs.is_empty() {
        return Err(NnError::Empty);
    }
    if inputs.len() != targets.len() || inputs.len() != masks.len() {
        return Err(NnError::Shape("inputs, targets and masks differ in length".into()));
    }
    for (w, b) in &mut grads.layers {
        w.fill(0.0);
        b.fill(0.0);
    }
    let n = inputs.len() as f64;
    let mut loss = 0.0;
    for ((x, &a), m) in inputs.iter().zip(targets).zip(masks) {
        let trace = net.forward_trace(x, Mode::Train(m), true)?;
        let pred = trace.output().data();
        if pred.len() != 1 {
            return Err(NnError::Shape(format!("expected scalar output, got {}", pred.len())));
        }
        let err = pred[0] - a;
        loss += err * err;
        net.backward(&trace, &[2.0 * err / n], grads)?;
    }
    Ok(loss / n)
}

/// Exact gradients of the single-sample squared error (inference mode).
pub fn backward(net: &Network, x: &Tensor, target: f64) -> Result<Gradients, NnError> {
    let mut grads = Gradients::zeros_like(net);
    let masks = net.sample_masks(x.shape(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let masks = DropoutMasks(masks.0.into_iter().map(|m| vec![1.0; m.len()]).collect());
    batch_gradients(net, &[x], &[target], &[masks], &mut grads)?;
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(net: &Network, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = net.params().map(|p| vec![0.0; p.len()]).collect();
        Self { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn for_shapes(sizes: &[usize], config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        Self { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One bias-corrected Adam update of `params` with `grads`.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut Vec<f64>>,
        grads: impl Iterator<Item = &'a Vec<f64>>,
    ) -> Result<(), NnError> {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut count = 0;
        for (((theta, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if theta.len() != g.len() || theta.len() != m.len() {
                return Err(NnError::Shape("parameter and gradient sizes differ".into()));
            }
            for i in 0..theta.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            count += 1;
        }
        if count != self.m.len() {
            return Err(NnError::Shape(format!("{count} parameter tensors, optimizer has {}", self.m.len())));
        }
        Ok(())
    }

    pub fn step_network(&mut self, net: &mut Network, grads: &Gradients) -> Result<(), NnError> {
        self.step(net.params_mut(), grads.iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution oracle.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, s: (usize, usize)) -> Vec<f64> {
        let (c, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
        let (k, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
        let (oh, ow) = ((h - kh) / s.0 + 1, (wd - kw) / s.1 + 1);
        let mut out = vec![0.0; k * oh * ow];
        for ko in 0..k {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data[ko];
                    for ci in 0..c {
                        for a in 0..kh {
                            for bb in 0..kw {
                                acc += w.data[((ko * c + ci) * kh + a) * kw + bb]
                                    * x.data[(ci * h + i * s.0 + a) * wd + j * s.1 + bb];
                            }
                        }
                    }
                    out[(ko * oh + i) * ow + j] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_scalar_example() {
        let x = Tensor::from_vec(vec![1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor::from_vec(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        assert_eq!(conv2d_forward(&x, &w, &b, (1, 1)).unwrap().data(), &[7.0]);
    }

    #[test]
    fn conv_first_layer_shape() {
        let x = Tensor::zeros(vec![1, 68, 183]);
        let w = Tensor::zeros(vec![24, 1, 5, 5]);
        let b = Tensor::from_vec(vec![24], vec![0.5; 24]).unwrap();
        let y = conv2d_forward(&x, &w, &b, (2, 2)).unwrap();
        assert_eq!(y.shape(), &[24, 32, 90]);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::zeros(vec![2, 4, 4]);
        let w = Tensor::zeros(vec![1, 1, 3, 3]);
        let b = Tensor::zeros(vec![1]);
        assert!(matches!(conv2d_forward(&x, &w, &b, (1, 1)), Err(NnError::Shape(_))));
        let w = Tensor::zeros(vec![1, 2, 5, 5]);
        assert!(matches!(conv2d_forward(&x, &w, &b, (1, 1)), Err(NnError::Shape(_))));
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(c, h, w, k, kh, kw, sh, sw) in
            &[(1, 9, 11, 3, 3, 3, 2, 2), (3, 7, 8, 4, 2, 3, 1, 2), (2, 5, 5, 1, 5, 5, 1, 1), (4, 12, 10, 5, 3, 1, 3, 1)]
        {
            let x = rand_tensor(vec![c, h, w], &mut rng);
            let wt = rand_tensor(vec![k, c, kh, kw], &mut rng);
            let b = rand_tensor(vec![k], &mut rng);
            let got = conv2d_forward(&x, &wt, &b, (sh, sw)).unwrap();
            for (g, e) in got.data().iter().zip(naive_conv(&x, &wt, &b, (sh, sw))) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elu_examples() {
        let x = Tensor::from_vec(vec![3], vec![2.0, -1.0, 0.0]).unwrap();
        let y = elu(&x);
        assert_eq!(y.data()[0], 2.0);
        assert!((y.data()[1] - (-0.6321206)).abs() < 1e-7);
        assert_eq!(y.data()[2], 0.0);
        // One-sided derivatives at zero.
        let h = 1e-7;
        let right = (elu(&Tensor::from_vec(vec![1], vec![h]).unwrap()).data()[0]) / h;
        let left = -(elu(&Tensor::from_vec(vec![1], vec![-h]).unwrap()).data()[0]) / h;
        assert!((right - 1.0).abs() < 1e-6 && (left - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dense_examples() {
        let x = Tensor::from_vec(vec![2], vec![2.0, 3.0]).unwrap();
        assert_eq!(dense_forward(&x, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]).unwrap().data(), &[2.0, 3.0]);
        assert_eq!(dense_forward(&x, &[1.0, 1.0], &[1.0]).unwrap().data(), &[6.0]);
        assert!(dense_forward(&x, &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn dense_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, n) = (7, 13);
        let x = rand_tensor(vec![n], &mut rng);
        let w = rand_tensor(vec![m, n], &mut rng);
        let b = rand_tensor(vec![m], &mut rng);
        let got = dense_forward(&x, w.data(), b.data()).unwrap();
        for i in 0..m {
            let mut acc = b.data()[i];
            for j in 0..n {
                acc += w.data()[i * n + j] * x.data()[j];
            }
            assert!((got.data()[i] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_exp_tracks_libm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        for i in 0..200_000 {
            let v = if i < 1000 { -(i as f64) * 1e-3 } else { -rng.random::<f64>() * 60.0 };
            let (a, b) = (exp_nonpositive(v), v.exp());
            worst = worst.max((a - b).abs() / b);
        }
        assert!(worst < 1e-15, "{worst:e}");
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert!(exp_nonpositive(-800.0) < 1e-300);
        assert!((elu_scalar(-1e-9) + 1e-9).abs() < 1e-16 * 4.0);
    }

    #[test]
    fn dropout_examples() {
        let x = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(dropout(&x, 0.5, false, 1).unwrap(), x);
        assert_eq!(dropout(&x, 1.0, true, 1).unwrap(), x);
        assert!(dropout(&x, 0.0, true, 1).is_err());
        let ones = Tensor::from_vec(vec![1_000_000], vec![1.0; 1_000_000]).unwrap();
        let y = dropout(&ones, 0.5, true, 42).unwrap();
        let mean = y.data().iter().sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((mse_loss(&[0.0, 0.0], &[0.02, -0.01]).unwrap() - 2.5e-4).abs() < 1e-18);
        assert_eq!(
            mse_loss(&[0.3, -0.2, 0.9], &[0.1, 0.4, 0.0]).unwrap(),
            mse_loss(&[0.9, 0.3, -0.2], &[0.0, 0.1, 0.4]).unwrap()
        );
        assert!(matches!(mse_loss(&[], &[]), Err(NnError::Empty)));
        assert!(matches!(mse_loss(&[1.0], &[1.0, 2.0]), Err(NnError::Shape(_))));
    }

    fn tiny_specs() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv { in_channels: 1, out_channels: 3, kernel: (3, 3), stride: (2, 2) },
            LayerSpec::Elu,
            LayerSpec::Conv { in_channels: 3, out_channels: 4, kernel: (3, 3), stride: (1, 1) },
            LayerSpec::Elu,
            LayerSpec::Flatten,
            LayerSpec::Dense { in_units: 12, out_units: 6 },
            LayerSpec::Elu,
            LayerSpec::Dropout { keep_prob: 0.5 },
            LayerSpec::Dense { in_units: 6, out_units: 1 },
            LayerSpec::Identity,
        ]
    }

    #[test]
    fn zero_network_output_bias_gradient() {
        let net = Network::new(&tiny_specs()).unwrap();
        let x = rand_tensor(vec![1, 8, 12], &mut ChaCha8Rng::seed_from_u64(1));
        let a = 0.3;
        let g = backward(&net, &x, a).unwrap();
        let out_bias = &g.layers[8].1;
        assert_eq!(out_bias.len(), 1);
        assert!((out_bias[0] - 2.0 * (0.0 - a) / 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradients_scale_linearly_with_loss() {
        let net = Network::initialized(&tiny_specs(), 9).unwrap();
        let x = rand_tensor(vec![1, 8, 12], &mut ChaCha8Rng::seed_from_u64(2));
        let masks = net.sample_masks(x.shape(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let trace = net.forward_trace(&x, Mode::Train(&masks), true).unwrap();
        let mut g1 = Gradients::zeros_like(&net);
        let mut g3 = Gradients::zeros_like(&net);
        net.backward(&trace, &[0.7], &mut g1).unwrap();
        net.backward(&trace, &[2.1], &mut g3).unwrap();
        for (a, b) in g1.iter().zip(g3.iter()) {
            for (x, y) in a.iter().zip(b) {
                assert!((3.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::for_shapes(&[3], cfg);
        let mut p = [vec![1.0, -2.0, 0.5]];
        st.step(p.iter_mut(), [vec![0.0; 3]].iter()).unwrap();
        assert_eq!(p[0], vec![1.0, -2.0, 0.5]);

        let mut st = AdamState::for_shapes(&[1], cfg);
        let mut p = [vec![0.0]];
        st.step(p.iter_mut(), [vec![1.0]].iter()).unwrap();
        assert!((p[0][0] - (-9.99999990e-5)).abs() < 1e-12, "{}", p[0][0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let g: f64 = rng.random_range(-1e3..1e3);
            let cfg = AdamConfig::default();
            let mut st = AdamState::for_shapes(&[1], cfg);
            let mut p = [vec![0.0]];
            st.step(p.iter_mut(), [vec![g]].iter()).unwrap();
            assert!(p[0][0].abs() <= cfg.lr * (1.0 + 1e-9));
            assert!(st.v[0][0] >= 0.0);
        }
    }

    #[test]
    fn model_file_round_trip_and_rejection() {
        let net = Network::initialized(&tiny_specs(), 1).unwrap();
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..4], b"LKN1");
        assert_eq!(Network::from_bytes(&bytes).unwrap(), net);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Network::from_bytes(&bad), Err(NnError::ModelFile(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Network::from_bytes(&bad), Err(NnError::ModelFile(_))));
        assert!(Network::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn non_finite_activation_is_reported() {
        let mut net = Network::new(&tiny_specs()).unwrap();
        net.layers[0].bias[0] = f64::NAN;
        let x = Tensor::zeros(vec![1, 8, 12]);
        assert!(matches!(net.forward(&x, Mode::Inference), Err(NnError::NonFinite { layer: 0, .. })));
    }
}
