//! The steering policy: a PilotNet-style CNN mapping a grayscale frame to
//! path curvature, an optional exponential smoother on its output, and
//! visual-backpropagation saliency masks.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{self, CameraError, GrayFrame, INPUT_HEIGHT, INPUT_WIDTH};
use crate::nn::{LayerSpec, Mode, NnError, Network, Tensor};

/// Length of the flattened final convolutional feature map.
pub const FLATTEN_SIZE: usize = 1216;
/// Trainable parameter count of the policy architecture.
pub const PARAM_COUNT: usize = 264_343;
/// Dropout keep probability on the first three dense layers during training.
pub const DEFAULT_KEEP_PROB: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("network output has {0} values, expected 1")]
    NotScalar(usize),
    #[error("smoothing factor {0} outside (0, 1]")]
    InvalidGamma(f64),
}

fn conv(in_channels: usize, out_channels: usize, k: usize, s: usize) -> LayerSpec {
    LayerSpec::Conv { in_channels, out_channels, kernel: (k, k), stride: (s, s) }
}

/// C1..C5, flatten, FF1..FF3 with ELU and dropout, FF4 identity.
pub fn architecture(keep_prob: f64) -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        conv(1, 24, 5, 2),
        Elu,
        conv(24, 36, 5, 2),
        Elu,
        conv(36, 48, 5, 2),
        Elu,
        conv(48, 64, 3, 1),
        Elu,
        conv(64, 76, 3, 1),
        Elu,
        Flatten,
        Dense { in_units: FLATTEN_SIZE, out_units: 100 },
        Elu,
        Dropout { keep_prob },
        Dense { in_units: 100, out_units: 50 },
        Elu,
        Dropout { keep_prob },
        Dense { in_units: 50, out_units: 10 },
        Elu,
        Dropout { keep_prob },
        Dense { in_units: 10, out_units: 1 },
        Identity,
    ]
}

/// Steering network; the output is a path curvature in 1/m.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork {
    net: Network,
}

impl PolicyNetwork {
    pub fn from_network(net: Network) -> Self {
        Self { net }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        Ok(self.net.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Ok(Self { net: Network::load(path)? })
    }

    /// Curvature for an already preprocessed input.
    pub fn infer_tensor(&self, x: &Tensor) -> Result<f64, PolicyError> {
        let out = self.net.forward(x, Mode::Inference)?;
        match out.data() {
            [v] => Ok(*v),
            d => Err(PolicyError::NotScalar(d.len())),
        }
    }
}

pub fn build_network(seed: u64) -> PolicyNetwork {
    let net = Network::initialized(&architecture(DEFAULT_KEEP_PROB), seed).expect("architecture is valid");
    PolicyNetwork { net }
}

/// Preprocess a camera frame and run the network without dropout.
pub fn infer(net: &PolicyNetwork, frame: &GrayFrame) -> Result<f64, PolicyError> {
    net.infer_tensor(&camera::preprocess(frame)?)
}

/// Exponentially decaying average `a_bar <- gamma * a + (1 - gamma) * a_bar`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmootherState {
    pub a_bar: f64,
    pub gamma: f64,
}

impl SmootherState {
    pub fn new(gamma: f64, initial: f64) -> Result<Self, PolicyError> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(PolicyError::InvalidGamma(gamma));
        }
        Ok(Self { a_bar: initial, gamma })
    }

    pub fn smooth(&mut self, a: f64) -> f64 {
        self.a_bar = self.gamma * a + (1.0 - self.gamma) * self.a_bar;
        self.a_bar
    }
}

/// Value-type form of [`SmootherState::smooth`].
pub fn smooth(st: SmootherState, a: f64) -> (f64, SmootherState) {
    let mut next = st;
    let v = next.smooth(a);
    (v, next)
}

/// Input-space saliency in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SaliencyMask {
    pub fn to_frame(&self) -> GrayFrame {
        let px = self.values.iter().map(|v| (255.0 * v).round().clamp(0.0, 255.0) as u8).collect();
        GrayFrame::new(self.width, self.height, px).expect("mask dimensions are consistent")
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

struct Map {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Map {
    fn normalize(&mut self) {
        let m = self.v.iter().copied().fold(0.0, f64::max);
        if m > 0.0 {
            self.v.iter_mut().for_each(|x| *x /= m);
        }
    }

    /// Transposed convolution with an all-ones kernel, cropped or zero
    /// padded to `(h, w)`.
    fn upsample(&self, kernel: (usize, usize), stride: (usize, usize), h: usize, w: usize) -> Map {
        let mut out = vec![0.0; h * w];
        for i in 0..self.h {
            for j in 0..self.w {
                let v = self.v[i * self.w + j];
                if v == 0.0 {
                    continue;
                }
                for a in 0..kernel.0 {
                    let r = i * stride.0 + a;
                    if r >= h {
                        break;
                    }
                    for b in 0..kernel.1 {
                        let c = j * stride.1 + b;
                        if c >= w {
                            break;
                        }
                        out[r * w + c] += v;
                    }
                }
            }
        }
        Map { h, w, v: out }
    }
}

/// Channel mean of a `[C, H, W]` activation, clamped at zero.
fn channel_mean(t: &Tensor) -> Map {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut v = vec![0.0; h * w];
    for ch in t.data().chunks(h * w) {
        v.iter_mut().zip(ch).for_each(|(a, b)| *a += b);
    }
    v.iter_mut().for_each(|a| *a = (*a / c as f64).max(0.0));
    Map { h, w, v }
}

/// Visual backpropagation over every convolution of `net` for input `x`.
pub fn vbp_saliency_tensor(net: &Network, x: &Tensor) -> Result<SaliencyMask, PolicyError> {
    let trace = net.forward_trace(x, Mode::Inference, false)?;
    // (layer index, kernel, stride) of every convolution.
    type ConvSite = (usize, (usize, usize), (usize, usize));
    let convs: Vec<ConvSite> = net
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l.spec {
            LayerSpec::Conv { kernel, stride, .. } => Some((i, kernel, stride)),
            _ => None,
        })
        .collect();
    let (in_h, in_w) = (x.shape()[1], x.shape()[2]);
    if convs.is_empty() {
        return Ok(SaliencyMask { height: in_h, width: in_w, values: vec![0.0; in_h * in_w] });
    };
    let activation = |i: usize| -> &Tensor {
        match net.layers.get(i + 1).map(|l| l.spec) {
            Some(LayerSpec::Elu) => &trace.outputs[i + 1],
            _ => &trace.outputs[i],
        }
    };
    let mut mask = channel_mean(activation(convs[convs.len() - 1].0));
    for l in (0..convs.len() - 1).rev() {
        let target = channel_mean(activation(convs[l].0));
        let (_, kernel, stride) = convs[l + 1];
        let mut up = mask.upsample(kernel, stride, target.h, target.w);
        up.normalize();
        up.v.iter_mut().zip(&target.v).for_each(|(a, b)| *a *= b);
        mask = up;
    }
    let (_, kernel, stride) = convs[0];
    let mut out = mask.upsample(kernel, stride, in_h, in_w);
    out.normalize();
    Ok(SaliencyMask { height: in_h, width: in_w, values: out.v })
}

pub fn vbp_saliency(net: &PolicyNetwork, frame: &GrayFrame) -> Result<SaliencyMask, PolicyError> {
    let mask = vbp_saliency_tensor(&net.net, &camera::preprocess(frame)?)?;
    debug_assert_eq!((mask.height, mask.width), (INPUT_HEIGHT, INPUT_WIDTH));
    Ok(mask)
}
