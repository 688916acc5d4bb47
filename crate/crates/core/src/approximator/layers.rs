//! Convolution and dense layers over flat `f64` parameter slices, with
//! hand-written backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Square convolution over a `channels x side x side` input with zero padding
/// of `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer {
    Conv {
        in_channels: usize,
        in_side: usize,
        out_channels: usize,
        out_side: usize,
        kernel: usize,
        stride: usize,
        offset: usize,
        activation: Activation,
    },
    Dense {
        inputs: usize,
        outputs: usize,
        offset: usize,
        activation: Activation,
    },
}

impl Layer {
    pub(crate) fn conv(
        in_channels: usize,
        in_side: usize,
        spec: ConvSpec,
        offset: usize,
        activation: Activation,
    ) -> Layer {
        let pad = spec.kernel / 2;
        let out_side = (in_side + 2 * pad - spec.kernel) / spec.stride + 1;
        Layer::Conv {
            in_channels,
            in_side,
            out_channels: spec.out_channels,
            out_side,
            kernel: spec.kernel,
            stride: spec.stride,
            offset,
            activation,
        }
    }

    pub(crate) fn dense(
        inputs: usize,
        outputs: usize,
        offset: usize,
        activation: Activation,
    ) -> Layer {
        Layer::Dense {
            inputs,
            outputs,
            offset,
            activation,
        }
    }

    pub(crate) fn param_count(&self) -> usize {
        match *self {
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel * kernel + out_channels,
            Layer::Dense {
                inputs, outputs, ..
            } => outputs * inputs + outputs,
        }
    }

    pub(crate) fn input_len(&self) -> usize {
        match *self {
            Layer::Conv {
                in_channels,
                in_side,
                ..
            } => in_channels * in_side * in_side,
            Layer::Dense { inputs, .. } => inputs,
        }
    }

    pub(crate) fn output_len(&self) -> usize {
        match *self {
            Layer::Conv {
                out_channels,
                out_side,
                ..
            } => out_channels * out_side * out_side,
            Layer::Dense { outputs, .. } => outputs,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Conv {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            Layer::Dense { inputs, .. } => inputs,
        }
    }

    fn offset(&self) -> usize {
        match *self {
            Layer::Conv { offset, .. } | Layer::Dense { offset, .. } => offset,
        }
    }

    /// Uniform fan-in initialization of weights; biases start at zero.
    pub(crate) fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        let bound = 1.0 / (self.fan_in() as f64).sqrt();
        let p = &mut params[self.offset()..self.offset() + self.param_count()];
        let weights = p.len() - self.output_len_bias();
        for w in &mut p[..weights] {
            *w = rng.random_range(-bound..bound);
        }
        p[weights..].fill(0.0);
    }

    fn output_len_bias(&self) -> usize {
        match *self {
            Layer::Conv { out_channels, .. } => out_channels,
            Layer::Dense { outputs, .. } => outputs,
        }
    }

    pub(crate) fn forward(&self, params: &[f64], input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match *self {
            Layer::Conv {
                in_channels,
                in_side,
                out_channels,
                out_side,
                kernel,
                stride,
                offset,
                activation,
            } => {
                let pad = kernel / 2;
                let kk = kernel * kernel;
                let w = &params[offset..offset + out_channels * in_channels * kk];
                let b = &params[offset + out_channels * in_channels * kk..];
                let (plane_in, plane_out) = (in_side * in_side, out_side * out_side);
                out.resize(out_channels * plane_out, 0.0);
                let ranges: Vec<(usize, usize)> = (0..kernel)
                    .map(|k| valid_range(k, pad, stride, in_side, out_side))
                    .collect();
                for (o, plane) in out.chunks_exact_mut(plane_out).enumerate() {
                    plane.fill(b[o]);
                    for c in 0..in_channels {
                        let inp = &input[c * plane_in..(c + 1) * plane_in];
                        let wk = &w[(o * in_channels + c) * kk..(o * in_channels + c + 1) * kk];
                        for ky in 0..kernel {
                            let (y0, y1) = ranges[ky];
                            for kx in 0..kernel {
                                let (x0, x1) = ranges[kx];
                                let wv = wk[ky * kernel + kx];
                                for oy in y0..y1 {
                                    let iy = oy * stride + ky - pad;
                                    let row_in = &inp[iy * in_side..(iy + 1) * in_side];
                                    let row_out = &mut plane[oy * out_side..(oy + 1) * out_side];
                                    for ox in x0..x1 {
                                        row_out[ox] += wv * row_in[ox * stride + kx - pad];
                                    }
                                }
                            }
                        }
                    }
                }
                for v in out.iter_mut() {
                    *v = activation.apply(*v);
                }
            }
            Layer::Dense {
                inputs,
                outputs,
                offset,
                activation,
            } => {
                let w = &params[offset..offset + inputs * outputs];
                let b = &params[offset + inputs * outputs..offset + inputs * outputs + outputs];
                out.extend((0..outputs).map(|j| {
                    let row = &w[j * inputs..(j + 1) * inputs];
                    let s: f64 = row.iter().zip(input).map(|(a, x)| a * x).sum();
                    activation.apply(s + b[j])
                }));
            }
        }
    }

    /// Backpropagates `d_out` (gradient w.r.t. this layer's output) through the
    /// activation. Accumulates parameter gradients into `grad` when given and
    /// writes the input gradient into `d_in` when given.
    pub(crate) fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        output: &[f64],
        d_out: &[f64],
        grad: Option<&mut [f64]>,
        d_in: Option<&mut Vec<f64>>,
    ) {
        let (activation, offset) = match *self {
            Layer::Conv {
                activation, offset, ..
            }
            | Layer::Dense {
                activation, offset, ..
            } => (activation, offset),
        };
        let d_pre: Vec<f64> = d_out
            .iter()
            .zip(output)
            .map(|(g, y)| g * activation.derivative_from_output(*y))
            .collect();
        let mut grad = grad.map(|g| &mut g[offset..offset + self.param_count()]);
        let mut d_in = d_in;
        if let Some(d) = d_in.as_deref_mut() {
            d.clear();
            d.resize(self.input_len(), 0.0);
        }
        match *self {
            Layer::Conv {
                in_channels,
                in_side,
                out_channels,
                out_side,
                kernel,
                stride,
                ..
            } => {
                let pad = kernel / 2;
                let kk = kernel * kernel;
                let nw = out_channels * in_channels * kk;
                let w = &params[offset..offset + nw];
                let (plane_in, plane_out) = (in_side * in_side, out_side * out_side);
                let ranges: Vec<(usize, usize)> = (0..kernel)
                    .map(|k| valid_range(k, pad, stride, in_side, out_side))
                    .collect();
                for (o, dp) in d_pre.chunks_exact(plane_out).enumerate() {
                    if let Some(gr) = grad.as_deref_mut() {
                        gr[nw + o] += dp.iter().sum::<f64>();
                    }
                    for c in 0..in_channels {
                        let inp = &input[c * plane_in..(c + 1) * plane_in];
                        let wbase = (o * in_channels + c) * kk;
                        for ky in 0..kernel {
                            let (y0, y1) = ranges[ky];
                            for kx in 0..kernel {
                                let (x0, x1) = ranges[kx];
                                let widx = wbase + ky * kernel + kx;
                                if let Some(gr) = grad.as_deref_mut() {
                                    let mut acc = 0.0;
                                    for oy in y0..y1 {
                                        let iy = oy * stride + ky - pad;
                                        let row_in = &inp[iy * in_side..(iy + 1) * in_side];
                                        let row_d = &dp[oy * out_side..(oy + 1) * out_side];
                                        for ox in x0..x1 {
                                            acc += row_d[ox] * row_in[ox * stride + kx - pad];
                                        }
                                    }
                                    gr[widx] += acc;
                                }
                                if let Some(d) = d_in.as_deref_mut() {
                                    let wv = w[widx];
                                    let d = &mut d[c * plane_in..(c + 1) * plane_in];
                                    for oy in y0..y1 {
                                        let iy = oy * stride + ky - pad;
                                        let row_d = &dp[oy * out_side..(oy + 1) * out_side];
                                        let row_in = &mut d[iy * in_side..(iy + 1) * in_side];
                                        for ox in x0..x1 {
                                            row_in[ox * stride + kx - pad] += wv * row_d[ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Layer::Dense {
                inputs, outputs, ..
            } => {
                let w = &params[offset..offset + inputs * outputs];
                for (j, &g) in d_pre.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    if let Some(gr) = grad.as_deref_mut() {
                        for (gw, x) in gr[j * inputs..(j + 1) * inputs].iter_mut().zip(input) {
                            *gw += g * x;
                        }
                        gr[inputs * outputs + j] += g;
                    }
                    if let Some(d) = d_in.as_deref_mut() {
                        for (di, wv) in d.iter_mut().zip(&w[j * inputs..(j + 1) * inputs]) {
                            *di += g * wv;
                        }
                    }
                }
            }
        }
    }
}

/// Output positions `[lo, hi)` along one axis whose kernel tap `k` lands
/// inside the unpadded input.
fn valid_range(
    k: usize,
    pad: usize,
    stride: usize,
    in_side: usize,
    out_side: usize,
) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let hi = (in_side + pad)
        .saturating_sub(k)
        .div_ceil(stride)
        .min(out_side);
    (lo, hi.max(lo))
}

/// A chain of layers sharing one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Stack {
    pub layers: Vec<Layer>,
}

impl Stack {
    pub fn output_len(&self, input_len: usize) -> usize {
        self.layers.last().map_or(input_len, Layer::output_len)
    }

    /// Returns every activation; `acts[0]` is the input.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for layer in &self.layers {
            let mut out = Vec::new();
            layer.forward(params, acts.last().expect("input"), &mut out);
            acts.push(out);
        }
        acts
    }

    /// Backward through the whole stack; returns the input gradient when
    /// requested.
    pub fn backward(
        &self,
        params: &[f64],
        acts: &[Vec<f64>],
        d_out: &[f64],
        mut grad: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let mut upstream = d_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let need_input = i > 0 || want_input;
            let mut d_in = Vec::new();
            layer.backward(
                params,
                &acts[i],
                &acts[i + 1],
                &upstream,
                grad.as_deref_mut(),
                need_input.then_some(&mut d_in),
            );
            if !need_input {
                return None;
            }
            upstream = d_in;
        }
        want_input.then_some(upstream)
    }
}
