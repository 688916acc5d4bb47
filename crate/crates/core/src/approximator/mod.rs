//! Small differentiable function approximators with manual backpropagation.
//!
//! The policy maps a feature block to a masked categorical distribution over
//! production rules and a split fraction `l = logistic(z)`. The critic maps a
//! feature block, a one-hot rule and a split fraction to a scalar estimate of
//! the expert's normalized cost-to-go. Both share the same trunk layout: a few
//! stride-2 convolutions followed by dense layers, all with `tanh`.

mod adam;
mod checkpoint;
mod critic;
pub mod gradcheck;
mod layers;
mod policy;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, OptimizerConfig};
pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use critic::{CriticArch, CriticInputGrad, CriticNet, CriticTrace};
pub use layers::{Activation, ConvSpec};
pub use policy::{masked_softmax, PolicyArch, PolicyNet, PolicyOutput, PolicyTrace};

use layers::{Layer, Stack};

/// Convolution and dense layout shared by the policy and the critic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkArch {
    pub input_channels: usize,
    pub input_side: usize,
    pub convs: Vec<ConvSpec>,
    pub dense: Vec<usize>,
}

impl Default for TrunkArch {
    fn default() -> Self {
        TrunkArch {
            input_channels: 2,
            input_side: 16,
            convs: vec![
                ConvSpec {
                    out_channels: 8,
                    kernel: 3,
                    stride: 2,
                },
                ConvSpec {
                    out_channels: 8,
                    kernel: 3,
                    stride: 2,
                },
            ],
            dense: vec![32, 32],
        }
    }
}

impl TrunkArch {
    pub fn input_len(&self) -> usize {
        self.input_channels * self.input_side * self.input_side
    }

    /// Builds the layers starting at parameter `offset`; returns the stack and
    /// the offset just past it.
    pub(crate) fn build(&self, mut offset: usize) -> (Stack, usize) {
        let mut layers = Vec::new();
        let (mut channels, mut side) = (self.input_channels, self.input_side);
        for spec in &self.convs {
            let l = Layer::conv(channels, side, *spec, offset, Activation::Tanh);
            offset += l.param_count();
            channels = spec.out_channels;
            side = (side + 2 * (spec.kernel / 2) - spec.kernel) / spec.stride + 1;
            layers.push(l);
        }
        let mut width = channels * side * side;
        for &units in &self.dense {
            let l = Layer::dense(width, units, offset, Activation::Tanh);
            offset += l.param_count();
            width = units;
            layers.push(l);
        }
        (Stack { layers }, offset)
    }
}

/// How fresh parameters are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)` for weights, zero biases.
    Uniform {
        seed: u64,
    },
    Zero,
}

pub(crate) fn init_params(layers: &[&Layer], total: usize, init: Init) -> Vec<f64> {
    let mut params = vec![0.0; total];
    if let Init::Uniform { seed } = init {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in layers {
            l.init(&mut params, &mut rng);
        }
    }
    params
}

/// Squashes `z` into `(0, 1)`, staying strictly inside for any finite input.
pub fn logistic(z: f64) -> f64 {
    const EDGE: f64 = 1e-9;
    (1.0 / (1.0 + (-z).exp())).clamp(EDGE, 1.0 - EDGE)
}
