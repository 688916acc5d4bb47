use serde::{Deserialize, Serialize};

use super::layers::{Activation, Layer, Stack};
use super::{init_params, Init, TrunkArch};
use crate::error::{Error, Result};
use crate::grammar::RuleKind;

/// Critic layout: a trunk over the features, then dense layers over the trunk
/// output concatenated with the one-hot rule and the split fraction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticArch {
    pub trunk: TrunkArch,
    pub joint: Vec<usize>,
}

impl Default for CriticArch {
    fn default() -> Self {
        CriticArch {
            trunk: TrunkArch::default(),
            joint: vec![32, 32],
        }
    }
}

#[derive(Debug, Clone)]
pub struct CriticTrace {
    trunk_acts: Vec<Vec<f64>>,
    joint_acts: Vec<Vec<f64>>,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticInputGrad {
    pub l: f64,
    pub rule: [f64; 4],
    pub features: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticNet {
    arch: CriticArch,
    trunk: Stack,
    /// Joint hidden layers followed by the linear scalar output.
    joint: Stack,
    params: Vec<f64>,
}

impl CriticNet {
    pub fn new(arch: CriticArch, init: Init) -> CriticNet {
        let (trunk, mut offset) = arch.trunk.build(0);
        let mut width = trunk.output_len(arch.trunk.input_len()) + RuleKind::COUNT + 1;
        let mut layers = Vec::new();
        for &units in &arch.joint {
            let l = Layer::dense(width, units, offset, Activation::Tanh);
            offset += l.param_count();
            width = units;
            layers.push(l);
        }
        let out = Layer::dense(width, 1, offset, Activation::Identity);
        offset += out.param_count();
        layers.push(out);
        let joint = Stack { layers };
        let all: Vec<&Layer> = trunk.layers.iter().chain(&joint.layers).collect();
        let params = init_params(&all, offset, init);
        CriticNet {
            arch,
            trunk,
            joint,
            params,
        }
    }

    pub fn with_params(arch: CriticArch, params: Vec<f64>) -> Result<CriticNet> {
        let mut net = CriticNet::new(arch, Init::Zero);
        if params.len() != net.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "critic expects {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn arch(&self) -> &CriticArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_len(&self) -> usize {
        self.arch.trunk.input_len()
    }

    pub fn forward(&self, features: &[f64], rule: RuleKind, l: f64) -> Result<f64> {
        Ok(self.forward_traced(features, rule, l)?.q)
    }

    pub fn forward_traced(&self, features: &[f64], rule: RuleKind, l: f64) -> Result<CriticTrace> {
        if features.len() != self.input_len() {
            return Err(Error::ShapeMismatch(format!(
                "critic expects {} features, got {}",
                self.input_len(),
                features.len()
            )));
        }
        let trunk_acts = self.trunk.forward(&self.params, features);
        let mut joint_in = trunk_acts.last().expect("trunk output").clone();
        joint_in.extend_from_slice(&rule.one_hot());
        joint_in.push(l);
        let joint_acts = self.joint.forward(&self.params, &joint_in);
        let q = joint_acts.last().expect("critic output")[0];
        Ok(CriticTrace {
            trunk_acts,
            joint_acts,
            q,
        })
    }

    /// Backward pass of `d_q * q`. Parameter gradients are accumulated into
    /// `grad` when given; the feature gradient is computed only on request.
    pub fn backward(
        &self,
        trace: &CriticTrace,
        d_q: f64,
        grad: Option<&mut [f64]>,
        want_features: bool,
    ) -> CriticInputGrad {
        let mut grad = grad;
        let d_joint = self
            .joint
            .backward(
                &self.params,
                &trace.joint_acts,
                &[d_q],
                grad.as_deref_mut(),
                true,
            )
            .expect("joint input gradient");
        let h = d_joint.len() - RuleKind::COUNT - 1;
        let rule = [d_joint[h], d_joint[h + 1], d_joint[h + 2], d_joint[h + 3]];
        let l = d_joint[h + RuleKind::COUNT];
        let features = if grad.is_some() || want_features {
            self.trunk.backward(
                &self.params,
                &trace.trunk_acts,
                &d_joint[..h],
                grad,
                want_features,
            )
        } else {
            None
        };
        CriticInputGrad { l, rule, features }
    }

    /// `q` and `dq/dl` at one input.
    pub fn value_and_slope(&self, features: &[f64], rule: RuleKind, l: f64) -> Result<(f64, f64)> {
        let trace = self.forward_traced(features, rule, l)?;
        let g = self.backward(&trace, 1.0, None, false);
        Ok((trace.q, g.l))
    }
}
