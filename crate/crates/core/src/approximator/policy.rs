use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::layers::{Activation, Layer, Stack};
use super::{init_params, logistic, Init, TrunkArch};
use crate::error::{Error, Result};
use crate::grammar::{RuleKind, RuleMask};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PolicyArch {
    pub trunk: TrunkArch,
}

/// Softmax restricted to the legal rules; illegal rules get exactly zero.
pub fn masked_softmax(logits: &[f64; 4], mask: RuleMask) -> Result<[f64; 4]> {
    if mask.is_empty() {
        return Err(Error::EmptyRuleMask);
    }
    let max = mask
        .legal()
        .map(|r| logits[r.index()])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs = [0.0; 4];
    for r in mask.legal() {
        probs[r.index()] = (logits[r.index()] - max).exp();
    }
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }
    Ok(probs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyOutput {
    pub logits: [f64; 4],
    pub probs: [f64; 4],
    /// Pre-activation of the split head.
    pub split_pre: f64,
    /// `logistic(split_pre)`, strictly inside `(0, 1)`.
    pub split: f64,
}

impl PolicyOutput {
    pub fn prob(&self, rule: RuleKind) -> f64 {
        self.probs[rule.index()]
    }

    /// Most likely rule; ties go to the lower rule index.
    pub fn greedy_rule(&self) -> RuleKind {
        let mut best = 0;
        for i in 1..4 {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        RuleKind::from_index(best)
    }

    /// Gradient of `log pi(rule)` with respect to the logits.
    pub fn log_prob_grad(&self, rule: RuleKind) -> [f64; 4] {
        let mut g = [0.0; 4];
        for (i, gi) in g.iter_mut().enumerate() {
            *gi = f64::from(u8::from(i == rule.index())) - self.probs[i];
        }
        g
    }

    /// `dl/dz` of the logistic split head.
    pub fn split_slope(&self) -> f64 {
        self.split * (1.0 - self.split)
    }
}

#[derive(Debug, Clone)]
pub struct PolicyTrace {
    acts: Vec<Vec<f64>>,
    pub output: PolicyOutput,
}

impl PolicyTrace {
    /// Trunk features feeding both heads.
    pub fn hidden(&self) -> &[f64] {
        self.acts.last().expect("trunk output")
    }
}

/// Policy network: shared trunk, a 4-logit rule head and a scalar split head.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    arch: PolicyArch,
    trunk: Stack,
    rule_head: Layer,
    split_head: Layer,
    params: Vec<f64>,
}

impl PolicyNet {
    pub fn new(arch: PolicyArch, init: Init) -> PolicyNet {
        let (trunk, offset) = arch.trunk.build(0);
        let width = trunk.output_len(arch.trunk.input_len());
        let rule_head = Layer::dense(width, RuleKind::COUNT, offset, Activation::Identity);
        let split_head = Layer::dense(
            width,
            1,
            offset + rule_head.param_count(),
            Activation::Identity,
        );
        let total = offset + rule_head.param_count() + split_head.param_count();
        let mut all: Vec<&Layer> = trunk.layers.iter().collect();
        all.push(&rule_head);
        all.push(&split_head);
        let params = init_params(&all, total, init);
        PolicyNet {
            arch,
            trunk,
            rule_head,
            split_head,
            params,
        }
    }

    pub fn with_params(arch: PolicyArch, params: Vec<f64>) -> Result<PolicyNet> {
        let mut net = PolicyNet::new(arch, Init::Zero);
        if params.len() != net.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "policy expects {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn arch(&self) -> &PolicyArch {
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

    /// Parameter index ranges of the trunk, rule head and split head.
    pub fn blocks(&self) -> (Range<usize>, Range<usize>, Range<usize>) {
        let t = self.params.len() - self.rule_head.param_count() - self.split_head.param_count();
        let r = t + self.rule_head.param_count();
        (0..t, t..r, r..self.params.len())
    }

    fn check_input(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.input_len() {
            return Err(Error::ShapeMismatch(format!(
                "policy expects {} features, got {}",
                self.input_len(),
                features.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, features: &[f64], mask: RuleMask) -> Result<PolicyOutput> {
        Ok(self.forward_traced(features, mask)?.output)
    }

    pub fn forward_traced(&self, features: &[f64], mask: RuleMask) -> Result<PolicyTrace> {
        self.check_input(features)?;
        let acts = self.trunk.forward(&self.params, features);
        let h = acts.last().expect("trunk output");
        let mut out = Vec::new();
        self.rule_head.forward(&self.params, h, &mut out);
        let logits = [out[0], out[1], out[2], out[3]];
        self.split_head.forward(&self.params, h, &mut out);
        let split_pre = out[0];
        let probs = masked_softmax(&logits, mask)?;
        Ok(PolicyTrace {
            acts,
            output: PolicyOutput {
                logits,
                probs,
                split_pre,
                split: logistic(split_pre),
            },
        })
    }

    /// Accumulates into `grad` the parameter gradient of a scalar whose
    /// derivatives w.r.t. the logits and the split pre-activation are given.
    /// Returns the feature gradient when `want_input` is set.
    pub fn backward(
        &self,
        trace: &PolicyTrace,
        d_logits: &[f64; 4],
        d_split_pre: f64,
        grad: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let h = trace.acts.last().expect("trunk output");
        let mut d_h = Vec::new();
        let mut d_h2 = Vec::new();
        self.rule_head.backward(
            &self.params,
            h,
            &trace.output.logits,
            d_logits,
            Some(&mut *grad),
            Some(&mut d_h),
        );
        self.split_head.backward(
            &self.params,
            h,
            &[trace.output.split_pre],
            &[d_split_pre],
            Some(&mut *grad),
            Some(&mut d_h2),
        );
        for (a, b) in d_h.iter_mut().zip(&d_h2) {
            *a += b;
        }
        self.trunk
            .backward(&self.params, &trace.acts, &d_h, Some(grad), want_input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> PolicyArch {
        PolicyArch {
            trunk: TrunkArch {
                input_channels: 2,
                input_side: 8,
                convs: vec![super::super::ConvSpec {
                    out_channels: 3,
                    kernel: 3,
                    stride: 2,
                }],
                dense: vec![6],
            },
        }
    }

    #[test]
    fn zero_params_give_uniform_rules_and_half_split() {
        let net = PolicyNet::new(PolicyArch::default(), Init::Zero);
        let f = vec![0.3; net.input_len()];
        let out = net.forward(&f, RuleMask::ALL).unwrap();
        assert_eq!(out.probs, [0.25; 4]);
        assert_eq!(out.split, 0.5);
    }

    #[test]
    fn masked_rules_get_zero_probability() {
        let net = PolicyNet::new(small_arch(), Init::Uniform { seed: 4 });
        let f = vec![0.6; net.input_len()];
        let out = net.forward(&f, RuleMask::ASSIGN_ONLY).unwrap();
        assert_eq!(out.probs[0], 0.0);
        assert_eq!(out.probs[1], 0.0);
        assert!((out.probs[2] + out.probs[3] - 1.0).abs() < 1e-15);
        assert!(matches!(
            net.forward(&f, RuleMask([false; 4])),
            Err(Error::EmptyRuleMask)
        ));
        assert!(net.forward(&f[1..], RuleMask::ALL).is_err());
    }

    #[test]
    fn probabilities_sum_to_one_over_random_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let arch = small_arch();
        for seed in 0..1000 {
            let mut net = PolicyNet::new(arch.clone(), Init::Uniform { seed });
            for p in net.params_mut() {
                *p *= rng.random_range(0.5..20.0);
            }
            let f: Vec<f64> = (0..net.input_len()).map(|_| rng.random()).collect();
            let mask = RuleMask([rng.random(), rng.random(), rng.random(), true]);
            let out = net.forward(&f, mask).unwrap();
            assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(out.split > 0.0 && out.split < 1.0);
        }
    }

    #[test]
    fn split_stays_inside_unit_interval_when_saturated() {
        assert!(logistic(1e6) < 1.0);
        assert!(logistic(-1e6) > 0.0);
    }

    #[test]
    fn parameter_blocks_partition_the_vector() {
        let net = PolicyNet::new(small_arch(), Init::Zero);
        let (t, r, s) = net.blocks();
        assert_eq!(t.end, r.start);
        assert_eq!(r.end, s.start);
        assert_eq!(s.end, net.param_count());
        assert_eq!(r.len(), 6 * 4 + 4);
        assert_eq!(s.len(), 6 + 1);
    }
}
