//! Central-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CriticNet, PolicyNet};
use crate::error::Result;
use crate::grammar::{RuleKind, RuleMask};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and the central differences of
/// `f` around `x`.
pub fn check_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], step: f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * step)));
    }
    worst
}

/// Scalar probe of every policy output: random linear weights on the logits
/// and split pre-activation plus `log pi(r) + mu`, so the masked softmax and
/// the logistic are both exercised.
struct PolicyProbe {
    logit_w: [f64; 4],
    split_w: f64,
    rule: RuleKind,
}

impl PolicyProbe {
    fn eval(&self, net: &PolicyNet, features: &[f64], mask: RuleMask) -> f64 {
        let out = net.forward(features, mask).expect("valid input");
        let lin: f64 = self
            .logit_w
            .iter()
            .zip(&out.logits)
            .map(|(w, z)| w * z)
            .sum();
        lin + self.split_w * out.split_pre + out.prob(self.rule).ln() + out.split
    }
}

/// Compares every parameter and feature gradient of `net` at `features`
/// against central differences. Returns the maximum relative error.
pub fn grad_check_policy(
    net: &PolicyNet,
    features: &[f64],
    mask: RuleMask,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let legal: Vec<RuleKind> = mask.legal().collect();
    let probe = PolicyProbe {
        logit_w: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
        split_w: rng.random_range(-1.0..1.0),
        rule: legal[rng.random_range(0..legal.len())],
    };
    let trace = net.forward_traced(features, mask)?;
    let out = trace.output;
    let lp = out.log_prob_grad(probe.rule);
    let d_logits: [f64; 4] = std::array::from_fn(|i| probe.logit_w[i] + lp[i]);
    let d_split = probe.split_w + out.split_slope();
    let mut grad = vec![0.0; net.param_count()];
    let d_in = net
        .backward(&trace, &d_logits, d_split, &mut grad, true)
        .expect("input gradient");

    let param_err = check_gradient(
        |p| {
            let moved = PolicyNet::with_params(net.arch().clone(), p.to_vec()).expect("same shape");
            probe.eval(&moved, features, mask)
        },
        net.params(),
        &grad,
        DEFAULT_STEP,
    );
    let input_err = check_gradient(|f| probe.eval(net, f, mask), features, &d_in, DEFAULT_STEP);
    Ok(param_err.max(input_err))
}

/// Compares the critic's parameter, feature and split-fraction gradients of
/// `q` against central differences.
pub fn grad_check_critic(net: &CriticNet, features: &[f64], rule: RuleKind, l: f64) -> Result<f64> {
    let trace = net.forward_traced(features, rule, l)?;
    let mut grad = vec![0.0; net.param_count()];
    let g = net.backward(&trace, 1.0, Some(&mut grad), true);
    let q = |n: &CriticNet, f: &[f64], l: f64| n.forward(f, rule, l).expect("valid input");

    let param_err = check_gradient(
        |p| {
            let moved = CriticNet::with_params(net.arch().clone(), p.to_vec()).expect("same shape");
            q(&moved, features, l)
        },
        net.params(),
        &grad,
        DEFAULT_STEP,
    );
    let feature_err = check_gradient(
        |f| q(net, f, l),
        features,
        g.features.as_deref().expect("feature gradient"),
        DEFAULT_STEP,
    );
    let l_err = check_gradient(|x| q(net, features, x[0]), &[l], &[g.l], DEFAULT_STEP);
    Ok(param_err.max(feature_err).max(l_err))
}

#[cfg(test)]
mod tests {
    use super::super::{ConvSpec, CriticArch, Init, PolicyArch, TrunkArch};
    use super::*;

    fn tiny_trunk() -> TrunkArch {
        TrunkArch {
            input_channels: 2,
            input_side: 8,
            convs: vec![
                ConvSpec {
                    out_channels: 3,
                    kernel: 3,
                    stride: 2,
                },
                ConvSpec {
                    out_channels: 4,
                    kernel: 3,
                    stride: 2,
                },
            ],
            dense: vec![8, 6],
        }
    }

    fn random_features(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random()).collect()
    }

    #[test]
    fn linear_policy_is_exact() {
        let arch = PolicyArch {
            trunk: TrunkArch {
                input_channels: 1,
                input_side: 3,
                convs: vec![],
                dense: vec![],
            },
        };
        let net = PolicyNet::new(arch, Init::Uniform { seed: 1 });
        let f = random_features(net.input_len(), 2);
        let err = grad_check_policy(&net, &f, RuleMask::ALL, 3).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn full_policy_across_seeds() {
        for seed in 0..10 {
            let net = PolicyNet::new(
                PolicyArch {
                    trunk: tiny_trunk(),
                },
                Init::Uniform { seed },
            );
            let f = random_features(net.input_len(), 100 + seed);
            let mask = if seed % 3 == 0 {
                RuleMask::ASSIGN_ONLY
            } else {
                RuleMask::ALL
            };
            let err = grad_check_policy(&net, &f, mask, seed).unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn full_critic_across_seeds() {
        for seed in 0..10 {
            let arch = CriticArch {
                trunk: tiny_trunk(),
                joint: vec![7, 5],
            };
            let net = CriticNet::new(arch, Init::Uniform { seed });
            let f = random_features(net.input_len(), 200 + seed);
            let rule = RuleKind::from_index(seed as usize % 4);
            let err = grad_check_critic(&net, &f, rule, 0.1 + 0.08 * seed as f64).unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let x = [0.7, -1.2];
        assert!(check_gradient(f, &x, &[1.4, 3.0], DEFAULT_STEP) < 1e-8);
        assert!(check_gradient(f, &x, &[1.4 * 1.05, 3.0], DEFAULT_STEP) > 1e-2);
    }
}
