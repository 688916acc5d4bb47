//! The deterministic actor-critic imitation learner: a critic regressed onto
//! the expert's normalized cost-to-go, and an actor step mixing a
//! score-function term for the rule head with a chain-rule term through the
//! critic for the split head.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::approximator::{Adam, CriticNet, PolicyNet};
use crate::env::{
    keyed_rng, rollout_switched, ReplayMemory, RolloutConfig, SplitSampling, Transition,
};
use crate::error::{Error, Result};
use crate::training::{
    fresh_critic, fresh_policy, logged_accuracy, map_items, mean_or_none, mean_or_zero, LogRow,
    TrainConfig, TrainContext, TrainOutcome, TAG_BATCH, TAG_ROLLOUT,
};

/// Mean squared error of the critic on `batch` and its parameter gradient.
pub fn critic_loss_and_grad(critic: &CriticNet, batch: &[&Transition]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; critic.param_count()];
    let mut loss = 0.0;
    for t in batch {
        let trace = critic.forward_traced(&t.features, t.rule, t.split)?;
        let err = trace.q - t.ret;
        loss += err * err / n;
        critic.backward(&trace, 2.0 * err / n, Some(&mut grad), false);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("critic loss"));
    }
    Ok((loss, grad))
}

/// One optimizer step of the critic regression. Returns the loss before the
/// step.
pub fn critic_update(
    critic: &mut CriticNet,
    adam: &mut Adam,
    batch: &[&Transition],
) -> Result<f64> {
    let (loss, grad) = critic_loss_and_grad(critic, batch)?;
    adam.step(critic.params_mut(), &grad)?;
    Ok(loss)
}

/// Value subtracted from the critic weight of the rule-head term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ActorBaseline {
    #[default]
    None,
    /// Mean critic value over the minibatch.
    BatchMean,
    /// Policy-weighted critic value over the legal rules of each state.
    StateValue,
}

impl FromStr for ActorBaseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<ActorBaseline> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "false" => Ok(ActorBaseline::None),
            "batch" | "true" => Ok(ActorBaseline::BatchMean),
            "state" => Ok(ActorBaseline::StateValue),
            other => Err(Error::Config(format!("unknown actor baseline `{other}`"))),
        }
    }
}

/// Critic input split fraction: the policy mean for split rules, the fixed
/// placeholder for assignments.
pub fn critic_split(rule_is_split: bool, mu: f64) -> f64 {
    if rule_is_split {
        mu
    } else {
        0.5
    }
}

/// Gradient of the actor objective
/// `mean[log pi(r|s) * Q(s, r, mu(s)) + Q(s, r, mu(s))]` with the critic
/// held fixed (its value is a constant weight in the first term), minus the
/// chosen baseline in the first term.
pub fn mixed_actor_gradient(
    policy: &PolicyNet,
    critic: &CriticNet,
    batch: &[&Transition],
    baseline: ActorBaseline,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let mut staged = Vec::with_capacity(batch.len());
    for t in batch {
        let trace = policy.forward_traced(&t.features, t.mask)?;
        let split = t.rule.is_split();
        let l = critic_split(split, trace.output.split);
        let (q, dq_dl) = critic.value_and_slope(&t.features, t.rule, l)?;
        let v = match baseline {
            ActorBaseline::StateValue => {
                let mut v = 0.0;
                for r in t.mask.legal() {
                    let l = critic_split(r.is_split(), trace.output.split);
                    v += trace.output.probs[r.index()] * critic.forward(&t.features, r, l)?;
                }
                v
            }
            _ => 0.0,
        };
        staged.push((trace, q, if split { dq_dl } else { 0.0 }, v));
    }
    let batch_mean = match baseline {
        ActorBaseline::BatchMean => staged.iter().map(|s| s.1).sum::<f64>() / staged.len() as f64,
        _ => 0.0,
    };
    let n = batch.len() as f64;
    let mut grad = vec![0.0; policy.param_count()];
    for (t, (trace, q, dq_dl, v)) in batch.iter().zip(&staged) {
        let b = batch_mean + v;
        let lp = trace.output.log_prob_grad(t.rule);
        let d_logits = lp.map(|g| g * (q - b) / n);
        let d_split = dq_dl * trace.output.split_slope() / n;
        policy.backward(trace, &d_logits, d_split, &mut grad, false);
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("actor gradient"));
    }
    Ok(grad)
}

/// Ascent step on the mixed objective. Returns the gradient's L2 norm.
pub fn actor_update_mixed(
    policy: &mut PolicyNet,
    adam: &mut Adam,
    critic: &CriticNet,
    batch: &[&Transition],
    baseline: ActorBaseline,
) -> Result<f64> {
    let grad = mixed_actor_gradient(policy, critic, batch, baseline)?;
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
    adam.step(policy.params_mut(), &descent)?;
    Ok(norm)
}

/// Actor then critic (or the reverse when configured) on one minibatch.
/// Returns the actor gradient norm and the critic loss.
pub(crate) fn actor_critic_step(
    policy: &mut PolicyNet,
    critic: &mut CriticNet,
    actor_adam: &mut Adam,
    critic_adam: &mut Adam,
    batch: &[&Transition],
    config: &TrainConfig,
) -> Result<(f64, f64)> {
    if config.critic_first {
        let loss = critic_update(critic, critic_adam, batch)?;
        let norm = actor_update_mixed(policy, actor_adam, critic, batch, config.baseline)?;
        Ok((norm, loss))
    } else {
        let norm = actor_update_mixed(policy, actor_adam, critic, batch, config.baseline)?;
        let loss = critic_update(critic, critic_adam, batch)?;
        Ok((norm, loss))
    }
}

/// Runs the full training loop: mixture rollouts with a sampled switching
/// index, one stored transition per image per epoch, then minibatch actor and
/// critic steps from the replay memory.
pub fn train_drag(ctx: &TrainContext<'_>, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut policy = fresh_policy(config);
    let mut critic = fresh_critic(config);
    let mut actor_adam = Adam::new(config.actor, policy.param_count());
    let mut critic_adam = Adam::new(config.critic, critic.param_count());
    let mut memory = ReplayMemory::new(config.memory_capacity);
    let mut log = Vec::with_capacity(config.iterations);
    for epoch in 0..config.iterations {
        let beta = config.beta.at(epoch);
        let rollout_config = RolloutConfig {
            beta,
            max_depth: config.max_depth,
            gamma: 1.0,
        };
        let snapshot = &policy;
        let sampling = if config.split_noise > 0.0 {
            SplitSampling::Clamped {
                sigma: config.split_noise,
                eps: config.split_eps,
            }
        } else {
            SplitSampling::Mean
        };
        let transitions = map_items(ctx, config, |i, grid| {
            let mut rng = keyed_rng(config.seed, epoch as u64, i as u64, TAG_ROLLOUT);
            let ro = rollout_switched(
                grid,
                snapshot,
                ctx.oracle,
                ctx.rewards,
                &rollout_config,
                config.switch,
                sampling,
                &mut rng,
            )?;
            Ok(ro.transition)
        })?;
        for t in transitions {
            memory.record(t);
        }
        let mut norms = Vec::new();
        let mut losses = Vec::new();
        for k in 0..config.updates_per_epoch {
            let mut rng = keyed_rng(config.seed, epoch as u64, k as u64, TAG_BATCH);
            let batch = memory.sample_minibatch(config.batch, &mut rng)?;
            let (norm, loss) = actor_critic_step(
                &mut policy,
                &mut critic,
                &mut actor_adam,
                &mut critic_adam,
                &batch,
                config,
            )?;
            norms.push(norm);
            losses.push(loss);
        }
        log.push(LogRow {
            epoch,
            beta,
            train_accuracy: logged_accuracy(&policy, ctx, config, epoch)?,
            critic_loss: mean_or_none(&losses),
            actor_grad_norm: mean_or_zero(&norms),
        });
        log::debug!("DRAG epoch {epoch}: {:?}", log.last());
    }
    Ok(TrainOutcome {
        policy,
        critic: Some(critic),
        log,
        steps: actor_adam.steps(),
        stored: memory.len(),
    })
}
