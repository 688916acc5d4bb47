//! Comparison learners: behavior cloning and DAgger (imitation only), on-policy
//! Monte-Carlo and deterministic policy gradients (reward only), and the
//! hybrid AggreVaTeD, actor-critic AggreVaTeD and off-policy gradient family.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;

use crate::approximator::{Adam, CriticNet, PolicyNet};
use crate::drag::{actor_critic_step, critic_update};
use crate::env::{
    keyed_rng, policy_features, rollout_switched, run_episode, Episode, ReplayMemory,
    RolloutConfig, SplitSampling, Transition,
};
use crate::error::{Error, Result};
use crate::grammar::{legal_rules, Action, NodeState, RuleKind, RuleMask};
use crate::raster::{LabelGrid, Region};
use crate::training::{
    fresh_critic, fresh_policy, logged_accuracy, map_items, mean_or_none, mean_or_zero, Algorithm,
    LogRow, TrainConfig, TrainContext, TrainOutcome, TAG_BATCH, TAG_CRITIC_BATCH, TAG_ROLLOUT,
};

/// A state labeled with the expert's action.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub features: Vec<f64>,
    pub mask: RuleMask,
    pub expert: Action,
}

/// Cross-entropy on the rule head plus `lambda * (mu - l*)^2` when the expert
/// splits. Returns the mean loss and its parameter gradient.
pub fn supervised_loss_and_grad(
    policy: &PolicyNet,
    batch: &[Labeled],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; policy.param_count()];
    let mut loss = 0.0;
    for s in batch {
        let trace = policy.forward_traced(&s.features, s.mask)?;
        let out = trace.output;
        loss -= out.prob(s.expert.kind).ln() / n;
        let d_logits = out.log_prob_grad(s.expert.kind).map(|g| -g / n);
        let d_split = match s.expert.split {
            Some(target) => {
                let diff = out.split - target;
                loss += lambda * diff * diff / n;
                2.0 * lambda * diff * out.split_slope() / n
            }
            None => 0.0,
        };
        policy.backward(&trace, &d_logits, d_split, &mut grad, false);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("supervised loss"));
    }
    Ok((loss, grad))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// One descent step on the supervised loss. Returns the loss and gradient norm.
pub fn supervised_update(
    policy: &mut PolicyNet,
    adam: &mut Adam,
    batch: &[Labeled],
    lambda: f64,
) -> Result<(f64, f64)> {
    let (loss, grad) = supervised_loss_and_grad(policy, batch, lambda)?;
    adam.step(policy.params_mut(), &grad)?;
    Ok((loss, norm(&grad)))
}

/// Log-odds, the inverse of the logistic split head.
pub fn logit(l: f64) -> f64 {
    (l / (1.0 - l)).ln()
}

/// Log-density of `l` under a logit-normal with location `m` and `scale`.
pub fn logit_normal_log_density(l: f64, m: f64, scale: f64) -> f64 {
    let z = (logit(l) - m) / scale;
    -0.5 * z * z - (scale * (2.0 * std::f64::consts::PI).sqrt()).ln() - (l * (1.0 - l)).ln()
}

/// One score-function sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PgSample {
    pub features: Vec<f64>,
    pub mask: RuleMask,
    pub rule: RuleKind,
    /// Executed split fraction, for split rules.
    pub split: Option<f64>,
    /// Importance weight on the rule term.
    pub weight: f64,
    /// Return estimate.
    pub ret: f64,
}

/// Gradient of `mean[w * log pi(r|s) * G + log p(l|s) * G]`, where `p` is the
/// logit-normal split density centered on the split head's pre-activation.
pub fn stochastic_pg_gradient(
    policy: &PolicyNet,
    batch: &[PgSample],
    scale: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; policy.param_count()];
    for s in batch {
        if s.ret == 0.0 {
            continue;
        }
        let trace = policy.forward_traced(&s.features, s.mask)?;
        let d_logits = trace
            .output
            .log_prob_grad(s.rule)
            .map(|g| s.weight * s.ret * g / n);
        let d_split = match s.split {
            Some(l) => s.ret * (logit(l) - trace.output.split_pre) / (scale * scale) / n,
            None => 0.0,
        };
        policy.backward(&trace, &d_logits, d_split, &mut grad, false);
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("policy gradient"));
    }
    Ok(grad)
}

/// Ascent step along [`stochastic_pg_gradient`]. Returns the gradient norm.
pub fn stochastic_pg_update(
    policy: &mut PolicyNet,
    adam: &mut Adam,
    batch: &[PgSample],
    scale: f64,
) -> Result<f64> {
    let grad = stochastic_pg_gradient(policy, batch, scale)?;
    let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
    adam.step(policy.params_mut(), &descent)?;
    Ok(norm(&grad))
}

/// `learner / behavior`, or `None` (with a warning) when the behavior policy
/// could not have taken the action.
pub fn importance_weight(learner_prob: f64, behavior_prob: f64) -> Option<f64> {
    if behavior_prob <= 0.0 {
        log::warn!("skipping a transition with zero behavior probability");
        return None;
    }
    Some(learner_prob / behavior_prob)
}

/// Deterministic policy gradient step: the mixed actor update through a
/// critic of the learner's own returns, then the critic regression.
pub fn deterministic_pg_update(
    policy: &mut PolicyNet,
    critic: &mut CriticNet,
    actor_adam: &mut Adam,
    critic_adam: &mut Adam,
    batch: &[&Transition],
    config: &TrainConfig,
) -> Result<(f64, f64)> {
    actor_critic_step(policy, critic, actor_adam, critic_adam, batch, config)
}

/// Expert-labeled state, stored by reference to its grid so aggregated
/// datasets stay small; features are rebuilt when sampled.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Demo {
    item: usize,
    region: Region,
    depth: usize,
    expert: Action,
}

fn minibatch_indices(len: usize, b: usize, rng: &mut impl Rng) -> Vec<usize> {
    if b >= len {
        (0..len).collect()
    } else {
        index::sample(rng, len, b).into_vec()
    }
}

fn labeled(
    policy: &PolicyNet,
    grids: &[&LabelGrid],
    d: &Demo,
    max_depth: usize,
) -> Result<Labeled> {
    Ok(Labeled {
        features: policy_features(policy, grids[d.item], d.region)?,
        mask: legal_rules(d.region, d.depth, max_depth),
        expert: d.expert,
    })
}

fn sample_of(
    step_features: Vec<f64>,
    mask: RuleMask,
    action: Action,
    weight: f64,
    ret: f64,
) -> PgSample {
    PgSample {
        features: step_features,
        mask,
        rule: action.kind,
        split: action.split,
        weight,
        ret,
    }
}

struct Learner<'c> {
    ctx: &'c TrainContext<'c>,
    config: &'c TrainConfig,
    algorithm: Algorithm,
    policy: PolicyNet,
    critic: Option<CriticNet>,
    actor_adam: Adam,
    critic_adam: Option<Adam>,
    memory: ReplayMemory,
    demos: VecDeque<Demo>,
}

/// Per-epoch record of optimizer statistics.
#[derive(Default)]
struct EpochStats {
    norms: Vec<f64>,
    losses: Vec<f64>,
}

impl Learner<'_> {
    fn logit_normal(&self) -> SplitSampling {
        SplitSampling::LogitNormal {
            scale: self.config.logit_scale,
        }
    }

    fn push_demo(&mut self, demo: Demo) {
        if let Some(cap) = self.config.memory_capacity {
            while self.demos.len() >= cap.max(1) {
                self.demos.pop_front();
            }
        }
        self.demos.push_back(demo);
    }

    fn supervised_epoch(&mut self, epoch: usize, stats: &mut EpochStats) -> Result<()> {
        if self.demos.is_empty() {
            return Ok(());
        }
        for k in 0..self.config.updates_per_epoch {
            let mut rng = keyed_rng(self.config.seed, epoch as u64, k as u64, TAG_BATCH);
            let idx = minibatch_indices(self.demos.len(), self.config.batch, &mut rng);
            let batch = idx
                .iter()
                .map(|&i| {
                    labeled(
                        &self.policy,
                        self.ctx.grids,
                        &self.demos[i],
                        self.config.max_depth,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let (_, n) = supervised_update(
                &mut self.policy,
                &mut self.actor_adam,
                &batch,
                self.config.lambda,
            )?;
            stats.norms.push(n);
        }
        Ok(())
    }

    fn pg_epoch(
        &mut self,
        epoch: usize,
        samples: &[PgSample],
        stats: &mut EpochStats,
    ) -> Result<()> {
        if samples.is_empty() {
            return Ok(());
        }
        for k in 0..self.config.updates_per_epoch {
            let mut rng = keyed_rng(self.config.seed, epoch as u64, k as u64, TAG_BATCH);
            let idx = minibatch_indices(samples.len(), self.config.batch, &mut rng);
            let mut batch: Vec<PgSample> = idx.iter().map(|&i| samples[i].clone()).collect();
            if let Some(critic) = &self.critic {
                for s in &mut batch {
                    s.ret = critic.forward(&s.features, s.rule, s.split.unwrap_or(0.5))?;
                }
            }
            let n = stochastic_pg_update(
                &mut self.policy,
                &mut self.actor_adam,
                &batch,
                self.config.logit_scale,
            )?;
            stats.norms.push(n);
            if let (Some(critic), Some(adam)) = (self.critic.as_mut(), self.critic_adam.as_mut()) {
                let mut rng = keyed_rng(self.config.seed, epoch as u64, k as u64, TAG_CRITIC_BATCH);
                let cb = self.memory.sample_minibatch(self.config.batch, &mut rng)?;
                stats.losses.push(critic_update(critic, adam, &cb)?);
            }
        }
        Ok(())
    }

    fn episodes(
        &self,
        epoch: usize,
        beta: f64,
        sampling: SplitSampling,
        use_oracle: bool,
    ) -> Result<Vec<Episode>> {
        let oracle = use_oracle.then_some(self.ctx.oracle);
        let policy = &self.policy;
        map_items(self.ctx, self.config, |i, grid| {
            let mut rng = keyed_rng(self.config.seed, epoch as u64, i as u64, TAG_ROLLOUT);
            run_episode(
                grid,
                policy,
                oracle,
                self.config.max_depth,
                beta,
                sampling,
                false,
                &mut rng,
            )
        })
    }

    /// Score-function samples from whole episodes, each step weighted by
    /// its own rule-head importance ratio and scored by its subtree return.
    fn episode_samples(
        &mut self,
        episodes: Vec<Episode>,
        off_policy: bool,
    ) -> Result<Vec<PgSample>> {
        let mut samples = Vec::new();
        for (i, ep) in episodes.into_iter().enumerate() {
            let grid = self.ctx.grids[i];
            for (step, s) in ep.steps.into_iter().enumerate() {
                let weight = if off_policy {
                    match importance_weight(s.learner_prob, s.behavior_prob) {
                        Some(w) => w,
                        None => continue,
                    }
                } else {
                    1.0
                };
                let ret = self
                    .ctx
                    .rewards
                    .normalized_return(&ep.tree, s.node, grid, 1.0)?;
                if self.critic.is_some() {
                    self.memory.record(Transition {
                        features: s.features.clone(),
                        mask: s.mask,
                        rule: s.action.kind,
                        split: s.action.fraction_or_default(),
                        step: step + 1,
                        ret,
                    });
                }
                samples.push(sample_of(s.features, s.mask, s.action, weight, ret));
            }
        }
        Ok(samples)
    }

    fn epoch(&mut self, epoch: usize, beta: f64, stats: &mut EpochStats) -> Result<()> {
        let config = self.config;
        match self.algorithm {
            Algorithm::BehaviorCloning => self.supervised_epoch(epoch, stats),
            Algorithm::DAgger => {
                let policy = &self.policy;
                let episodes = map_items(self.ctx, config, |i, grid| {
                    let mut rng = keyed_rng(config.seed, epoch as u64, i as u64, TAG_ROLLOUT);
                    run_episode(
                        grid,
                        policy,
                        Some(self.ctx.oracle),
                        config.max_depth,
                        beta,
                        SplitSampling::Mean,
                        true,
                        &mut rng,
                    )
                })?;
                for (i, ep) in episodes.iter().enumerate() {
                    for s in &ep.steps {
                        let node = ep.tree.node(s.node);
                        self.push_demo(Demo {
                            item: i,
                            region: node.region,
                            depth: node.depth,
                            expert: s.expert.expect("labeled episode"),
                        });
                    }
                }
                self.supervised_epoch(epoch, stats)
            }
            Algorithm::Mcpg | Algorithm::OffMcpg | Algorithm::OffAcpg => {
                let off = self.algorithm != Algorithm::Mcpg;
                let b = if off { beta } else { 0.0 };
                let episodes = self.episodes(epoch, b, self.logit_normal(), off)?;
                let samples = self.episode_samples(episodes, off)?;
                self.pg_epoch(epoch, &samples, stats)
            }
            Algorithm::Dpg => {
                let sampling = SplitSampling::Clamped {
                    sigma: config.sigma,
                    eps: config.split_eps,
                };
                let episodes = self.episodes(epoch, 0.0, sampling, false)?;
                self.episode_samples(episodes, false)?;
                for k in 0..config.updates_per_epoch {
                    let mut rng = keyed_rng(config.seed, epoch as u64, k as u64, TAG_BATCH);
                    let batch = self.memory.sample_minibatch(config.batch, &mut rng)?;
                    let (n, loss) = deterministic_pg_update(
                        &mut self.policy,
                        self.critic.as_mut().expect("critic"),
                        &mut self.actor_adam,
                        self.critic_adam.as_mut().expect("critic optimizer"),
                        &batch,
                        config,
                    )?;
                    stats.norms.push(n);
                    stats.losses.push(loss);
                }
                Ok(())
            }
            Algorithm::AggreVaTeD | Algorithm::AcAggreVaTeD => {
                let rollout_config = RolloutConfig {
                    beta,
                    max_depth: config.max_depth,
                    gamma: 1.0,
                };
                let sampling = self.logit_normal();
                let policy = &self.policy;
                let rollouts = map_items(self.ctx, config, |i, grid| {
                    let mut rng = keyed_rng(config.seed, epoch as u64, i as u64, TAG_ROLLOUT);
                    rollout_switched(
                        grid,
                        policy,
                        self.ctx.oracle,
                        self.ctx.rewards,
                        &rollout_config,
                        config.switch,
                        sampling,
                        &mut rng,
                    )
                })?;
                let mut samples = Vec::with_capacity(rollouts.len());
                for ro in rollouts {
                    let t = ro.transition;
                    samples.push(sample_of(
                        t.features.clone(),
                        t.mask,
                        t.action(),
                        1.0,
                        t.ret,
                    ));
                    if self.critic.is_some() {
                        self.memory.record(t);
                    }
                }
                self.pg_epoch(epoch, &samples, stats)
            }
            Algorithm::Drag => Err(Error::Config("DRAG is not a baseline".into())),
        }
    }
}

/// Trains one of the comparison learners.
pub fn train_baseline(
    ctx: &TrainContext<'_>,
    config: &TrainConfig,
    algorithm: Algorithm,
) -> Result<TrainOutcome> {
    let policy = fresh_policy(config);
    let critic = algorithm.uses_critic().then(|| fresh_critic(config));
    let mut learner = Learner {
        ctx,
        config,
        algorithm,
        actor_adam: Adam::new(config.actor, policy.param_count()),
        critic_adam: critic
            .as_ref()
            .map(|c| Adam::new(config.critic, c.param_count())),
        policy,
        critic,
        memory: ReplayMemory::new(config.memory_capacity),
        demos: VecDeque::new(),
    };
    if algorithm == Algorithm::BehaviorCloning && config.iterations > 0 {
        for (i, grid) in ctx.grids.iter().enumerate() {
            let tree = ctx.oracle.oracle_parse(grid, config.max_depth);
            for &id in tree.expansion_order() {
                let node = tree.node(id);
                let expert = match node.state {
                    NodeState::Split { action, .. } => action,
                    NodeState::Terminal(b) => Action::assign(b),
                    NodeState::Pending => unreachable!("oracle parses are complete"),
                };
                learner.push_demo(Demo {
                    item: i,
                    region: node.region,
                    depth: node.depth,
                    expert,
                });
            }
        }
    }
    let mut log = Vec::with_capacity(config.iterations);
    for epoch in 0..config.iterations {
        let beta = match algorithm {
            Algorithm::BehaviorCloning => 1.0,
            Algorithm::Mcpg | Algorithm::Dpg => 0.0,
            _ => config.beta.at(epoch),
        };
        let mut stats = EpochStats::default();
        learner.epoch(epoch, beta, &mut stats)?;
        log.push(LogRow {
            epoch,
            beta,
            train_accuracy: logged_accuracy(&learner.policy, ctx, config, epoch)?,
            critic_loss: mean_or_none(&stats.losses),
            actor_grad_norm: mean_or_zero(&stats.norms),
        });
        log::debug!("{algorithm} epoch {epoch}: {:?}", log.last());
    }
    Ok(TrainOutcome {
        steps: learner.actor_adam.steps(),
        stored: learner.memory.len() + learner.demos.len(),
        policy: learner.policy,
        critic: learner.critic,
        log,
    })
}
