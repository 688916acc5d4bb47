//! Training configuration, the mixing schedule, training logs and the entry
//! point shared by every learner.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::approximator::{
    Checkpoint, ConvSpec, CriticArch, CriticNet, OptimizerConfig, PolicyArch, PolicyNet, TrunkArch,
};
use crate::drag::ActorBaseline;
use crate::env::{OraclePolicy, RewardMeter, SwitchRule};
use crate::error::{Error, Result};
use crate::eval::{evaluate, FoldScore};
use crate::oracle::IgmOracle;
use crate::raster::LabelGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    Drag,
    BehaviorCloning,
    DAgger,
    Mcpg,
    Dpg,
    AggreVaTeD,
    AcAggreVaTeD,
    OffMcpg,
    OffAcpg,
}

impl Algorithm {
    pub const ALL: [Algorithm; 9] = [
        Algorithm::Mcpg,
        Algorithm::Dpg,
        Algorithm::BehaviorCloning,
        Algorithm::DAgger,
        Algorithm::AggreVaTeD,
        Algorithm::AcAggreVaTeD,
        Algorithm::OffMcpg,
        Algorithm::OffAcpg,
        Algorithm::Drag,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Algorithm::Drag => "DRAG",
            Algorithm::BehaviorCloning => "BC",
            Algorithm::DAgger => "DAgger",
            Algorithm::Mcpg => "MCPG",
            Algorithm::Dpg => "DPG",
            Algorithm::AggreVaTeD => "AggreVaTeD",
            Algorithm::AcAggreVaTeD => "AC-AggreVaTeD",
            Algorithm::OffMcpg => "Off-MCPG",
            Algorithm::OffAcpg => "Off-ACPG",
        }
    }

    pub fn uses_critic(self) -> bool {
        matches!(
            self,
            Algorithm::Drag | Algorithm::Dpg | Algorithm::AcAggreVaTeD | Algorithm::OffAcpg
        )
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Algorithm> {
        let lower = s.to_ascii_lowercase();
        Algorithm::ALL
            .into_iter()
            .find(|a| a.tag().to_ascii_lowercase() == lower)
            .or(match lower.as_str() {
                "behavior-cloning" => Some(Algorithm::BehaviorCloning),
                "ddpg" => Some(Algorithm::Dpg),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown algorithm `{s}`")))
    }
}

/// Linear anneal from `start` to `end` over `anneal_epochs`, then constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_epochs: usize,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule {
            start: 1.0,
            end: 0.5,
            anneal_epochs: 100,
        }
    }
}

impl BetaSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        if self.anneal_epochs == 0 || epoch >= self.anneal_epochs {
            return self.end;
        }
        let f = epoch as f64 / self.anneal_epochs as f64;
        self.start + (self.end - self.start) * f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub batch: usize,
    /// Optimizer steps per epoch.
    pub updates_per_epoch: usize,
    pub actor: OptimizerConfig,
    pub critic: OptimizerConfig,
    pub beta: BetaSchedule,
    pub seed: u64,
    pub max_depth: usize,
    /// Train the critic before the actor within each update.
    pub critic_first: bool,
    /// Baseline subtracted in the rule-head term of the mixed actor update.
    pub baseline: ActorBaseline,
    pub memory_capacity: Option<usize>,
    /// Handling of switching indices past the end of an episode.
    pub switch: SwitchRule,
    pub policy_arch: PolicyArch,
    pub critic_arch: CriticArch,
    /// Exploration noise of the deterministic policy gradient learner.
    pub sigma: f64,
    /// Gaussian noise on the split recorded at the switching step of the
    /// mixed actor-critic learner; 0 records the policy mean.
    pub split_noise: f64,
    pub split_eps: f64,
    /// Scale of the logit-normal split distribution of stochastic learners.
    pub logit_scale: f64,
    /// Weight of the split regression term in supervised updates.
    pub lambda: f64,
    /// Training accuracy is logged every this many epochs (and the last).
    pub eval_every: usize,
    /// Fan rollouts and evaluation out over threads.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::Drag,
            iterations: 200,
            batch: 64,
            updates_per_epoch: 1,
            actor: OptimizerConfig::default(),
            critic: OptimizerConfig::default(),
            beta: BetaSchedule::default(),
            seed: 0,
            max_depth: 5,
            critic_first: false,
            baseline: ActorBaseline::None,
            memory_capacity: None,
            switch: SwitchRule::default(),
            policy_arch: PolicyArch::default(),
            critic_arch: CriticArch::default(),
            sigma: 0.1,
            split_noise: 0.0,
            split_eps: 1e-3,
            logit_scale: 0.5,
            lambda: 1.0,
            eval_every: 1,
            parallel: false,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() || value.trim() == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.beta.start < self.beta.end
            || !(0.0..=1.0).contains(&self.beta.start)
            || !(0.0..=1.0).contains(&self.beta.end)
        {
            return Err(Error::Config(format!(
                "invalid beta schedule {:?}",
                self.beta
            )));
        }
        if self.max_depth == 0 {
            return Err(Error::Config("max_depth must be at least 1".into()));
        }
        if !(self.split_eps > 0.0 && self.split_eps < 0.5)
            || self.sigma < 0.0
            || !(0.0..).contains(&self.split_noise)
            || self.logit_scale <= 0.0
        {
            return Err(Error::Config("invalid exploration settings".into()));
        }
        if self.policy_arch.trunk != self.critic_arch.trunk {
            return Err(Error::Config("policy and critic trunks differ".into()));
        }
        self.actor.validate()?;
        self.critic.validate()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "algorithm" => self.algorithm = v.parse()?,
            "iterations" | "epochs" => self.iterations = parse_value(key, v)?,
            "batch" => self.batch = parse_value(key, v)?,
            "updates_per_epoch" => self.updates_per_epoch = parse_value(key, v)?,
            "lr" => {
                self.actor.learning_rate = parse_value(key, v)?;
                self.critic.learning_rate = self.actor.learning_rate;
            }
            "actor_lr" => self.actor.learning_rate = parse_value(key, v)?,
            "critic_lr" => self.critic.learning_rate = parse_value(key, v)?,
            "clip" => {
                self.actor.clip = parse_value(key, v)?;
                self.critic.clip = self.actor.clip;
            }
            "beta_start" => self.beta.start = parse_value(key, v)?,
            "beta_end" => self.beta.end = parse_value(key, v)?,
            "beta_anneal_epochs" => self.beta.anneal_epochs = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "max_depth" => self.max_depth = parse_value(key, v)?,
            "critic_first" => self.critic_first = parse_value(key, v)?,
            "baseline" => self.baseline = v.parse()?,
            "memory_capacity" => {
                self.memory_capacity = match v {
                    "none" | "" => None,
                    _ => Some(parse_value(key, v)?),
                }
            }
            "switch" => self.switch = v.parse()?,
            "split_noise" => self.split_noise = parse_value(key, v)?,
            "feature_side" => {
                let side = parse_value(key, v)?;
                self.policy_arch.trunk.input_side = side;
                self.critic_arch.trunk.input_side = side;
            }
            "input_channels" => {
                let c = parse_value(key, v)?;
                self.policy_arch.trunk.input_channels = c;
                self.critic_arch.trunk.input_channels = c;
            }
            "conv_channels" | "conv_kernel" | "conv_stride" => {
                let values = parse_list(key, v)?;
                let convs = &mut self.policy_arch.trunk.convs;
                if key == "conv_channels" {
                    convs.resize(
                        values.len(),
                        ConvSpec {
                            out_channels: 1,
                            kernel: 3,
                            stride: 2,
                        },
                    );
                } else if values.len() != convs.len() {
                    return Err(Error::Config(format!(
                        "`{key}` lists {} values for {} conv layers",
                        values.len(),
                        convs.len()
                    )));
                }
                for (c, &x) in convs.iter_mut().zip(&values) {
                    match key {
                        "conv_channels" => c.out_channels = x,
                        "conv_kernel" => c.kernel = x,
                        _ => c.stride = x,
                    }
                }
                if convs
                    .iter()
                    .any(|c| c.out_channels == 0 || c.kernel == 0 || c.stride == 0)
                {
                    return Err(Error::Config(format!("`{key}` entries must be positive")));
                }
                self.critic_arch.trunk.convs = self.policy_arch.trunk.convs.clone();
            }
            "dense" => {
                let d = parse_list(key, v)?;
                self.policy_arch.trunk.dense = d.clone();
                self.critic_arch.trunk.dense = d;
            }
            "critic_dense" => self.critic_arch.joint = parse_list(key, v)?,
            "sigma" => self.sigma = parse_value(key, v)?,
            "split_eps" => self.split_eps = parse_value(key, v)?,
            "logit_scale" => self.logit_scale = parse_value(key, v)?,
            "lambda" => self.lambda = parse_value(key, v)?,
            "eval_every" => self.eval_every = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut config = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            config
                .set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text)
    }

    pub fn trunk(&self) -> &TrunkArch {
        &self.policy_arch.trunk
    }
}

/// One epoch of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub beta: f64,
    pub train_accuracy: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_grad_norm: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from("epoch,beta,train_accuracy,critic_loss,actor_grad_norm\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{},{},{:.6}",
            r.epoch,
            r.beta,
            opt(r.train_accuracy),
            opt(r.critic_loss),
            r.actor_grad_norm
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: PolicyNet,
    pub critic: Option<CriticNet>,
    pub log: Vec<LogRow>,
    /// Optimizer steps taken on the policy.
    pub steps: u64,
    /// Transitions or expert-labeled states held for replay at the end.
    pub stored: usize,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        Checkpoint::new(
            config.algorithm.tag(),
            config.seed,
            self.steps,
            self.policy.clone(),
            self.critic.clone(),
        )
    }
}

/// Shared inputs of every learner. Counters on the oracle and the reward
/// meter record what each learner touched.
pub struct TrainContext<'a> {
    pub grids: &'a [&'a LabelGrid],
    pub oracle: &'a IgmOracle,
    pub rewards: &'a RewardMeter,
}

/// Trains the learner selected by `config.algorithm`.
pub fn train(ctx: &TrainContext<'_>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if ctx.grids.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let channels = ctx.grids[0].feature_channel_count() + 1;
    if channels != config.trunk().input_channels {
        return Err(Error::Config(format!(
            "grids yield {channels} feature channels but the network expects {}",
            config.trunk().input_channels
        )));
    }
    match config.algorithm {
        Algorithm::Drag => crate::drag::train_drag(ctx, config),
        other => crate::baselines::train_baseline(ctx, config, other),
    }
}

/// Trains on `train` with fresh counters, then scores greedy parses on both
/// splits.
pub fn train_and_score(
    train_set: &[&LabelGrid],
    test_set: &[&LabelGrid],
    config: &TrainConfig,
    fold: usize,
) -> Result<(TrainOutcome, FoldScore)> {
    let oracle = IgmOracle::new();
    let rewards = RewardMeter::new();
    let ctx = TrainContext {
        grids: train_set,
        oracle: &oracle,
        rewards: &rewards,
    };
    let outcome = train(&ctx, config)?;
    let score = FoldScore {
        algorithm: config.algorithm.tag().to_string(),
        fold,
        train_acc: evaluate(
            &outcome.policy,
            train_set,
            config.max_depth,
            config.parallel,
        )?
        .mean,
        test_acc: evaluate(&outcome.policy, test_set, config.max_depth, config.parallel)?.mean,
    };
    Ok((outcome, score))
}

/// Scores the expert itself on both splits.
pub fn oracle_score(
    train_set: &[&LabelGrid],
    test_set: &[&LabelGrid],
    max_depth: usize,
    fold: usize,
) -> Result<FoldScore> {
    let oracle = IgmOracle::new();
    let policy = OraclePolicy(&oracle);
    Ok(FoldScore {
        algorithm: "Oracle".to_string(),
        fold,
        train_acc: evaluate(&policy, train_set, max_depth, true)?.mean,
        test_acc: evaluate(&policy, test_set, max_depth, true)?.mean,
    })
}

pub(crate) const TAG_ROLLOUT: u64 = 1;
pub(crate) const TAG_BATCH: u64 = 2;
pub(crate) const TAG_CRITIC_BATCH: u64 = 3;
pub(crate) const CRITIC_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Runs `f` over every training grid, in parallel when configured. Results
/// keep grid order either way.
pub(crate) fn map_items<T, F>(ctx: &TrainContext<'_>, config: &TrainConfig, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &LabelGrid) -> Result<T> + Sync,
{
    use rayon::prelude::*;
    if config.parallel {
        ctx.grids
            .par_iter()
            .enumerate()
            .map(|(i, g)| f(i, g))
            .collect()
    } else {
        ctx.grids.iter().enumerate().map(|(i, g)| f(i, g)).collect()
    }
}

/// Greedy training accuracy on the logging cadence.
pub(crate) fn logged_accuracy(
    policy: &PolicyNet,
    ctx: &TrainContext<'_>,
    config: &TrainConfig,
    epoch: usize,
) -> Result<Option<f64>> {
    let due = config.eval_every > 0 && epoch.is_multiple_of(config.eval_every);
    if !(due || epoch + 1 == config.iterations) {
        return Ok(None);
    }
    let res = crate::eval::evaluate(policy, ctx.grids, config.max_depth, config.parallel)?;
    Ok(Some(res.mean))
}

pub(crate) fn fresh_policy(config: &TrainConfig) -> PolicyNet {
    PolicyNet::new(
        config.policy_arch.clone(),
        crate::approximator::Init::Uniform { seed: config.seed },
    )
}

pub(crate) fn fresh_critic(config: &TrainConfig) -> CriticNet {
    CriticNet::new(
        config.critic_arch.clone(),
        crate::approximator::Init::Uniform {
            seed: config.seed ^ CRITIC_SEED_SALT,
        },
    )
}

pub(crate) fn mean_or_none(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub(crate) fn mean_or_zero(values: &[f64]) -> f64 {
    mean_or_none(values).unwrap_or(0.0)
}
