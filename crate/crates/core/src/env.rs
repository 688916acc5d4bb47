//! The parsing MDP: learner and expert acting on parse trees, mixture
//! rollouts with a sampled switching index, transitions and replay memory.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::approximator::{logistic, PolicyNet, PolicyOutput};
use crate::error::{Error, Result};
use crate::grammar::{horizon, legal_rules, Action, NodeId, ParseTree, RuleKind, RuleMask};
use crate::oracle::IgmOracle;
use crate::raster::{featurize, Label, LabelGrid, Region};

/// Generator for one unit of work, keyed so parallel and serial runs draw
/// identical streams.
pub fn keyed_rng(seed: u64, a: u64, b: u64, tag: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    for (chunk, v) in bytes.chunks_exact_mut(8).zip([seed, a, b, tag]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Network input for `region`, sized by the policy's trunk.
pub fn policy_features(net: &PolicyNet, grid: &LabelGrid, region: Region) -> Result<Vec<f64>> {
    Ok(featurize(grid, region, net.arch().trunk.input_side)?.data)
}

/// Draws a legal rule from `probs` by inverting the cumulative distribution.
pub fn sample_rule(probs: &[f64; 4], mask: RuleMask, rng: &mut impl Rng) -> RuleKind {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for r in mask.legal() {
        if probs[r.index()] <= 0.0 {
            continue;
        }
        acc += probs[r.index()];
        last = Some(r);
        if u < acc {
            return r;
        }
    }
    last.or_else(|| mask.legal().next())
        .expect("non-empty mask")
}

/// How a learner turns its split head into an executed split fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSampling {
    /// `l = mu(s)`.
    Mean,
    /// `l = logistic(z + scale * n)` with standard normal `n`.
    LogitNormal { scale: f64 },
    /// `l = clamp(mu(s) + sigma * n, eps, 1 - eps)`.
    Clamped { sigma: f64, eps: f64 },
}

impl SplitSampling {
    pub fn draw(&self, out: &PolicyOutput, rng: &mut impl Rng) -> f64 {
        match *self {
            SplitSampling::Mean => out.split,
            SplitSampling::LogitNormal { scale } => {
                let n: f64 = rng.sample(StandardNormal);
                logistic(out.split_pre + scale * n)
            }
            SplitSampling::Clamped { sigma, eps } => {
                if sigma == 0.0 {
                    return out.split;
                }
                let n: f64 = rng.sample(StandardNormal);
                (out.split + sigma * n).clamp(eps, 1.0 - eps)
            }
        }
    }
}

/// A learner decision at one node, with everything needed to store it.
#[derive(Debug, Clone)]
pub struct LearnerStep {
    pub features: Vec<f64>,
    pub mask: RuleMask,
    pub output: PolicyOutput,
    pub rule: RuleKind,
    pub split: f64,
}

impl LearnerStep {
    pub fn action(&self) -> Action {
        Action::from_rule(self.rule, self.split)
    }
}

/// Samples the learner's action at a pending node.
pub fn learner_step(
    net: &PolicyNet,
    grid: &LabelGrid,
    tree: &ParseTree,
    id: NodeId,
    sampling: SplitSampling,
    rng: &mut impl Rng,
) -> Result<LearnerStep> {
    let node = tree.node(id);
    let features = policy_features(net, grid, node.region)?;
    let mask = tree.legal_rules(id);
    let output = net.forward(&features, mask)?;
    let rule = sample_rule(&output.probs, mask, rng);
    let split = if rule.is_split() {
        sampling.draw(&output, rng)
    } else {
        0.5
    };
    Ok(LearnerStep {
        features,
        mask,
        output,
        rule,
        split,
    })
}

/// Anything that can parse greedily: the most likely rule and the mean split.
pub trait ParsePolicy: Sync {
    fn greedy_action(
        &self,
        grid: &LabelGrid,
        region: Region,
        depth: usize,
        max_depth: usize,
    ) -> Result<Action>;
}

impl ParsePolicy for PolicyNet {
    fn greedy_action(
        &self,
        grid: &LabelGrid,
        region: Region,
        depth: usize,
        max_depth: usize,
    ) -> Result<Action> {
        let features = policy_features(self, grid, region)?;
        let out = self.forward(&features, legal_rules(region, depth, max_depth))?;
        let split = out.split;
        if !split.is_finite() {
            return Err(Error::NonFinite("split head"));
        }
        Ok(Action::from_rule(out.greedy_rule(), split))
    }
}

/// The expert wearing the policy interface.
pub struct OraclePolicy<'a>(pub &'a IgmOracle);

impl ParsePolicy for OraclePolicy<'_> {
    fn greedy_action(
        &self,
        grid: &LabelGrid,
        region: Region,
        depth: usize,
        max_depth: usize,
    ) -> Result<Action> {
        Ok(self.0.best_action(grid, region, depth, max_depth))
    }
}

/// Labels the whole grid with one label at the root.
pub struct ConstantPolicy(pub Label);

impl ParsePolicy for ConstantPolicy {
    fn greedy_action(&self, _: &LabelGrid, _: Region, _: usize, _: usize) -> Result<Action> {
        Ok(Action::assign(self.0))
    }
}

pub fn greedy_parse(
    policy: &dyn ParsePolicy,
    grid: &LabelGrid,
    max_depth: usize,
) -> Result<ParseTree> {
    let mut tree = ParseTree::new(grid.full_region(), max_depth);
    while let Some(id) = tree.next_unexpanded() {
        let n = tree.node(id);
        let action = policy.greedy_action(grid, n.region, n.depth, max_depth)?;
        tree.apply_action(id, action)?;
    }
    Ok(tree)
}

/// Every read of a return goes through here, so tests can prove that pure
/// imitation learners never look at the reward.
#[derive(Debug, Default)]
pub struct RewardMeter {
    reads: AtomicU64,
}

impl RewardMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    /// Return of the subtree under `id` divided by its region's area.
    pub fn normalized_return(
        &self,
        tree: &ParseTree,
        id: NodeId,
        grid: &LabelGrid,
        gamma: f64,
    ) -> Result<f64> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        let raw = if gamma == 1.0 {
            tree.subtree_return(id, grid)? as f64
        } else {
            tree.discounted_return(id, grid, gamma)?
        };
        Ok(raw / tree.node(id).region.area() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    /// Probability of the expert acting at each step before the switch.
    pub beta: f64,
    pub max_depth: usize,
    pub gamma: f64,
}

impl RolloutConfig {
    pub fn new(beta: f64, max_depth: usize) -> Result<RolloutConfig> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config(format!(
                "mixing coefficient {beta} outside [0, 1]"
            )));
        }
        Ok(RolloutConfig {
            beta,
            max_depth,
            gamma: 1.0,
        })
    }

    pub fn horizon(&self) -> usize {
        horizon(self.max_depth)
    }
}

/// Uniform draw from `1..=h`.
pub fn sample_switch_index(h: usize, rng: &mut impl Rng) -> usize {
    rng.random_range(1..=h.max(1))
}

/// One stored learner decision and the expert's cost-to-go after it.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub features: Vec<f64>,
    pub mask: RuleMask,
    pub rule: RuleKind,
    /// Executed split fraction; 0.5 for assignments.
    pub split: f64,
    /// 1-based step at which the action was taken.
    pub step: usize,
    /// Subtree return at the node divided by its area, in `[-1, 1]`.
    pub ret: f64,
}

impl Transition {
    pub fn action(&self) -> Action {
        Action::from_rule(self.rule, self.split)
    }
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub tree: ParseTree,
    pub node: NodeId,
    pub transition: Transition,
    /// Learner output at the recorded step.
    pub output: PolicyOutput,
}

fn pending_count(tree: &ParseTree) -> usize {
    tree.nodes().iter().filter(|n| n.is_pending()).count()
}

/// Parses `grid` with the per-step mixture until step `t`, takes the learner
/// action there, then lets the expert finish. If the episode ends at a step
/// `T < t`, the executed parse is kept and the learner's action at step `T`
/// is recorded with its return measured on a scratch copy of the tree.
/// `sampling` governs the recorded step's split; earlier learner steps use the
/// mean split.
#[allow(clippy::too_many_arguments)]
pub fn rollout_mixture(
    grid: &LabelGrid,
    net: &PolicyNet,
    oracle: &IgmOracle,
    rewards: &RewardMeter,
    config: &RolloutConfig,
    t: usize,
    sampling: SplitSampling,
    rng: &mut impl Rng,
) -> Result<Rollout> {
    let mut tree = ParseTree::new(grid.full_region(), config.max_depth);
    let mut step = 0;
    loop {
        let id = tree
            .next_unexpanded()
            .expect("a pending node before the switch");
        step += 1;
        if step >= t {
            let recorded = learner_step(net, grid, &tree, id, sampling, rng)?;
            tree.apply_action(id, recorded.action())?;
            if !tree.is_complete() {
                oracle.complete(&mut tree, grid);
            }
            let ret = rewards.normalized_return(&tree, id, grid, config.gamma)?;
            return Ok(Rollout::new(tree, id, step, recorded, ret));
        }
        let n = tree.node(id);
        let action = if rng.random::<f64>() < config.beta {
            oracle.best_action(grid, n.region, n.depth, config.max_depth)
        } else {
            learner_step(net, grid, &tree, id, SplitSampling::Mean, rng)?.action()
        };
        if !action.kind.is_split() && pending_count(&tree) == 1 {
            // The episode ends here, before the switch.
            let recorded = learner_step(net, grid, &tree, id, sampling, rng)?;
            let mut scratch = tree.clone();
            scratch.apply_action(id, recorded.action())?;
            if !scratch.is_complete() {
                oracle.complete(&mut scratch, grid);
            }
            let ret = rewards.normalized_return(&scratch, id, grid, config.gamma)?;
            tree.apply_action(id, action)?;
            return Ok(Rollout::new(tree, id, step, recorded, ret));
        }
        tree.apply_action(id, action)?;
    }
}

/// What happens when the sampled switching index falls past the end of the
/// episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SwitchRule {
    /// Record the learner at the final step.
    Clamp,
    /// Redraw the index uniformly from the steps the episode actually had and
    /// replay the identical mixture prefix up to it.
    #[default]
    Resample,
}

impl FromStr for SwitchRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<SwitchRule> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clamp" => Ok(SwitchRule::Clamp),
            "resample" => Ok(SwitchRule::Resample),
            other => Err(Error::Config(format!("unknown switch rule `{other}`"))),
        }
    }
}

/// Samples the switching index from `1..=H` and runs [`rollout_mixture`],
/// handling indices past the episode end according to `rule`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_switched<R: Rng + Clone>(
    grid: &LabelGrid,
    net: &PolicyNet,
    oracle: &IgmOracle,
    rewards: &RewardMeter,
    config: &RolloutConfig,
    rule: SwitchRule,
    sampling: SplitSampling,
    rng: &mut R,
) -> Result<Rollout> {
    let t = sample_switch_index(config.horizon(), rng);
    let prefix = rng.clone();
    let ro = rollout_mixture(grid, net, oracle, rewards, config, t, sampling, rng)?;
    if rule == SwitchRule::Clamp || ro.transition.step >= t {
        return Ok(ro);
    }
    let redraw = sample_switch_index(ro.transition.step, rng);
    *rng = prefix;
    rollout_mixture(grid, net, oracle, rewards, config, redraw, sampling, rng)
}

impl Rollout {
    fn new(tree: ParseTree, node: NodeId, step: usize, recorded: LearnerStep, ret: f64) -> Rollout {
        Rollout {
            tree,
            node,
            output: recorded.output,
            transition: Transition {
                features: recorded.features,
                mask: recorded.mask,
                rule: recorded.rule,
                split: recorded.split,
                step,
                ret,
            },
        }
    }
}

/// One executed step of a full episode.
#[derive(Debug, Clone)]
pub struct EpisodeStep {
    pub node: NodeId,
    pub features: Vec<f64>,
    pub mask: RuleMask,
    pub action: Action,
    pub by_expert: bool,
    /// Learner probability of the executed rule.
    pub learner_prob: f64,
    /// Mixture probability of the executed rule.
    pub behavior_prob: f64,
    /// Expert label of this state, when the expert was consulted.
    pub expert: Option<Action>,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub tree: ParseTree,
    pub steps: Vec<EpisodeStep>,
}

/// Runs a whole episode under the per-step mixture `beta * expert + (1 - beta)
/// * learner`. The expert is consulted only when `beta > 0` or
/// `label_with_expert` is set; passing no oracle with either is an error.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    grid: &LabelGrid,
    net: &PolicyNet,
    oracle: Option<&IgmOracle>,
    max_depth: usize,
    beta: f64,
    sampling: SplitSampling,
    label_with_expert: bool,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let needs_expert = beta > 0.0 || label_with_expert;
    if needs_expert && oracle.is_none() {
        return Err(Error::Config("this rollout needs the expert".into()));
    }
    let mut tree = ParseTree::new(grid.full_region(), max_depth);
    let mut steps = Vec::new();
    while let Some(id) = tree.next_unexpanded() {
        let n = tree.node(id);
        let (region, depth) = (n.region, n.depth);
        let expert = match (needs_expert, oracle) {
            (true, Some(o)) => Some(o.best_action(grid, region, depth, max_depth)),
            _ => None,
        };
        let learner = learner_step(net, grid, &tree, id, sampling, rng)?;
        let by_expert = beta > 0.0 && rng.random::<f64>() < beta;
        let action = if by_expert {
            expert.expect("expert consulted")
        } else {
            learner.action()
        };
        let learner_prob = learner.output.prob(action.kind);
        let expert_mass = match expert {
            Some(e) if e.kind == action.kind => beta,
            _ => 0.0,
        };
        tree.apply_action(id, action)?;
        steps.push(EpisodeStep {
            node: id,
            features: learner.features,
            mask: learner.mask,
            action,
            by_expert,
            learner_prob,
            behavior_prob: expert_mass + (1.0 - beta) * learner_prob,
            expert: if label_with_expert { expert } else { None },
        });
    }
    Ok(Episode { tree, steps })
}

/// Aggregated transitions with optional FIFO eviction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayMemory {
    items: VecDeque<Transition>,
    capacity: Option<usize>,
}

const MEMORY_MAGIC: &[u8; 4] = b"SPRM";

impl ReplayMemory {
    pub fn new(capacity: Option<usize>) -> ReplayMemory {
        ReplayMemory {
            items: VecDeque::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn record(&mut self, t: Transition) {
        if let Some(cap) = self.capacity {
            while self.items.len() >= cap.max(1) {
                self.items.pop_front();
            }
        }
        self.items.push_back(t);
    }

    /// Uniform sample without replacement; the whole memory when `b` exceeds
    /// its size.
    pub fn sample_minibatch(&self, b: usize, rng: &mut impl Rng) -> Result<Vec<&Transition>> {
        if self.items.is_empty() {
            return Err(Error::EmptyMemory);
        }
        if b == 0 {
            return Err(Error::Config("minibatch size must be at least 1".into()));
        }
        if b >= self.items.len() {
            return Ok(self.items.iter().collect());
        }
        Ok(index::sample(rng, self.items.len(), b)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MEMORY_MAGIC)?;
        w.write_all(&self.capacity.map_or(u64::MAX, |c| c as u64).to_le_bytes())?;
        w.write_all(&(self.items.len() as u64).to_le_bytes())?;
        for t in &self.items {
            w.write_all(&(t.features.len() as u64).to_le_bytes())?;
            for f in &t.features {
                w.write_all(&f.to_le_bytes())?;
            }
            let mask = t
                .mask
                .0
                .iter()
                .enumerate()
                .fold(0u8, |m, (i, &b)| m | (u8::from(b) << i));
            w.write_all(&[mask, t.rule.index() as u8])?;
            w.write_all(&t.split.to_le_bytes())?;
            w.write_all(&(t.step as u64).to_le_bytes())?;
            w.write_all(&t.ret.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<ReplayMemory> {
        fn u64_of(r: &mut impl Read) -> std::io::Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        fn f64_of(r: &mut impl Read) -> std::io::Result<f64> {
            Ok(f64::from_bits(u64_of(r)?))
        }
        let io = |e| Error::io("<replay memory>", e);
        let bad = |reason: &str| Error::Format {
            path: "<replay memory>".into(),
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MEMORY_MAGIC {
            return Err(bad("missing replay memory magic"));
        }
        let cap = u64_of(r).map_err(io)?;
        let capacity = (cap != u64::MAX).then_some(cap as usize);
        let n = u64_of(r).map_err(io)?;
        let mut memory = ReplayMemory::new(capacity);
        for _ in 0..n {
            let len = u64_of(r).map_err(io)?;
            if len > 1 << 24 {
                return Err(bad("implausible feature length"));
            }
            let features = (0..len)
                .map(|_| f64_of(r))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(io)?;
            let mut mr = [0u8; 2];
            r.read_exact(&mut mr).map_err(io)?;
            if mr[1] >= 4 || mr[0] >= 16 {
                return Err(bad("invalid rule or mask"));
            }
            let mask = RuleMask(std::array::from_fn(|i| mr[0] >> i & 1 == 1));
            let split = f64_of(r).map_err(io)?;
            let step = u64_of(r).map_err(io)? as usize;
            let ret = f64_of(r).map_err(io)?;
            memory.items.push_back(Transition {
                features,
                mask,
                rule: RuleKind::from_index(mr[1] as usize),
                split,
                step,
                ret,
            });
        }
        Ok(memory)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ReplayMemory> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        ReplayMemory::read_from(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::{ConvSpec, Init, PolicyArch, TrunkArch};
    use crate::grammar::NodeState;
    use crate::oracle::{expert_rollout_return, oracle_parse};

    /// Replays `tree`'s expansions up to, not including, `node`.
    fn truncate_before(tree: &ParseTree, node: NodeId) -> ParseTree {
        let mut out = ParseTree::new(tree.node(tree.root()).region, tree.max_depth());
        for &id in tree.expansion_order().iter().take_while(|&&id| id != node) {
            let action = match tree.node(id).state {
                NodeState::Split { action, .. } => action,
                NodeState::Terminal(b) => Action::assign(b),
                NodeState::Pending => unreachable!(),
            };
            out.apply_action(id, action).unwrap();
        }
        out
    }

    pub(crate) fn small_net(seed: u64) -> PolicyNet {
        let arch = PolicyArch {
            trunk: TrunkArch {
                input_channels: 2,
                input_side: 8,
                convs: vec![ConvSpec {
                    out_channels: 2,
                    kernel: 3,
                    stride: 2,
                }],
                dense: vec![8],
            },
        };
        PolicyNet::new(arch, Init::Uniform { seed })
    }

    fn random_grid(rng: &mut impl Rng, w: usize, h: usize) -> LabelGrid {
        let signs: Vec<i64> = (0..w * h)
            .map(|_| if rng.random::<bool>() { 1 } else { -1 })
            .collect();
        LabelGrid::from_signs(w, h, &signs).unwrap()
    }

    fn transition(ret: f64) -> Transition {
        Transition {
            features: vec![ret, 0.25],
            mask: RuleMask::ALL,
            rule: RuleKind::AssignPaint,
            split: 0.5,
            step: 1,
            ret,
        }
    }

    #[test]
    fn switch_index_with_unit_horizon() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| sample_switch_index(1, &mut rng) == 1));
    }

    #[test]
    fn pure_expert_rollout_matches_oracle_parse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let oracle = IgmOracle::new();
        let rewards = RewardMeter::new();
        let net = small_net(1);
        for _ in 0..50 {
            let grid = random_grid(&mut rng, 12, 10);
            let config = RolloutConfig::new(1.0, 3).unwrap();
            let expected = oracle_parse(&grid, 3);
            let ro = rollout_mixture(
                &grid,
                &net,
                &oracle,
                &rewards,
                &config,
                config.horizon() + 1,
                SplitSampling::Mean,
                &mut rng,
            )
            .unwrap();
            assert_eq!(ro.tree, expected);
            let last = *expected.expansion_order().last().unwrap();
            assert_eq!(ro.node, last);
            assert_eq!(ro.transition.step, expected.expansion_order().len());
            let replay = expert_rollout_return(
                &truncate_before(&expected, last),
                last,
                ro.transition.action(),
                &grid,
            )
            .unwrap();
            let area = expected.node(last).region.area() as f64;
            assert_eq!(ro.transition.ret, replay as f64 / area);
        }
    }

    #[test]
    fn first_step_records_root_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = random_grid(&mut rng, 16, 16);
        let net = small_net(2);
        let config = RolloutConfig::new(0.5, 4).unwrap();
        let ro = rollout_mixture(
            &grid,
            &net,
            &IgmOracle::new(),
            &RewardMeter::new(),
            &config,
            1,
            SplitSampling::Mean,
            &mut rng,
        )
        .unwrap();
        assert_eq!(ro.node, 0);
        assert_eq!(ro.transition.step, 1);
        assert_eq!(
            ro.transition.features,
            policy_features(&net, &grid, grid.full_region()).unwrap()
        );
        assert!(ro.tree.is_complete());
    }

    #[test]
    fn wrong_leaf_on_a_painted_region_returns_minus_one() {
        let grid = LabelGrid::from_signs(4, 4, &[1; 16]).unwrap();
        // A policy whose rule head strongly prefers assign-nopaint.
        let mut net = small_net(0);
        let (_, rule_block, _) = net.blocks();
        let p = net.params_mut();
        for v in &mut p[rule_block.clone()] {
            *v = 0.0;
        }
        p[rule_block.end - 1] = 1e3;
        let config = RolloutConfig::new(0.0, 2).unwrap();
        let ro = rollout_mixture(
            &grid,
            &net,
            &IgmOracle::new(),
            &RewardMeter::new(),
            &config,
            1,
            SplitSampling::Mean,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(ro.transition.rule, RuleKind::AssignNoPaint);
        assert_eq!(ro.transition.ret, -1.0);
    }

    #[test]
    fn short_episodes_clamp_the_switch_index() {
        // A pure grid is parsed by the expert in one step, so any t lands on 1.
        let grid = LabelGrid::from_signs(8, 8, &[-1; 64]).unwrap();
        let config = RolloutConfig::new(1.0, 3).unwrap();
        let ro = rollout_mixture(
            &grid,
            &small_net(3),
            &IgmOracle::new(),
            &RewardMeter::new(),
            &config,
            200,
            SplitSampling::Mean,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(ro.transition.step, 1);
    }

    #[test]
    fn rollouts_complete_and_respect_the_horizon() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let oracle = IgmOracle::new();
        let rewards = RewardMeter::new();
        let net = small_net(4);
        for i in 0..100 {
            let grid = random_grid(&mut rng, 9, 7);
            let config = RolloutConfig::new(i as f64 / 100.0, 3).unwrap();
            let t = sample_switch_index(config.horizon(), &mut rng);
            let ro = rollout_mixture(
                &grid,
                &net,
                &oracle,
                &rewards,
                &config,
                t,
                SplitSampling::LogitNormal { scale: 0.5 },
                &mut rng,
            )
            .unwrap();
            assert!(ro.tree.is_complete());
            assert!(ro.tree.expansion_order().len() <= config.horizon());
            assert!((-1.0..=1.0).contains(&ro.transition.ret));
            assert!(ro.transition.step <= t);
        }
    }

    #[test]
    fn learner_only_episodes_never_query_the_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grid = random_grid(&mut rng, 16, 16);
        let oracle = IgmOracle::new();
        let ep = run_episode(
            &grid,
            &small_net(5),
            Some(&oracle),
            4,
            0.0,
            SplitSampling::LogitNormal { scale: 0.5 },
            false,
            &mut rng,
        )
        .unwrap();
        assert_eq!(oracle.queries(), 0);
        assert!(ep.tree.is_complete());
        for s in &ep.steps {
            assert!(!s.by_expert);
            assert_eq!(s.behavior_prob, s.learner_prob);
        }
        assert!(run_episode(
            &grid,
            &small_net(5),
            None,
            4,
            0.5,
            SplitSampling::Mean,
            false,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn mixture_behavior_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let grid = random_grid(&mut rng, 16, 16);
        let oracle = IgmOracle::new();
        let beta = 0.3;
        let ep = run_episode(
            &grid,
            &small_net(6),
            Some(&oracle),
            4,
            beta,
            SplitSampling::Mean,
            true,
            &mut rng,
        )
        .unwrap();
        for s in &ep.steps {
            let e = s.expert.unwrap();
            let expect = if e.kind == s.action.kind {
                beta + (1.0 - beta) * s.learner_prob
            } else {
                (1.0 - beta) * s.learner_prob
            };
            assert!((s.behavior_prob - expect).abs() < 1e-15);
            if s.by_expert {
                assert_eq!(s.action, e);
            }
        }
    }

    #[test]
    fn memory_sampling_contracts() {
        let mut m = ReplayMemory::new(None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            m.sample_minibatch(1, &mut rng),
            Err(Error::EmptyMemory)
        ));
        m.record(transition(0.5));
        assert_eq!(m.sample_minibatch(1, &mut rng).unwrap()[0].ret, 0.5);
        for i in 0..99 {
            m.record(transition(i as f64 / 100.0));
        }
        assert_eq!(m.sample_minibatch(500, &mut rng).unwrap().len(), 100);
        let a: Vec<f64> = m
            .sample_minibatch(10, &mut keyed_rng(1, 2, 3, 4))
            .unwrap()
            .iter()
            .map(|t| t.features[0])
            .collect();
        let b: Vec<f64> = m
            .sample_minibatch(10, &mut keyed_rng(1, 2, 3, 4))
            .unwrap()
            .iter()
            .map(|t| t.features[0])
            .collect();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
    }

    #[test]
    fn fifo_cap_evicts_oldest() {
        let mut m = ReplayMemory::new(Some(3));
        for i in 0..5 {
            m.record(transition(i as f64));
        }
        let kept: Vec<f64> = m.iter().map(|t| t.ret).collect();
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            for t in m.sample_minibatch(2, &mut rng).unwrap() {
                assert!(t.ret >= 2.0);
            }
        }
    }

    #[test]
    fn memory_dump_round_trip() {
        let mut m = ReplayMemory::new(Some(10));
        for i in 0..4 {
            let mut t = transition(i as f64 / 4.0);
            t.mask = RuleMask([i % 2 == 0, true, false, true]);
            t.rule = RuleKind::from_index(i);
            t.split = 0.1 * i as f64 + 0.05;
            t.step = i + 7;
            m.record(t);
        }
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(ReplayMemory::read_from(&mut buf.as_slice()).unwrap(), m);
        assert!(ReplayMemory::read_from(&mut &buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn greedy_oracle_policy_reproduces_oracle_parse() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let oracle = IgmOracle::new();
        for _ in 0..30 {
            let grid = random_grid(&mut rng, 13, 9);
            let tree = greedy_parse(&OraclePolicy(&oracle), &grid, 4).unwrap();
            assert_eq!(tree, oracle_parse(&grid, 4));
        }
    }

    #[test]
    fn clamped_sampling_stays_inside() {
        let out = PolicyOutput {
            logits: [0.0; 4],
            probs: [0.25; 4],
            split_pre: 0.0,
            split: 0.02,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = SplitSampling::Clamped {
            sigma: 0.3,
            eps: 0.01,
        };
        for _ in 0..100_000 {
            let l = s.draw(&out, &mut rng);
            assert!((0.01..=0.99).contains(&l));
        }
        let exact = SplitSampling::Clamped {
            sigma: 0.0,
            eps: 0.01,
        };
        assert_eq!(exact.draw(&out, &mut rng), 0.02);
    }
}
