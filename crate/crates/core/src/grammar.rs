//! Binary split grammar and parse trees.
//!
//! A parse tree starts from a single pending node covering the whole grid.
//! Each expansion applies one production rule to the next pending node in
//! top-down, depth-first order: a split rule replaces the node by two pending
//! children (left/top first), an assignment rule makes it a paint or no-paint
//! terminal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{split_region, Axis, Label, LabelGrid, PredictionGrid, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RuleKind {
    #[serde(rename = "split-x")]
    SplitX,
    #[serde(rename = "split-y")]
    SplitY,
    #[serde(rename = "assign-paint")]
    AssignPaint,
    #[serde(rename = "assign-nopaint")]
    AssignNoPaint,
}

impl RuleKind {
    pub const ALL: [RuleKind; 4] = [
        RuleKind::SplitX,
        RuleKind::SplitY,
        RuleKind::AssignPaint,
        RuleKind::AssignNoPaint,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> RuleKind {
        Self::ALL[i]
    }

    pub fn is_split(self) -> bool {
        self.axis().is_some()
    }

    pub fn axis(self) -> Option<Axis> {
        match self {
            RuleKind::SplitX => Some(Axis::X),
            RuleKind::SplitY => Some(Axis::Y),
            _ => None,
        }
    }

    pub fn label(self) -> Option<Label> {
        match self {
            RuleKind::AssignPaint => Some(Label::Paint),
            RuleKind::AssignNoPaint => Some(Label::NoPaint),
            _ => None,
        }
    }

    pub fn assign(label: Label) -> RuleKind {
        match label {
            Label::Paint => RuleKind::AssignPaint,
            Label::NoPaint => RuleKind::AssignNoPaint,
        }
    }

    pub fn split(axis: Axis) -> RuleKind {
        match axis {
            Axis::X => RuleKind::SplitX,
            Axis::Y => RuleKind::SplitY,
        }
    }

    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }
}

impl std::fmt::Display for RuleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RuleKind::SplitX => "split-x",
            RuleKind::SplitY => "split-y",
            RuleKind::AssignPaint => "assign-paint",
            RuleKind::AssignNoPaint => "assign-nopaint",
        })
    }
}

/// Which production rules may be applied at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RuleMask(pub [bool; 4]);

impl RuleMask {
    pub const ALL: RuleMask = RuleMask([true; 4]);
    pub const ASSIGN_ONLY: RuleMask = RuleMask([false, false, true, true]);

    pub fn allows(&self, rule: RuleKind) -> bool {
        self.0[rule.index()]
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn legal(&self) -> impl Iterator<Item = RuleKind> + '_ {
        RuleKind::ALL.into_iter().filter(|r| self.allows(*r))
    }
}

/// A production rule choice. Split rules carry a fraction `l` in `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub kind: RuleKind,
    #[serde(rename = "l", default, skip_serializing_if = "Option::is_none")]
    pub split: Option<f64>,
}

impl Action {
    pub fn split(axis: Axis, fraction: f64) -> Action {
        Action {
            kind: RuleKind::split(axis),
            split: Some(fraction),
        }
    }

    pub fn assign(label: Label) -> Action {
        Action {
            kind: RuleKind::assign(label),
            split: None,
        }
    }

    /// Action for `rule`; `fraction` is dropped for assignment rules.
    pub fn from_rule(rule: RuleKind, fraction: f64) -> Action {
        Action {
            kind: rule,
            split: rule.is_split().then_some(fraction),
        }
    }

    /// Split fraction, or the conventional 0.5 for assignments.
    pub fn fraction_or_default(&self) -> f64 {
        self.split.unwrap_or(0.5)
    }
}

/// Converts a split fraction to a pixel offset: round, then clamp to
/// `[1, extent - 1]`.
pub fn split_offset(fraction: f64, extent: usize) -> usize {
    debug_assert!(extent >= 2);
    let loc = (fraction * extent as f64).round();
    let loc = if loc.is_nan() { 1.0 } else { loc };
    (loc.max(1.0) as usize).min(extent - 1)
}

/// The grammar: four rule kinds, a start region covering the grid and a depth
/// cap. Rule probabilities live in the policy, not here.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grammar {
    pub width: usize,
    pub height: usize,
    pub max_depth: usize,
}

impl Grammar {
    pub fn new(width: usize, height: usize, max_depth: usize) -> Result<Grammar> {
        if max_depth < 1 {
            return Err(Error::Config("max depth must be at least 1".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::EmptyRegion);
        }
        Ok(Grammar {
            width,
            height,
            max_depth,
        })
    }

    pub fn for_grid(grid: &LabelGrid, max_depth: usize) -> Result<Grammar> {
        Self::new(grid.width(), grid.height(), max_depth)
    }

    pub fn start_region(&self) -> Region {
        Region::new(0, 0, self.width, self.height)
    }

    pub fn start_tree(&self) -> ParseTree {
        ParseTree::new(self.start_region(), self.max_depth)
    }

    /// Longest possible episode, `2^(D+1) - 1` expansions.
    pub fn horizon(&self) -> usize {
        horizon(self.max_depth)
    }
}

pub fn horizon(max_depth: usize) -> usize {
    (1usize << (max_depth + 1)) - 1
}

/// Rules legal at a node: splits need depth below the cap and at least two
/// pixels along their axis; assignments are always legal.
pub fn legal_rules(region: Region, depth: usize, max_depth: usize) -> RuleMask {
    let can_split = depth < max_depth;
    RuleMask([
        can_split && region.w >= 2,
        can_split && region.h >= 2,
        true,
        true,
    ])
}

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeState {
    Pending,
    Split {
        action: Action,
        children: [NodeId; 2],
    },
    Terminal(Label),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseNode {
    pub id: NodeId,
    pub region: Region,
    pub depth: usize,
    pub state: NodeState,
}

impl ParseNode {
    pub fn is_pending(&self) -> bool {
        matches!(self.state, NodeState::Pending)
    }

    pub fn children(&self) -> Option<[NodeId; 2]> {
        match self.state {
            NodeState::Split { children, .. } => Some(children),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseTree {
    nodes: Vec<ParseNode>,
    root: NodeId,
    expansion_order: Vec<NodeId>,
    max_depth: usize,
}

impl ParseTree {
    pub fn new(region: Region, max_depth: usize) -> ParseTree {
        ParseTree {
            nodes: vec![ParseNode {
                id: 0,
                region,
                depth: 0,
                state: NodeState::Pending,
            }],
            root: 0,
            expansion_order: Vec::new(),
            max_depth,
        }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn node(&self, id: NodeId) -> &ParseNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[ParseNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expansion_order(&self) -> &[NodeId] {
        &self.expansion_order
    }

    pub fn legal_rules(&self, id: NodeId) -> RuleMask {
        let n = &self.nodes[id];
        legal_rules(n.region, n.depth, self.max_depth)
    }

    /// Applies `action` to the pending node `id`.
    pub fn apply_action(&mut self, id: NodeId, action: Action) -> Result<()> {
        let node = self.nodes.get(id).ok_or(Error::NotPending(id))?;
        if !node.is_pending() {
            return Err(Error::NotPending(id));
        }
        let (region, depth) = (node.region, node.depth);
        match (action.kind.axis(), action.kind.label()) {
            (Some(axis), _) => {
                let l = action.split.ok_or_else(|| {
                    Error::IllegalAction(format!("{} without a split fraction", action.kind))
                })?;
                if !(l > 0.0 && l < 1.0) {
                    return Err(Error::IllegalAction(format!(
                        "split fraction {l} outside (0, 1)"
                    )));
                }
                if depth >= self.max_depth {
                    return Err(Error::IllegalAction(format!(
                        "split at depth {depth} with depth cap {}",
                        self.max_depth
                    )));
                }
                let extent = region.extent(axis);
                if extent < 2 {
                    return Err(Error::IllegalAction(format!(
                        "{} on a {extent}-pixel extent",
                        action.kind
                    )));
                }
                let (a, b) = split_region(region, axis, split_offset(l, extent))?;
                let first = self.nodes.len();
                for (i, r) in [a, b].into_iter().enumerate() {
                    self.nodes.push(ParseNode {
                        id: first + i,
                        region: r,
                        depth: depth + 1,
                        state: NodeState::Pending,
                    });
                }
                self.nodes[id].state = NodeState::Split {
                    action,
                    children: [first, first + 1],
                };
            }
            (None, Some(label)) => {
                self.nodes[id].state = NodeState::Terminal(label);
            }
            (None, None) => unreachable!("every rule is a split or an assignment"),
        }
        self.expansion_order.push(id);
        Ok(())
    }

    /// First pending node in depth-first, left/top-first order.
    pub fn next_unexpanded(&self) -> Option<NodeId> {
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            match self.nodes[id].state {
                NodeState::Pending => return Some(id),
                NodeState::Split { children, .. } => {
                    stack.push(children[1]);
                    stack.push(children[0]);
                }
                NodeState::Terminal(_) => {}
            }
        }
        None
    }

    pub fn is_complete(&self) -> bool {
        self.nodes.iter().all(|n| !n.is_pending())
    }

    /// Undiscounted return of the subtree under `id`: the leaf correlation at
    /// terminals, the sum over children otherwise.
    pub fn subtree_return(&self, id: NodeId, grid: &LabelGrid) -> Result<i64> {
        match self.nodes[id].state {
            NodeState::Pending => Err(Error::IncompleteTree(id)),
            NodeState::Terminal(b) => grid.leaf_correlation(self.nodes[id].region, b),
            NodeState::Split { children, .. } => {
                Ok(self.subtree_return(children[0], grid)?
                    + self.subtree_return(children[1], grid)?)
            }
        }
    }

    /// Subtree return with every internal level scaled by `gamma`.
    pub fn discounted_return(&self, id: NodeId, grid: &LabelGrid, gamma: f64) -> Result<f64> {
        match self.nodes[id].state {
            NodeState::Pending => Err(Error::IncompleteTree(id)),
            NodeState::Terminal(b) => Ok(grid.leaf_correlation(self.nodes[id].region, b)? as f64),
            NodeState::Split { children, .. } => Ok(gamma
                * (self.discounted_return(children[0], grid, gamma)?
                    + self.discounted_return(children[1], grid, gamma)?)),
        }
    }

    /// Terminal leaves in depth-first order, or the first pending node.
    pub fn leaves(&self) -> Result<Vec<(Region, Label)>> {
        let mut out = Vec::new();
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            match self.nodes[id].state {
                NodeState::Pending => return Err(Error::IncompleteTree(id)),
                NodeState::Terminal(b) => out.push((self.nodes[id].region, b)),
                NodeState::Split { children, .. } => {
                    stack.push(children[1]);
                    stack.push(children[0]);
                }
            }
        }
        Ok(out)
    }

    /// Per-pixel labels of a complete tree.
    pub fn to_prediction(&self) -> Result<PredictionGrid> {
        let root = self.nodes[self.root].region;
        let mut pred = PredictionGrid::filled(root.x + root.w, root.y + root.h, Label::NoPaint);
        for (region, label) in self.leaves()? {
            pred.fill(region, label);
        }
        Ok(pred)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&TreeDoc::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<ParseTree> {
        let doc: TreeDoc = serde_json::from_str(s)?;
        doc.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    id: NodeId,
    region: [usize; 4],
    depth: usize,
    state: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action: Option<Action>,
    #[serde(default)]
    children: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b: Option<i64>,
}

#[derive(Serialize, Deserialize)]
struct TreeDoc {
    max_depth: usize,
    root: NodeId,
    expansion_order: Vec<NodeId>,
    nodes: Vec<NodeDoc>,
}

impl From<&ParseTree> for TreeDoc {
    fn from(t: &ParseTree) -> Self {
        let nodes = t
            .nodes
            .iter()
            .map(|n| {
                let Region { x, y, w, h } = n.region;
                let (state, action, children, b) = match n.state {
                    NodeState::Pending => ("pending", None, Vec::new(), None),
                    NodeState::Split { action, children } => {
                        ("split", Some(action), children.to_vec(), None)
                    }
                    NodeState::Terminal(l) => (
                        "terminal",
                        Some(Action::assign(l)),
                        Vec::new(),
                        Some(l.sign()),
                    ),
                };
                NodeDoc {
                    id: n.id,
                    region: [x, y, w, h],
                    depth: n.depth,
                    state: state.to_string(),
                    action,
                    children,
                    b,
                }
            })
            .collect();
        TreeDoc {
            max_depth: t.max_depth,
            root: t.root,
            expansion_order: t.expansion_order.clone(),
            nodes,
        }
    }
}

impl TryFrom<TreeDoc> for ParseTree {
    type Error = Error;

    fn try_from(doc: TreeDoc) -> Result<ParseTree> {
        let bad = |msg: String| Error::Config(format!("parse tree JSON: {msg}"));
        let count = doc.nodes.len();
        let mut nodes = Vec::with_capacity(count);
        for (i, n) in doc.nodes.into_iter().enumerate() {
            if n.id != i {
                return Err(bad(format!("node ids must be 0..n, found {} at {i}", n.id)));
            }
            let [x, y, w, h] = n.region;
            let state = match n.state.as_str() {
                "pending" => NodeState::Pending,
                "terminal" => {
                    let b = n.b.and_then(Label::from_sign);
                    NodeState::Terminal(b.ok_or_else(|| bad(format!("node {i} lacks b")))?)
                }
                "split" => {
                    let action = n
                        .action
                        .filter(|a| a.kind.is_split() && a.split.is_some())
                        .ok_or_else(|| bad(format!("node {i} lacks a split action")))?;
                    match n.children[..] {
                        [a, b] if a < count && b < count && a != i && b != i => NodeState::Split {
                            action,
                            children: [a, b],
                        },
                        _ => return Err(bad(format!("node {i} needs two valid children"))),
                    }
                }
                other => return Err(bad(format!("unknown state {other:?}"))),
            };
            nodes.push(ParseNode {
                id: i,
                region: Region::new(x, y, w, h),
                depth: n.depth,
                state,
            });
        }
        if doc.root >= count {
            return Err(bad("root out of range".into()));
        }
        let tree = ParseTree {
            nodes,
            root: doc.root,
            expansion_order: doc.expansion_order,
            max_depth: doc.max_depth,
        };
        // every node reachable exactly once, children tile their parent
        let mut seen = vec![false; count];
        let mut stack = vec![tree.root];
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut seen[id], true) {
                return Err(bad(format!("node {id} reached twice")));
            }
            if let Some([a, b]) = tree.nodes[id].children() {
                let (p, ra, rb) = (
                    tree.nodes[id].region,
                    tree.nodes[a].region,
                    tree.nodes[b].region,
                );
                let depth_ok = tree.nodes[a].depth == tree.nodes[id].depth + 1
                    && tree.nodes[b].depth == tree.nodes[id].depth + 1;
                if !depth_ok || ra.area() + rb.area() != p.area() {
                    return Err(bad(format!("children of node {id} do not tile it")));
                }
                stack.push(a);
                stack.push(b);
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(bad("unreachable nodes".into()));
        }
        Ok(tree)
    }
}
