//! Information-gain-maximizing expert parser.
//!
//! ID3 with multiple candidate cut positions per axis: at every node the
//! expert tries each interior pixel boundary along x and y, keeps the cut with
//! the largest information gain, and assigns the majority label once the
//! region is pure or the depth cap is reached.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::grammar::{Action, NodeId, NodeState, ParseTree};
use crate::raster::{split_region, Axis, Label, LabelGrid, Region};

/// Gains closer than this are treated as ties.
const GAIN_EPS: f64 = 1e-12;

/// Binary Shannon entropy in bits of a region with `pos` paint pixels out of
/// `total`.
pub fn entropy(pos: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::EmptyRegion);
    }
    if pos > total {
        return Err(Error::ShapeMismatch(format!(
            "{pos} positive pixels out of {total}"
        )));
    }
    let p = pos as f64 / total as f64;
    let term = |q: f64| if q > 0.0 { -q * q.log2() } else { 0.0 };
    Ok(term(p) + term(1.0 - p))
}

fn entropy_of(grid: &LabelGrid, region: Region) -> f64 {
    // counts always satisfy the preconditions here
    entropy(grid.paint_count(region), region.area()).unwrap_or(0.0)
}

/// Parent entropy minus the size-weighted entropies of the two children.
pub fn information_gain(grid: &LabelGrid, region: Region, axis: Axis, loc: usize) -> Result<f64> {
    grid.check_region(region)?;
    let (a, b) = split_region(region, axis, loc)?;
    Ok(gain_unchecked(grid, region, a, b))
}

fn gain_unchecked(grid: &LabelGrid, parent: Region, a: Region, b: Region) -> f64 {
    let n = parent.area() as f64;
    let g = entropy_of(grid, parent)
        - a.area() as f64 / n * entropy_of(grid, a)
        - b.area() as f64 / n * entropy_of(grid, b);
    g.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitEvaluation {
    pub axis: Axis,
    pub loc: usize,
    pub gain: f64,
}

/// Best cut over every interior boundary on both axes. Ties go to the smaller
/// offset, then to x before y. `None` when the region is a single pixel.
pub fn best_split(grid: &LabelGrid, region: Region) -> Option<SplitEvaluation> {
    let mut best: Option<SplitEvaluation> = None;
    for axis in [Axis::X, Axis::Y] {
        for loc in 1..region.extent(axis) {
            let (a, b) = split_region(region, axis, loc).expect("interior offset");
            let gain = gain_unchecked(grid, region, a, b);
            let better = match best {
                None => true,
                Some(cur) => {
                    gain > cur.gain + GAIN_EPS
                        || ((gain - cur.gain).abs() <= GAIN_EPS && loc < cur.loc)
                }
            };
            if better {
                best = Some(SplitEvaluation { axis, loc, gain });
            }
        }
    }
    best
}

/// Majority label of the region; ties go to no-paint.
pub fn majority_label(grid: &LabelGrid, region: Region) -> Label {
    if 2 * grid.paint_count(region) > region.area() {
        Label::Paint
    } else {
        Label::NoPaint
    }
}

/// The expert's action at a node, ignoring query accounting.
pub fn best_action(grid: &LabelGrid, region: Region, depth: usize, max_depth: usize) -> Action {
    let paint = grid.paint_count(region);
    let pure = paint == 0 || paint == region.area();
    // Impure regions below the cap are split even when no cut has positive
    // gain (XOR-like layouts), otherwise such regions could never be labeled.
    if !pure && depth < max_depth {
        if let Some(s) = best_split(grid, region) {
            let fraction = s.loc as f64 / region.extent(s.axis) as f64;
            return Action::split(s.axis, fraction);
        }
    }
    Action::assign(majority_label(grid, region))
}

/// Expands every pending node of `tree` with the expert, in depth-first order.
pub fn complete_with_expert(tree: &mut ParseTree, grid: &LabelGrid) {
    while let Some(id) = tree.next_unexpanded() {
        let n = tree.node(id);
        let a = best_action(grid, n.region, n.depth, tree.max_depth());
        tree.apply_action(id, a).expect("expert actions are legal");
    }
}

/// Expands only the pending nodes under `root` with the expert.
fn complete_subtree(tree: &mut ParseTree, root: NodeId, grid: &LabelGrid) {
    let mut stack = vec![root];
    while let Some(id) = stack.pop() {
        let n = tree.node(id);
        if n.is_pending() {
            let a = best_action(grid, n.region, n.depth, tree.max_depth());
            tree.apply_action(id, a).expect("expert actions are legal");
        }
        if let NodeState::Split { children, .. } = tree.node(id).state {
            stack.push(children[1]);
            stack.push(children[0]);
        }
    }
}

/// Complete expert parse of the grid.
pub fn oracle_parse(grid: &LabelGrid, max_depth: usize) -> ParseTree {
    let mut tree = ParseTree::new(grid.full_region(), max_depth);
    complete_with_expert(&mut tree, grid);
    tree
}

/// Takes `action` at the pending `node` of a scratch copy of `tree`, finishes
/// that node's subtree with the expert and returns its undiscounted return.
pub fn expert_rollout_return(
    tree: &ParseTree,
    node: NodeId,
    action: Action,
    grid: &LabelGrid,
) -> Result<i64> {
    let mut scratch = tree.clone();
    scratch.apply_action(node, action)?;
    complete_subtree(&mut scratch, node, grid);
    scratch.subtree_return(node, grid)
}

/// The expert with a query counter, so training code can prove which
/// learners consulted it.
#[derive(Debug, Default)]
pub struct IgmOracle {
    queries: AtomicU64,
}

impl IgmOracle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    fn tick(&self) {
        self.queries.fetch_add(1, Ordering::Relaxed);
    }

    pub fn best_action(
        &self,
        grid: &LabelGrid,
        region: Region,
        depth: usize,
        max_depth: usize,
    ) -> Action {
        self.tick();
        best_action(grid, region, depth, max_depth)
    }

    pub fn oracle_parse(&self, grid: &LabelGrid, max_depth: usize) -> ParseTree {
        self.tick();
        oracle_parse(grid, max_depth)
    }

    pub fn complete(&self, tree: &mut ParseTree, grid: &LabelGrid) {
        self.tick();
        complete_with_expert(tree, grid);
    }

    pub fn expert_rollout_return(
        &self,
        tree: &ParseTree,
        node: NodeId,
        action: Action,
        grid: &LabelGrid,
    ) -> Result<i64> {
        self.tick();
        expert_rollout_return(tree, node, action, grid)
    }
}
