//! Pixel accuracy, greedy evaluation, comparison reports and parse rendering.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{greedy_parse, ParsePolicy};
use crate::error::{Error, Result};
use crate::grammar::ParseTree;
use crate::raster::{Label, LabelGrid, PredictionGrid};

fn correct_pixels(pred: &PredictionGrid, truth: &LabelGrid) -> Result<usize> {
    if pred.width() != truth.width() || pred.height() != truth.height() {
        return Err(Error::ShapeMismatch(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    Ok(pred
        .labels()
        .iter()
        .zip(truth.labels())
        .filter(|(p, t)| p == t)
        .count())
}

/// Fraction of pixels whose predicted label matches the ground truth.
pub fn pixel_accuracy(pred: &PredictionGrid, truth: &LabelGrid) -> Result<f64> {
    Ok(correct_pixels(pred, truth)? as f64 / truth.area() as f64)
}

pub fn tree_accuracy(tree: &ParseTree, truth: &LabelGrid) -> Result<f64> {
    pixel_accuracy(&tree.to_prediction()?, truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_item: Vec<f64>,
    /// Total correct pixels over total pixels, so item order cannot change it.
    pub mean: f64,
}

/// Parses every grid greedily and scores the resulting labelings.
pub fn evaluate(
    policy: &dyn ParsePolicy,
    grids: &[&LabelGrid],
    max_depth: usize,
    parallel: bool,
) -> Result<EvalResult> {
    let score = |g: &&LabelGrid| -> Result<usize> {
        correct_pixels(&greedy_parse(policy, g, max_depth)?.to_prediction()?, g)
    };
    let counts: Vec<usize> = if parallel {
        grids.par_iter().map(score).collect::<Result<_>>()?
    } else {
        grids.iter().map(score).collect::<Result<_>>()?
    };
    Ok(summarize(grids, &counts))
}

fn summarize(grids: &[&LabelGrid], counts: &[usize]) -> EvalResult {
    let per_item = counts
        .iter()
        .zip(grids)
        .map(|(&c, g)| c as f64 / g.area() as f64)
        .collect();
    let total: usize = grids.iter().map(|g| g.area()).sum();
    let mean = if total == 0 {
        0.0
    } else {
        counts.iter().sum::<usize>() as f64 / total as f64
    };
    EvalResult { per_item, mean }
}

/// The label covering most pixels of `train`; ties go to no-paint.
pub fn majority_label(train: &[&LabelGrid]) -> Label {
    let paint: usize = train.iter().map(|g| g.paint_count(g.full_region())).sum();
    let total: usize = train.iter().map(|g| g.area()).sum();
    if 2 * paint > total {
        Label::Paint
    } else {
        Label::NoPaint
    }
}

/// Accuracy on `test` of labeling every pixel with the training majority.
pub fn majority_baseline(train: &[&LabelGrid], test: &[&LabelGrid]) -> EvalResult {
    let label = majority_label(train);
    let counts: Vec<usize> = test
        .iter()
        .map(|g| {
            let paint = g.paint_count(g.full_region());
            match label {
                Label::Paint => paint,
                Label::NoPaint => g.area() - paint,
            }
        })
        .collect();
    summarize(test, &counts)
}

/// One row of a comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub algorithm: String,
    pub fold: usize,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Row order of the comparison table.
pub const TABLE_ORDER: [&str; 10] = [
    "Oracle",
    "MCPG",
    "DPG",
    "BC",
    "DAgger",
    "AggreVaTeD",
    "AC-AggreVaTeD",
    "Off-MCPG",
    "Off-ACPG",
    "DRAG",
];

fn table_rank(algorithm: &str) -> usize {
    TABLE_ORDER
        .iter()
        .position(|a| *a == algorithm)
        .unwrap_or(TABLE_ORDER.len())
}

fn sorted(rows: &[FoldScore]) -> Vec<&FoldScore> {
    let mut rows: Vec<&FoldScore> = rows.iter().collect();
    rows.sort_by(|a, b| {
        (table_rank(&a.algorithm), &a.algorithm, a.fold).cmp(&(
            table_rank(&b.algorithm),
            &b.algorithm,
            b.fold,
        ))
    });
    rows
}

pub fn report_csv(rows: &[FoldScore]) -> String {
    let mut out = String::from("algorithm,fold,train_acc,test_acc\n");
    for r in sorted(rows) {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6}",
            r.algorithm, r.fold, r.train_acc, r.test_acc
        );
    }
    out
}

/// Plain-text table of fold-averaged accuracies in percent.
pub fn report_table(rows: &[FoldScore]) -> String {
    let sorted = sorted(rows);
    let mut out = format!(
        "{:<16} {:>9} {:>9} {:>6}\n",
        "Model", "Train", "Test", "Folds"
    );
    let mut i = 0;
    while i < sorted.len() {
        let name = &sorted[i].algorithm;
        let group: Vec<&FoldScore> = sorted[i..]
            .iter()
            .take_while(|r| &r.algorithm == name)
            .copied()
            .collect();
        let n = group.len() as f64;
        let train = group.iter().map(|r| r.train_acc).sum::<f64>() / n;
        let test = group.iter().map(|r| r.test_acc).sum::<f64>() / n;
        let _ = writeln!(
            out,
            "{:<16} {:>8.2}% {:>8.2}% {:>6}",
            name,
            100.0 * train,
            100.0 * test,
            group.len()
        );
        i += group.len();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderStats {
    /// Leaf outlines drawn; one per leaf.
    pub boundaries: usize,
}

const PAINT_RGB: [f64; 3] = [255.0, 0.0, 0.0];
const NOPAINT_RGB: [f64; 3] = [0.0, 0.0, 255.0];
const TINT: f64 = 0.6;

fn intensity(grid: &LabelGrid, x: usize, y: usize) -> f64 {
    let idx = y * grid.width() + x;
    match grid.channels().first() {
        Some(c) => c[idx],
        None => match grid.label(x, y) {
            Label::Paint => 1.0,
            Label::NoPaint => 0.0,
        },
    }
}

/// Overlay of a complete parse on the grid's intensities: red tint on paint
/// leaves, blue on no-paint leaves, black lines where leaves meet.
pub fn render_image(tree: &ParseTree, grid: &LabelGrid) -> Result<(RgbImage, RenderStats)> {
    let leaves = tree.leaves()?;
    let (w, h) = (grid.width(), grid.height());
    let mut img = RgbImage::new(w as u32, h as u32);
    for &(region, label) in &leaves {
        grid.check_region(region)?;
        let tint = match label {
            Label::Paint => PAINT_RGB,
            Label::NoPaint => NOPAINT_RGB,
        };
        for y in region.y..region.y + region.h {
            for x in region.x..region.x + region.w {
                let gray = 255.0 * intensity(grid, x, y);
                let px = tint.map(|c| (TINT * c + (1.0 - TINT) * gray).round() as u8);
                img.put_pixel(x as u32, y as u32, Rgb(px));
            }
        }
    }
    let black = Rgb([0, 0, 0]);
    for &(r, _) in &leaves {
        // Only edges shared with another leaf; the image border stays clean.
        if r.x > 0 {
            for y in r.y..r.y + r.h {
                img.put_pixel(r.x as u32, y as u32, black);
            }
        }
        if r.y > 0 {
            for x in r.x..r.x + r.w {
                img.put_pixel(x as u32, r.y as u32, black);
            }
        }
        if r.x + r.w < w {
            for y in r.y..r.y + r.h {
                img.put_pixel((r.x + r.w - 1) as u32, y as u32, black);
            }
        }
        if r.y + r.h < h {
            for x in r.x..r.x + r.w {
                img.put_pixel(x as u32, (r.y + r.h - 1) as u32, black);
            }
        }
    }
    Ok((
        img,
        RenderStats {
            boundaries: leaves.len(),
        },
    ))
}

pub fn render(tree: &ParseTree, grid: &LabelGrid, path: &Path) -> Result<RenderStats> {
    let (img, stats) = render_image(tree, grid)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ConstantPolicy, OraclePolicy};
    use crate::grammar::Action;
    use crate::oracle::{oracle_parse, IgmOracle};
    use crate::raster::{Axis, Region};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut impl Rng, w: usize, h: usize) -> LabelGrid {
        let signs: Vec<i64> = (0..w * h)
            .map(|_| if rng.random_bool(0.3) { 1 } else { -1 })
            .collect();
        LabelGrid::from_signs(w, h, &signs).unwrap()
    }

    fn prediction(w: usize, h: usize, f: impl Fn(usize, usize) -> Label) -> PredictionGrid {
        let mut p = PredictionGrid::filled(w, h, Label::NoPaint);
        for y in 0..h {
            for x in 0..w {
                p.fill(Region::new(x, y, 1, 1), f(x, y));
            }
        }
        p
    }

    #[test]
    fn accuracy_examples() {
        let grid = LabelGrid::from_signs(2, 2, &[1, -1, -1, 1]).unwrap();
        let same = prediction(2, 2, |x, y| grid.label(x, y));
        let inverted = prediction(2, 2, |x, y| grid.label(x, y).flipped());
        let half = prediction(2, 2, |_, _| Label::Paint);
        assert_eq!(pixel_accuracy(&same, &grid).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&inverted, &grid).unwrap(), 0.0);
        assert_eq!(pixel_accuracy(&half, &grid).unwrap(), 0.5);
        let wrong = PredictionGrid::filled(3, 2, Label::Paint);
        assert!(pixel_accuracy(&wrong, &grid).is_err());
    }

    #[test]
    fn oracle_wrapper_matches_oracle_parse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grids: Vec<LabelGrid> = (0..20).map(|_| random_grid(&mut rng, 16, 12)).collect();
        let refs: Vec<&LabelGrid> = grids.iter().collect();
        let oracle = IgmOracle::new();
        let res = evaluate(&OraclePolicy(&oracle), &refs, 4, false).unwrap();
        for (g, acc) in grids.iter().zip(&res.per_item) {
            assert_eq!(*acc, tree_accuracy(&oracle_parse(g, 4), g).unwrap());
        }
        assert_eq!(
            res,
            evaluate(&OraclePolicy(&oracle), &refs, 4, true).unwrap()
        );
    }

    #[test]
    fn constant_policy_scores_background_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grids: Vec<LabelGrid> = (0..10).map(|_| random_grid(&mut rng, 9, 9)).collect();
        let refs: Vec<&LabelGrid> = grids.iter().collect();
        let res = evaluate(&ConstantPolicy(Label::NoPaint), &refs, 3, false).unwrap();
        for (g, acc) in grids.iter().zip(&res.per_item) {
            let background = g.labels().iter().filter(|&&l| l == Label::NoPaint).count();
            assert_eq!(*acc, background as f64 / 81.0);
        }
    }

    #[test]
    fn mean_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grids: Vec<LabelGrid> = (0..15).map(|_| random_grid(&mut rng, 10, 10)).collect();
        let mut refs: Vec<&LabelGrid> = grids.iter().collect();
        let oracle = IgmOracle::new();
        let a = evaluate(&OraclePolicy(&oracle), &refs, 2, false)
            .unwrap()
            .mean;
        refs.reverse();
        refs.swap(0, 7);
        let b = evaluate(&OraclePolicy(&oracle), &refs, 2, false)
            .unwrap()
            .mean;
        assert_eq!(a, b);
    }

    #[test]
    fn accuracy_matches_normalized_root_return() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let g = random_grid(&mut rng, 11, 7);
            let tree = oracle_parse(&g, 3);
            let ret = tree.subtree_return(tree.root(), &g).unwrap() as f64;
            let expect = (ret / g.area() as f64 + 1.0) / 2.0;
            assert!((tree_accuracy(&tree, &g).unwrap() - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn single_paint_leaf_renders_uniform_red() {
        let grid = LabelGrid::new(4, 3, vec![Label::Paint; 12], vec![vec![0.5; 12]]).unwrap();
        let mut tree = ParseTree::new(grid.full_region(), 2);
        tree.apply_action(0, Action::assign(Label::Paint)).unwrap();
        let (img, stats) = render_image(&tree, &grid).unwrap();
        assert_eq!(stats.boundaries, 1);
        let first = *img.get_pixel(0, 0);
        assert!(img.pixels().all(|p| *p == first));
        assert!(first.0[0] > first.0[2]);
    }

    #[test]
    fn boundaries_match_leaves_and_incomplete_trees_fail() {
        let grid = LabelGrid::from_signs(4, 4, &[1; 16]).unwrap();
        let mut tree = ParseTree::new(grid.full_region(), 2);
        tree.apply_action(0, Action::split(Axis::X, 0.5)).unwrap();
        assert!(render_image(&tree, &grid).is_err());
        tree.apply_action(1, Action::assign(Label::Paint)).unwrap();
        tree.apply_action(2, Action::assign(Label::NoPaint))
            .unwrap();
        let (img, stats) = render_image(&tree, &grid).unwrap();
        assert_eq!(stats.boundaries, 2);
        assert_eq!(*img.get_pixel(1, 0), Rgb([0, 0, 0]));
        assert_eq!(*img.get_pixel(2, 0), Rgb([0, 0, 0]));
        assert_ne!(*img.get_pixel(0, 0), Rgb([0, 0, 0]));
        assert_eq!(
            ParseTree::from_json(&tree.to_json().unwrap()).unwrap(),
            tree
        );
    }

    #[test]
    fn reports_follow_table_order() {
        let rows = vec![
            FoldScore {
                algorithm: "DRAG".into(),
                fold: 1,
                train_acc: 0.9,
                test_acc: 0.8,
            },
            FoldScore {
                algorithm: "BC".into(),
                fold: 0,
                train_acc: 0.7,
                test_acc: 0.6,
            },
            FoldScore {
                algorithm: "DRAG".into(),
                fold: 0,
                train_acc: 0.7,
                test_acc: 0.6,
            },
            FoldScore {
                algorithm: "MCPG".into(),
                fold: 0,
                train_acc: 0.5,
                test_acc: 0.5,
            },
        ];
        let csv = report_csv(&rows);
        let order: Vec<&str> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert_eq!(order, ["MCPG", "BC", "DRAG", "DRAG"]);
        let table = report_table(&rows);
        let drag = table.lines().find(|l| l.starts_with("DRAG")).unwrap();
        assert!(drag.contains("80.00%") && drag.contains("70.00%"), "{drag}");
    }
}
