//! Label grids, rectangular regions and the fixed-size feature blocks fed to
//! the function approximators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth or predicted paint label of a pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Paint,
    NoPaint,
}

impl Label {
    /// +1 for paint, -1 for no-paint.
    pub fn sign(self) -> i64 {
        match self {
            Label::Paint => 1,
            Label::NoPaint => -1,
        }
    }

    pub fn from_sign(sign: i64) -> Option<Label> {
        match sign {
            1 => Some(Label::Paint),
            -1 => Some(Label::NoPaint),
            _ => None,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Paint => Label::NoPaint,
            Label::NoPaint => Label::Paint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

/// Axis-aligned rectangle `(x, y, w, h)` in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Region {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Region { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn extent(&self, axis: Axis) -> usize {
        match axis {
            Axis::X => self.w,
            Axis::Y => self.h,
        }
    }

    pub fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.x + self.w <= width && self.y + self.h <= height
    }
}

/// Splits `region` at pixel offset `loc` along `axis`. The left/top child has
/// extent `loc`.
pub fn split_region(region: Region, axis: Axis, loc: usize) -> Result<(Region, Region)> {
    let extent = region.extent(axis);
    if loc < 1 || loc >= extent {
        return Err(Error::InvalidSplit { extent, loc });
    }
    let Region { x, y, w, h } = region;
    Ok(match axis {
        Axis::X => (
            Region::new(x, y, loc, h),
            Region::new(x + loc, y, w - loc, h),
        ),
        Axis::Y => (
            Region::new(x, y, w, loc),
            Region::new(x, y + loc, w, h - loc),
        ),
    })
}

/// A `width x height` grid of paint labels with optional intensity channels.
///
/// A summed-area table of paint pixels is built at construction so that label
/// counts over any region cost O(1).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    width: usize,
    height: usize,
    labels: Vec<Label>,
    channels: Vec<Vec<f64>>,
    paint_table: Vec<u32>,
}

impl LabelGrid {
    pub fn new(
        width: usize,
        height: usize,
        labels: Vec<Label>,
        channels: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyRegion);
        }
        let n = width * height;
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {width}x{height} grid",
                labels.len()
            )));
        }
        for (c, channel) in channels.iter().enumerate() {
            if channel.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "channel {c} has {} values for a {width}x{height} grid",
                    channel.len()
                )));
            }
            if channel.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::ShapeMismatch(format!(
                    "channel {c} has intensities outside [0, 1]"
                )));
            }
        }
        let mut paint_table = vec![0u32; (width + 1) * (height + 1)];
        let stride = width + 1;
        for y in 0..height {
            let mut row = 0u32;
            for x in 0..width {
                row += u32::from(labels[y * width + x] == Label::Paint);
                paint_table[(y + 1) * stride + x + 1] = paint_table[y * stride + x + 1] + row;
            }
        }
        Ok(LabelGrid {
            width,
            height,
            labels,
            channels,
            paint_table,
        })
    }

    /// Builds a grid from `+1/-1` signs and no intensity channels.
    pub fn from_signs(width: usize, height: usize, signs: &[i64]) -> Result<Self> {
        let labels = signs
            .iter()
            .map(|&s| {
                Label::from_sign(s)
                    .ok_or_else(|| Error::ShapeMismatch(format!("label value {s} is not +1/-1")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(width, height, labels, Vec::new())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn full_region(&self) -> Region {
        Region::new(0, 0, self.width, self.height)
    }

    pub fn label(&self, x: usize, y: usize) -> Label {
        self.labels[y * self.width + x]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    /// Intensity channels used for features; a label-derived channel
    /// (paint = 1, no-paint = 0) when the grid carries none.
    pub fn feature_channel_count(&self) -> usize {
        self.channels.len().max(1)
    }

    pub fn check_region(&self, region: Region) -> Result<()> {
        if region.fits_in(self.width, self.height) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                region,
                width: self.width,
                height: self.height,
            })
        }
    }

    /// Number of paint pixels inside `region` (unchecked bounds).
    pub fn paint_count(&self, region: Region) -> usize {
        let s = self.width + 1;
        let (x0, y0, x1, y1) = (region.x, region.y, region.x + region.w, region.y + region.h);
        let t = &self.paint_table;
        (t[y1 * s + x1] + t[y0 * s + x0] - t[y0 * s + x1] - t[y1 * s + x0]) as usize
    }

    /// Sum over the region of `label * assigned`.
    pub fn leaf_correlation(&self, region: Region, assigned: Label) -> Result<i64> {
        self.check_region(region)?;
        let paint = self.paint_count(region) as i64;
        let area = region.area() as i64;
        Ok(assigned.sign() * (2 * paint - area))
    }

    /// Falls back to the label-derived value when the grid has no channels.
    fn intensity(&self, channel: usize, idx: usize) -> f64 {
        match self.channels.get(channel) {
            Some(c) => c[idx],
            None => match self.labels[idx] {
                Label::Paint => 1.0,
                Label::NoPaint => 0.0,
            },
        }
    }
}

/// Per-pixel predicted labels produced by a complete parse tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionGrid {
    width: usize,
    height: usize,
    predicted: Vec<Label>,
}

impl PredictionGrid {
    pub fn filled(width: usize, height: usize, label: Label) -> Self {
        PredictionGrid {
            width,
            height,
            predicted: vec![label; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> Label {
        self.predicted[y * self.width + x]
    }

    pub fn labels(&self) -> &[Label] {
        &self.predicted
    }

    pub fn fill(&mut self, region: Region, label: Label) {
        for y in region.y..region.y + region.h {
            let row = y * self.width;
            self.predicted[row + region.x..row + region.x + region.w].fill(label);
        }
    }
}

/// Channel-major `channels x side x side` block of features in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBlock {
    pub side: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureBlock {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.side + row) * self.side + col]
    }
}

/// Sparse area-overlap weights mapping `extent` source pixels onto `side`
/// output cells. Cell `j` covers `[j*extent/side, (j+1)*extent/side)`.
fn pooling_weights(extent: usize, side: usize) -> Vec<Vec<(usize, f64)>> {
    // Work in units of 1/side pixel so interval ends are integers.
    (0..side)
        .map(|j| {
            let start = j * extent;
            let end = (j + 1) * extent;
            let first = start / side;
            let last = end.div_ceil(side);
            (first..last)
                .filter_map(|p| {
                    let lo = start.max(p * side);
                    let hi = end.min((p + 1) * side);
                    (hi > lo).then(|| (p, (hi - lo) as f64 / extent as f64))
                })
                .collect()
        })
        .collect()
}

/// Resamples the region's intensity channels to `side x side` by area-weighted
/// averaging and appends a constant channel holding the region's area as a
/// fraction of the grid area.
pub fn featurize(grid: &LabelGrid, region: Region, side: usize) -> Result<FeatureBlock> {
    grid.check_region(region)?;
    if side == 0 {
        return Err(Error::Config("feature side must be at least 1".into()));
    }
    let wx = pooling_weights(region.w, side);
    let wy = pooling_weights(region.h, side);
    let n_intensity = grid.feature_channel_count();
    let channels = n_intensity + 1;
    let mut data = Vec::with_capacity(channels * side * side);
    let mut rows = vec![0.0; region.h * side];
    for c in 0..n_intensity {
        for py in 0..region.h {
            let base = (region.y + py) * grid.width + region.x;
            for (j, weights) in wx.iter().enumerate() {
                rows[py * side + j] = weights
                    .iter()
                    .map(|&(px, w)| w * grid.intensity(c, base + px))
                    .sum();
            }
        }
        for weights in &wy {
            for j in 0..side {
                let v: f64 = weights.iter().map(|&(py, w)| w * rows[py * side + j]).sum();
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    let size = region.area() as f64 / grid.area() as f64;
    data.extend(std::iter::repeat_n(size, side * side));
    Ok(FeatureBlock {
        side,
        channels,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_with(width: usize, height: usize, f: impl Fn(usize, usize) -> i64) -> LabelGrid {
        let signs: Vec<i64> = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        LabelGrid::from_signs(width, height, &signs).unwrap()
    }

    #[test]
    fn split_examples() {
        let (a, b) = split_region(Region::new(0, 0, 4, 4), Axis::X, 2).unwrap();
        assert_eq!((a, b), (Region::new(0, 0, 2, 4), Region::new(2, 0, 2, 4)));
        let (a, b) = split_region(Region::new(1, 1, 3, 2), Axis::Y, 1).unwrap();
        assert_eq!((a, b), (Region::new(1, 1, 3, 1), Region::new(1, 2, 3, 1)));
        for loc in 0..4 {
            assert!(matches!(
                split_region(Region::new(0, 0, 1, 4), Axis::X, loc),
                Err(Error::InvalidSplit { .. })
            ));
        }
    }

    #[test]
    fn leaf_correlation_examples() {
        let g = grid_with(2, 4, |_, _| 1);
        let r = g.full_region();
        assert_eq!(g.leaf_correlation(r, Label::Paint).unwrap(), 8);
        assert_eq!(g.leaf_correlation(r, Label::NoPaint).unwrap(), -8);

        // five +1, three -1
        let g = grid_with(2, 4, |x, y| if y * 2 + x < 5 { 1 } else { -1 });
        let brute: i64 = g.labels().iter().map(|l| l.sign()).sum();
        assert_eq!(brute, 2);
        assert_eq!(
            g.leaf_correlation(g.full_region(), Label::Paint).unwrap(),
            2
        );
    }

    #[test]
    fn leaf_correlation_out_of_bounds() {
        let g = grid_with(4, 4, |_, _| 1);
        assert!(matches!(
            g.leaf_correlation(Region::new(2, 2, 3, 1), Label::Paint),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn grid_rejects_mismatched_channels() {
        let labels = vec![Label::Paint; 4];
        assert!(LabelGrid::new(2, 2, labels.clone(), vec![vec![0.5; 3]]).is_err());
        assert!(LabelGrid::new(2, 2, labels, vec![vec![1.5; 4]]).is_err());
        assert!(LabelGrid::from_signs(2, 1, &[1, 0]).is_err());
    }

    #[test]
    fn featurize_constant_region() {
        let labels = vec![Label::Paint; 7 * 5];
        let g = LabelGrid::new(7, 5, labels, vec![vec![0.7; 35]]).unwrap();
        let f = featurize(&g, Region::new(1, 1, 5, 3), 4).unwrap();
        assert_eq!((f.side, f.channels, f.len()), (4, 2, 32));
        for row in 0..4 {
            for col in 0..4 {
                assert!((f.at(0, row, col) - 0.7).abs() < 1e-12);
                assert!((f.at(1, row, col) - 15.0 / 35.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn featurize_checkerboard_to_single_cell() {
        let g = grid_with(2, 2, |x, y| if (x + y) % 2 == 0 { 1 } else { -1 });
        let f = featurize(&g, g.full_region(), 1).unwrap();
        assert_eq!(f.at(0, 0, 0), 0.5);
        assert_eq!(f.at(1, 0, 0), 1.0);
    }

    #[test]
    fn featurize_shape_contract() {
        let g = grid_with(9, 13, |x, y| if (x * y) % 3 == 0 { 1 } else { -1 });
        for &(r, side) in &[
            (Region::new(0, 0, 9, 13), 32),
            (Region::new(3, 2, 1, 1), 8),
            (Region::new(2, 5, 7, 2), 5),
        ] {
            let f = featurize(&g, r, side).unwrap();
            assert_eq!(f.len(), 2 * side * side);
            assert!(f.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn pooling_weights_sum_to_one() {
        for extent in 1..40 {
            for side in [1, 3, 8, 32] {
                for cell in pooling_weights(extent, side) {
                    let s: f64 = cell.iter().map(|&(_, w)| w).sum();
                    assert!((s - 1.0).abs() < 1e-12, "extent {extent} side {side}");
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_grid() -> impl Strategy<Value = LabelGrid> {
            (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
                proptest::collection::vec(prop_oneof![Just(1i64), Just(-1i64)], w * h)
                    .prop_map(move |s| LabelGrid::from_signs(w, h, &s).unwrap())
            })
        }

        fn arb_region(w: usize, h: usize) -> impl Strategy<Value = Region> {
            (0..w, 0..h).prop_flat_map(move |(x, y)| {
                (1..=w - x, 1..=h - y).prop_map(move |(rw, rh)| Region::new(x, y, rw, rh))
            })
        }

        proptest! {
            #[test]
            fn split_tiles_parent(w in 2usize..40, h in 2usize..40, frac in 0.0f64..1.0, along_x: bool) {
                let parent = Region::new(3, 5, w, h);
                let axis = if along_x { Axis::X } else { Axis::Y };
                let extent = parent.extent(axis);
                let loc = 1 + ((extent - 1) as f64 * frac) as usize;
                let loc = loc.min(extent - 1);
                let (a, b) = split_region(parent, axis, loc).unwrap();
                prop_assert_eq!(a.area() + b.area(), parent.area());
                for py in parent.y..parent.y + parent.h {
                    for px in parent.x..parent.x + parent.w {
                        prop_assert!(a.contains(px, py) ^ b.contains(px, py));
                    }
                }
            }

            #[test]
            fn correlations_cancel((g, r) in arb_grid().prop_flat_map(|g| {
                let (w, h) = (g.width(), g.height());
                (Just(g), arb_region(w, h))
            })) {
                let p = g.leaf_correlation(r, Label::Paint).unwrap();
                let n = g.leaf_correlation(r, Label::NoPaint).unwrap();
                prop_assert_eq!(p + n, 0);
                let brute: i64 = (r.y..r.y + r.h)
                    .flat_map(|y| (r.x..r.x + r.w).map(move |x| (x, y)))
                    .map(|(x, y)| g.label(x, y).sign())
                    .sum();
                prop_assert_eq!(p, brute);
            }

            #[test]
            fn featurize_is_deterministic((g, r) in arb_grid().prop_flat_map(|g| {
                let (w, h) = (g.width(), g.height());
                (Just(g), arb_region(w, h))
            }), side in 1usize..10) {
                let a = featurize(&g, r, side).unwrap();
                let b = featurize(&g, r, side).unwrap();
                prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
