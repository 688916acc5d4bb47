//! Synthetic rectilinear objects, PNG dataset IO and cross-validation splits.

use std::collections::BTreeSet;
use std::path::Path;

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::keyed_rng;
use crate::error::{Error, Result};
use crate::raster::{Label, LabelGrid, Region};

const TAG_GENERATE: u64 = 11;
const PAINT_LEVEL: f64 = 0.8;
const BACKGROUND_LEVEL: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub items: usize,
    pub side: usize,
    /// Inclusive range of painted rectangles per item.
    pub rect_min: usize,
    pub rect_max: usize,
    /// Rectangle side lengths are drawn from this fraction range of the grid side.
    pub rect_frac_min: f64,
    pub rect_frac_max: f64,
    /// Build each labeling from recursive full-width/height cuts.
    pub guillotine: bool,
    /// Maximum number of nested cuts in guillotine mode.
    pub cut_depth: usize,
    /// Half-width of the uniform intensity noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            items: 60,
            side: 64,
            rect_min: 1,
            rect_max: 4,
            rect_frac_min: 0.125,
            rect_frac_max: 0.5,
            guillotine: false,
            cut_depth: 3,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side < 8 {
            return Err(Error::Config(format!("grid side {} is below 8", self.side)));
        }
        if self.rect_min == 0 || self.rect_min > self.rect_max {
            return Err(Error::Config(format!(
                "invalid rectangle count range {}..={}",
                self.rect_min, self.rect_max
            )));
        }
        if !(self.rect_frac_min > 0.0
            && self.rect_frac_min <= self.rect_frac_max
            && self.rect_frac_max <= 1.0)
        {
            return Err(Error::Config(format!(
                "invalid rectangle size range {}..={}",
                self.rect_frac_min, self.rect_frac_max
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!(
                "noise {} outside [0, 1]",
                self.noise
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub grid: LabelGrid,
}

impl Item {
    /// True when every pixel carries the same label.
    pub fn single_class(&self) -> bool {
        let paint = self.grid.paint_count(self.grid.full_region());
        paint == 0 || paint == self.grid.area()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Generated(GenConfig),
    Loaded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(items: Vec<Item>, provenance: Provenance) -> Result<Dataset> {
        if let Some(first) = items.first() {
            let (w, h) = (first.grid.width(), first.grid.height());
            if let Some(bad) = items
                .iter()
                .find(|i| i.grid.width() != w || i.grid.height() != h)
            {
                return Err(Error::Dataset(format!(
                    "item {} is {}x{}, expected {w}x{h}",
                    bad.id,
                    bad.grid.width(),
                    bad.grid.height()
                )));
            }
        }
        Ok(Dataset { items, provenance })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn grids(&self) -> Vec<&LabelGrid> {
        self.items.iter().map(|i| &i.grid).collect()
    }

    pub fn select(&self, indices: &[usize]) -> Vec<&LabelGrid> {
        indices.iter().map(|&i| &self.items[i].grid).collect()
    }
}

/// Quantizes to the 8-bit levels a PNG stores, so save/load is lossless.
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn random_rect(rng: &mut impl Rng, config: &GenConfig) -> Region {
    let side = config.side;
    let mut extent = || {
        let f = rng.random_range(config.rect_frac_min..=config.rect_frac_max);
        ((f * side as f64).round() as usize).clamp(1, side)
    };
    let (w, h) = (extent(), extent());
    Region::new(
        rng.random_range(0..=side - w),
        rng.random_range(0..=side - h),
        w,
        h,
    )
}

/// Leaves of a random guillotine partition of `region`.
fn guillotine_leaves(
    rng: &mut impl Rng,
    region: Region,
    depth: usize,
    min_side: usize,
    out: &mut Vec<Region>,
) {
    let can_x = region.w >= 2 * min_side;
    let can_y = region.h >= 2 * min_side;
    // The root always splits so both classes can appear.
    let split = depth > 0
        && (can_x || can_y)
        && (out.is_empty() && region.x == 0 && region.y == 0 || rng.random_bool(0.7));
    if !split {
        out.push(region);
        return;
    }
    let along_x = match (can_x, can_y) {
        (true, true) => rng.random_bool(0.5),
        (x, _) => x,
    };
    let extent = if along_x { region.w } else { region.h };
    let loc = rng.random_range(min_side..=extent - min_side);
    let (a, b) = if along_x {
        (
            Region::new(region.x, region.y, loc, region.h),
            Region::new(region.x + loc, region.y, region.w - loc, region.h),
        )
    } else {
        (
            Region::new(region.x, region.y, region.w, loc),
            Region::new(region.x, region.y + loc, region.w, region.h - loc),
        )
    };
    guillotine_leaves(rng, a, depth - 1, min_side, out);
    guillotine_leaves(rng, b, depth - 1, min_side, out);
}

fn generate_item(config: &GenConfig, index: usize) -> Result<Item> {
    let mut rng = keyed_rng(config.seed, index as u64, 0, TAG_GENERATE);
    let side = config.side;
    let mut labels = vec![Label::NoPaint; side * side];
    let paint = |labels: &mut Vec<Label>, r: Region| {
        for y in r.y..r.y + r.h {
            labels[y * side + r.x..y * side + r.x + r.w].fill(Label::Paint);
        }
    };
    if config.guillotine {
        let mut leaves = Vec::new();
        guillotine_leaves(
            &mut rng,
            Region::new(0, 0, side, side),
            config.cut_depth,
            (side / 16).max(1),
            &mut leaves,
        );
        let mut flags: Vec<bool> = (0..leaves.len()).map(|_| rng.random_bool(0.5)).collect();
        if leaves.len() > 1 && flags.iter().all(|&f| f == flags[0]) {
            let i = rng.random_range(0..flags.len());
            flags[i] = !flags[i];
        }
        for (r, f) in leaves.into_iter().zip(flags) {
            if f {
                paint(&mut labels, r);
            }
        }
    } else {
        let n = rng.random_range(config.rect_min..=config.rect_max);
        for _ in 0..n {
            let r = random_rect(&mut rng, config);
            paint(&mut labels, r);
        }
    }
    let intensity: Vec<f64> = labels
        .iter()
        .map(|l| {
            let base = match l {
                Label::Paint => PAINT_LEVEL,
                Label::NoPaint => BACKGROUND_LEVEL,
            };
            let noise = if config.noise > 0.0 {
                rng.random_range(-config.noise..=config.noise)
            } else {
                0.0
            };
            quantize(base + noise)
        })
        .collect();
    Ok(Item {
        id: format!("item{index:04}"),
        grid: LabelGrid::new(side, side, labels, vec![intensity])?,
    })
}

/// Generates `config.items` items. Item `i` depends only on the seed and `i`.
pub fn generate(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let items = (0..config.items)
        .into_par_iter()
        .map(|i| generate_item(config, i))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(items, Provenance::Generated(config.clone()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

fn fold_from(order: &[usize], test: &[usize]) -> Fold {
    let held: BTreeSet<usize> = test.iter().copied().collect();
    let mut test: Vec<usize> = held.iter().copied().collect();
    test.sort_unstable();
    let mut train: Vec<usize> = order
        .iter()
        .copied()
        .filter(|i| !held.contains(i))
        .collect();
    train.sort_unstable();
    Fold { train, test }
}

/// Shuffled `k`-way partition; every item lands in exactly one test fold.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || n < k {
        return Err(Error::Config(format!(
            "cannot split {n} items into {k} folds"
        )));
    }
    let order = shuffled(n, seed);
    Ok((0..k)
        .map(|f| {
            let (lo, hi) = (f * n / k, (f + 1) * n / k);
            fold_from(&order, &order[lo..hi])
        })
        .collect())
}

/// `k` disjoint test folds of exactly `test_size` items, each trained on the
/// complement; items beyond `k * test_size` are never held out.
pub fn kfold_with_test_size(n: usize, k: usize, test_size: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || test_size == 0 || k * test_size > n {
        return Err(Error::Config(format!(
            "cannot hold out {k} disjoint folds of {test_size} from {n} items"
        )));
    }
    let order = shuffled(n, seed);
    Ok((0..k)
        .map(|f| fold_from(&order, &order[f * test_size..(f + 1) * test_size]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    provenance: Provenance,
    items: Vec<String>,
}

fn intensity_png(grid: &LabelGrid) -> GrayImage {
    let (w, h) = (grid.width(), grid.height());
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let idx = y as usize * w + x as usize;
        let v = match grid.channels().first() {
            Some(c) => c[idx],
            None => match grid.label(x as usize, y as usize) {
                Label::Paint => 1.0,
                Label::NoPaint => 0.0,
            },
        };
        image::Luma([(v * 255.0).round() as u8])
    })
}

fn mask_png(grid: &LabelGrid) -> GrayImage {
    GrayImage::from_fn(grid.width() as u32, grid.height() as u32, |x, y| match grid
        .label(x as usize, y as usize)
    {
        Label::Paint => image::Luma([255]),
        Label::NoPaint => image::Luma([0]),
    })
}

/// Writes `<id>.png`, `<id>.mask.png` and `manifest.json` into `dir`.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    dataset
        .items
        .par_iter()
        .try_for_each(|item| -> Result<()> {
            let img = dir.join(format!("{}.png", item.id));
            intensity_png(&item.grid)
                .save_with_format(&img, image::ImageFormat::Png)
                .map_err(|e| Error::image(&img, e))?;
            let mask = dir.join(format!("{}.mask.png", item.id));
            mask_png(&item.grid)
                .save_with_format(&mask, image::ImageFormat::Png)
                .map_err(|e| Error::image(&mask, e))
        })?;
    let manifest = Manifest {
        provenance: dataset.provenance.clone(),
        items: dataset.items.iter().map(|i| i.id.clone()).collect(),
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn load_item(dir: &Path, id: &str) -> Result<Item> {
    let img_path = dir.join(format!("{id}.png"));
    let mask_path = dir.join(format!("{id}.mask.png"));
    if !mask_path.exists() {
        return Err(Error::Dataset(format!(
            "image `{id}` has no mask {}",
            mask_path.display()
        )));
    }
    let img = image::open(&img_path)
        .map_err(|e| Error::image(&img_path, e))?
        .to_luma8();
    let mask = image::open(&mask_path)
        .map_err(|e| Error::image(&mask_path, e))?
        .to_luma8();
    if img.dimensions() != mask.dimensions() {
        return Err(Error::Dataset(format!(
            "image `{id}` and its mask differ in size"
        )));
    }
    let labels = mask
        .pixels()
        .map(|p| match p.0[0] {
            255 => Ok(Label::Paint),
            0 => Ok(Label::NoPaint),
            v => Err(Error::Dataset(format!(
                "mask of `{id}` has non-binary value {v}"
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    let intensity = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    let (w, h) = img.dimensions();
    Ok(Item {
        id: id.to_string(),
        grid: LabelGrid::new(w as usize, h as usize, labels, vec![intensity])?,
    })
}

/// Reads every `<id>.png` / `<id>.mask.png` pair in `dir`, sorted by id.
pub fn load(dir: &Path) -> Result<Dataset> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = BTreeSet::new();
    for entry in entries {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".png") {
            if !stem.ends_with(".mask") {
                ids.insert(stem.to_string());
            }
        }
    }
    if ids.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", dir.display())));
    }
    let ids: Vec<String> = ids.into_iter().collect();
    let items = ids
        .par_iter()
        .map(|id| load_item(dir, id))
        .collect::<Result<Vec<_>>>()?;
    let manifest_path = dir.join("manifest.json");
    let provenance = match std::fs::read_to_string(&manifest_path) {
        Ok(text) => serde_json::from_str::<Manifest>(&text)
            .map(|m| m.provenance)
            .map_err(|e| Error::Format {
                path: manifest_path.clone(),
                reason: e.to_string(),
            })?,
        Err(_) => Provenance::Loaded,
    };
    Dataset::new(items, provenance)
}
