//! Model inputs: noised target crop, location vector, masked context and
//! the symbolic scene summary.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sceneworld::{BBox, Grid, InstanceId, Scene};
use crate::seed::derive_seed;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("bbox {bbox:?} outside {width}x{height} grid")]
    Bounds { bbox: BBox, width: usize, height: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub level: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(level: f64, seed: u64) -> Self {
        Self { level, seed }
    }

    pub fn clean() -> Self {
        Self { level: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Tgt,
    Vis,
    Sym,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Tgt, Variant::Vis, Variant::Sym];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Tgt => "tgt",
            Variant::Vis => "vis",
            Variant::Sym => "sym",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| FeatureError::Invalid(format!("unknown variant `{s}`")))
    }
}

/// `[x1/W, y1/H, x2/W, y2/H, area/(W·H)]`.
pub type LocFeature = [f32; 5];

#[derive(Debug, Clone, PartialEq)]
pub struct TargetCrop {
    pub grid: Grid<f32>,
    /// `T×T`, true on padding.
    pub pad_mask: Vec<bool>,
}

impl TargetCrop {
    pub fn size(&self) -> usize {
        self.grid.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSummary {
    pub coverage: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub v_t: TargetCrop,
    pub loc_t: LocFeature,
    /// Appearance plus a target-mask channel.
    pub v_c: Option<Grid<f32>>,
    pub s_c: Option<SceneSummary>,
    pub variant: Variant,
}

fn check_bbox(bbox: &BBox, width: usize, height: usize) -> Result<()> {
    if bbox.is_valid_in(width, height) {
        Ok(())
    } else {
        Err(FeatureError::Bounds {
            bbox: *bbox,
            width,
            height,
        })
    }
}

/// Cells of `bbox` that noise level `p` replaces, in selection order. The
/// selection is a prefix of one seeded permutation, so higher levels
/// perturb supersets of lower ones.
pub fn noise_selection(bbox: &BBox, p: f64, seed: u64) -> Result<Vec<(usize, usize)>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(FeatureError::Invalid(format!("noise level {p} outside [0,1]")));
    }
    let mut cells: Vec<(usize, usize)> = bbox.cells().collect();
    let k = (p * cells.len() as f64).floor() as usize;
    cells.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0])));
    cells.truncate(k);
    Ok(cells)
}

pub fn apply_target_noise(appearance: &Grid<f32>, bbox: &BBox, spec: NoiseSpec) -> Result<Grid<f32>> {
    check_bbox(bbox, appearance.width, appearance.height)?;
    let mut out = appearance.clone();
    let cells = noise_selection(bbox, spec.level, spec.seed)?;
    // values are drawn in selection order, so a cell gets the same value at
    // every level that selects it
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[1]));
    for (x, y) in cells {
        for v in out.cell_mut(x, y) {
            *v = rng.gen::<f32>();
        }
    }
    Ok(out)
}

pub fn compute_loc(bbox: &BBox, width: usize, height: usize) -> Result<LocFeature> {
    check_bbox(bbox, width, height)?;
    let (w, h) = (width as f64, height as f64);
    Ok([
        (bbox.x1 as f64 / w) as f32,
        (bbox.y1 as f64 / h) as f32,
        (bbox.x2 as f64 / w) as f32,
        (bbox.y2 as f64 / h) as f32,
        (bbox.area() as f64 / (w * h)) as f32,
    ])
}

/// Nearest-neighbour rescale of the box content by `T / max(h, w)`, placed
/// top-left in a `T×T` canvas.
pub fn crop_and_rescale(appearance: &Grid<f32>, bbox: &BBox, t: usize) -> Result<TargetCrop> {
    check_bbox(bbox, appearance.width, appearance.height)?;
    if t == 0 {
        return Err(FeatureError::Invalid("crop size must be positive".into()));
    }
    let (w, h) = (bbox.width(), bbox.height());
    let long = w.max(h);
    let out_w = (w * t / long).max(1);
    let out_h = (h * t / long).max(1);
    let mut grid = Grid::new(t, t, appearance.channels);
    let mut pad_mask = vec![true; t * t];
    for r in 0..out_h {
        let sy = bbox.y1 + (r * h / out_h).min(h - 1);
        for c in 0..out_w {
            let sx = bbox.x1 + (c * w / out_w).min(w - 1);
            grid.cell_mut(c, r).copy_from_slice(appearance.cell(sx, sy));
            pad_mask[r * t + c] = false;
        }
    }
    Ok(TargetCrop { grid, pad_mask })
}

/// Zeroes appearance inside `bbox` and appends a mask channel (1 inside).
pub fn mask_context(appearance: &Grid<f32>, bbox: &BBox) -> Result<Grid<f32>> {
    check_bbox(bbox, appearance.width, appearance.height)?;
    let c = appearance.channels;
    let mut out = Grid::new(appearance.width, appearance.height, c + 1);
    for y in 0..appearance.height {
        for x in 0..appearance.width {
            let dst = out.cell_mut(x, y);
            if bbox.contains(x, y) {
                dst[c] = 1.0;
            } else {
                dst[..c].copy_from_slice(appearance.cell(x, y));
            }
        }
    }
    Ok(out)
}

/// Re-applies a mask to an already masked context grid.
pub fn remask_context(context: &Grid<f32>, bbox: &BBox) -> Result<Grid<f32>> {
    check_bbox(bbox, context.width, context.height)?;
    if context.channels == 0 {
        return Err(FeatureError::Invalid("context grid has no mask channel".into()));
    }
    let c = context.channels - 1;
    let mut out = context.clone();
    for (x, y) in bbox.cells() {
        let cell = out.cell_mut(x, y);
        cell[..c].fill(0.0);
        cell[c] = 1.0;
    }
    Ok(out)
}

/// Category coverage of the cells outside `bbox`; all-zero when nothing
/// remains.
pub fn compute_scene_summary(panoptic_category: &Grid<u16>, bbox: &BBox, k: usize) -> Result<SceneSummary> {
    check_bbox(bbox, panoptic_category.width, panoptic_category.height)?;
    let mut counts = vec![0usize; k];
    let mut total = 0usize;
    for y in 0..panoptic_category.height {
        for x in 0..panoptic_category.width {
            if bbox.contains(x, y) {
                continue;
            }
            let c = panoptic_category.at(x, y) as usize;
            if c >= k {
                return Err(FeatureError::Invalid(format!("category {c} >= K={k}")));
            }
            counts[c] += 1;
            total += 1;
        }
    }
    let coverage = if total == 0 {
        vec![0.0; k]
    } else {
        counts.iter().map(|&n| (n as f64 / total as f64) as f32).collect()
    };
    Ok(SceneSummary { coverage })
}

pub fn build_features(
    scene: &Scene,
    target: InstanceId,
    variant: Variant,
    noise: NoiseSpec,
    crop_size: usize,
    num_categories: usize,
) -> Result<FeatureBundle> {
    let inst = scene
        .instance(target)
        .ok_or_else(|| FeatureError::Invalid(format!("instance {target} not in scene")))?;
    let bbox = inst.bbox;
    let noised = apply_target_noise(&scene.appearance, &bbox, noise)?;
    let v_t = crop_and_rescale(&noised, &bbox, crop_size)?;
    let loc_t = compute_loc(&bbox, scene.width, scene.height)?;
    let v_c = match variant {
        Variant::Vis => Some(mask_context(&noised, &bbox)?),
        _ => None,
    };
    let s_c = match variant {
        Variant::Sym => Some(compute_scene_summary(&scene.panoptic_category, &bbox, num_categories)?),
        _ => None,
    };
    Ok(FeatureBundle {
        v_t,
        loc_t,
        v_c,
        s_c,
        variant,
    })
}
