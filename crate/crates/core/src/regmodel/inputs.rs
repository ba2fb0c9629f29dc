use super::config::{Family, ModelConfig, SceneDims};
use super::RegError;
use crate::features::{FeatureBundle, Variant};
use crate::sceneworld::Grid;

/// Numeric model inputs extracted from a feature bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInputs {
    /// Crop patches, row-major, each `p·p·(C+1)` values (appearance then
    /// a padding flag per cell).
    pub target: Vec<f32>,
    pub loc: [f32; 5],
    /// Context patches, each `cp·cp·(C+1)` values.
    pub context: Option<Vec<f32>>,
    pub coverage: Option<Vec<f32>>,
}

/// Flattens a grid into patch-major feature rows; `extra` supplies one more
/// value per cell.
fn patches(grid: &Grid<f32>, p: usize, extra: Option<&dyn Fn(usize, usize) -> f32>) -> Vec<f32> {
    let (cols, rows) = (grid.width / p, grid.height / p);
    let per_cell = grid.channels + extra.is_some() as usize;
    let mut out = Vec::with_capacity(cols * rows * p * p * per_cell);
    for pr in 0..rows {
        for pc in 0..cols {
            for y in pr * p..(pr + 1) * p {
                for x in pc * p..(pc + 1) * p {
                    out.extend_from_slice(grid.cell(x, y));
                    if let Some(f) = extra {
                        out.push(f(x, y));
                    }
                }
            }
        }
    }
    out
}

impl ModelInputs {
    pub fn from_bundle(cfg: &ModelConfig, dims: &SceneDims, bundle: &FeatureBundle) -> Result<Self, RegError> {
        if bundle.variant != cfg.variant {
            return Err(RegError::Config(format!(
                "bundle variant {} does not match model variant {}",
                bundle.variant, cfg.variant
            )));
        }
        let crop = &bundle.v_t;
        if crop.grid.width != cfg.crop || crop.grid.channels != dims.channels {
            return Err(RegError::Config(format!(
                "crop {}x{}x{} does not match model crop {} with {} channels",
                crop.grid.width, crop.grid.height, crop.grid.channels, cfg.crop, dims.channels
            )));
        }
        let t = cfg.crop;
        let pad = |x: usize, y: usize| crop.pad_mask[y * t + x] as u8 as f32;
        let target = patches(&crop.grid, cfg.patch, Some(&pad));
        let context = match (cfg.variant, &bundle.v_c) {
            (Variant::Vis, Some(grid)) => {
                if grid.width != dims.width || grid.height != dims.height || grid.channels != dims.channels + 1 {
                    return Err(RegError::Config("context grid does not match scene dims".into()));
                }
                let p = match cfg.family {
                    Family::Encdec => cfg.context_patch,
                    Family::Prefix => 1,
                };
                Some(patches(grid, p, None))
            }
            (Variant::Vis, None) => return Err(RegError::Config("vis bundle without context".into())),
            _ => None,
        };
        let coverage = match (cfg.variant, &bundle.s_c) {
            (Variant::Sym, Some(s)) if s.coverage.len() == dims.categories => Some(s.coverage.clone()),
            (Variant::Sym, _) => return Err(RegError::Config("sym bundle without a matching summary".into())),
            _ => None,
        };
        Ok(Self {
            target,
            loc: bundle.loc_t,
            context,
            coverage,
        })
    }
}
