//! Attention-based key patch selection.
//!
//! Per scale, the `cap` most attended cells are kept (ties by row-major
//! index), then any cell with attention `<= tau` is dropped. Survivors carry
//! their fused descriptor and the pixel center of the region they cover.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::fusion::MultiScaleFeatures;
use crate::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.01;
/// Per-scale caps for scales 1, 2, 3.
pub const DEFAULT_CAPS: [usize; 3] = [400, 200, 50];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyPatch {
    pub descriptor: Vec<f32>,
    /// Pixel center of the covered region.
    pub center: Point2,
    pub scale: u32,
    pub attention: f32,
    /// Row-major cell index in the grid of its scale.
    pub cell: usize,
}

/// Key patches of one scale, by descending attention.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyPatchSet {
    pub scale: u32,
    pub patches: Vec<KeyPatch>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    pub tau: f64,
    pub caps: [usize; 3],
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            tau: DEFAULT_TAU,
            caps: DEFAULT_CAPS,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(Error::InvalidArgument(format!("tau must be >= 0, got {}", self.tau)));
        }
        if self.caps.contains(&0) {
            return Err(Error::InvalidArgument("selection caps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn cap(&self, scale: u32) -> usize {
        self.caps[scale as usize - 1]
    }
}

/// Key patch sets for scales 1, 2 and 3.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyPatches {
    sets: [KeyPatchSet; 3],
}

impl KeyPatches {
    pub fn scale(&self, scale: u32) -> &KeyPatchSet {
        &self.sets[scale as usize - 1]
    }

    pub fn sets(&self) -> &[KeyPatchSet; 3] {
        &self.sets
    }

    pub fn total(&self) -> usize {
        self.sets.iter().map(|s| s.patches.len()).sum()
    }

    /// Bytes needed to hold every key patch: descriptor (`dim` f32), center (2 x f32), attention (f32).
    pub fn memory_bytes(&self) -> usize {
        self.sets
            .iter()
            .flat_map(|s| &s.patches)
            .map(|p| key_patch_bytes(p.descriptor.len()))
            .sum()
    }
}

pub fn key_patch_bytes(dim: usize) -> usize {
    dim * 4 + 8 + 4
}

/// Cell indices surviving cap-then-threshold, in selection order.
pub fn select_cells(scores: &[f32], cap: usize, tau: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let by_attention = |a: &usize, b: &usize| -> Ordering {
        scores[*b].total_cmp(&scores[*a]).then(a.cmp(b))
    };
    if cap < order.len() {
        order.select_nth_unstable_by(cap, by_attention);
        order.truncate(cap);
    }
    order.sort_by(by_attention);
    order.retain(|&i| scores[i] as f64 > tau);
    order
}

pub fn select_key_patches(
    features: &MultiScaleFeatures,
    cfg: &SelectionConfig,
    patch_px: u32,
) -> Result<KeyPatches> {
    cfg.validate()?;
    if patch_px == 0 {
        return Err(Error::InvalidArgument("patch_px must be > 0".into()));
    }
    let select = |scale: u32| -> KeyPatchSet {
        let (tokens, attention) = features.level(scale);
        let side = (scale * patch_px) as f64;
        let patches = select_cells(&attention.scores, cfg.cap(scale), cfg.tau)
            .into_iter()
            .map(|cell| {
                let (r, c) = (cell / attention.cols, cell % attention.cols);
                KeyPatch {
                    descriptor: tokens.token_at(cell).to_vec(),
                    center: Point2::new(c as f64 * side + side / 2.0, r as f64 * side + side / 2.0),
                    scale,
                    attention: attention.scores[cell],
                    cell,
                }
            })
            .collect();
        KeyPatchSet { scale, patches }
    };
    Ok(KeyPatches {
        sets: [select(1), select(2), select(3)],
    })
}
