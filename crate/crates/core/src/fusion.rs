//! Multi-scale patch fusion by non-overlapping average pooling.
//!
//! A kernel of 2 (or 3) merges each 2x2 (3x3) block of base patches into one
//! fused patch covering a `2p x 2p` (`3p x 3p`) image region. Rows and
//! columns that do not fill a whole block are dropped.

use crate::store::{AttentionGrid, ImageRecord, PatchTokenGrid};
use crate::{Error, Result};

pub const FUSION_KERNELS: [u32; 2] = [2, 3];

fn check_kernel(rows: usize, cols: usize, kernel: u32) -> Result<usize> {
    if !FUSION_KERNELS.contains(&kernel) {
        return Err(Error::InvalidArgument(format!("fusion kernel must be 2 or 3, got {kernel}")));
    }
    let k = kernel as usize;
    if rows < k || cols < k {
        return Err(Error::InvalidArgument(format!(
            "grid {rows}x{cols} is smaller than kernel {kernel}"
        )));
    }
    Ok(k)
}

/// Block-mean of a base token grid. Output scale equals `kernel`.
pub fn fuse_token_grid(grid: &PatchTokenGrid, kernel: u32) -> Result<PatchTokenGrid> {
    if grid.scale != 1 {
        return Err(Error::InvalidArgument(format!(
            "fusion expects a scale-1 grid, got scale {}",
            grid.scale
        )));
    }
    let k = check_kernel(grid.rows, grid.cols, kernel)?;
    let (out_rows, out_cols, dim) = (grid.rows / k, grid.cols / k, grid.dim);
    let inv = 1.0 / (k * k) as f64;
    let mut data = Vec::with_capacity(out_rows * out_cols * dim);
    let mut acc = vec![0f64; dim];
    for r in 0..out_rows {
        for c in 0..out_cols {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for br in r * k..(r + 1) * k {
                for bc in c * k..(c + 1) * k {
                    for (a, &v) in acc.iter_mut().zip(grid.token(br, bc)) {
                        *a += v as f64;
                    }
                }
            }
            data.extend(acc.iter().map(|&s| (s * inv) as f32));
        }
    }
    Ok(PatchTokenGrid {
        rows: out_rows,
        cols: out_cols,
        dim,
        scale: kernel,
        data,
    })
}

/// Block-mean of an attention grid.
pub fn fuse_attention_grid(grid: &AttentionGrid, kernel: u32) -> Result<AttentionGrid> {
    let k = check_kernel(grid.rows, grid.cols, kernel)?;
    let (out_rows, out_cols) = (grid.rows / k, grid.cols / k);
    let inv = 1.0 / (k * k) as f64;
    let mut scores = Vec::with_capacity(out_rows * out_cols);
    for r in 0..out_rows {
        for c in 0..out_cols {
            let mut sum = 0f64;
            for br in r * k..(r + 1) * k {
                for bc in c * k..(c + 1) * k {
                    sum += grid.get(br, bc) as f64;
                }
            }
            scores.push((sum * inv) as f32);
        }
    }
    Ok(AttentionGrid {
        rows: out_rows,
        cols: out_cols,
        scores,
    })
}

/// Token and attention grids at scales 1, 2 and 3.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleFeatures {
    levels: [(PatchTokenGrid, AttentionGrid); 3],
}

impl MultiScaleFeatures {
    /// Grids at `scale` (1, 2 or 3).
    pub fn level(&self, scale: u32) -> &(PatchTokenGrid, AttentionGrid) {
        assert!((1..=3).contains(&scale), "scale must be 1, 2 or 3");
        &self.levels[scale as usize - 1]
    }

    pub fn tokens(&self, scale: u32) -> &PatchTokenGrid {
        &self.level(scale).0
    }

    pub fn attention(&self, scale: u32) -> &AttentionGrid {
        &self.level(scale).1
    }
}

pub fn build_multiscale(rec: &ImageRecord) -> Result<MultiScaleFeatures> {
    rec.validate()?;
    let fuse = |k| -> Result<(PatchTokenGrid, AttentionGrid)> {
        Ok((fuse_token_grid(&rec.tokens, k)?, fuse_attention_grid(&rec.attention, k)?))
    };
    Ok(MultiScaleFeatures {
        levels: [
            (rec.tokens.clone(), rec.attention.clone()),
            fuse(2)?,
            fuse(3)?,
        ],
    })
}
