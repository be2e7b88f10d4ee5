//! Two-stage visual place recognition engine.
//!
//! The first stage pools per-image patch tokens into a 256-d global
//! descriptor and runs exact Euclidean nearest-neighbor retrieval. The
//! second stage re-ranks the top candidates: patch tokens and attention are
//! average-pooled into 2x2 and 3x3 fused patches, the most attended patches
//! at each scale are kept, and mutual nearest neighbors between query and
//! candidate are verified with a RANSAC homography. The inlier counts of
//! three scale combinations are summed into the re-ranking score.
//!
//! # Modules
//! - [`store`]: binary descriptor store and ground-truth manifest.
//! - [`global`]: pooling, projection, triplet loss and exact top-k retrieval.
//! - [`fusion`]: 2x2 / 3x3 non-overlapping token and attention pooling.
//! - [`selection`]: attention-based key patch selection.
//! - [`matching`]: mutual nearest neighbors, DLT homography and RANSAC.
//! - [`rerank`]: multi-scale pair scoring and candidate re-ranking.
//! - [`eval`]: Recall@K, synthetic datasets, ablations and benchmarking.
//! - [`cli`]: the `vpr` command line front end.

// NaN must fail range checks, so negated comparisons are deliberate
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
mod error;
pub mod eval;
pub mod fusion;
pub mod global;
pub mod matching;
pub mod rerank;
pub mod selection;
pub mod store;

pub use error::{Error, Result};

/// Default patch edge length in pixels.
pub const DEFAULT_PATCH_PX: u32 = 16;
/// Default token dimension of the ViT-S backbone.
pub const DEFAULT_TOKEN_DIM: usize = 384;
/// Default grid for a 640x480 input at 16 px patches.
pub const DEFAULT_GRID_ROWS: usize = 30;
pub const DEFAULT_GRID_COLS: usize = 40;
