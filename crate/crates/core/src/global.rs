//! Global descriptors and first-stage retrieval.
//!
//! Patch tokens are mean-pooled into a `dim`-vector and projected to 256
//! components by a fixed linear layer. Retrieval is an exact Euclidean scan,
//! ties broken by reference id.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::store::{Manifest, PatchTokenGrid, Split};
use crate::{Error, Result};

pub const GLOBAL_DIM: usize = 256;
pub const WEIGHTS_MAGIC: &[u8; 4] = b"PFW1";
pub const WEIGHTS_VERSION: u32 = 1;
/// Triplet margin used during training.
pub const DEFAULT_MARGIN: f64 = 0.01;
pub const POSITIVE_RADIUS_M: f64 = 10.0;
pub const NEGATIVE_RADIUS_M: f64 = 25.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor(Vec<f32>);

impl GlobalDescriptor {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != GLOBAL_DIM {
            return Err(Error::DimensionMismatch(format!(
                "global descriptor needs {GLOBAL_DIM} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite global descriptor value".into()));
        }
        Ok(GlobalDescriptor(values))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn squared_distance(&self, other: &GlobalDescriptor) -> f64 {
        squared_distance(&self.0, &other.0)
    }

    pub fn distance(&self, other: &GlobalDescriptor) -> f64 {
        self.squared_distance(other).sqrt()
    }
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Mean of all patch tokens, component-wise.
pub fn pool_tokens(grid: &PatchTokenGrid) -> Result<Vec<f32>> {
    if grid.is_empty() || grid.dim == 0 {
        return Err(Error::InvalidArgument("cannot pool an empty token grid".into()));
    }
    let mut acc = vec![0f64; grid.dim];
    for token in grid.data.chunks_exact(grid.dim) {
        for (a, &v) in acc.iter_mut().zip(token) {
            *a += v as f64;
        }
    }
    let n = grid.len() as f64;
    Ok(acc.into_iter().map(|s| (s / n) as f32).collect())
}

/// Linear layer `dim_in -> 256`. `matrix` is `dim_in x 256`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub dim_in: usize,
    pub matrix: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ProjectionWeights {
    pub fn new(dim_in: usize, matrix: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        let w = ProjectionWeights {
            dim_in,
            matrix,
            bias,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.matrix.len() != self.dim_in * GLOBAL_DIM || self.bias.len() != GLOBAL_DIM {
            return Err(Error::DimensionMismatch(format!(
                "projection expects {}x{GLOBAL_DIM} matrix and {GLOBAL_DIM} bias, got {} and {}",
                self.dim_in,
                self.matrix.len(),
                self.bias.len()
            )));
        }
        if self.matrix.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite projection weight".into()));
        }
        Ok(())
    }

    /// Untrained weights drawn uniformly from `[-1/sqrt(dim_in), 1/sqrt(dim_in))`, zero bias.
    pub fn seeded(dim_in: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim_in.max(1) as f32).sqrt();
        let matrix = (0..dim_in * GLOBAL_DIM)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        ProjectionWeights {
            dim_in,
            matrix,
            bias: vec![0.0; GLOBAL_DIM],
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 4 * (self.matrix.len() + self.bias.len()));
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim_in as u32).to_le_bytes());
        buf.extend_from_slice(&(GLOBAL_DIM as u32).to_le_bytes());
        for v in self.matrix.iter().chain(&self.bias) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("weight file shorter than its header".into()));
        }
        if &bytes[..4] != WEIGHTS_MAGIC {
            return Err(Error::Format("bad weight magic, expected \"PFW1\"".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        if word(4) != WEIGHTS_VERSION as usize {
            return Err(Error::Format(format!("unsupported weight version {}", word(4))));
        }
        let dim_in = word(8);
        let dim_out = word(12);
        if dim_out != GLOBAL_DIM {
            return Err(Error::DimensionMismatch(format!(
                "weight file projects to {dim_out}, expected {GLOBAL_DIM}"
            )));
        }
        let n = dim_in * dim_out + dim_out;
        if bytes.len() != 16 + 4 * n {
            return Err(Error::Format(format!(
                "weight payload is {} bytes, expected {}",
                bytes.len() - 16,
                4 * n
            )));
        }
        let values: Vec<f32> = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let (matrix, bias) = values.split_at(dim_in * dim_out);
        ProjectionWeights::new(dim_in, matrix.to_vec(), bias.to_vec())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.encode()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        ProjectionWeights::decode(&bytes)
    }
}

/// `pooled^T * matrix + bias`, no activation.
pub fn project_global(pooled: &[f32], weights: &ProjectionWeights) -> Result<GlobalDescriptor> {
    if pooled.len() != weights.dim_in {
        return Err(Error::DimensionMismatch(format!(
            "pooled vector has {} components, projection expects {}",
            pooled.len(),
            weights.dim_in
        )));
    }
    let mut acc: Vec<f64> = weights.bias.iter().map(|&b| b as f64).collect();
    for (row, &x) in weights.matrix.chunks_exact(GLOBAL_DIM).zip(pooled) {
        let x = x as f64;
        for (a, &w) in acc.iter_mut().zip(row) {
            *a += x * w as f64;
        }
    }
    GlobalDescriptor::new(acc.into_iter().map(|v| v as f32).collect())
}

pub fn global_descriptor(grid: &PatchTokenGrid, weights: &ProjectionWeights) -> Result<GlobalDescriptor> {
    project_global(&pool_tokens(grid)?, weights)
}

/// `max(|gq - gp|^2 - |gq - gn|^2 + margin, 0)`.
pub fn triplet_loss(
    gq: &GlobalDescriptor,
    gp: &GlobalDescriptor,
    gn: &GlobalDescriptor,
    margin: f64,
) -> Result<f64> {
    if !(margin >= 0.0) {
        return Err(Error::InvalidArgument(format!("margin must be >= 0, got {margin}")));
    }
    Ok((gq.squared_distance(gp) - gq.squared_distance(gn) + margin).max(0.0))
}

/// Query/positive/negative id triple for triplet training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub query: String,
    pub positive: String,
    pub negative: String,
}

/// Mines training triplets from manifest geometry.
///
/// For each query the positive is the nearest reference within
/// [`POSITIVE_RADIUS_M`]; negatives are the `negatives_per_query` nearest
/// references beyond [`NEGATIVE_RADIUS_M`]. Queries lacking either are skipped.
pub fn mine_triplets(manifest: &Manifest, negatives_per_query: usize) -> Vec<Triplet> {
    let refs: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Reference)
        .collect();
    let mut out = Vec::new();
    for q in manifest.entries.iter().filter(|e| e.split == Split::Query) {
        let mut by_dist: Vec<(f64, &str)> = refs
            .iter()
            .map(|r| (((r.x_m - q.x_m).powi(2) + (r.y_m - q.y_m).powi(2)).sqrt(), r.id.as_str()))
            .collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        let Some(&(_, positive)) = by_dist.iter().find(|(d, _)| *d <= POSITIVE_RADIUS_M) else {
            continue;
        };
        for &(_, negative) in by_dist
            .iter()
            .filter(|(d, _)| *d > NEGATIVE_RADIUS_M)
            .take(negatives_per_query)
        {
            out.push(Triplet {
                query: q.id.clone(),
                positive: positive.to_string(),
                negative: negative.to_string(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_id: String,
    pub ranked: Vec<Neighbor>,
}

/// Exact Euclidean index over reference descriptors. Immutable once built.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    // sorted by id so results do not depend on insertion order
    entries: Vec<(String, GlobalDescriptor)>,
}

impl RetrievalIndex {
    pub fn build(refs: Vec<(String, GlobalDescriptor)>) -> Result<Self> {
        let mut entries = refs;
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Validation(format!("duplicate reference id {:?}", w[0].0)));
        }
        Ok(RetrievalIndex { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, GlobalDescriptor)] {
        &self.entries
    }

    /// The `k` nearest references by Euclidean distance, ties by id.
    pub fn retrieve_topk(&self, query_id: &str, query: &GlobalDescriptor, k: usize) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if self.entries.is_empty() {
            return Err(Error::InvalidArgument("retrieval index is empty".into()));
        }
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, (_, g))| (query.squared_distance(g), i))
            .collect();
        // entries are id-sorted, so index order is id order
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(RetrievalResult {
            query_id: query_id.to_string(),
            ranked: scored
                .into_iter()
                .map(|(d2, i)| Neighbor {
                    id: self.entries[i].0.clone(),
                    distance: d2.sqrt(),
                })
                .collect(),
        })
    }
}

pub fn build_index(refs: Vec<(String, GlobalDescriptor)>) -> Result<RetrievalIndex> {
    RetrievalIndex::build(refs)
}

pub fn retrieve_topk(
    index: &RetrievalIndex,
    query_id: &str,
    query: &GlobalDescriptor,
    k: usize,
) -> Result<RetrievalResult> {
    index.retrieve_topk(query_id, query, k)
}
