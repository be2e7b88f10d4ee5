//! Multi-scale spatial scoring and re-ranking of global candidates.
//!
//! Each candidate is scored by summing spatial matching scores over a
//! combination of key patch scale sets. The default combination is
//! `s11 + s12 + s23`: base key patches alone, base with 2x fused, and 2x
//! with 3x fused. Candidates are then sorted by total score, keeping the
//! global retrieval order among equal totals.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::fusion::build_multiscale;
use crate::global::{global_descriptor, ProjectionWeights, RetrievalIndex, RetrievalResult};
use crate::matching::{
    mutual_nn_indices, ransac_inliers, MatchPair, PackedDescriptors, RansacConfig, TOLERANCE_PATCH_FACTOR,
};
use crate::selection::{select_key_patches, KeyPatch, KeyPatches, SelectionConfig};
use crate::store::{ImageRecord, Manifest, Split, Store};
use crate::{Error, Result};

pub const DEFAULT_TOP_K: usize = 100;

/// A set of key patch scales matched together as one term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScaleSet(u8);

impl ScaleSet {
    pub const PK: ScaleSet = ScaleSet(0b001);
    pub const P2K: ScaleSet = ScaleSet(0b010);
    pub const P3K: ScaleSet = ScaleSet(0b100);
    pub const PK_P2K: ScaleSet = ScaleSet(0b011);
    pub const PK_P3K: ScaleSet = ScaleSet(0b101);
    pub const P2K_P3K: ScaleSet = ScaleSet(0b110);
    pub const ALL: ScaleSet = ScaleSet(0b111);

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, scale: u32) -> bool {
        (1..=3).contains(&scale) && self.0 & (1 << (scale - 1)) != 0
    }

    pub fn scales(self) -> impl Iterator<Item = u32> {
        (1..=3).filter(move |&s| self.contains(s))
    }

    pub fn max_scale(self) -> u32 {
        self.scales().last().unwrap_or(1)
    }

    pub fn label(self) -> String {
        self.scales()
            .map(|s| if s == 1 { "pk".to_string() } else { format!("p{s}k") })
            .collect::<Vec<_>>()
            .join("&")
    }
}

impl fmt::Display for ScaleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Score combinations over key patch scale sets. `+` separates summed
/// terms, `&` joins scales matched together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ScoreCombo {
    Pk,
    P2k,
    P3k,
    PkP2k,
    PkP3k,
    PkP2kP3k,
    PkPlusPkP2k,
    /// `pk + pk&p2k + p2k&p3k`.
    #[default]
    MultiScale,
    PkPlusPkP2kPlusAll,
    PkPlusPkP3kPlusAll,
    /// `pk + pk&p2k + pk&p3k`.
    PkPlusPkP2kPlusPkP3k,
}

impl ScoreCombo {
    pub const ALL: [ScoreCombo; 11] = [
        ScoreCombo::Pk,
        ScoreCombo::P2k,
        ScoreCombo::P3k,
        ScoreCombo::PkP2k,
        ScoreCombo::PkP3k,
        ScoreCombo::PkP2kP3k,
        ScoreCombo::PkPlusPkP2k,
        ScoreCombo::MultiScale,
        ScoreCombo::PkPlusPkP2kPlusAll,
        ScoreCombo::PkPlusPkP3kPlusAll,
        ScoreCombo::PkPlusPkP2kPlusPkP3k,
    ];

    pub fn terms(self) -> &'static [ScaleSet] {
        use ScaleSet as S;
        match self {
            ScoreCombo::Pk => &[S::PK],
            ScoreCombo::P2k => &[S::P2K],
            ScoreCombo::P3k => &[S::P3K],
            ScoreCombo::PkP2k => &[S::PK_P2K],
            ScoreCombo::PkP3k => &[S::PK_P3K],
            ScoreCombo::PkP2kP3k => &[S::ALL],
            ScoreCombo::PkPlusPkP2k => &[S::PK, S::PK_P2K],
            ScoreCombo::MultiScale => &[S::PK, S::PK_P2K, S::P2K_P3K],
            ScoreCombo::PkPlusPkP2kPlusAll => &[S::PK, S::PK_P2K, S::ALL],
            ScoreCombo::PkPlusPkP3kPlusAll => &[S::PK, S::PK_P3K, S::ALL],
            ScoreCombo::PkPlusPkP2kPlusPkP3k => &[S::PK, S::PK_P2K, S::PK_P3K],
        }
    }

    pub fn name(self) -> String {
        self.terms().iter().map(|t| t.label()).collect::<Vec<_>>().join("+")
    }
}

impl fmt::Display for ScoreCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for ScoreCombo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.trim().to_ascii_lowercase().replace(' ', "");
        if wanted == "default" {
            return Ok(ScoreCombo::default());
        }
        ScoreCombo::ALL
            .into_iter()
            .find(|c| c.name() == wanted)
            .ok_or_else(|| {
                let known: Vec<String> = ScoreCombo::ALL.iter().map(|c| c.name()).collect();
                Error::InvalidArgument(format!("unknown combo {s:?}; expected one of {}", known.join(", ")))
            })
    }
}

/// How patches of a multi-scale term are paired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchMode {
    /// Mutual nearest neighbors across the union of all scales in the term.
    #[default]
    Union,
    /// As `Union`, but only pairs of patches with different scales may match.
    CrossOnly,
}

impl FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "union" => Ok(MatchMode::Union),
            "cross_only" | "cross-only" => Ok(MatchMode::CrossOnly),
            other => Err(Error::InvalidArgument(format!("unknown match mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankConfig {
    pub selection: SelectionConfig,
    /// Template for every RANSAC run. `tolerance_px` is replaced per term and
    /// `seed` is the base of the per-pair seed derivation.
    pub ransac: RansacConfig,
    pub patch_px: u32,
    pub k: usize,
    pub combo: ScoreCombo,
    pub match_mode: MatchMode,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            selection: SelectionConfig::default(),
            ransac: RansacConfig::default(),
            patch_px: crate::DEFAULT_PATCH_PX,
            k: DEFAULT_TOP_K,
            combo: ScoreCombo::default(),
            match_mode: MatchMode::default(),
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        self.ransac.validate()?;
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if self.patch_px == 0 {
            return Err(Error::InvalidArgument("patch_px must be > 0".into()));
        }
        Ok(())
    }

    /// Inlier tolerance for a term: 1.5 times the coarsest patch edge involved.
    pub fn tolerance_for(&self, term: ScaleSet) -> f64 {
        TOLERANCE_PATCH_FACTOR * (self.patch_px * term.max_scale()) as f64
    }
}

/// Re-ranking score of one reference image.
///
/// `s11`, `s12` and `s23` hold the first, second and third term of the
/// configured combination (zero when the combination has fewer terms).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScoredCandidate {
    pub reference_id: String,
    pub s11: u32,
    pub s12: u32,
    pub s23: u32,
    pub total: u32,
    /// 0-based rank from global retrieval.
    pub global_rank: usize,
}

impl ScoredCandidate {
    fn from_terms(reference_id: &str, scores: &[u32], global_rank: usize) -> Self {
        let at = |i: usize| scores.get(i).copied().unwrap_or(0);
        ScoredCandidate {
            reference_id: reference_id.to_string(),
            s11: at(0),
            s12: at(1),
            s23: at(2),
            total: scores.iter().sum(),
            global_rank,
        }
    }
}

/// Stable 64-bit seed for one RANSAC run, independent of scheduling.
///
/// FNV-1a over the base seed, both ids and the term bits, followed by a
/// splitmix64 finalizer.
pub fn ransac_seed_for(base_seed: u64, query_id: &str, reference_id: &str, scale_combo: u8) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    feed(&base_seed.to_le_bytes());
    feed(&(query_id.len() as u64).to_le_bytes());
    feed(query_id.as_bytes());
    feed(&(reference_id.len() as u64).to_le_bytes());
    feed(reference_id.as_bytes());
    feed(&[scale_combo]);
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Key patches of one image, computed once and reused across pairs.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub id: String,
    pub geometry: (usize, usize, usize),
    pub key_patches: KeyPatches,
}

impl PreparedImage {
    pub fn new(rec: &ImageRecord, cfg: &RerankConfig) -> Result<Self> {
        let features = build_multiscale(rec)?;
        Ok(PreparedImage {
            id: rec.id.clone(),
            geometry: rec.geometry(),
            key_patches: select_key_patches(&features, &cfg.selection, cfg.patch_px)?,
        })
    }

    /// Key patches of every scale in `term`, ascending scale then selection order.
    pub fn term_patches(&self, term: ScaleSet) -> Vec<&KeyPatch> {
        term.scales()
            .flat_map(|s| self.key_patches.scale(s).patches.iter())
            .collect()
    }
}

/// Matches and RANSAC verdicts of one term of a scored pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TermOutcome {
    pub term: ScaleSet,
    pub pairs: Vec<MatchPair>,
    pub inliers: Vec<bool>,
    pub score: u32,
}

pub fn score_term(
    q: &PreparedImage,
    r: &PreparedImage,
    term: ScaleSet,
    cfg: &RerankConfig,
) -> Result<TermOutcome> {
    let qp = q.term_patches(term);
    let rp = r.term_patches(term);
    let pq = PackedDescriptors::from_patches(qp.iter().copied());
    let pr = PackedDescriptors::from_patches(rp.iter().copied());
    let cross_only = cfg.match_mode == MatchMode::CrossOnly && term.scales().count() > 1;
    let index_pairs = mutual_nn_indices(&pq, &pr, |i, j| !cross_only || qp[i].scale != rp[j].scale);
    let pairs: Vec<MatchPair> = index_pairs
        .into_iter()
        .map(|(i, j)| MatchPair {
            q_index: i,
            r_index: j,
            q_center: qp[i].center,
            r_center: rp[j].center,
        })
        .collect();
    let ransac = RansacConfig {
        tolerance_px: cfg.tolerance_for(term),
        seed: ransac_seed_for(cfg.ransac.seed, &q.id, &r.id, term.bits()),
        ..cfg.ransac
    };
    let result = ransac_inliers(&pairs, &ransac)?;
    Ok(TermOutcome {
        term,
        pairs,
        inliers: result.inliers,
        score: result.inlier_count as u32,
    })
}

/// Scores a prepared pair, returning every term's matches as well.
pub fn score_prepared(
    q: &PreparedImage,
    r: &PreparedImage,
    cfg: &RerankConfig,
    global_rank: usize,
) -> Result<(ScoredCandidate, Vec<TermOutcome>)> {
    if q.geometry != r.geometry {
        return Err(Error::DimensionMismatch(format!(
            "{} has geometry {:?} but {} has {:?}",
            q.id, q.geometry, r.id, r.geometry
        )));
    }
    let outcomes = cfg
        .combo
        .terms()
        .iter()
        .map(|&t| score_term(q, r, t, cfg))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<u32> = outcomes.iter().map(|o| o.score).collect();
    Ok((ScoredCandidate::from_terms(&r.id, &scores, global_rank), outcomes))
}

pub fn score_pair(q: &ImageRecord, r: &ImageRecord, cfg: &RerankConfig) -> Result<ScoredCandidate> {
    cfg.validate()?;
    if q.geometry() != r.geometry() {
        return Err(Error::DimensionMismatch(format!(
            "{} has geometry {:?} but {} has {:?}",
            q.id,
            q.geometry(),
            r.id,
            r.geometry()
        )));
    }
    let pq = PreparedImage::new(q, cfg)?;
    let pr = PreparedImage::new(r, cfg)?;
    Ok(score_prepared(&pq, &pr, cfg, 0)?.0)
}

/// Sorts by total descending; equal totals keep global retrieval order.
pub fn sort_scored(scored: &mut [ScoredCandidate]) {
    scored.sort_by(|a, b| b.total.cmp(&a.total).then(a.global_rank.cmp(&b.global_rank)));
}

/// Scores every candidate of one query and re-ranks them.
pub fn rerank_candidates(
    q: &ImageRecord,
    candidates: &RetrievalResult,
    store: &Store,
    cfg: &RerankConfig,
) -> Result<Vec<ScoredCandidate>> {
    cfg.validate()?;
    let refs = candidates
        .ranked
        .iter()
        .map(|n| store.require(&n.id))
        .collect::<Result<Vec<_>>>()?;
    let pq = PreparedImage::new(q, cfg)?;
    let mut scored = refs
        .par_iter()
        .enumerate()
        .map(|(rank, r)| {
            let pr = PreparedImage::new(r, cfg)?;
            Ok(score_prepared(&pq, &pr, cfg, rank)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    sort_scored(&mut scored);
    Ok(scored)
}

/// Correspondences of one term, without rendering.
#[derive(Debug, Clone, Serialize)]
pub struct CorrespondenceExport {
    pub query_id: String,
    pub reference_id: String,
    pub combo: String,
    pub pairs: Vec<ExportedPair>,
    pub score: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExportedPair {
    pub q_center: [f64; 2],
    pub r_center: [f64; 2],
    pub inlier: bool,
}

impl CorrespondenceExport {
    pub fn new(query_id: &str, reference_id: &str, outcome: &TermOutcome) -> Self {
        CorrespondenceExport {
            query_id: query_id.to_string(),
            reference_id: reference_id.to_string(),
            combo: outcome.term.label(),
            pairs: outcome
                .pairs
                .iter()
                .zip(&outcome.inliers)
                .map(|(p, &inlier)| ExportedPair {
                    q_center: [p.q_center.x, p.q_center.y],
                    r_center: [p.r_center.x, p.r_center.y],
                    inlier,
                })
                .collect(),
            score: outcome.score,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("export serializes")
    }
}

/// Re-ranked candidates for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRanking {
    pub query_id: String,
    pub ranked: Vec<ScoredCandidate>,
}

/// Output of the two-stage pipeline over every query of a manifest.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub global: Vec<RetrievalResult>,
    pub reranked: Vec<QueryRanking>,
    pub exports: Vec<CorrespondenceExport>,
}

/// Global descriptors of all references and the retrieval index over them.
pub fn index_references(store: &Store, manifest: &Manifest, weights: &ProjectionWeights) -> Result<RetrievalIndex> {
    let ids: Vec<&str> = manifest.ids(Split::Reference).collect();
    let refs = ids
        .par_iter()
        .map(|id| Ok((id.to_string(), global_descriptor(&store.require(id)?.tokens, weights)?)))
        .collect::<Result<Vec<_>>>()?;
    RetrievalIndex::build(refs)
}

/// Top-k global retrieval for every query in the manifest, in manifest order.
pub fn retrieve_queries(
    store: &Store,
    manifest: &Manifest,
    weights: &ProjectionWeights,
    k: usize,
) -> Result<Vec<RetrievalResult>> {
    let index = index_references(store, manifest, weights)?;
    let queries: Vec<&str> = manifest.ids(Split::Query).collect();
    queries
        .par_iter()
        .map(|id| {
            let g = global_descriptor(&store.require(id)?.tokens, weights)?;
            index.retrieve_topk(id, &g, k)
        })
        .collect()
}

/// Re-ranks precomputed global results. Key patches of each image are
/// computed once. When `export` is set, every term's correspondences are kept.
pub fn rerank_all(
    store: &Store,
    global: &[RetrievalResult],
    cfg: &RerankConfig,
    export: bool,
) -> Result<(Vec<QueryRanking>, Vec<CorrespondenceExport>)> {
    cfg.validate()?;
    let mut needed: Vec<&str> = global
        .iter()
        .flat_map(|g| std::iter::once(g.query_id.as_str()).chain(g.ranked.iter().map(|n| n.id.as_str())))
        .collect();
    needed.sort_unstable();
    needed.dedup();
    let prepared: HashMap<&str, PreparedImage> = needed
        .par_iter()
        .map(|&id| Ok((id, PreparedImage::new(store.require(id)?, cfg)?)))
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = global
        .iter()
        .enumerate()
        .flat_map(|(qi, g)| (0..g.ranked.len()).map(move |rank| (qi, rank)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(qi, rank)| {
            let g = &global[qi];
            let q = &prepared[g.query_id.as_str()];
            let r = &prepared[g.ranked[rank].id.as_str()];
            let (scored, outcomes) = score_prepared(q, r, cfg, rank)?;
            let exports = if export {
                outcomes
                    .iter()
                    .map(|o| CorrespondenceExport::new(&q.id, &r.id, o))
                    .collect()
            } else {
                Vec::new()
            };
            Ok((qi, scored, exports))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rankings: Vec<QueryRanking> = global
        .iter()
        .map(|g| QueryRanking {
            query_id: g.query_id.clone(),
            ranked: Vec::with_capacity(g.ranked.len()),
        })
        .collect();
    let mut exports = Vec::new();
    for (qi, scored, ex) in results {
        rankings[qi].ranked.push(scored);
        exports.extend(ex);
    }
    for r in &mut rankings {
        sort_scored(&mut r.ranked);
    }
    Ok((rankings, exports))
}

/// Global retrieval followed by re-ranking of the top `cfg.k` candidates.
pub fn run_pipeline(
    store: &Store,
    manifest: &Manifest,
    weights: &ProjectionWeights,
    cfg: &RerankConfig,
    export: bool,
) -> Result<PipelineOutput> {
    manifest.check_against(store)?;
    let global = retrieve_queries(store, manifest, weights, cfg.k)?;
    let (reranked, exports) = rerank_all(store, &global, cfg, export)?;
    Ok(PipelineOutput {
        global,
        reranked,
        exports,
    })
}

/// Runs `f` on a dedicated pool of `threads` workers (0 = rayon default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}
