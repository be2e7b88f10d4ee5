//! Evaluation harness: Recall@K, synthetic datasets, ablations and benchmarks.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::global::{ProjectionWeights, RetrievalResult};
use crate::rerank::{
    rerank_all, retrieve_queries, score_prepared, PreparedImage, QueryRanking, RerankConfig, ScoreCombo,
};
use crate::selection::{key_patch_bytes, SelectionConfig};
use crate::store::{
    write_manifest, write_store, AttentionGrid, ImageRecord, Manifest, ManifestEntry, PatchTokenGrid, Split,
    Store,
};
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD_M: f64 = 25.0;
pub const REPORTED_KS: [usize; 3] = [1, 5, 10];

/// Reference ids ranked for one query, best first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList {
    pub query_id: String,
    pub reference_ids: Vec<String>,
}

impl From<&RetrievalResult> for RankedList {
    fn from(r: &RetrievalResult) -> Self {
        RankedList {
            query_id: r.query_id.clone(),
            reference_ids: r.ranked.iter().map(|n| n.id.clone()).collect(),
        }
    }
}

impl From<&QueryRanking> for RankedList {
    fn from(r: &QueryRanking) -> Self {
        RankedList {
            query_id: r.query_id.clone(),
            reference_ids: r.ranked.iter().map(|c| c.reference_id.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryOutcome {
    pub query_id: String,
    /// 1-based rank of the first reference within the threshold.
    pub first_correct_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub threshold_m: f64,
    pub queries: usize,
    pub outcomes: Vec<QueryOutcome>,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> f64 {
        let hits = self
            .outcomes
            .iter()
            .filter(|o| o.first_correct_rank.is_some_and(|r| r <= k))
            .count();
        percent(hits, self.outcomes.len())
    }

    /// Report without per-query outcomes, as one JSON line.
    pub fn summary_json(&self) -> String {
        serde_json::json!({
            "recall@1": self.recall_at_1,
            "recall@5": self.recall_at_5,
            "recall@10": self.recall_at_10,
            "threshold_m": self.threshold_m,
            "queries": self.queries,
        })
        .to_string()
    }
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 * 100.0 / total as f64
    }
}

fn planar_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Per-query rank of the first reference within `threshold_m`.
pub fn query_outcomes(ranked: &[RankedList], manifest: &Manifest, threshold_m: f64) -> Result<Vec<QueryOutcome>> {
    if !(threshold_m >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be >= 0, got {threshold_m}")));
    }
    let positions = manifest.positions();
    let locate = |id: &str| {
        positions
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownId(format!("{id:?} has no coordinates in the manifest")))
    };
    ranked
        .iter()
        .map(|list| {
            let q = locate(&list.query_id)?;
            let mut first = None;
            for (i, rid) in list.reference_ids.iter().enumerate() {
                let p = locate(rid)?;
                if first.is_none() && planar_distance(q, p) <= threshold_m {
                    first = Some(i + 1);
                }
            }
            Ok(QueryOutcome {
                query_id: list.query_id.clone(),
                first_correct_rank: first,
            })
        })
        .collect()
}

/// Percentage of queries with a reference within `threshold_m` among their top `k`.
pub fn recall_at_k(ranked: &[RankedList], manifest: &Manifest, k: usize, threshold_m: f64) -> Result<f64> {
    let outcomes = query_outcomes(ranked, manifest, threshold_m)?;
    let hits = outcomes
        .iter()
        .filter(|o| o.first_correct_rank.is_some_and(|r| r <= k))
        .count();
    Ok(percent(hits, outcomes.len()))
}

pub fn evaluate(ranked: &[RankedList], manifest: &Manifest, threshold_m: f64) -> Result<EvalReport> {
    let outcomes = query_outcomes(ranked, manifest, threshold_m)?;
    let mut report = EvalReport {
        recall_at_1: 0.0,
        recall_at_5: 0.0,
        recall_at_10: 0.0,
        threshold_m,
        queries: outcomes.len(),
        outcomes,
    };
    report.recall_at_1 = report.recall(1);
    report.recall_at_5 = report.recall(5);
    report.recall_at_10 = report.recall(10);
    Ok(report)
}

/// Plain-text table of labelled reports.
pub fn format_table(header: &str, rows: &[(String, EvalReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).chain([header.len()]).max().unwrap_or(0);
    let mut out = format!("{header:<width$}  {:>6}  {:>6}  {:>6}\n", "R@1", "R@5", "R@10");
    for (label, r) in rows {
        out.push_str(&format!(
            "{label:<width$}  {:>6.1}  {:>6.1}  {:>6.1}\n",
            r.recall_at_1, r.recall_at_5, r.recall_at_10
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistractorMode {
    #[default]
    None,
    /// One extra far-away reference per query whose tokens are a spatial
    /// permutation of the query's true reference: same pooled descriptor,
    /// no consistent geometry.
    ConfuseGlobal,
}

impl std::str::FromStr for DistractorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DistractorMode::None),
            "confuse_global" | "confuse-global" => Ok(DistractorMode::ConfuseGlobal),
            other => Err(Error::InvalidArgument(format!("unknown distractor mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_refs: usize,
    pub n_queries: usize,
    pub distractor_mode: DistractorMode,
    /// Half-width of the uniform noise added to query tokens.
    pub noise: f32,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    /// Query content is shifted right by this many base cells.
    pub shift_cells: usize,
    /// Attention scores are drawn from `[0, attention_max)`.
    pub attention_max: f32,
    pub ref_spacing_m: f64,
    /// Maximum planar offset of a query from its true reference.
    pub query_radius_m: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_refs: 50,
            n_queries: 10,
            distractor_mode: DistractorMode::None,
            noise: 0.0,
            rows: crate::DEFAULT_GRID_ROWS,
            cols: crate::DEFAULT_GRID_COLS,
            dim: crate::DEFAULT_TOKEN_DIM,
            shift_cells: 2,
            attention_max: 0.02,
            ref_spacing_m: 100.0,
            query_radius_m: 20.0,
        }
    }
}

/// A generated dataset with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub store: Store,
    pub manifest: Manifest,
    pub weights: ProjectionWeights,
    /// `(query id, true reference id)`.
    pub truth: Vec<(String, String)>,
    /// `(query id, distractor id)`.
    pub distractors: Vec<(String, String)>,
}

pub const STORE_FILE: &str = "store.pfs";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const WEIGHTS_FILE: &str = "weights.pfw";

impl SynthDataset {
    /// Writes `store.pfs`, `manifest.tsv` and `weights.pfw` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<[PathBuf; 3]> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = [dir.join(STORE_FILE), dir.join(MANIFEST_FILE), dir.join(WEIGHTS_FILE)];
        write_store(self.store.records(), &paths[0])?;
        write_manifest(&self.manifest, &paths[1])?;
        self.weights.write(&paths[2])?;
        Ok(paths)
    }
}

fn record(id: String, rows: usize, cols: usize, dim: usize, tokens: Vec<f32>, scores: Vec<f32>, pos: (f64, f64)) -> ImageRecord {
    ImageRecord {
        id,
        tokens: PatchTokenGrid {
            rows,
            cols,
            dim,
            scale: 1,
            data: tokens,
        },
        attention: AttentionGrid { rows, cols, scores },
        position: Some(pos),
    }
}

/// Generates a seeded desk-scale dataset.
///
/// Reference tokens are multiples of 1/256 in `[-1, 1]`, so every
/// permutation of a grid pools to bit-identical means. Each query is a
/// designated reference shifted right by `shift_cells` columns (vacated
/// cells get fresh tokens and zero attention), plus optional noise, placed
/// within `query_radius_m` of it.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.n_queries == 0 || cfg.n_refs < cfg.n_queries {
        return Err(Error::InvalidArgument(format!(
            "need n_refs >= n_queries >= 1, got {} refs and {} queries",
            cfg.n_refs, cfg.n_queries
        )));
    }
    if cfg.rows < 3 || cfg.cols < 3 || cfg.dim == 0 {
        return Err(Error::InvalidArgument("grid must be at least 3x3 with dim >= 1".into()));
    }
    if cfg.shift_cells >= cfg.cols {
        return Err(Error::InvalidArgument("shift must be smaller than the grid width".into()));
    }
    if !(cfg.noise >= 0.0) || !(cfg.attention_max > 0.0) {
        return Err(Error::InvalidArgument("noise must be >= 0 and attention_max > 0".into()));
    }
    if !(cfg.ref_spacing_m > 2.0 * DEFAULT_THRESHOLD_M) || !(cfg.query_radius_m <= DEFAULT_THRESHOLD_M) {
        return Err(Error::InvalidArgument(
            "reference spacing must exceed 50 m and the query radius must be <= 25 m".into(),
        ));
    }

    let (rows, cols, dim) = (cfg.rows, cfg.cols, cfg.dim);
    let cells = rows * cols;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let token = |rng: &mut ChaCha8Rng| rng.random_range(-256i32..=256) as f32 / 256.0;

    let mut refs = Vec::with_capacity(cfg.n_refs);
    for i in 0..cfg.n_refs {
        let tokens: Vec<f32> = (0..cells * dim).map(|_| token(&mut rng)).collect();
        let scores: Vec<f32> = (0..cells).map(|_| rng.random_range(0.0..cfg.attention_max)).collect();
        let pos = (i as f64 * cfg.ref_spacing_m, 0.0);
        refs.push(record(format!("ref_{i:04}"), rows, cols, dim, tokens, scores, pos));
    }

    let mut chosen: Vec<usize> = (0..cfg.n_refs).collect();
    chosen.shuffle(&mut rng);
    chosen.truncate(cfg.n_queries);

    let mut queries = Vec::with_capacity(cfg.n_queries);
    let mut distractor_records = Vec::new();
    let mut truth = Vec::new();
    let mut distractors = Vec::new();
    for (qi, &ri) in chosen.iter().enumerate() {
        let src = &refs[ri];
        let mut tokens = vec![0f32; cells * dim];
        let mut scores = vec![0f32; cells];
        for r in 0..rows {
            for c in 0..cols {
                let cell = r * cols + c;
                let dst = &mut tokens[cell * dim..(cell + 1) * dim];
                if c >= cfg.shift_cells {
                    dst.copy_from_slice(src.tokens.token(r, c - cfg.shift_cells));
                    scores[cell] = src.attention.get(r, c - cfg.shift_cells);
                } else {
                    dst.iter_mut().for_each(|v| *v = token(&mut rng));
                }
            }
        }
        if cfg.noise > 0.0 {
            for v in &mut tokens {
                *v += rng.random_range(-cfg.noise..=cfg.noise);
            }
        }
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let radius = rng.random_range(0.0..=cfg.query_radius_m);
        let (rx, ry) = src.position.unwrap();
        let qid = format!("query_{qi:04}");
        queries.push(record(
            qid.clone(),
            rows,
            cols,
            dim,
            tokens,
            scores,
            (rx + radius * angle.cos(), ry + radius * angle.sin()),
        ));
        truth.push((qid.clone(), src.id.clone()));

        if cfg.distractor_mode == DistractorMode::ConfuseGlobal {
            let mut perm: Vec<usize> = (0..cells).collect();
            perm.shuffle(&mut rng);
            let mut dt = vec![0f32; cells * dim];
            let mut ds = vec![0f32; cells];
            for (dst, &s) in perm.iter().enumerate() {
                dt[dst * dim..(dst + 1) * dim].copy_from_slice(src.tokens.token_at(s));
                ds[dst] = src.attention.scores[s];
            }
            // ids sort before "ref_", so equal global distances favor the distractor
            let did = format!("dis_{qi:04}");
            let pos = (rx, 20.0 * cfg.ref_spacing_m + qi as f64 * cfg.ref_spacing_m);
            distractor_records.push(record(did.clone(), rows, cols, dim, dt, ds, pos));
            distractors.push((qid, did));
        }
    }

    let all: Vec<ImageRecord> = refs
        .into_iter()
        .chain(distractor_records)
        .chain(queries)
        .collect();
    let entries = all
        .iter()
        .map(|r| {
            let (x_m, y_m) = r.position.unwrap();
            ManifestEntry {
                id: r.id.clone(),
                x_m,
                y_m,
                split: if r.id.starts_with("query_") { Split::Query } else { Split::Reference },
            }
        })
        .collect();
    let manifest = Manifest::new(entries)?;
    let weights = ProjectionWeights::seeded(dim, cfg.seed ^ 0x5eed_0f91_0ba1);
    Ok(SynthDataset {
        store: Store::new(all)?,
        manifest,
        weights,
        truth,
        distractors,
    })
}

/// Store, manifest and projection weights of one evaluation run.
#[derive(Debug, Clone, Copy)]
pub struct DatasetRef<'a> {
    pub store: &'a Store,
    pub manifest: &'a Manifest,
    pub weights: &'a ProjectionWeights,
}

impl<'a> From<&'a SynthDataset> for DatasetRef<'a> {
    fn from(d: &'a SynthDataset) -> Self {
        DatasetRef {
            store: &d.store,
            manifest: &d.manifest,
            weights: &d.weights,
        }
    }
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub report: EvalReport,
    pub rankings: Vec<QueryRanking>,
}

/// Global-only and re-ranked evaluation of one configuration.
pub fn evaluate_pipeline(
    data: DatasetRef<'_>,
    cfg: &RerankConfig,
    threshold_m: f64,
) -> Result<(EvalReport, EvalReport, Vec<QueryRanking>)> {
    data.manifest.check_against(data.store)?;
    let global = retrieve_queries(data.store, data.manifest, data.weights, cfg.k)?;
    let (reranked, _) = rerank_all(data.store, &global, cfg, false)?;
    let g: Vec<RankedList> = global.iter().map(RankedList::from).collect();
    let r: Vec<RankedList> = reranked.iter().map(RankedList::from).collect();
    Ok((
        evaluate(&g, data.manifest, threshold_m)?,
        evaluate(&r, data.manifest, threshold_m)?,
        reranked,
    ))
}

fn ablate(
    data: DatasetRef<'_>,
    base: &RerankConfig,
    threshold_m: f64,
    variants: Vec<(String, RerankConfig)>,
) -> Result<Vec<AblationRow>> {
    data.manifest.check_against(data.store)?;
    let global = retrieve_queries(data.store, data.manifest, data.weights, base.k)?;
    variants
        .into_iter()
        .map(|(label, cfg)| {
            let (rankings, _) = rerank_all(data.store, &global, &cfg, false)?;
            let lists: Vec<RankedList> = rankings.iter().map(RankedList::from).collect();
            Ok(AblationRow {
                label,
                report: evaluate(&lists, data.manifest, threshold_m)?,
                rankings,
            })
        })
        .collect()
}

/// One evaluation row per threshold; global retrieval runs once.
pub fn ablation_tau(
    data: DatasetRef<'_>,
    taus: &[f64],
    base: &RerankConfig,
    threshold_m: f64,
) -> Result<Vec<AblationRow>> {
    let variants = taus
        .iter()
        .map(|&tau| {
            let cfg = RerankConfig {
                selection: SelectionConfig { tau, ..base.selection },
                ..base.clone()
            };
            (format!("{tau}"), cfg)
        })
        .collect();
    ablate(data, base, threshold_m, variants)
}

/// One evaluation row per score combination.
pub fn ablation_combos(
    data: DatasetRef<'_>,
    combos: &[ScoreCombo],
    base: &RerankConfig,
    threshold_m: f64,
) -> Result<Vec<AblationRow>> {
    let variants = combos
        .iter()
        .map(|&combo| (combo.name(), RerankConfig { combo, ..base.clone() }))
        .collect();
    ablate(data, base, threshold_m, variants)
}

/// Per-image key patch memory and per-query matching latency.
///
/// Memory counts, per key patch, `dim` f32 for the descriptor, two f32 for
/// the center and one f32 for the attention score: `dim * 4 + 12` bytes.
/// Latency is the wall-clock time to score one query against its `k`
/// candidates, excluding descriptor extraction and key patch selection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub queries: usize,
    pub candidates: usize,
    pub latency_mean_s: f64,
    pub latency_p95_s: f64,
    pub memory_mean_bytes: f64,
    pub memory_max_bytes: usize,
    pub memory_upper_bound_bytes: usize,
    pub bytes_per_patch: usize,
}

impl BenchReport {
    pub fn memory_mean_mb(&self) -> f64 {
        self.memory_mean_bytes / 1e6
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Largest key patch memory an image can need under `caps`.
pub fn memory_upper_bound(caps: [usize; 3], dim: usize) -> usize {
    caps.iter().sum::<usize>() * key_patch_bytes(dim)
}

pub fn bench(data: DatasetRef<'_>, cfg: &RerankConfig) -> Result<BenchReport> {
    cfg.validate()?;
    data.manifest.check_against(data.store)?;
    let global = retrieve_queries(data.store, data.manifest, data.weights, cfg.k)?;
    let prepared = data
        .store
        .records()
        .iter()
        .map(|r| Ok((r.id.clone(), PreparedImage::new(r, cfg)?)))
        .collect::<Result<std::collections::HashMap<_, _>>>()?;

    let mut latencies = Vec::with_capacity(global.len());
    let mut candidates = 0;
    for g in &global {
        let q = &prepared[&g.query_id];
        let start = Instant::now();
        for (rank, n) in g.ranked.iter().enumerate() {
            std::hint::black_box(score_prepared(q, &prepared[&n.id], cfg, rank)?);
        }
        latencies.push(start.elapsed().as_secs_f64());
        candidates = candidates.max(g.ranked.len());
    }
    latencies.sort_by(f64::total_cmp);
    let mean = if latencies.is_empty() { 0.0 } else { latencies.iter().sum::<f64>() / latencies.len() as f64 };
    let p95 = latencies
        .get(((latencies.len() as f64 * 0.95).ceil() as usize).saturating_sub(1))
        .copied()
        .unwrap_or(0.0);

    let memory: Vec<usize> = prepared.values().map(|p| p.key_patches.memory_bytes()).collect();
    let dim = data.store.records().first().map_or(0, |r| r.tokens.dim);
    Ok(BenchReport {
        queries: global.len(),
        candidates,
        latency_mean_s: mean,
        latency_p95_s: p95,
        memory_mean_bytes: if memory.is_empty() { 0.0 } else { memory.iter().sum::<usize>() as f64 / memory.len() as f64 },
        memory_max_bytes: memory.iter().copied().max().unwrap_or(0),
        memory_upper_bound_bytes: memory_upper_bound(cfg.selection.caps, dim),
        bytes_per_patch: key_patch_bytes(dim),
    })
}
