//! `vpr` command line interface.
//!
//! Exit codes: 0 on success, 1 on data errors, 2 on usage errors.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::eval::{
    ablation_combos, ablation_tau, bench, evaluate, format_table, synth_dataset, DatasetRef, DistractorMode,
    RankedList, SynthConfig, MANIFEST_FILE, STORE_FILE, WEIGHTS_FILE,
};
use crate::global::{global_descriptor, GlobalDescriptor, ProjectionWeights, RetrievalIndex, GLOBAL_DIM};
use crate::matching::{RansacConfig, DEFAULT_ITERATIONS, MIN_SAMPLE, TOLERANCE_PATCH_FACTOR};
use crate::rerank::{
    index_references, rerank_all, retrieve_queries, with_threads, MatchMode, RerankConfig, ScoreCombo,
    DEFAULT_TOP_K,
};
use crate::selection::{SelectionConfig, DEFAULT_CAPS, DEFAULT_TAU};
use crate::store::{read_manifest, Manifest, Split, Store};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "vpr", version, about = "Two-stage visual place recognition with multi-scale patch re-ranking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset (store, manifest, weights).
    Synth(SynthArgs),
    /// Compute global descriptors of all references into an index file.
    Index(IndexArgs),
    /// Global top-k retrieval for every query.
    Retrieve(RetrieveArgs),
    /// Full pipeline: global retrieval then multi-scale re-ranking.
    Rerank(RerankArgs),
    /// Recall@{1,5,10} of a ranked-list file.
    Eval(EvalArgs),
    /// Matching latency and key patch memory.
    Bench(BenchArgs),
    /// Threshold or score-combination ablation.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    refs: usize,
    #[arg(long, default_value_t = 10)]
    queries: usize,
    /// none | confuse_global
    #[arg(long, default_value = "none")]
    distractors: String,
    #[arg(long, default_value_t = 0.0)]
    noise: f32,
    #[arg(long, default_value_t = crate::DEFAULT_GRID_ROWS)]
    rows: usize,
    #[arg(long, default_value_t = crate::DEFAULT_GRID_COLS)]
    cols: usize,
    #[arg(long, default_value_t = crate::DEFAULT_TOKEN_DIM)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    shift_cells: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Clone)]
struct DataArgs {
    /// Directory holding store.pfs, manifest.tsv and weights.pfw.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl DataArgs {
    fn path(&self, explicit: &Option<PathBuf>, file: &str, flag: &str) -> Result<PathBuf> {
        explicit
            .clone()
            .or_else(|| self.data.as_ref().map(|d| d.join(file)))
            .ok_or_else(|| Error::InvalidArgument(format!("missing --{flag} (or --data DIR)")))
    }

    fn load(&self) -> Result<Loaded> {
        let manifest_path = self.path(&self.manifest, MANIFEST_FILE, "manifest")?;
        let store = Store::open(self.path(&self.store, STORE_FILE, "store")?)?;
        let manifest = read_manifest(&manifest_path)?;
        let weights = ProjectionWeights::read(self.path(&self.weights, WEIGHTS_FILE, "weights")?)?;
        manifest.check_against(&store)?;
        Ok(Loaded {
            store,
            manifest,
            weights,
        })
    }
}

struct Loaded {
    store: Store,
    manifest: Manifest,
    weights: ProjectionWeights,
}

impl Loaded {
    fn dataset(&self) -> DatasetRef<'_> {
        DatasetRef {
            store: &self.store,
            manifest: &self.manifest,
            weights: &self.weights,
        }
    }
}

#[derive(Debug, Args, Clone)]
struct PipelineArgs {
    #[arg(long = "top-k", default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Key patch caps for scales 1, 2, 3.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = DEFAULT_CAPS)]
    caps: Vec<usize>,
    #[arg(long = "patch-px", default_value_t = crate::DEFAULT_PATCH_PX)]
    patch_px: u32,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iterations: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "pk+pk&p2k+p2k&p3k")]
    combo: String,
    /// union | cross_only
    #[arg(long = "match-mode", default_value = "union")]
    match_mode: String,
    /// Worker threads, 0 = one per core. Output does not depend on it.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

impl PipelineArgs {
    fn config(&self) -> Result<RerankConfig> {
        let cfg = RerankConfig {
            selection: SelectionConfig {
                tau: self.tau,
                caps: [self.caps[0], self.caps[1], self.caps[2]],
            },
            ransac: RansacConfig {
                iterations: self.iterations,
                tolerance_px: TOLERANCE_PATCH_FACTOR * self.patch_px as f64,
                seed: self.seed,
                min_matches: MIN_SAMPLE,
            },
            patch_px: self.patch_px,
            k: self.top_k,
            combo: self.combo.parse()?,
            match_mode: self.match_mode.parse::<MatchMode>()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct IndexArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Index file written by `vpr index`; computed on the fly when omitted.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long = "top-k", default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Ranked-list output (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RerankArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Ranked-list output (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Correspondence export, one JSON object per line.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Ranked-list file from `retrieve` or `rerank`.
    #[arg(long)]
    ranked: PathBuf,
    /// Defaults to DIR/manifest.tsv with --data, else ./manifest.tsv.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long = "threshold-m", default_value_t = crate::eval::DEFAULT_THRESHOLD_M)]
    threshold_m: f64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(subcommand)]
    kind: AblateKind,
}

#[derive(Debug, Subcommand)]
enum AblateKind {
    /// Sweep the key patch threshold.
    Tau {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.007,0.008,0.009,0.01,0.011,0.012,0.015,0.02,0.05")]
        taus: Vec<f64>,
        #[arg(long = "threshold-m", default_value_t = crate::eval::DEFAULT_THRESHOLD_M)]
        threshold_m: f64,
    },
    /// Compare score combinations (all by default).
    Combos {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long, value_delimiter = ';')]
        combos: Vec<String>,
        #[arg(long = "threshold-m", default_value_t = crate::eval::DEFAULT_THRESHOLD_M)]
        threshold_m: f64,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
            w.flush().map_err(|e| Error::io(path, e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

const INDEX_MAGIC: &[u8; 4] = b"PFG1";

fn write_index(index: &RetrievalIndex, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(INDEX_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(index.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(GLOBAL_DIM as u32).to_le_bytes());
    for (id, g) in index.entries() {
        buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        for v in g.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_index(path: &Path) -> Result<RetrievalIndex> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Format(format!("{} is not a valid index file", path.display()));
    if bytes.len() < 16 || &bytes[..4] != INDEX_MAGIC {
        return Err(bad());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(4) != 1 || word(12) != GLOBAL_DIM {
        return Err(bad());
    }
    let mut pos = 16;
    let mut refs = Vec::with_capacity(word(8));
    for _ in 0..word(8) {
        let len = u16::from_le_bytes(bytes.get(pos..pos + 2).ok_or_else(bad)?.try_into().unwrap()) as usize;
        pos += 2;
        let id = std::str::from_utf8(bytes.get(pos..pos + len).ok_or_else(bad)?).map_err(|_| bad())?;
        pos += len;
        let raw = bytes.get(pos..pos + 4 * GLOBAL_DIM).ok_or_else(bad)?;
        pos += 4 * GLOBAL_DIM;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        refs.push((id.to_string(), GlobalDescriptor::new(values)?));
    }
    if pos != bytes.len() {
        return Err(bad());
    }
    RetrievalIndex::build(refs)
}

/// Ranked lists back from `query<TAB>rank<TAB>reference<TAB>...` lines.
pub fn parse_ranked(text: &str) -> Result<Vec<RankedList>> {
    let mut lists: Vec<RankedList> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::Format(format!("ranked list line {}: expected at least 3 fields", lineno + 1)));
        }
        let (query, reference) = (fields[0], fields[2]);
        match lists.last_mut() {
            Some(last) if last.query_id == query => last.reference_ids.push(reference.to_string()),
            _ => lists.push(RankedList {
                query_id: query.to_string(),
                reference_ids: vec![reference.to_string()],
            }),
        }
    }
    Ok(lists)
}

fn print_rows(header: &str, rows: &[crate::eval::AblationRow]) {
    for row in rows {
        let mut line: serde_json::Value = serde_json::from_str(&row.report.summary_json()).unwrap();
        line[header] = serde_json::Value::String(row.label.clone());
        println!("{line}");
    }
    let table: Vec<(String, crate::eval::EvalReport)> =
        rows.iter().map(|r| (r.label.clone(), r.report.clone())).collect();
    print!("{}", format_table(header, &table));
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                seed: a.seed,
                n_refs: a.refs,
                n_queries: a.queries,
                distractor_mode: a.distractors.parse::<DistractorMode>()?,
                noise: a.noise,
                rows: a.rows,
                cols: a.cols,
                dim: a.dim,
                shift_cells: a.shift_cells,
                ..SynthConfig::default()
            };
            let data = synth_dataset(&cfg)?;
            let paths = data.write(&a.out)?;
            for p in paths {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Index(a) => {
            let d = a.data.load()?;
            let index = index_references(&d.store, &d.manifest, &d.weights)?;
            write_index(&index, &a.out)
        }
        Command::Retrieve(a) => {
            let d = a.data.load()?;
            let results = with_threads(a.threads, || -> Result<_> {
                match &a.index {
                    None => retrieve_queries(&d.store, &d.manifest, &d.weights, a.top_k),
                    Some(path) => {
                        let index = read_index(path)?;
                        d.manifest
                            .ids(Split::Query)
                            .map(|id| {
                                let g = global_descriptor(&d.store.require(id)?.tokens, &d.weights)?;
                                index.retrieve_topk(id, &g, a.top_k)
                            })
                            .collect()
                    }
                }
            })??;
            let mut text = String::new();
            for r in &results {
                for (rank, n) in r.ranked.iter().enumerate() {
                    text.push_str(&format!("{}\t{}\t{}\t{}\n", r.query_id, rank + 1, n.id, n.distance));
                }
            }
            emit(&a.out, &text)
        }
        Command::Rerank(a) => {
            let d = a.data.load()?;
            let cfg = a.pipeline.config()?;
            let export = a.export.is_some();
            let (rankings, exports) = with_threads(a.pipeline.threads, || -> Result<_> {
                let global = retrieve_queries(&d.store, &d.manifest, &d.weights, cfg.k)?;
                rerank_all(&d.store, &global, &cfg, export)
            })??;
            let mut text = String::new();
            for q in &rankings {
                for (rank, c) in q.ranked.iter().enumerate() {
                    text.push_str(&format!(
                        "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                        q.query_id,
                        rank + 1,
                        c.reference_id,
                        c.s11,
                        c.s12,
                        c.s23,
                        c.total
                    ));
                }
            }
            emit(&a.out, &text)?;
            if let Some(path) = &a.export {
                let mut w = create(path)?;
                for e in &exports {
                    writeln!(w, "{}", e.to_json_line()).map_err(|err| Error::io(path, err))?;
                }
                w.flush().map_err(|err| Error::io(path, err))?;
            }
            Ok(())
        }
        Command::Eval(a) => {
            let manifest_path = a
                .manifest
                .clone()
                .or_else(|| a.data.as_ref().map(|d| d.join(MANIFEST_FILE)))
                .unwrap_or_else(|| PathBuf::from(MANIFEST_FILE));
            let manifest = read_manifest(&manifest_path)?;
            let text = std::fs::read_to_string(&a.ranked).map_err(|e| Error::io(&a.ranked, e))?;
            let report = evaluate(&parse_ranked(&text)?, &manifest, a.threshold_m)?;
            println!("{}", report.summary_json());
            print!("{}", format_table("ranking", &[("ranked".to_string(), report)]));
            Ok(())
        }
        Command::Bench(a) => {
            let d = a.data.load()?;
            let cfg = a.pipeline.config()?;
            let report = with_threads(a.pipeline.threads, || bench(d.dataset(), &cfg))??;
            println!("{}", report.to_json_line());
            println!(
                "queries {}  candidates {}  latency mean {:.4} s  p95 {:.4} s  memory/image {:.3} MB (bound {:.3} MB, {} B/patch)",
                report.queries,
                report.candidates,
                report.latency_mean_s,
                report.latency_p95_s,
                report.memory_mean_mb(),
                report.memory_upper_bound_bytes as f64 / 1e6,
                report.bytes_per_patch
            );
            Ok(())
        }
        Command::Ablate(a) => match a.kind {
            AblateKind::Tau {
                data,
                pipeline,
                taus,
                threshold_m,
            } => {
                let d = data.load()?;
                let cfg = pipeline.config()?;
                let rows = with_threads(pipeline.threads, || ablation_tau(d.dataset(), &taus, &cfg, threshold_m))??;
                print_rows("tau", &rows);
                Ok(())
            }
            AblateKind::Combos {
                data,
                pipeline,
                combos,
                threshold_m,
            } => {
                let d = data.load()?;
                let cfg = pipeline.config()?;
                let combos: Vec<ScoreCombo> = if combos.is_empty() {
                    ScoreCombo::ALL.to_vec()
                } else {
                    combos.iter().map(|c| c.parse()).collect::<Result<_>>()?
                };
                let rows =
                    with_threads(pipeline.threads, || ablation_combos(d.dataset(), &combos, &cfg, threshold_m))??;
                print_rows("combo", &rows);
                Ok(())
            }
        },
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidArgument(_) => 2,
                _ => 1,
            }
        }
    }
}
