//! On-disk descriptor store and ground-truth manifest.
//!
//! Store layout (all little-endian):
//!
//! ```text
//! magic "PFS1" | version u32 = 1 | image_count u32 | rows u32 | cols u32 | dim u32
//! per image: id_len u16 | id (UTF-8) | tokens f32[rows*cols*dim] | attention f32[rows*cols]
//! ```
//!
//! Tokens and attention are row-major. The manifest is a UTF-8 text file
//! with one `id<TAB>x_m<TAB>y_m<TAB>split` record per line.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"PFS1";
pub const STORE_VERSION: u32 = 1;
pub const STORE_HEADER_LEN: usize = 24;

/// Row-major grid of `dim`-dimensional patch descriptors at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    /// Patch edge in multiples of the base patch size (1, 2 or 3).
    pub scale: u32,
    pub data: Vec<f32>,
}

impl PatchTokenGrid {
    pub fn new(rows: usize, cols: usize, dim: usize, scale: u32, data: Vec<f32>) -> Result<Self> {
        let grid = PatchTokenGrid {
            rows,
            cols,
            dim,
            scale,
            data,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.scale) {
            return Err(Error::Validation(format!("token grid scale {} not in 1..=3", self.scale)));
        }
        let expected = self.rows * self.cols * self.dim;
        if self.data.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "token grid {}x{}x{} needs {} values, got {}",
                self.rows,
                self.cols,
                self.dim,
                expected,
                self.data.len()
            )));
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite token value at flat index {pos}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Descriptor of the cell at `(row, col)`.
    pub fn token(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.cols + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Descriptor by row-major cell index.
    pub fn token_at(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }
}

/// Row-major grid of per-patch attention scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrid {
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f32>,
}

impl AttentionGrid {
    pub fn new(rows: usize, cols: usize, scores: Vec<f32>) -> Result<Self> {
        let grid = AttentionGrid { rows, cols, scores };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.rows * self.cols {
            return Err(Error::DimensionMismatch(format!(
                "attention grid {}x{} needs {} values, got {}",
                self.rows,
                self.cols,
                self.rows * self.cols,
                self.scores.len()
            )));
        }
        if let Some(pos) = self.scores.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(format!(
                "attention score at index {pos} is {} (must be finite and >= 0)",
                self.scores[pos]
            )));
        }
        Ok(())
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.scores[row * self.cols + col]
    }
}

/// One image: scale-1 tokens, head-reduced attention and an optional planar position.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub tokens: PatchTokenGrid,
    pub attention: AttentionGrid,
    pub position: Option<(f64, f64)>,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<()> {
        self.tokens.validate()?;
        self.attention.validate()?;
        if self.tokens.rows != self.attention.rows || self.tokens.cols != self.attention.cols {
            return Err(Error::DimensionMismatch(format!(
                "record {}: tokens {}x{} vs attention {}x{}",
                self.id, self.tokens.rows, self.tokens.cols, self.attention.rows, self.attention.cols
            )));
        }
        if self.tokens.scale != 1 {
            return Err(Error::Validation(format!(
                "record {}: stored tokens must be scale 1, got {}",
                self.id, self.tokens.scale
            )));
        }
        if let Some((x, y)) = self.position {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Validation(format!("record {}: non-finite position", self.id)));
            }
        }
        Ok(())
    }

    /// `(rows, cols, dim)` of the scale-1 grid.
    pub fn geometry(&self) -> (usize, usize, usize) {
        (self.tokens.rows, self.tokens.cols, self.tokens.dim)
    }
}

/// Loaded records with an id lookup. Immutable after construction.
#[derive(Debug, Clone, Default)]
pub struct Store {
    records: Vec<ImageRecord>,
    by_id: HashMap<String, usize>,
}

impl Store {
    pub fn new(records: Vec<ImageRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            if by_id.insert(rec.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate record id {:?}", rec.id)));
            }
        }
        Ok(Store { records, by_id })
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Store::new(read_store(path)?)
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn require(&self, id: &str) -> Result<&ImageRecord> {
        self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn into_records(self) -> Vec<ImageRecord> {
        self.records
    }
}

/// Serializes `records` to the store byte layout.
pub fn encode_store(records: &[ImageRecord]) -> Result<Vec<u8>> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot write an empty store".into()))?;
    let (rows, cols, dim) = first.geometry();
    let mut seen = std::collections::HashSet::new();
    for rec in records {
        rec.validate()?;
        if rec.geometry() != (rows, cols, dim) {
            return Err(Error::DimensionMismatch(format!(
                "record {} has geometry {:?}, store uses {:?}",
                rec.id,
                rec.geometry(),
                (rows, cols, dim)
            )));
        }
        if rec.id.len() > u16::MAX as usize {
            return Err(Error::Validation(format!("record id longer than {} bytes", u16::MAX)));
        }
        if !seen.insert(rec.id.as_str()) {
            return Err(Error::Validation(format!("duplicate record id {:?}", rec.id)));
        }
    }
    let count = u32::try_from(records.len())
        .map_err(|_| Error::InvalidArgument("too many records".into()))?;
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} exceeds u32")))
    };

    let per_record = (rows * cols * dim + rows * cols) * 4;
    let mut buf = Vec::with_capacity(STORE_HEADER_LEN + records.len() * (per_record + 32));
    buf.extend_from_slice(STORE_MAGIC);
    buf.extend_from_slice(&STORE_VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&to_u32(rows, "rows")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(cols, "cols")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(dim, "dim")?.to_le_bytes());
    for rec in records {
        buf.extend_from_slice(&(rec.id.len() as u16).to_le_bytes());
        buf.extend_from_slice(rec.id.as_bytes());
        for v in &rec.tokens.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &rec.attention.scores {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_store(records: &[ImageRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_store(records)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
        let raw = self.take(n.checked_mul(4)?)?;
        Some(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    }
}

/// Parses the store byte layout, validating every record.
pub fn decode_store(bytes: &[u8]) -> Result<Vec<ImageRecord>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur
        .take(4)
        .ok_or_else(|| Error::Format("file shorter than the store magic".into()))?;
    if magic != STORE_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"PFS1\"")));
    }
    let header_err = || Error::Format("truncated store header".into());
    let version = cur.u32().ok_or_else(header_err)?;
    if version != STORE_VERSION {
        return Err(Error::Format(format!("unsupported store version {version}")));
    }
    let count = cur.u32().ok_or_else(header_err)? as usize;
    let rows = cur.u32().ok_or_else(header_err)? as usize;
    let cols = cur.u32().ok_or_else(header_err)? as usize;
    let dim = cur.u32().ok_or_else(header_err)? as usize;
    let cells = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("grid size overflows".into()))?;
    let n_tokens = cells
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("token payload size overflows".into()))?;

    let mut records = Vec::with_capacity(count.min(1 << 16));
    let mut seen = std::collections::HashSet::new();
    for index in 0..count {
        let corrupt = |reason: &str| Error::Corrupt {
            index,
            reason: reason.to_string(),
        };
        let id_len = cur.u16().ok_or_else(|| corrupt("truncated id length"))? as usize;
        let id_bytes = cur.take(id_len).ok_or_else(|| corrupt("truncated id"))?;
        let id = String::from_utf8(id_bytes.to_vec()).map_err(|_| corrupt("id is not UTF-8"))?;
        let tokens = cur
            .f32s(n_tokens)
            .ok_or_else(|| corrupt("truncated token payload"))?;
        let scores = cur
            .f32s(cells)
            .ok_or_else(|| corrupt("truncated attention payload"))?;
        let rec = ImageRecord {
            id,
            tokens: PatchTokenGrid {
                rows,
                cols,
                dim,
                scale: 1,
                data: tokens,
            },
            attention: AttentionGrid { rows, cols, scores },
            position: None,
        };
        rec.validate().map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("record {index} ({}): {msg}", rec.id)),
            other => other,
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Validation(format!("duplicate record id {:?}", rec.id)));
        }
        records.push(rec);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after {count} records",
            bytes.len() - cur.pos
        )));
    }
    Ok(records)
}

pub fn read_store(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_store(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Query,
    Reference,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Query => "query",
            Split::Reference => "reference",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(Split::Query),
            "reference" => Ok(Split::Reference),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub x_m: f64,
    pub y_m: f64,
    pub split: Split,
}

impl ManifestEntry {
    pub fn position(&self) -> (f64, f64) {
        (self.x_m, self.y_m)
    }
}

/// Geolocated ground truth for every image in a store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !e.x_m.is_finite() || !e.y_m.is_finite() {
                return Err(Error::Validation(format!("non-finite coordinate for {:?}", e.id)));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Validation(format!("duplicate manifest id {:?}", e.id)));
            }
        }
        Ok(Manifest { entries })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", lineno + 1));
            if fields.len() != 4 {
                return Err(bad(&format!("expected 4 tab-separated fields, got {}", fields.len())));
            }
            let x_m: f64 = fields[1].parse().map_err(|_| bad("x_m is not a number"))?;
            let y_m: f64 = fields[2].parse().map_err(|_| bad("y_m is not a number"))?;
            let split = fields[3].parse().map_err(|_| bad("split must be query|reference"))?;
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                x_m,
                y_m,
                split,
            });
        }
        Manifest::new(entries)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", e.id, e.x_m, e.y_m, e.split.as_str()));
        }
        out
    }

    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(move |e| e.split == split)
            .map(|e| e.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn positions(&self) -> HashMap<&str, (f64, f64)> {
        self.entries
            .iter()
            .map(|e| (e.id.as_str(), e.position()))
            .collect()
    }

    /// Checks that every manifest id exists in `store`.
    pub fn check_against(&self, store: &Store) -> Result<()> {
        for e in &self.entries {
            if store.get(&e.id).is_none() {
                return Err(Error::UnknownId(format!(
                    "manifest id {:?} is not in the descriptor store",
                    e.id
                )));
            }
        }
        Ok(())
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::parse(&text)
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, manifest.to_text()).map_err(|e| Error::io(path, e))
}
