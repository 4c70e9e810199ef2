// SPDX-License-Identifier: MIT OR Apache-2.0

//! `VGAT` attention dumps and JSON sample sidecars.
//!
//! Byte layout of a dump (all integers little-endian):
//!
//! ```text
//! magic "VGAT" (4) | version u16 | dtype u8 (0 = f32le) | L u32 | H u32 | N u32
//! | source_kind u8 (0 = question, 1 = reference) | L*H*N*N f32le values
//! ```
//!
//! Values are stored row-major as `[layer, head, patch]`, patch index
//! `i * N + j` for grid row `i`, column `j`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"VGAT";
pub const VERSION: u16 = 1;
pub const DTYPE_F32LE: u8 = 0;
pub const HEADER_LEN: usize = 4 + 2 + 1 + 12 + 1;

const WRITE_CHUNK: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported dump version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated {what}: expected {expected} bytes, got {got}")]
    Truncation {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("i/o error after {written} bytes written: {source}")]
    Write { written: usize, source: io::Error },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("malformed sidecar: {0}")]
    Malformed(String),
    #[error("bbox {bbox:?} is inverted or degenerate")]
    BboxInverted { bbox: [f64; 4] },
    #[error("bbox {bbox:?} exceeds image {width}x{height}")]
    BboxOutOfBounds { bbox: [f64; 4], width: u32, height: u32 },
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("grid mismatch: meta grid_n {meta} vs dump N {dump}")]
    GridMismatch { meta: u32, dump: u32 },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Which prompt produced a dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Question,
    Reference,
}

impl SourceKind {
    fn to_byte(self) -> u8 {
        match self {
            SourceKind::Question => 0,
            SourceKind::Reference => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self, DumpError> {
        match b {
            0 => Ok(SourceKind::Question),
            1 => Ok(SourceKind::Reference),
            other => Err(DumpError::Format(format!("unknown source_kind {other}"))),
        }
    }
}

/// Last-text-token attention to every image patch, for every layer and head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    layers: usize,
    heads: usize,
    grid_n: usize,
    values: Vec<f32>,
    source_kind: SourceKind,
}

impl AttentionStack {
    pub fn new(
        layers: usize,
        heads: usize,
        grid_n: usize,
        values: Vec<f32>,
        source_kind: SourceKind,
    ) -> Result<Self, DumpError> {
        if layers == 0 || heads == 0 || grid_n == 0 {
            return Err(DumpError::Invariant(format!(
                "dimensions must be >= 1, got L={layers} H={heads} N={grid_n}"
            )));
        }
        let expected = element_count(layers, heads, grid_n)
            .ok_or_else(|| DumpError::Invariant("dimension product overflows".into()))?;
        if values.len() != expected {
            return Err(DumpError::Invariant(format!(
                "expected {expected} values for L={layers} H={heads} N={grid_n}, got {}",
                values.len()
            )));
        }
        if let Some((idx, v)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(DumpError::Invariant(format!(
                "value {v} at index {idx} is negative or non-finite"
            )));
        }
        Ok(Self {
            layers,
            heads,
            grid_n,
            values,
            source_kind,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn grid_n(&self) -> usize {
        self.grid_n
    }

    pub fn patches(&self) -> usize {
        self.grid_n * self.grid_n
    }

    pub fn source_kind(&self) -> SourceKind {
        self.source_kind
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// `(L, H, N)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.layers, self.heads, self.grid_n)
    }

    /// The patch row for one `(layer, head)`; panics when out of range.
    pub fn head_row(&self, layer: usize, head: usize) -> &[f32] {
        assert!(layer < self.layers && head < self.heads);
        let p = self.patches();
        let start = (layer * self.heads + head) * p;
        &self.values[start..start + p]
    }

    pub fn with_source_kind(mut self, kind: SourceKind) -> Self {
        self.source_kind = kind;
        self
    }

    /// Multiplies every value by `factor` (> 0).
    pub fn scaled(&self, factor: f32) -> Self {
        assert!(factor > 0.0);
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

fn element_count(layers: usize, heads: usize, grid_n: usize) -> Option<usize> {
    layers.checked_mul(heads)?.checked_mul(grid_n)?.checked_mul(grid_n)
}

/// Encodes a stack as a complete `VGAT` byte buffer.
pub fn encode_dump(stack: &AttentionStack) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + stack.values.len() * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(DTYPE_F32LE);
    for dim in [stack.layers, stack.heads, stack.grid_n] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    buf.push(stack.source_kind.to_byte());
    for v in &stack.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Writes `stack` to `sink` and returns the number of bytes written.
pub fn write_dump<W: Write>(stack: &AttentionStack, mut sink: W) -> Result<usize, DumpError> {
    let buf = encode_dump(stack);
    let mut written = 0;
    for chunk in buf.chunks(WRITE_CHUNK) {
        sink.write_all(chunk)
            .map_err(|source| DumpError::Write { written, source })?;
        written += chunk.len();
    }
    sink.flush().map_err(|source| DumpError::Write { written, source })?;
    Ok(written)
}

/// Reads one dump. Trailing bytes after the payload are rejected.
pub fn read_dump<R: Read>(mut source: R) -> Result<AttentionStack, DumpError> {
    let mut header = Vec::with_capacity(HEADER_LEN);
    (&mut source).take(HEADER_LEN as u64).read_to_end(&mut header)?;
    if header.len() >= 4 && header[..4] != MAGIC {
        return Err(DumpError::Format(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&header[..4])
        )));
    }
    if header.len() < HEADER_LEN {
        return Err(DumpError::Truncation {
            what: "header",
            expected: HEADER_LEN,
            got: header.len(),
        });
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(DumpError::UnsupportedVersion(version));
    }
    if header[6] != DTYPE_F32LE {
        return Err(DumpError::Format(format!("unknown dtype {}", header[6])));
    }
    let dim = |at: usize| u32::from_le_bytes(header[at..at + 4].try_into().unwrap()) as usize;
    let (layers, heads, grid_n) = (dim(7), dim(11), dim(15));
    let source_kind = SourceKind::from_byte(header[19])?;
    if layers == 0 || heads == 0 || grid_n == 0 {
        return Err(DumpError::Invariant(format!(
            "dimensions must be >= 1, got L={layers} H={heads} N={grid_n}"
        )));
    }
    let count = element_count(layers, heads, grid_n)
        .and_then(|c| c.checked_mul(4).map(|b| (c, b)))
        .ok_or_else(|| DumpError::Format("dimension product overflows".into()));
    let (count, byte_len) = count?;

    let mut payload = Vec::new();
    (&mut source).take(byte_len as u64).read_to_end(&mut payload)?;
    if payload.len() < byte_len {
        return Err(DumpError::Truncation {
            what: "payload",
            expected: byte_len,
            got: payload.len(),
        });
    }
    let mut probe = [0u8; 1];
    if source.read(&mut probe)? != 0 {
        return Err(DumpError::Format("trailing bytes after payload".into()));
    }

    let mut values = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    AttentionStack::new(layers, heads, grid_n, values, source_kind)
}

pub fn read_dump_file(path: &Path) -> Result<AttentionStack, DumpError> {
    read_dump(io::BufReader::new(fs::File::open(path)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Localization,
    Attribute,
}

/// Per-sample geometry and question, stored as `<sample_id>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub grid_n: u32,
    /// `(x_min, y_min, x_max, y_max)` in pixels, max bounds exclusive.
    pub bbox: [f64; 4],
    pub question: String,
    pub question_kind: QuestionKind,
    pub modality: String,
}

const META_FIELDS: [&str; 8] = [
    "sample_id",
    "image_width",
    "image_height",
    "grid_n",
    "bbox",
    "question",
    "question_kind",
    "modality",
];

impl SampleMeta {
    pub fn validate(&self) -> Result<(), MetaError> {
        if self.sample_id.is_empty() {
            return Err(MetaError::InvalidField("sample_id is empty".into()));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(MetaError::InvalidField("image dimensions must be >= 1".into()));
        }
        if self.grid_n == 0 {
            return Err(MetaError::InvalidField("grid_n must be >= 1".into()));
        }
        let [x0, y0, x1, y1] = self.bbox;
        if self.bbox.iter().any(|v| !v.is_finite()) || !(x0 < x1 && y0 < y1) {
            return Err(MetaError::BboxInverted { bbox: self.bbox });
        }
        if x0 < 0.0 || y0 < 0.0 || x1 > self.image_width as f64 || y1 > self.image_height as f64 {
            return Err(MetaError::BboxOutOfBounds {
                bbox: self.bbox,
                width: self.image_width,
                height: self.image_height,
            });
        }
        Ok(())
    }

    /// Checks that a dump belongs to this sample's patch grid.
    pub fn check_pairing(&self, stack: &AttentionStack) -> Result<(), MetaError> {
        if self.grid_n as usize != stack.grid_n() {
            return Err(MetaError::GridMismatch {
                meta: self.grid_n,
                dump: stack.grid_n() as u32,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("meta serializes");
        s.push('\n');
        s
    }
}

/// Parses and validates a sidecar.
pub fn read_meta<R: Read>(mut source: R) -> Result<SampleMeta, MetaError> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    parse_meta(&text)
}

pub fn parse_meta(text: &str) -> Result<SampleMeta, MetaError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| MetaError::Malformed(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| MetaError::Malformed("sidecar is not a JSON object".into()))?;
    if let Some(missing) = META_FIELDS.iter().find(|f| !obj.contains_key(**f)) {
        return Err(MetaError::MissingField(missing));
    }
    let meta: SampleMeta = serde_json::from_value(value).map_err(|e| MetaError::Malformed(e.to_string()))?;
    meta.validate()?;
    Ok(meta)
}

pub fn read_meta_file(path: &Path) -> Result<SampleMeta, MetaError> {
    parse_meta(&fs::read_to_string(path)?)
}

/// File names of one sample's triplet inside a data directory.
#[derive(Debug, Clone)]
pub struct SamplePaths {
    pub meta: PathBuf,
    pub question: PathBuf,
    pub reference: PathBuf,
}

impl SamplePaths {
    pub fn new(dir: &Path, sample_id: &str) -> Self {
        Self {
            meta: dir.join(format!("{sample_id}.meta.json")),
            question: dir.join(format!("{sample_id}.q.vgat")),
            reference: dir.join(format!("{sample_id}.ref.vgat")),
        }
    }
}

/// Data split a sample belongs to. Calibration data is only used for head
/// ranking, analysis data only for measurement and knockout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Calibration,
    Analysis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub sample_id: String,
    pub reason: String,
}

/// `manifest.json` of a data directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedSample>,
}

pub const DATASET_MANIFEST: &str = "manifest.json";

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self, MetaError> {
        let text = fs::read_to_string(dir.join(DATASET_MANIFEST))?;
        serde_json::from_str(&text).map_err(|e| MetaError::Malformed(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}
