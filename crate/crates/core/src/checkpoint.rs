//! Self-describing binary container for adapter sets.
//!
//! ```text
//! offset  size  contents
//! 0       4     magic "AMGX"
//! 4       4     format version, u32 little-endian
//! 8       8     header length H, u64 little-endian
//! 16      H     UTF-8 JSON manifest
//! 16+H    ...   data section: raw little-endian values, tensors in manifest
//!               order, no padding
//! ```
//!
//! Tensor offsets in the manifest are relative to the start of the data
//! section. Values are stored as `f32` or `f64` per tensor and always read
//! back as `f64`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, Cursor, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterKind, AdapterLayer, AdapterMeta, AdapterSet, Ia3Layer, LoraLayer, PrefixLayer};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"AMGX";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE_LEN: u64 = 16;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"AMGX\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("{what} range [{begin}, {end}) exceeds available {available} bytes")]
    OutOfBounds { what: String, begin: u64, end: u64, available: u64 },
    #[error("tensor ranges overlap: {first} and {second}")]
    Overlap { first: String, second: String },
    #[error("duplicate name {0}")]
    DuplicateName(String),
    #[error("tensor {name}: shape and dtype need {expected} bytes but range holds {actual}")]
    SizeMismatch { name: String, expected: u64, actual: u64 },
    #[error("unsupported adapter kind {0:?}")]
    UnknownKind(String),
    #[error("module {module}: {reason}")]
    KindShape { module: String, reason: String },
    #[error("refusing to store an empty adapter set")]
    EmptySet,
    #[error("tensor {name} holds a non-finite value at index {index}")]
    NonFinite { name: String, index: usize },
}

impl CheckpointError {
    /// Stable machine-readable code, one per error class.
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::Io(_) => "io",
            CheckpointError::BadMagic(_) => "bad_magic",
            CheckpointError::UnsupportedVersion(_) => "unsupported_version",
            CheckpointError::InvalidHeader(_) => "invalid_header",
            CheckpointError::OutOfBounds { .. } => "out_of_bounds",
            CheckpointError::Overlap { .. } => "overlapping_ranges",
            CheckpointError::DuplicateName(_) => "duplicate_name",
            CheckpointError::SizeMismatch { .. } => "size_mismatch",
            CheckpointError::UnknownKind(_) => "unknown_kind",
            CheckpointError::KindShape { .. } => "kind_shape_mismatch",
            CheckpointError::EmptySet => "empty_set",
            CheckpointError::NonFinite { .. } => "non_finite",
        }
    }
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Role of a tensor inside its module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TensorRole {
    B,
    A,
    #[serde(rename = "v")]
    V,
    P,
}

impl TensorRole {
    fn from_name(role: &str) -> TensorRole {
        match role {
            "B" => TensorRole::B,
            "A" => TensorRole::A,
            "v" => TensorRole::V,
            _ => TensorRole::P,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TensorRole::B => "B",
            TensorRole::A => "A",
            TensorRole::V => "v",
            TensorRole::P => "P",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset_begin: u64,
    pub offset_end: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleEntry {
    pub module_path: String,
    /// LoRA composition scale; absent for other kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

/// The JSON header of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub adapter_kind: String,
    pub language: String,
    pub task: String,
    pub base_model: String,
    pub modules: Vec<ModuleEntry>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl CheckpointManifest {
    pub fn tensors(&self) -> impl Iterator<Item = &TensorEntry> {
        self.modules.iter().flat_map(|m| m.tensors.iter())
    }

    /// Total bytes the data section must hold.
    pub fn data_len(&self) -> u64 {
        self.tensors().map(|t| t.offset_end).max().unwrap_or(0)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().map(|t| t.shape.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WriteOptions {
    pub allow_non_finite: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    pub allow_non_finite: bool,
}

/// Builds the manifest (with offsets) for `set`.
pub fn manifest_for(set: &AdapterSet) -> CheckpointManifest {
    let mut offset = 0u64;
    let modules = set
        .layers()
        .iter()
        .map(|(path, layer)| {
            let tensors = layer
                .tensors()
                .into_iter()
                .map(|(role, t)| {
                    let bytes = (t.len() * t.dtype().size_of()) as u64;
                    let entry = TensorEntry {
                        name: format!("{path}.{role}"),
                        role: TensorRole::from_name(role),
                        dtype: t.dtype(),
                        shape: t.shape().to_vec(),
                        offset_begin: offset,
                        offset_end: offset + bytes,
                    };
                    offset += bytes;
                    entry
                })
                .collect();
            let scale = match layer {
                AdapterLayer::Lora(l) => Some(l.scale),
                _ => None,
            };
            ModuleEntry { module_path: path.clone(), scale, tensors }
        })
        .collect();
    CheckpointManifest {
        format_version: FORMAT_VERSION,
        adapter_kind: set.kind().as_str().to_string(),
        language: set.meta.language.clone(),
        task: set.meta.task.clone(),
        base_model: set.meta.base_model.clone(),
        modules,
        extra: set.meta.notes.clone(),
    }
}

/// Serializes `set` into the container layout.
pub fn encode(set: &AdapterSet, opts: WriteOptions) -> Result<Vec<u8>> {
    if set.is_empty() {
        return Err(CheckpointError::EmptySet);
    }
    let manifest = manifest_for(set);
    let header = serde_json::to_vec(&manifest).map_err(|e| CheckpointError::InvalidHeader(e.to_string()))?;
    let mut out = Vec::with_capacity(PREAMBLE_LEN as usize + header.len() + manifest.data_len() as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (path, layer) in set.layers() {
        for (role, t) in layer.tensors() {
            if !opts.allow_non_finite {
                if let Some(index) = t.as_slice().iter().position(|v| !v.is_finite()) {
                    return Err(CheckpointError::NonFinite { name: format!("{path}.{role}"), index });
                }
            }
            match t.dtype() {
                DType::F64 => t.as_slice().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                DType::F32 => t.as_slice().iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            }
        }
    }
    Ok(out)
}

/// Writes `set` to `path`. The file is assembled next to the target and
/// renamed into place, so readers never observe a partial checkpoint.
pub fn write_checkpoint(set: &AdapterSet, path: impl AsRef<Path>, opts: WriteOptions) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(set, opts)?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CheckpointError::Io(e.error))?;
    Ok(())
}

pub fn decode(bytes: &[u8], opts: ReadOptions) -> Result<AdapterSet> {
    read_from(&mut Cursor::new(bytes), bytes.len() as u64, |_| true, opts)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<AdapterSet> {
    read_checkpoint_filtered(path, |_| true, ReadOptions::default())
}

/// Reads only modules accepted by `select`; tensors of other modules are
/// never loaded.
pub fn read_checkpoint_filtered(
    path: impl AsRef<Path>,
    select: impl Fn(&str) -> bool,
    opts: ReadOptions,
) -> Result<AdapterSet> {
    let mut file = File::open(path)?;
    let len = file.metadata()?.len();
    read_from(&mut file, len, select, opts)
}

/// Parses and validates only the header.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let mut file = File::open(path)?;
    let len = file.metadata()?.len();
    read_header(&mut file, len).map(|(m, _)| m)
}

/// Returns the validated manifest and the absolute offset of the data section.
fn read_header<R: Read + Seek>(r: &mut R, len: u64) -> Result<(CheckpointManifest, u64)> {
    if len < 4 {
        return Err(CheckpointError::OutOfBounds { what: "magic".into(), begin: 0, end: 4, available: len });
    }
    let mut pre = [0u8; PREAMBLE_LEN as usize];
    r.seek(SeekFrom::Start(0))?;
    r.read_exact(&mut pre[..4])?;
    let magic: [u8; 4] = pre[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    if len < PREAMBLE_LEN {
        return Err(CheckpointError::OutOfBounds {
            what: "preamble".into(),
            begin: 0,
            end: PREAMBLE_LEN,
            available: len,
        });
    }
    r.read_exact(&mut pre[4..])?;
    let version = u32::from_le_bytes(pre[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(pre[8..16].try_into().expect("8 bytes"));
    let header_end =
        PREAMBLE_LEN.checked_add(header_len).filter(|&e| e <= len).ok_or(CheckpointError::OutOfBounds {
            what: "header".into(),
            begin: PREAMBLE_LEN,
            end: PREAMBLE_LEN.saturating_add(header_len),
            available: len,
        })?;
    let mut header = vec![0u8; header_len as usize];
    r.read_exact(&mut header)?;
    let text = std::str::from_utf8(&header).map_err(|e| CheckpointError::InvalidHeader(format!("not UTF-8: {e}")))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(text).map_err(|e| CheckpointError::InvalidHeader(format!("not a manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(CheckpointError::InvalidHeader(format!(
            "manifest declares version {} but preamble says {version}",
            manifest.format_version
        )));
    }
    validate_manifest(&manifest, len - header_end)?;
    Ok((manifest, header_end))
}

/// Structural checks against a data section of `data_len` bytes.
pub fn validate_manifest(manifest: &CheckpointManifest, data_len: u64) -> Result<()> {
    let kind: AdapterKind =
        manifest.adapter_kind.parse().map_err(|_| CheckpointError::UnknownKind(manifest.adapter_kind.clone()))?;

    let mut names = HashSet::new();
    let mut paths = HashSet::new();
    for module in &manifest.modules {
        if !paths.insert(module.module_path.as_str()) {
            return Err(CheckpointError::DuplicateName(module.module_path.clone()));
        }
        for t in &module.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(CheckpointError::DuplicateName(t.name.clone()));
            }
        }
    }

    for t in manifest.tensors() {
        if t.offset_begin > t.offset_end || t.offset_end > data_len {
            return Err(CheckpointError::OutOfBounds {
                what: format!("tensor {}", t.name),
                begin: t.offset_begin,
                end: t.offset_end,
                available: data_len,
            });
        }
        let count = t.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        let expected = count.and_then(|c| c.checked_mul(t.dtype.size_of() as u64)).unwrap_or(u64::MAX);
        let actual = t.offset_end - t.offset_begin;
        if expected != actual {
            return Err(CheckpointError::SizeMismatch { name: t.name.clone(), expected, actual });
        }
    }

    let mut ranges: Vec<&TensorEntry> = manifest.tensors().collect();
    ranges.sort_by_key(|t| (t.offset_begin, t.offset_end));
    for pair in ranges.windows(2) {
        if pair[1].offset_begin < pair[0].offset_end {
            return Err(CheckpointError::Overlap { first: pair[0].name.clone(), second: pair[1].name.clone() });
        }
    }

    for module in &manifest.modules {
        check_module_shapes(kind, module)?;
    }
    Ok(())
}

fn check_module_shapes(kind: AdapterKind, module: &ModuleEntry) -> Result<()> {
    let bad = |reason: String| CheckpointError::KindShape { module: module.module_path.clone(), reason };
    let roles: Vec<TensorRole> = module.tensors.iter().map(|t| t.role).collect();
    let shape = |i: usize| module.tensors[i].shape.as_slice();
    if module.tensors.iter().any(|t| t.shape.is_empty() || t.shape.contains(&0)) {
        return Err(bad("tensor shapes must be non-empty with positive dimensions".into()));
    }
    match kind {
        AdapterKind::Lora => {
            if roles != [TensorRole::B, TensorRole::A] {
                return Err(bad(format!("lora module needs tensors [B, A], found {roles:?}")));
            }
            let (b, a) = (shape(0), shape(1));
            if b.len() != 2 || a.len() != 2 || b[1] != a[0] {
                return Err(bad(format!("B {b:?} and A {a:?} do not share a rank")));
            }
            if let Some(s) = module.scale {
                if !s.is_finite() {
                    return Err(bad(format!("scale {s} is not finite")));
                }
            }
        }
        AdapterKind::Ia3 => {
            if roles != [TensorRole::V] || shape(0).len() != 1 {
                return Err(bad(format!("ia3 module needs one 1-d tensor v, found {roles:?}")));
            }
        }
        AdapterKind::Prefix => {
            if roles != [TensorRole::P] || shape(0).len() != 2 {
                return Err(bad(format!("prefix module needs one 2-d tensor P, found {roles:?}")));
            }
        }
    }
    Ok(())
}

fn read_from<R: Read + Seek>(
    r: &mut R,
    len: u64,
    select: impl Fn(&str) -> bool,
    opts: ReadOptions,
) -> Result<AdapterSet> {
    let (manifest, data_start) = read_header(r, len)?;
    let kind: AdapterKind = manifest.adapter_kind.parse().expect("validated");
    let meta = AdapterMeta {
        language: manifest.language.clone(),
        task: manifest.task.clone(),
        base_model: manifest.base_model.clone(),
        notes: manifest.extra.clone(),
    };
    let mut set = AdapterSet::new(kind, meta);
    for module in manifest.modules.iter().filter(|m| select(&m.module_path)) {
        let mut tensors = Vec::with_capacity(module.tensors.len());
        for entry in &module.tensors {
            tensors.push(read_tensor(r, data_start, entry, opts)?);
        }
        let bad = |reason: String| CheckpointError::KindShape { module: module.module_path.clone(), reason };
        let layer = match kind {
            AdapterKind::Lora => {
                let a = tensors.pop().expect("validated");
                let b = tensors.pop().expect("validated");
                AdapterLayer::Lora(LoraLayer::with_scale(b, a, module.scale.unwrap_or(1.0)).map_err(bad)?)
            }
            AdapterKind::Ia3 => AdapterLayer::Ia3(Ia3Layer::new(tensors.remove(0)).map_err(bad)?),
            AdapterKind::Prefix => AdapterLayer::Prefix(PrefixLayer::new(tensors.remove(0)).map_err(bad)?),
        };
        set.insert(module.module_path.clone(), layer).map_err(|e| bad(e.to_string()))?;
    }
    Ok(set)
}

fn read_tensor<R: Read + Seek>(r: &mut R, data_start: u64, entry: &TensorEntry, opts: ReadOptions) -> Result<Tensor> {
    let mut raw = vec![0u8; (entry.offset_end - entry.offset_begin) as usize];
    r.seek(SeekFrom::Start(data_start + entry.offset_begin))?;
    r.read_exact(&mut raw)?;
    let values: Vec<f64> = match entry.dtype {
        DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
    };
    if !opts.allow_non_finite {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite { name: entry.name.clone(), index });
        }
    }
    Tensor::from_raw(entry.dtype, entry.shape.clone(), values)
        .map_err(|e| CheckpointError::KindShape { module: entry.name.clone(), reason: e.to_string() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModuleSummary {
    pub module_path: String,
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub dtype: DType,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

/// What `inspect` reports about a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointSummary {
    pub format_version: u32,
    pub kind: String,
    pub language: String,
    pub task: String,
    pub base_model: String,
    pub module_count: usize,
    pub parameter_count: usize,
    pub modules: Vec<ModuleSummary>,
    pub extra: BTreeMap<String, String>,
}

impl From<&CheckpointManifest> for CheckpointSummary {
    fn from(m: &CheckpointManifest) -> Self {
        let modules = m
            .modules
            .iter()
            .map(|module| {
                let shapes = module.tensors.iter().map(|t| (t.role.as_str().to_string(), t.shape.clone())).collect();
                let rank = match m.adapter_kind.as_str() {
                    "lora" => module.tensors.first().and_then(|b| b.shape.get(1).copied()),
                    _ => None,
                };
                let dtype = module.tensors.iter().map(|t| t.dtype).max().unwrap_or(DType::F64);
                ModuleSummary { module_path: module.module_path.clone(), shapes, dtype, rank, scale: module.scale }
            })
            .collect();
        CheckpointSummary {
            format_version: m.format_version,
            kind: m.adapter_kind.clone(),
            language: m.language.clone(),
            task: m.task.clone(),
            base_model: m.base_model.clone(),
            module_count: m.modules.len(),
            parameter_count: m.parameter_count(),
            modules,
            extra: m.extra.clone(),
        }
    }
}

impl fmt::Display for CheckpointSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "kind:        {}", self.kind)?;
        writeln!(f, "language:    {}", self.language)?;
        writeln!(f, "task:        {}", self.task)?;
        if !self.base_model.is_empty() {
            writeln!(f, "base model:  {}", self.base_model)?;
        }
        writeln!(f, "modules:     {}", self.module_count)?;
        writeln!(f, "parameters:  {}", self.parameter_count)?;
        let width = self.modules.iter().map(|m| m.module_path.len()).max().unwrap_or(0);
        for m in &self.modules {
            let shapes: Vec<String> = m
                .shapes
                .iter()
                .rev() // B before A
                .map(|(role, s)| format!("{role} {}", s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")))
                .collect();
            write!(f, "  {:<width$}  {}  {}", m.module_path, m.dtype, shapes.join(", "))?;
            if let Some(r) = m.rank {
                write!(f, "  r={r}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Header-only summary of the checkpoint at `path`.
pub fn inspect(path: impl AsRef<Path>) -> Result<CheckpointSummary> {
    read_manifest(path).map(|m| CheckpointSummary::from(&m))
}
