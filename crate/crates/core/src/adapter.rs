//! Adapter checkpoints as typed values: LoRA factor pairs, (IA)³ scaling
//! vectors and prefix-token matrices, grouped into [`AdapterSet`]s keyed by
//! module path.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{self, DType, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdapterError {
    #[error("unsupported adapter kind {0:?} (expected lora, ia3 or prefix)")]
    UnknownKind(String),
    #[error("module {module}: {reason}")]
    InvalidLayer { module: String, reason: String },
    #[error("module {module} is a {found} layer in a {expected} adapter set")]
    LayerKindMismatch { module: String, expected: AdapterKind, found: AdapterKind },
    #[error("adapter set has no modules")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Lora,
    Ia3,
    Prefix,
}

impl AdapterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::Ia3 => "ia3",
            AdapterKind::Prefix => "prefix",
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterKind {
    type Err = AdapterError;

    // Bottleneck ("adapter"/"houlsby") layers are rejected: no merge rule is
    // defined for them.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lora" => Ok(AdapterKind::Lora),
            "ia3" | "(ia)3" | "ia³" => Ok(AdapterKind::Ia3),
            "prefix" | "prefix_tuning" | "prefix-tuning" => Ok(AdapterKind::Prefix),
            _ => Err(AdapterError::UnknownKind(s.to_string())),
        }
    }
}

/// Low-rank update `scale · B·A` with `B: d×r`, `A: r×k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub b: Tensor,
    pub a: Tensor,
    pub scale: f64,
}

impl LoraLayer {
    pub fn new(b: Tensor, a: Tensor) -> Result<Self, String> {
        Self::with_scale(b, a, 1.0)
    }

    pub fn with_scale(b: Tensor, a: Tensor, scale: f64) -> Result<Self, String> {
        let (_, rb) = b.dims2().map_err(|e| format!("B: {e}"))?;
        let (ra, _) = a.dims2().map_err(|e| format!("A: {e}"))?;
        if rb != ra {
            return Err(format!("B has {rb} columns but A has {ra} rows"));
        }
        if !scale.is_finite() {
            return Err(format!("scale {scale} is not finite"));
        }
        Ok(Self { b, a, scale })
    }

    pub fn rank(&self) -> usize {
        self.b.shape()[1]
    }

    /// `(d, k)` of the wrapped weight.
    pub fn dims(&self) -> (usize, usize) {
        (self.b.shape()[0], self.a.shape()[1])
    }

    /// Whether `r > min(d, k)`; legal, but the factorization is then not low-rank.
    pub fn exceeds_dims(&self) -> bool {
        let (d, k) = self.dims();
        self.rank() > d.min(k)
    }
}

/// `scale · (B · A)`, the dense `d × k` weight update.
pub fn compose_delta(layer: &LoraLayer) -> Tensor {
    let prod = tensor::matmul(&layer.b, &layer.a).expect("LoraLayer factors are conformable");
    if layer.scale == 1.0 {
        prod
    } else {
        tensor::scale(&prod, layer.scale)
    }
}

/// Per-column scaling vector `v ∈ ℝᵏ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ia3Layer {
    pub v: Tensor,
}

impl Ia3Layer {
    pub fn new(v: Tensor) -> Result<Self, String> {
        if v.shape().len() != 1 {
            return Err(format!("(IA)3 vector must be 1-d, got shape {:?}", v.shape()));
        }
        Ok(Self { v })
    }
}

/// `m` prefix tokens of width `d`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixLayer {
    pub p: Tensor,
}

impl PrefixLayer {
    pub fn new(p: Tensor) -> Result<Self, String> {
        p.dims2().map_err(|e| format!("P: {e}"))?;
        Ok(Self { p })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterLayer {
    Lora(LoraLayer),
    Ia3(Ia3Layer),
    Prefix(PrefixLayer),
}

impl AdapterLayer {
    pub fn kind(&self) -> AdapterKind {
        match self {
            AdapterLayer::Lora(_) => AdapterKind::Lora,
            AdapterLayer::Ia3(_) => AdapterKind::Ia3,
            AdapterLayer::Prefix(_) => AdapterKind::Prefix,
        }
    }

    /// Tensors in storage order, tagged with their role name.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            AdapterLayer::Lora(l) => vec![("B", &l.b), ("A", &l.a)],
            AdapterLayer::Ia3(l) => vec![("v", &l.v)],
            AdapterLayer::Prefix(l) => vec![("P", &l.p)],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn dtype(&self) -> DType {
        self.tensors().iter().map(|(_, t)| t.dtype()).max().unwrap_or(DType::F64)
    }

    pub fn to_dtype(&self, dtype: DType) -> AdapterLayer {
        match self {
            AdapterLayer::Lora(l) => {
                AdapterLayer::Lora(LoraLayer { b: l.b.to_dtype(dtype), a: l.a.to_dtype(dtype), scale: l.scale })
            }
            AdapterLayer::Ia3(l) => AdapterLayer::Ia3(Ia3Layer { v: l.v.to_dtype(dtype) }),
            AdapterLayer::Prefix(l) => AdapterLayer::Prefix(PrefixLayer { p: l.p.to_dtype(dtype) }),
        }
    }

    /// Bitwise equality of every tensor plus the LoRA scale.
    pub fn bitwise_eq(&self, other: &AdapterLayer) -> bool {
        match (self, other) {
            (AdapterLayer::Lora(x), AdapterLayer::Lora(y)) => {
                x.scale.to_bits() == y.scale.to_bits() && x.b.bitwise_eq(&y.b) && x.a.bitwise_eq(&y.a)
            }
            (AdapterLayer::Ia3(x), AdapterLayer::Ia3(y)) => x.v.bitwise_eq(&y.v),
            (AdapterLayer::Prefix(x), AdapterLayer::Prefix(y)) => x.p.bitwise_eq(&y.p),
            _ => false,
        }
    }

    /// Human-readable shape summary, e.g. `B 16x4, A 4x16 (r=4)`.
    pub fn shape_summary(&self) -> String {
        let dims = |t: &Tensor| t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        match self {
            AdapterLayer::Lora(l) => format!("B {}, A {} (r={})", dims(&l.b), dims(&l.a), l.rank()),
            AdapterLayer::Ia3(l) => format!("v {}", dims(&l.v)),
            AdapterLayer::Prefix(l) => format!("P {}", dims(&l.p)),
        }
    }
}

/// Language/task labels and provenance attached to an adapter set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub language: String,
    pub task: String,
    pub base_model: String,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl AdapterMeta {
    pub fn new(language: impl Into<String>, task: impl Into<String>) -> Self {
        Self { language: language.into(), task: task.into(), ..Default::default() }
    }
}

/// A full adapter checkpoint: one layer per module path, all of one kind.
///
/// Layers live in a `BTreeMap`, so iteration is always in module-path order
/// regardless of how the set was assembled.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    kind: AdapterKind,
    layers: BTreeMap<String, AdapterLayer>,
    pub meta: AdapterMeta,
}

impl AdapterSet {
    pub fn new(kind: AdapterKind, meta: AdapterMeta) -> Self {
        Self { kind, layers: BTreeMap::new(), meta }
    }

    pub fn from_layers(
        kind: AdapterKind,
        meta: AdapterMeta,
        layers: impl IntoIterator<Item = (String, AdapterLayer)>,
    ) -> Result<Self, AdapterError> {
        let mut set = Self::new(kind, meta);
        for (path, layer) in layers {
            set.insert(path, layer)?;
        }
        Ok(set)
    }

    /// Adds or replaces a module. Rejects layers of another kind.
    pub fn insert(&mut self, path: impl Into<String>, layer: AdapterLayer) -> Result<(), AdapterError> {
        let module = path.into();
        if layer.kind() != self.kind {
            return Err(AdapterError::LayerKindMismatch { module, expected: self.kind, found: layer.kind() });
        }
        if let AdapterLayer::Lora(l) = &layer {
            if l.exceeds_dims() {
                let (d, k) = l.dims();
                log::warn!("module {module}: LoRA rank {} exceeds min(d, k) = {}", l.rank(), d.min(k));
            }
        }
        self.layers.insert(module, layer);
        Ok(())
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn layers(&self) -> &BTreeMap<String, AdapterLayer> {
        &self.layers
    }

    pub fn get(&self, path: &str) -> Option<&AdapterLayer> {
        self.layers.get(path)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.values().map(AdapterLayer::parameter_count).sum()
    }

    /// Widest storage dtype over all tensors.
    pub fn dtype(&self) -> DType {
        self.layers.values().map(AdapterLayer::dtype).max().unwrap_or(DType::F64)
    }

    /// SHA-256 over kind, module paths, shapes, scales and tensor values.
    /// Metadata is excluded, so relabelling a set keeps its fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.kind.as_str().as_bytes());
        for (path, layer) in &self.layers {
            h.update((path.len() as u64).to_le_bytes());
            h.update(path.as_bytes());
            if let AdapterLayer::Lora(l) = layer {
                h.update(l.scale.to_le_bytes());
            }
            for (role, t) in layer.tensors() {
                h.update(role.as_bytes());
                for d in t.shape() {
                    h.update((*d as u64).to_le_bytes());
                }
                for v in t.as_slice() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Same layers and metadata, every layer compared bitwise.
    pub fn bitwise_eq(&self, other: &AdapterSet) -> bool {
        self.meta == other.meta && self.layers_bitwise_eq(other)
    }

    /// Like [`bitwise_eq`](Self::bitwise_eq) but ignores metadata.
    pub fn layers_bitwise_eq(&self, other: &AdapterSet) -> bool {
        self.kind == other.kind
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|((p, x), (q, y))| p == q && x.bitwise_eq(y))
    }
}

/// One reason three adapter sets cannot be merged together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    KindMismatch { set: String, expected: AdapterKind, found: AdapterKind },
    MissingModule { set: String, module: String },
    ExtraModule { set: String, module: String },
    ShapeMismatch { module: String, role: String, shapes: Vec<Vec<usize>> },
    RankMismatch { module: String, ranks: Vec<usize> },
    ScaleMismatch { module: String, scales: Vec<String> },
    EmptySet { set: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::KindMismatch { set, expected, found } => {
                write!(f, "{set} is a {found} adapter, expected {expected}")
            }
            Violation::MissingModule { set, module } => write!(f, "{set} lacks module {module}"),
            Violation::ExtraModule { set, module } => write!(f, "{set} has extra module {module}"),
            Violation::ShapeMismatch { module, role, shapes } => {
                write!(f, "module {module}: {role} shapes differ {shapes:?}")
            }
            Violation::RankMismatch { module, ranks } => write!(f, "module {module}: LoRA ranks differ {ranks:?}"),
            Violation::ScaleMismatch { module, scales } => {
                write!(f, "module {module}: LoRA scales differ [{}]", scales.join(", "))
            }
            Violation::EmptySet { set } => write!(f, "{set} has no modules"),
        }
    }
}

/// Outcome of a full compatibility check; lists every violation found.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CompatibilityReport {
    pub violations: Vec<Violation>,
}

impl CompatibilityReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for CompatibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("compatible");
        }
        let lines: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&lines.join("; "))
    }
}

/// Strict check: same kind, identical module sets, equal shapes/ranks/scales.
pub fn validate_merge_inputs(task_src: &AdapterSet, ref_tgt: &AdapterSet, ref_src: &AdapterSet) -> CompatibilityReport {
    validate_named(&[("task_src", task_src), ("ref_tgt", ref_tgt), ("ref_src", ref_src)], |_| true, true)
}

/// Check used by the merge engine: only modules of `task_src` selected by
/// `selected` must be present (and compatible) in the reference sets.
pub fn validate_for_merge(
    task_src: &AdapterSet,
    ref_tgt: &AdapterSet,
    ref_src: &AdapterSet,
    selected: impl Fn(&str) -> bool,
) -> CompatibilityReport {
    validate_named(&[("task_src", task_src), ("ref_tgt", ref_tgt), ("ref_src", ref_src)], selected, false)
}

/// Compatibility of an arbitrary list of named sets against the first one.
/// Selected modules of the first set must exist in all others; with `strict`
/// the module sets must be identical.
pub fn validate_named(
    sets: &[(&str, &AdapterSet)],
    selected: impl Fn(&str) -> bool,
    strict: bool,
) -> CompatibilityReport {
    let mut violations = Vec::new();
    let Some(&(_, primary)) = sets.first() else {
        return CompatibilityReport { violations };
    };

    for (name, set) in sets {
        if set.is_empty() {
            violations.push(Violation::EmptySet { set: name.to_string() });
        }
    }
    for (name, set) in &sets[1..] {
        if set.kind != primary.kind {
            violations.push(Violation::KindMismatch { set: name.to_string(), expected: primary.kind, found: set.kind });
        }
    }

    for (name, set) in &sets[1..] {
        for module in primary.layers.keys().filter(|m| selected(m)) {
            if !set.layers.contains_key(module) {
                violations.push(Violation::MissingModule { set: name.to_string(), module: module.clone() });
            }
        }
        if strict {
            for module in set.layers.keys() {
                if !primary.layers.contains_key(module) {
                    violations.push(Violation::ExtraModule { set: name.to_string(), module: module.clone() });
                }
            }
        }
    }

    for (module, layer) in primary.layers.iter().filter(|(m, _)| selected(m)) {
        let others: Option<Vec<&AdapterLayer>> = sets[1..].iter().map(|(_, s)| s.layers.get(module)).collect();
        let Some(others) = others else { continue };
        let group: Vec<&AdapterLayer> = std::iter::once(layer).chain(others).collect();
        if group.iter().any(|l| l.kind() != layer.kind()) {
            continue; // covered by the kind violation
        }
        let loras: Vec<&LoraLayer> = group
            .iter()
            .filter_map(|l| match l {
                AdapterLayer::Lora(x) => Some(x),
                _ => None,
            })
            .collect();
        if !loras.is_empty() {
            let ranks: Vec<usize> = loras.iter().map(|l| l.rank()).collect();
            if ranks.iter().any(|&r| r != ranks[0]) {
                violations.push(Violation::RankMismatch { module: module.clone(), ranks });
                continue;
            }
            if loras.iter().any(|l| l.scale != loras[0].scale) {
                violations.push(Violation::ScaleMismatch {
                    module: module.clone(),
                    scales: loras.iter().map(|l| l.scale.to_string()).collect(),
                });
            }
        }
        let per_set: Vec<Vec<(&str, &Tensor)>> = group.iter().map(|l| l.tensors()).collect();
        for (i, (role, _)) in per_set[0].iter().enumerate() {
            let shapes: Vec<Vec<usize>> = per_set.iter().map(|ts| ts[i].1.shape().to_vec()).collect();
            if shapes.iter().any(|s| s != &shapes[0]) {
                violations.push(Violation::ShapeMismatch { module: module.clone(), role: role.to_string(), shapes });
            }
        }
    }

    CompatibilityReport { violations }
}
