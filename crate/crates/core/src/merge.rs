//! Structure-adaptive adapter merging.
//!
//! Given a task adapter trained in the source language (`task_src`) and two
//! reference-task adapters trained in the target and source languages
//! (`ref_tgt`, `ref_src`), the target-language task adapter is estimated by
//! applying the language divergence `ref_tgt ∥ ref_src` to `task_src`. The
//! divergence and its inverse follow the way each adapter type combines with
//! the frozen weight:
//!
//! | kind   | divergence          | merged adapter                                   |
//! |--------|---------------------|--------------------------------------------------|
//! | LoRA   | `B_tgt − B_src` etc | `B_task + t·(B_tgt − B_src)`, same for `A`       |
//! | (IA)³  | `v_tgt ⊘ v_src`     | `v_task ⊙ (t·(v_tgt ⊘ v_src − 1) + 1)`           |
//! | prefix | `P_tgt · P_src⁺`    | `t·(P_tgt · P_src⁺) · P_task`                    |
//!
//! Only modules matched by the merge filter receive the divergence; all other
//! modules are copied from `task_src` untouched.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{
    compose_delta, validate_for_merge, validate_named, AdapterKind, AdapterLayer, AdapterMeta, AdapterSet,
    CompatibilityReport, Ia3Layer, LoraLayer, PrefixLayer,
};
use crate::linalg::{pinv_with_rank, truncated_factors};
use crate::tensor::{self, add_scaled, ew_div, ew_mul, ew_sub, matmul, Tensor, TensorError};

/// Default divisor clamp for element-wise division.
pub const DEFAULT_EPS: f64 = 1e-8;

/// Module patterns merged by default for LoRA: the query and value projections.
pub const DEFAULT_LORA_FILTER: &[&str] = &["*W^Q*", "*W^V*", "*q_proj*", "*v_proj*"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MergeError {
    #[error("incompatible inputs: {0}")]
    Incompatible(CompatibilityReport),
    #[error("rule {rule} does not apply to {kind} adapters (use a cross-rule override)")]
    RuleKindMismatch { rule: MergeRule, kind: AdapterKind },
    #[error("invalid merge configuration: {0}")]
    InvalidConfig(String),
    #[error("module {module}: {source}")]
    Numeric { module: String, source: TensorError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    LoraAdditive,
    Ia3Multiplicative,
    PrefixMatmul,
}

impl MergeRule {
    /// The rule matched to an adapter kind.
    pub fn for_kind(kind: AdapterKind) -> Self {
        match kind {
            AdapterKind::Lora => MergeRule::LoraAdditive,
            AdapterKind::Ia3 => MergeRule::Ia3Multiplicative,
            AdapterKind::Prefix => MergeRule::PrefixMatmul,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MergeRule::LoraAdditive => "lora_additive",
            MergeRule::Ia3Multiplicative => "ia3_multiplicative",
            MergeRule::PrefixMatmul => "prefix_matmul",
        }
    }
}

impl fmt::Display for MergeRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeRule {
    type Err = MergeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").to_ascii_lowercase().as_str() {
            "lora_additive" | "additive" | "lora" => Ok(MergeRule::LoraAdditive),
            "ia3_multiplicative" | "multiplicative" | "ia3" => Ok(MergeRule::Ia3Multiplicative),
            "prefix_matmul" | "matmul" | "prefix" => Ok(MergeRule::PrefixMatmul),
            _ => Err(MergeError::InvalidConfig(format!("unknown merge rule {s:?}"))),
        }
    }
}

/// How the (IA)³ update is parenthesized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ia3Interpretation {
    /// `v_task ⊙ (t·(ratio − 1) + 1)`; `t = 0` leaves `v_task` unchanged.
    #[default]
    Affine,
    /// `v_task ⊙ ((t·ratio − 1) + 1)`, which reduces to `v_task ⊙ t·ratio`.
    Literal,
}

impl FromStr for Ia3Interpretation {
    type Err = MergeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "affine" => Ok(Self::Affine),
            "literal" => Ok(Self::Literal),
            _ => Err(MergeError::InvalidConfig(format!("unknown ia3 interpretation {s:?}"))),
        }
    }
}

/// Whether LoRA arithmetic acts on the factors or on the composed update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraMode {
    /// Element-wise arithmetic on `B` and `A` separately.
    #[default]
    Factorwise,
    /// Arithmetic on `B·A`, refactored by truncated SVD.
    Composed,
}

impl FromStr for LoraMode {
    type Err = MergeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "factorwise" => Ok(Self::Factorwise),
            "composed" => Ok(Self::Composed),
            _ => Err(MergeError::InvalidConfig(format!("unknown lora mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    /// Scale applied to the language divergence.
    pub t: f64,
    /// Expected rule; `None` means "the rule matching the adapter kind".
    #[serde(default)]
    pub rule: Option<MergeRule>,
    #[serde(default)]
    pub ia3_interpretation: Ia3Interpretation,
    #[serde(default)]
    pub lora_mode: LoraMode,
    /// Glob patterns over module paths; `None` selects the kind default.
    #[serde(default)]
    pub merge_filter: Option<Vec<String>>,
    /// Force a rule regardless of adapter kind (ablation).
    #[serde(default)]
    pub cross_rule_override: Option<MergeRule>,
    /// Divisor clamp for element-wise division.
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

impl MergeConfig {
    pub fn new(t: f64) -> Self {
        Self {
            t,
            rule: None,
            ia3_interpretation: Ia3Interpretation::default(),
            lora_mode: LoraMode::default(),
            merge_filter: None,
            cross_rule_override: None,
            eps: DEFAULT_EPS,
        }
    }

    pub fn with_filter<S: Into<String>>(mut self, patterns: impl IntoIterator<Item = S>) -> Self {
        self.merge_filter = Some(patterns.into_iter().map(Into::into).collect());
        self
    }

    pub fn with_lora_mode(mut self, mode: LoraMode) -> Self {
        self.lora_mode = mode;
        self
    }

    pub fn with_ia3_interpretation(mut self, interp: Ia3Interpretation) -> Self {
        self.ia3_interpretation = interp;
        self
    }

    pub fn with_cross_rule(mut self, rule: MergeRule) -> Self {
        self.cross_rule_override = Some(rule);
        self
    }

    fn check(&self) -> Result<(), MergeError> {
        if !self.t.is_finite() {
            return Err(MergeError::InvalidConfig(format!("t = {} is not finite", self.t)));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(MergeError::InvalidConfig(format!("eps = {} must be finite and nonnegative", self.eps)));
        }
        Ok(())
    }

    /// Rule that will actually be applied to adapters of `kind`.
    pub fn effective_rule(&self, kind: AdapterKind) -> Result<MergeRule, MergeError> {
        if let Some(rule) = self.cross_rule_override {
            return Ok(rule);
        }
        let matched = MergeRule::for_kind(kind);
        match self.rule {
            Some(rule) if rule != matched => Err(MergeError::RuleKindMismatch { rule, kind }),
            _ => Ok(matched),
        }
    }

    pub fn filter_for(&self, kind: AdapterKind) -> Result<ModuleFilter, MergeError> {
        match &self.merge_filter {
            Some(patterns) => ModuleFilter::new(patterns),
            None => Ok(ModuleFilter::default_for(kind)),
        }
    }
}

/// Compiled set of module-path glob patterns. An empty pattern list (only
/// reachable through [`ModuleFilter::all`]) matches every module.
#[derive(Debug, Clone)]
pub struct ModuleFilter {
    patterns: Vec<glob::Pattern>,
}

impl ModuleFilter {
    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Self, MergeError> {
        if patterns.is_empty() {
            return Err(MergeError::InvalidConfig("merge filter has no patterns".into()));
        }
        let patterns = patterns
            .iter()
            .map(|p| {
                let p = p.as_ref();
                if p.is_empty() {
                    return Err(MergeError::InvalidConfig("empty merge filter pattern".into()));
                }
                glob::Pattern::new(p).map_err(|e| MergeError::InvalidConfig(format!("bad pattern {p:?}: {e}")))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { patterns })
    }

    pub fn all() -> Self {
        Self { patterns: Vec::new() }
    }

    pub fn default_for(kind: AdapterKind) -> Self {
        match kind {
            AdapterKind::Lora => Self::new(DEFAULT_LORA_FILTER).expect("static patterns are valid"),
            AdapterKind::Ia3 | AdapterKind::Prefix => Self::all(),
        }
    }

    pub fn matches(&self, module: &str) -> bool {
        self.patterns.is_empty() || self.patterns.iter().any(|p| p.matches(module))
    }

    pub fn describe(&self) -> String {
        if self.patterns.is_empty() {
            "*".to_string()
        } else {
            self.patterns.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(",")
        }
    }
}

/// Per-merge bookkeeping surfaced to callers.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MergeReport {
    pub merged: Vec<String>,
    pub copied: Vec<String>,
    pub clamped: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub set: AdapterSet,
    pub report: MergeReport,
}

/// Output layer of one module, with stats when it was merged rather than copied.
type ModuleResult = (String, AdapterLayer, Option<ModuleStats>);

#[derive(Default)]
struct ModuleStats {
    clamped: usize,
    warnings: Vec<String>,
}

/// Factor-wise LoRA divergence `(B_tgt − B_src, A_tgt − A_src)` on every module.
pub fn diverge_lora(ref_tgt: &AdapterSet, ref_src: &AdapterSet) -> Result<AdapterSet, MergeError> {
    require_kind(ref_tgt, AdapterKind::Lora)?;
    diverge(ref_tgt, ref_src, &ModuleFilter::all(), DEFAULT_EPS).map(|o| o.set)
}

/// Structure-specific divergence `ref_tgt ∥ ref_src` over the selected modules:
/// factor differences for LoRA, the clamped ratio for (IA)³ and the `m × m`
/// transfer matrix `P_tgt · P_src⁺` for prefixes.
pub fn diverge(
    ref_tgt: &AdapterSet,
    ref_src: &AdapterSet,
    filter: &ModuleFilter,
    eps: f64,
) -> Result<MergeOutcome, MergeError> {
    let report = validate_named(&[("ref_tgt", ref_tgt), ("ref_src", ref_src)], |m| filter.matches(m), false);
    if !report.is_ok() {
        return Err(MergeError::Incompatible(report));
    }
    let selected: Vec<(&String, &AdapterLayer)> = ref_tgt.layers().iter().filter(|(m, _)| filter.matches(m)).collect();
    let results: Vec<Result<(String, AdapterLayer, ModuleStats), MergeError>> = selected
        .par_iter()
        .map(|(module, tgt)| {
            let src = &ref_src.layers()[*module];
            let numeric = |source| MergeError::Numeric { module: module.to_string(), source };
            let mut stats = ModuleStats::default();
            let layer = match (tgt, src) {
                (AdapterLayer::Lora(t), AdapterLayer::Lora(s)) => AdapterLayer::Lora(LoraLayer {
                    b: ew_sub(&t.b, &s.b).map_err(numeric)?,
                    a: ew_sub(&t.a, &s.a).map_err(numeric)?,
                    scale: t.scale,
                }),
                (AdapterLayer::Ia3(t), AdapterLayer::Ia3(s)) => {
                    let (ratio, clamped) = ew_div(&t.v, &s.v, eps).map_err(numeric)?;
                    stats.clamped = clamped;
                    AdapterLayer::Ia3(Ia3Layer { v: ratio })
                }
                (AdapterLayer::Prefix(t), AdapterLayer::Prefix(s)) => {
                    let inv = pinv_with_rank(&s.p, None).map_err(numeric)?;
                    note_rank_deficiency(module, &s.p, inv.rank, &mut stats);
                    AdapterLayer::Prefix(PrefixLayer { p: matmul(&t.p, &inv.pinv).map_err(numeric)? })
                }
                _ => unreachable!("kinds validated"),
            };
            Ok(((*module).clone(), layer, stats))
        })
        .collect();

    let mut out = AdapterSet::new(ref_tgt.kind(), divergence_meta(ref_tgt, ref_src));
    let mut report = MergeReport::default();
    for r in results {
        let (module, layer, stats) = r?;
        absorb(&mut report, stats);
        report.merged.push(module.clone());
        out.insert(module, layer).expect("kind preserved");
    }
    Ok(MergeOutcome { set: out, report })
}

fn divergence_meta(ref_tgt: &AdapterSet, ref_src: &AdapterSet) -> AdapterMeta {
    let mut meta = AdapterMeta {
        language: format!("{}-{}", ref_tgt.meta.language, ref_src.meta.language),
        task: ref_tgt.meta.task.clone(),
        base_model: ref_tgt.meta.base_model.clone(),
        notes: BTreeMap::new(),
    };
    meta.notes.insert("divergence.rule".into(), MergeRule::for_kind(ref_tgt.kind()).to_string());
    meta.notes.insert("divergence.ref_tgt.fingerprint".into(), ref_tgt.fingerprint());
    meta.notes.insert("divergence.ref_src.fingerprint".into(), ref_src.fingerprint());
    meta
}

fn require_kind(set: &AdapterSet, kind: AdapterKind) -> Result<(), MergeError> {
    if set.kind() != kind {
        return Err(MergeError::RuleKindMismatch { rule: MergeRule::for_kind(kind), kind: set.kind() });
    }
    Ok(())
}

/// Additive LoRA merge: factor-wise by default, on composed updates in
/// [`LoraMode::Composed`].
pub fn merge_lora(
    task_src: &AdapterSet,
    ref_tgt: &AdapterSet,
    ref_src: &AdapterSet,
    cfg: &MergeConfig,
) -> Result<MergeOutcome, MergeError> {
    require_kind(task_src, AdapterKind::Lora)?;
    merge_with_rule(task_src, ref_tgt, ref_src, cfg, MergeRule::LoraAdditive)
}

/// Multiplicative (IA)³ merge.
pub fn merge_ia3(
    task_src: &AdapterSet,
    ref_tgt: &AdapterSet,
    ref_src: &AdapterSet,
    cfg: &MergeConfig,
) -> Result<MergeOutcome, MergeError> {
    require_kind(task_src, AdapterKind::Ia3)?;
    merge_with_rule(task_src, ref_tgt, ref_src, cfg, MergeRule::Ia3Multiplicative)
}

/// Prefix merge through the pseudo-inverse of the source reference prefix.
pub fn merge_prefix(
    task_src: &AdapterSet,
    ref_tgt: &AdapterSet,
    ref_src: &AdapterSet,
    cfg: &MergeConfig,
) -> Result<MergeOutcome, MergeError> {
    require_kind(task_src, AdapterKind::Prefix)?;
    merge_with_rule(task_src, ref_tgt, ref_src, cfg, MergeRule::PrefixMatmul)
}

/// Merges three adapters with the rule matching their kind, or with
/// `cfg.cross_rule_override` when set.
pub fn merge(
    task_src: &AdapterSet,
    ref_tgt: &AdapterSet,
    ref_src: &AdapterSet,
    cfg: &MergeConfig,
) -> Result<MergeOutcome, MergeError> {
    let rule = cfg.effective_rule(task_src.kind())?;
    merge_with_rule(task_src, ref_tgt, ref_src, cfg, rule)
}

fn merge_with_rule(
    task_src: &AdapterSet,
    ref_tgt: &AdapterSet,
    ref_src: &AdapterSet,
    cfg: &MergeConfig,
    rule: MergeRule,
) -> Result<MergeOutcome, MergeError> {
    cfg.check()?;
    let kind = task_src.kind();
    if cfg.cross_rule_override.is_none() {
        if let Some(expected) = cfg.rule {
            if expected != rule {
                return Err(MergeError::RuleKindMismatch { rule: expected, kind });
            }
        }
        if rule != MergeRule::for_kind(kind) {
            return Err(MergeError::RuleKindMismatch { rule, kind });
        }
    }
    let filter = cfg.filter_for(kind)?;
    let report = validate_for_merge(task_src, ref_tgt, ref_src, |m| filter.matches(m));
    if !report.is_ok() {
        return Err(MergeError::Incompatible(report));
    }

    let out_dtype = task_src.dtype().widest(ref_tgt.dtype()).widest(ref_src.dtype());
    let modules: Vec<(&String, &AdapterLayer)> = task_src.layers().iter().collect();
    let results: Vec<Result<ModuleResult, MergeError>> = modules
        .par_iter()
        .map(|(module, task)| {
            if !filter.matches(module) {
                return Ok(((*module).clone(), task.to_dtype(out_dtype), None));
            }
            let tgt = &ref_tgt.layers()[*module];
            let src = &ref_src.layers()[*module];
            let (layer, stats) = merge_module(module, rule, task, tgt, src, cfg)
                .map_err(|source| MergeError::Numeric { module: module.to_string(), source })?;
            Ok(((*module).clone(), layer.to_dtype(out_dtype), Some(stats)))
        })
        .collect();

    let cross = rule != MergeRule::for_kind(kind);
    let mut out = AdapterSet::new(kind, merged_meta(task_src, ref_tgt, ref_src, cfg, rule, cross, &filter));
    let mut report = MergeReport::default();
    if cross {
        report.warnings.push(format!("cross-rule merge: {rule} applied to {kind} adapters"));
    }
    for r in results {
        let (module, layer, stats) = r?;
        match stats {
            Some(stats) => {
                absorb(&mut report, stats);
                report.merged.push(module.clone());
            }
            None => report.copied.push(module.clone()),
        }
        out.insert(module, layer).expect("kind preserved");
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(MergeOutcome { set: out, report })
}

fn absorb(report: &mut MergeReport, stats: ModuleStats) {
    report.clamped += stats.clamped;
    report.warnings.extend(stats.warnings);
}

fn merged_meta(
    task_src: &AdapterSet,
    ref_tgt: &AdapterSet,
    ref_src: &AdapterSet,
    cfg: &MergeConfig,
    rule: MergeRule,
    cross: bool,
    filter: &ModuleFilter,
) -> AdapterMeta {
    let mut notes = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        notes.insert(format!("merge.{k}"), v);
    };
    put("rule", rule.to_string());
    put("cross_rule", cross.to_string());
    put("t", format!("{}", cfg.t));
    put("lora_mode", format!("{:?}", cfg.lora_mode).to_ascii_lowercase());
    put("ia3_interpretation", format!("{:?}", cfg.ia3_interpretation).to_ascii_lowercase());
    put("filter", filter.describe());
    put("eps", format!("{}", cfg.eps));
    put("source_language", task_src.meta.language.clone());
    put("reference_task", ref_tgt.meta.task.clone());
    put("task_src.fingerprint", task_src.fingerprint());
    put("ref_tgt.fingerprint", ref_tgt.fingerprint());
    put("ref_src.fingerprint", ref_src.fingerprint());
    AdapterMeta {
        language: ref_tgt.meta.language.clone(),
        task: task_src.meta.task.clone(),
        base_model: task_src.meta.base_model.clone(),
        notes,
    }
}

fn note_rank_deficiency(module: &str, p_src: &Tensor, rank: usize, stats: &mut ModuleStats) {
    let (m, d) = p_src.dims2().unwrap_or((1, 1));
    if rank < m.min(d) {
        stats.warnings.push(format!(
            "module {module}: source reference has numerical rank {rank} < {}; pseudo-inverse acts as a projection",
            m.min(d)
        ));
    }
}

fn merge_module(
    module: &str,
    rule: MergeRule,
    task: &AdapterLayer,
    tgt: &AdapterLayer,
    src: &AdapterLayer,
    cfg: &MergeConfig,
) -> Result<(AdapterLayer, ModuleStats), TensorError> {
    let mut stats = ModuleStats::default();
    if let (
        MergeRule::LoraAdditive,
        LoraMode::Factorwise,
        AdapterLayer::Lora(x),
        AdapterLayer::Lora(y),
        AdapterLayer::Lora(z),
    ) = (rule, cfg.lora_mode, task, tgt, src)
    {
        let b = add_scaled(&x.b, &ew_sub(&y.b, &z.b)?, cfg.t)?;
        let a = add_scaled(&x.a, &ew_sub(&y.a, &z.a)?, cfg.t)?;
        return Ok((AdapterLayer::Lora(LoraLayer { b, a, scale: x.scale }), stats));
    }

    let merged = apply_rule(rule, &dense(task)?, &dense(tgt)?, &dense(src)?, cfg, module, &mut stats)?;
    let layer = match task {
        AdapterLayer::Lora(x) => {
            let (d, k) = x.dims();
            let ranks = [Some(x), lora_of(tgt), lora_of(src)].map(|l| l.map_or(0, LoraLayer::rank));
            let rank = ranks.iter().sum::<usize>().min(d.min(k));
            let (b, a) = truncated_factors(&merged, rank)?;
            AdapterLayer::Lora(LoraLayer { b, a, scale: 1.0 })
        }
        AdapterLayer::Ia3(x) => AdapterLayer::Ia3(Ia3Layer { v: merged.reshape(x.v.shape().to_vec())? }),
        AdapterLayer::Prefix(_) => AdapterLayer::Prefix(PrefixLayer { p: merged }),
    };
    Ok((layer, stats))
}

fn lora_of(layer: &AdapterLayer) -> Option<&LoraLayer> {
    match layer {
        AdapterLayer::Lora(l) => Some(l),
        _ => None,
    }
}

/// Dense 2-d view of a layer: `scale·B·A` for LoRA, `v` as a `1 × k` row for
/// (IA)³, `P` for prefixes.
fn dense(layer: &AdapterLayer) -> Result<Tensor, TensorError> {
    match layer {
        AdapterLayer::Lora(l) => Ok(compose_delta(l)),
        AdapterLayer::Ia3(l) => l.v.reshape(vec![1, l.v.len()]),
        AdapterLayer::Prefix(l) => Ok(l.p.clone()),
    }
}

/// Applies one merge rule to dense matrices of a common shape.
fn apply_rule(
    rule: MergeRule,
    task: &Tensor,
    tgt: &Tensor,
    src: &Tensor,
    cfg: &MergeConfig,
    module: &str,
    stats: &mut ModuleStats,
) -> Result<Tensor, TensorError> {
    let t = cfg.t;
    match rule {
        MergeRule::LoraAdditive => add_scaled(task, &ew_sub(tgt, src)?, t),
        MergeRule::Ia3Multiplicative => {
            let (ratio, clamped) = ew_div(tgt, src, cfg.eps)?;
            if clamped > 0 {
                stats.warnings.push(format!("module {module}: {clamped} near-zero divisors clamped to ±{}", cfg.eps));
            }
            stats.clamped += clamped;
            let factor: Vec<f64> = match cfg.ia3_interpretation {
                Ia3Interpretation::Affine => ratio.as_slice().iter().map(|&r| t * (r - 1.0) + 1.0).collect(),
                Ia3Interpretation::Literal => ratio.as_slice().iter().map(|&r| (t * r - 1.0) + 1.0).collect(),
            };
            ew_mul(task, &Tensor::from_raw(tensor::DType::F64, ratio.shape().to_vec(), factor)?)
        }
        MergeRule::PrefixMatmul => {
            let inv = pinv_with_rank(src, None)?;
            note_rank_deficiency(module, src, inv.rank, stats);
            let transfer = tensor::scale(&matmul(tgt, &inv.pinv)?, t);
            matmul(&transfer, task)
        }
    }
}
