//! Desk-scale check that language divergences transfer across tasks.
//!
//! A synthetic "world" assigns every (language, task) cell a ground-truth
//! weight built from a shared base plus a task effect and a language effect,
//! either additively (`W₀ + U_t + V_l`, suited to LoRA) or multiplicatively
//! (`W₀ ⊙ (s_t ⊙ s_l)` per column, suited to (IA)³). Adapters are fitted per
//! cell by closed-form least squares on noisy samples, the held-out cell
//! `(l₁, t₁)` is reconstructed by merging the other three, and the result is
//! compared with the direct fit.
//!
//! Cell roles: target `(0, 0)`, task source `(1, 0)`, reference target
//! `(0, 1)`, reference source `(1, 1)`.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{compose_delta, AdapterKind, AdapterLayer, AdapterMeta, AdapterSet, Ia3Layer, LoraLayer};
use crate::linalg::{pinv_with_rank, truncated_factors};
use crate::merge::{merge, Ia3Interpretation, LoraMode, MergeConfig, MergeError, MergeRule};
use crate::tensor::{self, ew_mul, ew_sub, frobenius_norm, matmul, rel_error, Tensor, TensorError};
use crate::tuning::default_t_grid;

/// Module path used for the single synthetic layer.
pub const MODULE: &str = "layers.0.attn.W^Q";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("X·Xᵀ is singular (rank {rank} < k = {k}); use at least n = {k} samples per cell")]
    Singular { rank: usize, k: usize },
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Additive,
    Multiplicative,
}

impl Structure {
    pub fn adapter_kind(self) -> AdapterKind {
        match self {
            Structure::Additive => AdapterKind::Lora,
            Structure::Multiplicative => AdapterKind::Ia3,
        }
    }
}

fn one() -> f64 {
    1.0
}

fn composed() -> LoraMode {
    LoraMode::Composed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub d: usize,
    pub k: usize,
    pub r: usize,
    #[serde(alias = "L")]
    pub languages: usize,
    #[serde(alias = "T")]
    pub tasks: usize,
    pub sigma: f64,
    pub n: usize,
    #[serde(default = "default_t_grid")]
    pub t_grid: Vec<f64>,
    pub seed: u64,
    pub structure: Structure,
    /// LoRA mode of the primary merge; the other mode is always reported too.
    #[serde(default = "composed")]
    pub lora_mode: LoraMode,
    #[serde(default)]
    pub ia3_interpretation: Ia3Interpretation,
    /// Apply a mismatched rule (ablation).
    #[serde(default)]
    pub cross_rule: Option<MergeRule>,
    /// Strength of the language effect; 0 removes it.
    #[serde(default = "one")]
    pub language_scale: f64,
}

impl SyntheticSpec {
    pub fn new(d: usize, k: usize, r: usize, structure: Structure, seed: u64) -> Self {
        Self {
            d,
            k,
            r,
            languages: 2,
            tasks: 2,
            sigma: 0.0,
            n: 4 * k,
            t_grid: default_t_grid(),
            seed,
            structure,
            lora_mode: LoraMode::Composed,
            ia3_interpretation: Ia3Interpretation::Affine,
            cross_rule: None,
            language_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::InvalidSpec(m));
        if self.d == 0 || self.k == 0 || self.r == 0 || self.languages == 0 || self.tasks == 0 || self.n == 0 {
            return bad("d, k, r, languages, tasks and n must be positive".into());
        }
        if self.r > self.d.min(self.k) {
            return bad(format!("r = {} exceeds min(d, k) = {}", self.r, self.d.min(self.k)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma = {} must be finite and nonnegative", self.sigma));
        }
        if self.t_grid.is_empty() || self.t_grid.iter().any(|t| !t.is_finite()) {
            return bad("t_grid must be non-empty and finite".into());
        }
        if !self.language_scale.is_finite() {
            return bad("language_scale must be finite".into());
        }
        Ok(())
    }
}

/// Ground truth for every cell.
#[derive(Debug, Clone)]
pub struct World {
    pub structure: Structure,
    pub base: Tensor,
    /// `U_t` (d×k) or `s_t` (length k), per task.
    pub task_effects: Vec<Tensor>,
    /// `V_l` (d×k) or `s_l` (length k), per language.
    pub language_effects: Vec<Tensor>,
}

impl World {
    /// What an ideal adapter for the cell would hold: the update `U_t + V_l`
    /// or the scaling `s_t ⊙ s_l`.
    pub fn true_adapter(&self, language: usize, task: usize) -> Tensor {
        let (u, v) = (&self.task_effects[task], &self.language_effects[language]);
        match self.structure {
            Structure::Additive => tensor::ew_add(u, v).expect("same shape"),
            Structure::Multiplicative => ew_mul(u, v).expect("same shape"),
        }
    }

    pub fn weight(&self, language: usize, task: usize) -> Tensor {
        let adapter = self.true_adapter(language, task);
        match self.structure {
            Structure::Additive => tensor::ew_add(&self.base, &adapter).expect("same shape"),
            Structure::Multiplicative => scale_columns(&self.base, adapter.as_slice()),
        }
    }
}

fn scale_columns(w: &Tensor, s: &[f64]) -> Tensor {
    let k = s.len();
    let data = w.as_slice().iter().enumerate().map(|(i, &x)| x * s[i % k]).collect();
    Tensor::from_raw(tensor::DType::F64, w.shape().to_vec(), data).expect("same shape")
}

fn normal_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
    let data = (0..m * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_raw(tensor::DType::F64, vec![m, n], data).expect("valid shape")
}

/// Random rank-`q` matrix with unit Frobenius norm.
fn unit_low_rank(rng: &mut ChaCha8Rng, d: usize, k: usize, q: usize) -> Tensor {
    let m = matmul(&normal_matrix(rng, d, q), &normal_matrix(rng, q, k)).expect("conformable");
    tensor::scale(&m, 1.0 / frobenius_norm(&m))
}

/// Log-uniform scaling vector with entries in `[2^(-strength/2), 2^(strength/2)]`.
fn scaling_vector(rng: &mut ChaCha8Rng, k: usize, strength: f64) -> Tensor {
    let half = std::f64::consts::LN_2 / 2.0;
    let data = (0..k).map(|_| (strength * rng.random_range(-half..=half)).exp()).collect();
    Tensor::from_raw(tensor::DType::F64, vec![k], data).expect("valid shape")
}

pub fn generate_world(spec: &SyntheticSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = normal_matrix(&mut rng, spec.d, spec.k);
    let q = spec.r.div_ceil(2);
    let (task_effects, language_effects) = match spec.structure {
        Structure::Additive => {
            let tasks = (0..spec.tasks).map(|_| unit_low_rank(&mut rng, spec.d, spec.k, q)).collect();
            let langs = (0..spec.languages)
                .map(|_| tensor::scale(&unit_low_rank(&mut rng, spec.d, spec.k, q), spec.language_scale))
                .collect();
            (tasks, langs)
        }
        Structure::Multiplicative => {
            let tasks = (0..spec.tasks).map(|_| scaling_vector(&mut rng, spec.k, 1.0)).collect();
            let langs = (0..spec.languages).map(|_| scaling_vector(&mut rng, spec.k, spec.language_scale)).collect();
            (tasks, langs)
        }
    };
    Ok(World { structure: spec.structure, base, task_effects, language_effects })
}

/// Least-squares adapter for one cell, from `n` noisy samples
/// `y = W x + σ·ε` with standard-normal `x` and `ε`.
pub fn fit_adapter(world: &World, language: usize, task: usize, spec: &SyntheticSpec) -> Result<AdapterLayer> {
    let (d, k, n) = (spec.d, spec.k, spec.n);
    if n < k {
        return Err(HarnessError::Singular { rank: n, k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1 + (language * spec.tasks + task) as u64);
    let x = normal_matrix(&mut rng, k, n);
    let mut y = matmul(&world.weight(language, task), &x)?;
    if spec.sigma > 0.0 {
        let noise = tensor::scale(&normal_matrix(&mut rng, d, n), spec.sigma);
        y = tensor::ew_add(&y, &noise)?;
    }
    let xt = x.transpose()?;
    let gram = pinv_with_rank(&matmul(&x, &xt)?, None)?;
    if gram.rank < k {
        return Err(HarnessError::Singular { rank: gram.rank, k });
    }
    let w_hat = matmul(&matmul(&y, &xt)?, &gram.pinv)?;

    Ok(match world.structure {
        Structure::Additive => {
            let delta = ew_sub(&w_hat, &world.base)?;
            let (b, a) = truncated_factors(&delta, spec.r)?;
            AdapterLayer::Lora(LoraLayer::new(b, a).expect("conformable factors"))
        }
        Structure::Multiplicative => {
            let col_norm = |w: &Tensor, j: usize| (0..d).map(|i| w.at(i, j).powi(2)).sum::<f64>().sqrt();
            let v = (0..k).map(|j| col_norm(&w_hat, j) / col_norm(&world.base, j)).collect();
            AdapterLayer::Ia3(Ia3Layer::new(Tensor::vector(v)?).expect("1-d"))
        }
    })
}

/// Dense form of an adapter used for error measurement: `B·A` or `v`.
pub fn adapter_repr(layer: &AdapterLayer) -> Tensor {
    match layer {
        AdapterLayer::Lora(l) => compose_delta(l),
        AdapterLayer::Ia3(l) => l.v.clone(),
        AdapterLayer::Prefix(l) => l.p.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFit {
    pub language: usize,
    pub task: usize,
    /// `rel_error(fit, truth)`.
    pub fit_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub t: f64,
    pub merged_vs_direct: f64,
    pub merged_vs_truth: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub factorwise_vs_direct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub composed_vs_direct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSimilarity {
    /// Number of (language pair, task pair) comparisons.
    pub pairs: usize,
    /// `None` when a divergence is identically zero.
    pub min_cosine: Option<f64>,
    pub mean_cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub structure: Structure,
    pub seed: u64,
    pub rule: MergeRule,
    pub cross_rule: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lora_mode: Option<LoraMode>,
    pub cell_fits: Vec<CellFit>,
    /// Direct-fit error of the held-out target cell.
    pub target_fit_error: f64,
    pub sweep: Vec<SweepPoint>,
    /// Grid point with the smallest merged-vs-direct error (smallest t on ties).
    pub best_t: f64,
    pub best_merged_vs_direct: f64,
    pub best_merged_vs_truth: f64,
    pub divergence_similarity: DivergenceSimilarity,
    pub clamped: usize,
    pub warnings: Vec<String>,
}

impl ExperimentReport {
    /// Aligned-column text table of the sweep plus headline numbers.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3e}"));
        out.push_str(&format!(
            "structure={:?} rule={} cross={} seed={}\n",
            self.structure, self.rule, self.cross_rule, self.seed
        ));
        out.push_str(&format!(
            "{:>6}  {:>16}  {:>16}  {:>16}  {:>16}\n",
            "t", "merged_vs_direct", "merged_vs_truth", "factorwise", "composed"
        ));
        for p in &self.sweep {
            out.push_str(&format!(
                "{:>6.2}  {:>16.3e}  {:>16.3e}  {:>16}  {:>16}\n",
                p.t,
                p.merged_vs_direct,
                p.merged_vs_truth,
                fmt_opt(p.factorwise_vs_direct),
                fmt_opt(p.composed_vs_direct)
            ));
        }
        out.push_str(&format!(
            "best t = {}  merged_vs_direct = {:.3e}  merged_vs_truth = {:.3e}  target_fit_error = {:.3e}\n",
            self.best_t, self.best_merged_vs_direct, self.best_merged_vs_truth, self.target_fit_error
        ));
        out.push_str(&format!(
            "divergence cosine: min = {}  mean = {}  over {} pairs\n",
            fmt_opt(self.divergence_similarity.min_cosine),
            fmt_opt(self.divergence_similarity.mean_cosine),
            self.divergence_similarity.pairs
        ));
        if self.clamped > 0 {
            out.push_str(&format!("clamped divisors: {}\n", self.clamped));
        }
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

impl fmt::Display for ExperimentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

/// A world with every cell fitted, ready for merging.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub spec: SyntheticSpec,
    pub world: World,
    /// `fits[language][task]`.
    pub fits: Vec<Vec<AdapterLayer>>,
    pub task_src: AdapterSet,
    pub ref_tgt: AdapterSet,
    pub ref_src: AdapterSet,
}

impl Experiment {
    pub fn prepare(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        if spec.languages < 2 || spec.tasks < 2 {
            return Err(HarnessError::InvalidSpec("an experiment needs at least 2 languages and 2 tasks".into()));
        }
        let world = generate_world(spec)?;
        let cells: Vec<(usize, usize)> =
            (0..spec.languages).flat_map(|l| (0..spec.tasks).map(move |t| (l, t))).collect();
        let fitted: Vec<AdapterLayer> =
            cells.par_iter().map(|&(l, t)| fit_adapter(&world, l, t, spec)).collect::<Result<_>>()?;
        let fits: Vec<Vec<AdapterLayer>> = fitted.chunks(spec.tasks).map(|c| c.to_vec()).collect();

        let kind = spec.structure.adapter_kind();
        let wrap = |l: usize, t: usize| {
            let mut set = AdapterSet::new(kind, AdapterMeta::new(format!("lang{l}"), format!("task{t}")));
            set.insert(MODULE, fits[l][t].clone()).expect("kind matches structure");
            set
        };
        let (task_src, ref_tgt, ref_src) = (wrap(1, 0), wrap(0, 1), wrap(1, 1));
        Ok(Self { spec: spec.clone(), world, fits, task_src, ref_tgt, ref_src })
    }

    pub fn direct_target(&self) -> &AdapterLayer {
        &self.fits[0][0]
    }

    pub fn merge_config(&self, t: f64) -> MergeConfig {
        let mut cfg = MergeConfig::new(t)
            .with_filter(["*"])
            .with_lora_mode(self.spec.lora_mode)
            .with_ia3_interpretation(self.spec.ia3_interpretation);
        cfg.cross_rule_override = self.spec.cross_rule;
        cfg
    }

    /// `rel_error(merged, direct fit of the target cell)`.
    pub fn merged_vs_direct(&self, merged: &AdapterSet) -> f64 {
        let m = adapter_repr(merged.get(MODULE).expect("synthetic module"));
        rel_error(&m, &adapter_repr(self.direct_target())).expect("same shape")
    }

    pub fn merged_vs_truth(&self, merged: &AdapterSet) -> f64 {
        let m = adapter_repr(merged.get(MODULE).expect("synthetic module"));
        rel_error(&m, &self.world.true_adapter(0, 0)).expect("same shape")
    }

    /// Pairwise cosine similarity of language divergences across tasks.
    pub fn divergence_similarity(&self) -> DivergenceSimilarity {
        // A divergence at roundoff level relative to its operands has no
        // direction; it is reported as None rather than a noisy cosine.
        let divergence = |l1: usize, l2: usize, t: usize| -> Option<Vec<f64>> {
            let (a, b) = (adapter_repr(&self.fits[l1][t]), adapter_repr(&self.fits[l2][t]));
            let d: Vec<f64> = match self.world.structure {
                Structure::Additive => a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x - y).collect(),
                Structure::Multiplicative => a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x / y).ln()).collect(),
            };
            let operand_scale = match self.world.structure {
                Structure::Additive => frobenius_norm(&a).max(frobenius_norm(&b)),
                Structure::Multiplicative => (a.len() as f64).sqrt(),
            };
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            (norm > NEGLIGIBLE_DIVERGENCE * operand_scale).then_some(d)
        };
        let mut cosines = Vec::new();
        let mut undefined = false;
        for l1 in 0..self.spec.languages {
            for l2 in (l1 + 1)..self.spec.languages {
                let divs: Vec<Option<Vec<f64>>> = (0..self.spec.tasks).map(|t| divergence(l1, l2, t)).collect();
                for t1 in 0..divs.len() {
                    for t2 in (t1 + 1)..divs.len() {
                        match (&divs[t1], &divs[t2]) {
                            (Some(a), Some(b)) => cosines.push(cosine(a, b)),
                            _ => undefined = true,
                        }
                    }
                }
            }
        }
        let pairs = cosines.len() + usize::from(undefined);
        if undefined || cosines.is_empty() {
            return DivergenceSimilarity { pairs, min_cosine: None, mean_cosine: None };
        }
        DivergenceSimilarity {
            pairs,
            min_cosine: cosines.iter().copied().reduce(f64::min),
            mean_cosine: Some(cosines.iter().sum::<f64>() / cosines.len() as f64),
        }
    }
}

const NEGLIGIBLE_DIVERGENCE: f64 = 1e-10;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn run_experiment(spec: &SyntheticSpec) -> Result<ExperimentReport> {
    let exp = Experiment::prepare(spec)?;
    let kind = spec.structure.adapter_kind();
    let rule = spec.cross_rule.unwrap_or(MergeRule::for_kind(kind));
    let is_lora_additive = kind == AdapterKind::Lora && rule == MergeRule::LoraAdditive;

    let mut grid = spec.t_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    struct Point {
        sweep: SweepPoint,
        clamped: usize,
        warnings: Vec<String>,
    }
    let points: Vec<Point> = grid
        .par_iter()
        .map(|&t| -> Result<Point> {
            let cfg = exp.merge_config(t);
            let out = merge(&exp.task_src, &exp.ref_tgt, &exp.ref_src, &cfg)?;
            let mut sweep = SweepPoint {
                t,
                merged_vs_direct: exp.merged_vs_direct(&out.set),
                merged_vs_truth: exp.merged_vs_truth(&out.set),
                factorwise_vs_direct: None,
                composed_vs_direct: None,
            };
            if is_lora_additive {
                let other_mode = match spec.lora_mode {
                    LoraMode::Factorwise => LoraMode::Composed,
                    LoraMode::Composed => LoraMode::Factorwise,
                };
                let other = merge(&exp.task_src, &exp.ref_tgt, &exp.ref_src, &cfg.clone().with_lora_mode(other_mode))?;
                let other_err = exp.merged_vs_direct(&other.set);
                let (fw, cp) = match spec.lora_mode {
                    LoraMode::Factorwise => (sweep.merged_vs_direct, other_err),
                    LoraMode::Composed => (other_err, sweep.merged_vs_direct),
                };
                sweep.factorwise_vs_direct = Some(fw);
                sweep.composed_vs_direct = Some(cp);
            }
            Ok(Point { sweep, clamped: out.report.clamped, warnings: out.report.warnings })
        })
        .collect::<Result<_>>()?;

    let best = points
        .iter()
        .map(|p| &p.sweep)
        .fold(None::<&SweepPoint>, |acc, p| match acc {
            Some(b) if b.merged_vs_direct <= p.merged_vs_direct => Some(b),
            _ => Some(p),
        })
        .expect("grid is non-empty");

    let mut warnings = BTreeSet::new();
    let mut clamped = 0;
    for p in &points {
        clamped += p.clamped;
        warnings.extend(p.warnings.iter().cloned());
    }

    let cell_fits = (0..spec.languages)
        .flat_map(|l| (0..spec.tasks).map(move |t| (l, t)))
        .map(|(l, t)| CellFit {
            language: l,
            task: t,
            fit_error: rel_error(&adapter_repr(&exp.fits[l][t]), &exp.world.true_adapter(l, t)).expect("same shape"),
        })
        .collect::<Vec<_>>();

    Ok(ExperimentReport {
        structure: spec.structure,
        seed: spec.seed,
        rule,
        cross_rule: rule != MergeRule::for_kind(kind),
        lora_mode: (kind == AdapterKind::Lora).then_some(spec.lora_mode),
        target_fit_error: cell_fits[0].fit_error,
        cell_fits,
        best_t: best.t,
        best_merged_vs_direct: best.merged_vs_direct,
        best_merged_vs_truth: best.merged_vs_truth,
        sweep: points.iter().map(|p| p.sweep.clone()).collect(),
        divergence_similarity: exp.divergence_similarity(),
        clamped,
        warnings: warnings.into_iter().collect(),
    })
}
