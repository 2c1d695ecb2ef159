//! Grid search over the merge hyperparameter `t`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::AdapterSet;
use crate::checkpoint::{self, CheckpointError, WriteOptions};
use crate::merge::{merge, MergeConfig, MergeError};

#[derive(Debug, Error)]
pub enum TuningError {
    #[error("t grid is empty")]
    EmptyGrid,
    #[error("t grid contains {0} more than once")]
    DuplicateT(f64),
    #[error("t grid contains a non-finite value")]
    NonFiniteT,
    #[error("merge failed at t = {t}: {source}")]
    Merge { t: f64, source: MergeError },
    #[error("could not write checkpoint for t = {t}: {source}")]
    Checkpoint { t: f64, source: CheckpointError },
    #[error("scorer failed at t = {t}: {message}")]
    Scorer { t: f64, message: String },
    #[error("score file: {0}")]
    ScoreFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, TuningError>;

/// `0.0, 0.1, ..., 2.0`.
pub fn default_t_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Maximize,
    Minimize,
}

impl std::str::FromStr for Direction {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "max" | "maximize" => Ok(Direction::Maximize),
            "min" | "minimize" => Ok(Direction::Minimize),
            other => Err(format!("unknown direction '{other}' (expected maximize or minimize)")),
        }
    }
}

/// What a scorer sees for one grid point.
pub struct ScoreInput<'a> {
    pub t: f64,
    pub merged: &'a AdapterSet,
    /// Set only when the scorer asks for an on-disk checkpoint.
    pub checkpoint: Option<&'a Path>,
}

pub trait Scorer: Sync {
    fn score(&self, input: &ScoreInput<'_>) -> std::result::Result<f64, String>;

    fn needs_checkpoint(&self) -> bool {
        false
    }

    /// Whether grid points may be scored concurrently.
    fn reentrant(&self) -> bool {
        false
    }
}

/// Scores with an in-process function of `(t, merged)`.
pub struct FnScorer<F>(pub F);

impl<F> Scorer for FnScorer<F>
where
    F: Fn(f64, &AdapterSet) -> f64 + Sync,
{
    fn score(&self, input: &ScoreInput<'_>) -> std::result::Result<f64, String> {
        Ok((self.0)(input.t, input.merged))
    }

    fn reentrant(&self) -> bool {
        true
    }
}

/// Runs a shell command per grid point and parses the last line of stdout.
///
/// `{checkpoint}` expands to the merged checkpoint path (single-quoted) and
/// `{t}` to the grid value.
#[derive(Debug, Clone)]
pub struct CommandScorer {
    pub template: String,
    pub reentrant: bool,
}

impl CommandScorer {
    pub fn new(template: impl Into<String>) -> Self {
        Self { template: template.into(), reentrant: false }
    }

    pub fn expand(&self, t: f64, checkpoint: &Path) -> String {
        let quoted = format!("'{}'", checkpoint.display().to_string().replace('\'', r"'\''"));
        self.template.replace("{checkpoint}", &quoted).replace("{t}", &format!("{t}"))
    }
}

impl Scorer for CommandScorer {
    fn score(&self, input: &ScoreInput<'_>) -> std::result::Result<f64, String> {
        let path = input.checkpoint.ok_or("no checkpoint was written")?;
        let cmd = self.expand(input.t, path);
        let out = Command::new("sh").arg("-c").arg(&cmd).output().map_err(|e| format!("cannot run '{cmd}': {e}"))?;
        if !out.status.success() {
            let stderr = String::from_utf8_lossy(&out.stderr);
            return Err(format!("'{cmd}' exited with {}: {}", out.status, stderr.trim()));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        let last = stdout.lines().map(str::trim).rfind(|l| !l.is_empty()).unwrap_or("");
        last.parse::<f64>().map_err(|_| format!("'{cmd}' printed non-numeric output '{last}'"))
    }

    fn needs_checkpoint(&self) -> bool {
        true
    }

    fn reentrant(&self) -> bool {
        self.reentrant
    }
}

/// Precomputed scores read from a two-column text file (`t score`, one per
/// line, whitespace or comma separated, `#` comments allowed).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFileScorer {
    pub scores: Vec<(f64, f64)>,
}

impl ScoreFileScorer {
    const MATCH_TOL: f64 = 1e-9;

    pub fn parse(text: &str) -> Result<Self> {
        let mut scores = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> =
                line.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()).collect();
            let bad = || TuningError::ScoreFile(format!("line {}: expected 't score', got '{raw}'", lineno + 1));
            if fields.len() != 2 {
                return Err(bad());
            }
            let t: f64 = fields[0].parse().map_err(|_| bad())?;
            let s: f64 = fields[1].parse().map_err(|_| bad())?;
            scores.push((t, s));
        }
        Ok(Self { scores })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn lookup(&self, t: f64) -> Option<f64> {
        self.scores.iter().find(|(x, _)| (x - t).abs() <= Self::MATCH_TOL).map(|&(_, s)| s)
    }
}

impl Scorer for ScoreFileScorer {
    fn score(&self, input: &ScoreInput<'_>) -> std::result::Result<f64, String> {
        self.lookup(input.t).ok_or_else(|| "no score listed for this t".to_string())
    }

    fn reentrant(&self) -> bool {
        true
    }
}

pub struct SweepPlan {
    pub t_grid: Vec<f64>,
    pub scorer: Box<dyn Scorer>,
    pub direction: Direction,
    /// Where merged checkpoints go for command scorers; a temporary
    /// directory is used when unset.
    pub checkpoint_dir: Option<PathBuf>,
}

impl SweepPlan {
    pub fn new(scorer: impl Scorer + 'static) -> Self {
        Self {
            t_grid: default_t_grid(),
            scorer: Box::new(scorer),
            direction: Direction::Maximize,
            checkpoint_dir: None,
        }
    }

    pub fn with_grid(mut self, grid: Vec<f64>) -> Self {
        self.t_grid = grid;
        self
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }
}

/// Sorted copy of `grid`; rejects empty, duplicate or non-finite grids.
pub fn canonical_grid(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(TuningError::EmptyGrid);
    }
    if grid.iter().any(|t| !t.is_finite()) {
        return Err(TuningError::NonFiniteT);
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(TuningError::DuplicateT(w[0]));
    }
    Ok(sorted)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub t: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub best_t: f64,
    pub best_score: f64,
    pub direction: Direction,
    pub table: Vec<SweepRow>,
}

impl fmt::Display for SweepResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8}  {:>14}", "t", "score")?;
        for row in &self.table {
            let mark = if row.t == self.best_t { "  *" } else { "" };
            writeln!(f, "{:>8.3}  {:>14.6}{mark}", row.t, row.score)?;
        }
        write!(f, "best t = {} (score {})", self.best_t, self.best_score)
    }
}

/// Picks the best row; ties go to the smallest t (rows must be sorted).
pub fn select_best(table: &[SweepRow], direction: Direction) -> Option<SweepRow> {
    table.iter().copied().fold(None, |best, row| match best {
        None => Some(row),
        Some(b) => {
            let better = match direction {
                Direction::Maximize => row.score > b.score,
                Direction::Minimize => row.score < b.score,
            };
            Some(if better { row } else { b })
        }
    })
}

/// Merges once per grid value, scores each result and returns the best `t`.
/// `cfg_base.t` is ignored.
pub fn sweep_t(
    task_src: &AdapterSet,
    ref_tgt: &AdapterSet,
    ref_src: &AdapterSet,
    cfg_base: &MergeConfig,
    plan: &SweepPlan,
) -> Result<SweepResult> {
    let grid = canonical_grid(&plan.t_grid)?;
    let tmp;
    let dir = if plan.scorer.needs_checkpoint() {
        match &plan.checkpoint_dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                Some(d.clone())
            }
            None => {
                tmp = tempfile::tempdir()?;
                Some(tmp.path().to_path_buf())
            }
        }
    } else {
        None
    };

    let score_one = |t: f64| -> Result<SweepRow> {
        let cfg = MergeConfig { t, ..cfg_base.clone() };
        let merged = merge(task_src, ref_tgt, ref_src, &cfg).map_err(|source| TuningError::Merge { t, source })?.set;
        let path = dir.as_ref().map(|d| d.join(format!("merged_t{t}.amgx")));
        if let Some(p) = &path {
            checkpoint::write_checkpoint(&merged, p, WriteOptions::default())
                .map_err(|source| TuningError::Checkpoint { t, source })?;
        }
        let input = ScoreInput { t, merged: &merged, checkpoint: path.as_deref() };
        let score = plan.scorer.score(&input).map_err(|message| TuningError::Scorer { t, message })?;
        if score.is_nan() {
            return Err(TuningError::Scorer { t, message: "score is NaN".into() });
        }
        log::debug!("t = {t}: score {score}");
        Ok(SweepRow { t, score })
    };

    let table: Vec<SweepRow> = if plan.scorer.reentrant() {
        grid.par_iter().map(|&t| score_one(t)).collect::<Result<_>>()?
    } else {
        grid.iter().map(|&t| score_one(t)).collect::<Result<_>>()?
    };
    let best = select_best(&table, plan.direction).expect("grid is non-empty");
    Ok(SweepResult { best_t: best.t, best_score: best.score, direction: plan.direction, table })
}
