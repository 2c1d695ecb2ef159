use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adapter_merge::checkpoint::{self, CheckpointError};
use adapter_merge::harness::{self, HarnessError, SyntheticSpec};
use adapter_merge::merge::{self, DEFAULT_EPS};
use adapter_merge::tuning::{self, CommandScorer, Direction, ScoreFileScorer, Scorer, SweepPlan, TuningError};
use adapter_merge::{
    AdapterSet, Ia3Interpretation, LoraMode, MergeConfig, MergeError, MergeRule, ModuleFilter, WriteOptions,
};
use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

const EXIT_VALIDATION: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_USAGE: u8 = 64;

/// Merge parameter-efficient adapters across languages and tasks.
#[derive(Parser, Debug)]
#[command(name = "adapter-merge", version, about)]
struct Cli {
    /// Worker threads; output is identical for any value.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    threads: u16,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Apply the reference-task language divergence to a task adapter.
    Merge(MergeArgs),
    /// Write the divergence between two reference adapters as a checkpoint.
    Diverge(DivergeArgs),
    /// Summarize a checkpoint.
    Inspect(InspectArgs),
    /// Grid-search t against an external scorer.
    Sweep(SweepArgs),
    /// Run the synthetic transfer experiment.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct Inputs {
    /// Adapter for the task in the source language.
    #[arg(long)]
    task_src: PathBuf,
    /// Reference-task adapter in the target language.
    #[arg(long)]
    ref_tgt: PathBuf,
    /// Reference-task adapter in the source language.
    #[arg(long)]
    ref_src: PathBuf,
}

#[derive(Args, Debug)]
struct RuleArgs {
    /// Expected merge rule; must match the adapter kind unless --cross-rule is used.
    #[arg(long)]
    rule: Option<MergeRule>,
    /// Glob over module paths (repeatable). Defaults: q/v projections for LoRA, everything otherwise.
    #[arg(long = "filter", value_name = "GLOB")]
    filter: Vec<String>,
    #[arg(long = "ia3-mode", default_value = "affine")]
    ia3_mode: Ia3Interpretation,
    #[arg(long, default_value = "factorwise")]
    lora_mode: LoraMode,
    /// Apply this rule regardless of adapter kind (ablation).
    #[arg(long)]
    cross_rule: Option<MergeRule>,
    /// Divisor clamp for (IA)3 ratios.
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
}

impl RuleArgs {
    fn config(&self, t: f64) -> MergeConfig {
        let mut cfg = MergeConfig::new(t).with_lora_mode(self.lora_mode).with_ia3_interpretation(self.ia3_mode);
        cfg.rule = self.rule;
        cfg.cross_rule_override = self.cross_rule;
        cfg.eps = self.eps;
        if !self.filter.is_empty() {
            cfg = cfg.with_filter(self.filter.iter().cloned());
        }
        cfg
    }
}

#[derive(Args, Debug)]
struct MergeArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    t: f64,
    #[command(flatten)]
    rules: RuleArgs,
    /// Print the merge report as JSON instead of a summary line.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct DivergeArgs {
    #[arg(long)]
    ref_tgt: PathBuf,
    #[arg(long)]
    ref_src: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Glob over module paths (repeatable); all modules by default.
    #[arg(long = "filter", value_name = "GLOB")]
    filter: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    path: PathBuf,
    #[arg(long)]
    json: bool,
    /// Dump the raw manifest as JSON.
    #[arg(long, conflicts_with = "json")]
    manifest: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    rules: RuleArgs,
    /// Shell command printing a score; {checkpoint} and {t} are substituted.
    #[arg(long, conflicts_with = "score_file", required_unless_present = "score_file")]
    score_cmd: Option<String>,
    /// Two-column text file of `t score` lines.
    #[arg(long)]
    score_file: Option<PathBuf>,
    /// Comma-separated t values (default 0.0..=2.0 step 0.1).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    t_grid: Vec<f64>,
    #[arg(long, default_value = "maximize")]
    direction: Direction,
    /// The score command may run concurrently for different t.
    #[arg(long)]
    reentrant: bool,
    /// Keep merged checkpoints here instead of a temporary directory.
    #[arg(long)]
    keep_dir: Option<PathBuf>,
    /// Write the merge at the best t to this path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSON experiment specification.
    #[arg(long)]
    spec: PathBuf,
    /// Overrides the seed in the specification.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print JSON instead of the text table.
    #[arg(long)]
    json: bool,
}

fn read_set(path: &Path) -> anyhow::Result<AdapterSet> {
    checkpoint::read_checkpoint(path).with_context(|| format!("reading {}", path.display()))
}

fn write_set(set: &AdapterSet, path: &Path) -> anyhow::Result<()> {
    checkpoint::write_checkpoint(set, path, WriteOptions::default())
        .with_context(|| format!("writing {}", path.display()))
}

fn run_merge(args: MergeArgs) -> anyhow::Result<()> {
    let task = read_set(&args.inputs.task_src)?;
    let tgt = read_set(&args.inputs.ref_tgt)?;
    let src = read_set(&args.inputs.ref_src)?;
    let cfg = args.rules.config(args.t);
    let out = merge::merge(&task, &tgt, &src, &cfg)?;
    write_set(&out.set, &args.out)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&out.report)?);
    } else {
        let rule = cfg.effective_rule(task.kind())?;
        println!(
            "merged {} module(s), copied {} with {rule} at t={}; {} clamped, {} warning(s) -> {}",
            out.report.merged.len(),
            out.report.copied.len(),
            args.t,
            out.report.clamped,
            out.report.warnings.len(),
            args.out.display()
        );
    }
    for w in &out.report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn run_diverge(args: DivergeArgs) -> anyhow::Result<()> {
    let tgt = read_set(&args.ref_tgt)?;
    let src = read_set(&args.ref_src)?;
    let filter = if args.filter.is_empty() { ModuleFilter::all() } else { ModuleFilter::new(&args.filter)? };
    let out = merge::diverge(&tgt, &src, &filter, args.eps)?;
    write_set(&out.set, &args.out)?;
    println!(
        "{} divergence over {} module(s); {} clamped -> {}",
        tgt.kind(),
        out.set.len(),
        out.report.clamped,
        args.out.display()
    );
    for w in &out.report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn run_inspect(args: InspectArgs) -> anyhow::Result<()> {
    if args.manifest {
        let manifest =
            checkpoint::read_manifest(&args.path).with_context(|| format!("reading {}", args.path.display()))?;
        println!("{}", serde_json::to_string_pretty(&manifest)?);
        return Ok(());
    }
    let summary = checkpoint::inspect(&args.path).with_context(|| format!("reading {}", args.path.display()))?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        print!("{summary}");
    }
    Ok(())
}

fn run_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let task = read_set(&args.inputs.task_src)?;
    let tgt = read_set(&args.inputs.ref_tgt)?;
    let src = read_set(&args.inputs.ref_src)?;
    let scorer: Box<dyn Scorer> = match (&args.score_cmd, &args.score_file) {
        (Some(cmd), _) => Box::new(CommandScorer { template: cmd.clone(), reentrant: args.reentrant }),
        (None, Some(path)) => Box::new(ScoreFileScorer::from_path(path)?),
        (None, None) => unreachable!("clap requires one scorer"),
    };
    let plan = SweepPlan {
        t_grid: if args.t_grid.is_empty() { tuning::default_t_grid() } else { args.t_grid.clone() },
        scorer,
        direction: args.direction,
        checkpoint_dir: args.keep_dir.clone(),
    };
    let cfg = args.rules.config(0.0);
    let result = tuning::sweep_t(&task, &tgt, &src, &cfg, &plan)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&result)?);
    } else {
        println!("{result}");
    }
    if let Some(out) = &args.out {
        let merged = merge::merge(&task, &tgt, &src, &MergeConfig { t: result.best_t, ..cfg })?;
        write_set(&merged.set, out)?;
    }
    Ok(())
}

fn run_synth(args: SynthArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", args.spec.display())))?;
    if let Some(seed) = args.seed {
        let obj = value.as_object_mut().ok_or_else(|| invalid("spec must be a JSON object".into()))?;
        obj.insert("seed".into(), seed.into());
    }
    let spec: SyntheticSpec =
        serde_json::from_value(value).map_err(|e| invalid(format!("{}: {e}", args.spec.display())))?;
    let report = harness::run_experiment(&spec)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &args.out {
        std::fs::write(out, format!("{json}\n")).with_context(|| format!("writing {}", out.display()))?;
    }
    if args.json {
        println!("{json}");
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

/// A bad input file or argument combination detected after parsing.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: String) -> anyhow::Error {
    anyhow!(Invalid(msg))
}

fn merge_exit(e: &MergeError) -> u8 {
    match e {
        MergeError::Numeric { .. } => EXIT_NUMERIC,
        _ => EXIT_VALIDATION,
    }
}

fn checkpoint_exit(e: &CheckpointError) -> u8 {
    match e {
        CheckpointError::Io(_) => EXIT_IO,
        CheckpointError::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_VALIDATION,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CheckpointError>() {
            return checkpoint_exit(e);
        }
        if let Some(e) = cause.downcast_ref::<MergeError>() {
            return merge_exit(e);
        }
        if let Some(e) = cause.downcast_ref::<HarnessError>() {
            return match e {
                HarnessError::InvalidSpec(_) => EXIT_VALIDATION,
                HarnessError::Merge(m) => merge_exit(m),
                HarnessError::Singular { .. } | HarnessError::Tensor(_) => EXIT_NUMERIC,
            };
        }
        if let Some(e) = cause.downcast_ref::<TuningError>() {
            return match e {
                TuningError::Merge { source, .. } => merge_exit(source),
                TuningError::Checkpoint { source, .. } => checkpoint_exit(source),
                TuningError::Io(_) => EXIT_IO,
                _ => EXIT_VALIDATION,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_VALIDATION
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads as usize).build_global() {
        eprintln!("error: cannot start {} worker threads: {e}", cli.threads);
        return ExitCode::from(EXIT_IO);
    }

    let result = match cli.command {
        Command::Merge(a) => run_merge(a),
        Command::Diverge(a) => run_diverge(a),
        Command::Inspect(a) => run_inspect(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Synth(a) => run_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
