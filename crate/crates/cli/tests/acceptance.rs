//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are always printed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use adapter_merge::checkpoint::{decode, encode, read_checkpoint, read_manifest, CheckpointManifest, MAGIC};
use adapter_merge::harness::{run_experiment, Structure, SyntheticSpec};
use adapter_merge::linalg::pinv;
use adapter_merge::tensor::{matmul, rel_error};
use adapter_merge::tuning::{sweep_t, FnScorer, SweepPlan};
use adapter_merge::{
    merge, AdapterKind, AdapterLayer, AdapterMeta, AdapterSet, Ia3Interpretation, Ia3Layer, LoraLayer, LoraMode,
    MergeConfig, MergeRule, PrefixLayer, ReadOptions, Tensor, WriteOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let took = start.elapsed();
    if took > limit {
        return Err(format!("took {took:.2?}, limit {limit:?}"));
    }
    Ok(took)
}

fn single(kind: AdapterKind, module: &str, layer: AdapterLayer) -> AdapterSet {
    let mut s = AdapterSet::new(kind, AdapterMeta::new("xx", "yy"));
    s.insert(module, layer).unwrap();
    s
}

fn lora(b: &[&[f64]], a: &[&[f64]]) -> AdapterLayer {
    AdapterLayer::Lora(LoraLayer::new(Tensor::from_rows(b), Tensor::from_rows(a)).unwrap())
}

fn ia3(v: &[f64]) -> AdapterLayer {
    AdapterLayer::Ia3(Ia3Layer::new(Tensor::vector(v.to_vec()).unwrap()).unwrap())
}

fn prefix(p: Tensor) -> AdapterLayer {
    AdapterLayer::Prefix(PrefixLayer::new(p).unwrap())
}

fn random(m: usize, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(m, n, (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn merge_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for t in [-1.5, -0.3, 0.0, 0.25, 1.0, 1.7, 3.0] {
        let mut lora_set = || {
            let l = LoraLayer::new(random(6, 3, &mut rng), random(3, 5, &mut rng)).unwrap();
            single(AdapterKind::Lora, "q_proj", AdapterLayer::Lora(l))
        };
        let (task, r) = (lora_set(), lora_set());
        let out = merge(&task, &r, &r, &MergeConfig::new(t)).map_err(|e| e.to_string())?;
        ensure!(out.set.layers_bitwise_eq(&task), "lora t={t}: output differs from task_src");
        checked += 1;
        let v: Vec<f64> = (0..7).map(|_| rng.random_range(0.2..3.0)).collect();
        let w: Vec<f64> = (0..7).map(|_| rng.random_range(0.2..3.0)).collect();
        let (task, r) = (single(AdapterKind::Ia3, "k", ia3(&v)), single(AdapterKind::Ia3, "k", ia3(&w)));
        let out = merge(&task, &r, &r, &MergeConfig::new(t)).map_err(|e| e.to_string())?;
        ensure!(out.set.layers_bitwise_eq(&task), "ia3-affine t={t}: output differs from task_src");
        checked += 1;
    }
    for _ in 0..20 {
        let p = random(5, 5, &mut rng);
        let q = random(5, 5, &mut rng);
        let out = merge(
            &single(AdapterKind::Prefix, "prefix", prefix(p.clone())),
            &single(AdapterKind::Prefix, "prefix", prefix(q.clone())),
            &single(AdapterKind::Prefix, "prefix", prefix(q)),
            &MergeConfig::new(1.0),
        )
        .map_err(|e| e.to_string())?;
        let AdapterLayer::Prefix(m) = out.set.get("prefix").unwrap() else { unreachable!() };
        let err = rel_error(&m.p, &p).unwrap();
        ensure!(err <= 1e-8, "prefix: relative error {err:.2e}");
        checked += 1;
    }
    let took = within(Duration::from_secs(1), start)?;
    Ok(format!("{checked} identity cases, {took:.2?}"))
}

fn literal_checks() -> Outcome {
    // LoRA factor-wise: B' = B_task + t(B_tgt - B_src), A' likewise, at t = 0.5.
    let task = single(AdapterKind::Lora, "W^Q", lora(&[&[1.0, 2.0], &[3.0, 4.0]], &[&[1.0, 0.0], &[0.0, 1.0]]));
    let tgt = single(AdapterKind::Lora, "W^Q", lora(&[&[2.0, 0.0], &[1.0, 1.0]], &[&[3.0, 1.0], &[2.0, 2.0]]));
    let src = single(AdapterKind::Lora, "W^Q", lora(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[1.0, 1.0], &[1.0, 1.0]]));
    let out = merge(&task, &tgt, &src, &MergeConfig::new(0.5)).map_err(|e| e.to_string())?;
    let AdapterLayer::Lora(l) = out.set.get("W^Q").unwrap() else { unreachable!() };
    ensure!(l.b.as_slice() == [1.5, 2.0, 3.5, 4.0], "B' = {:?}", l.b.as_slice());
    ensure!(l.a.as_slice() == [2.0, 0.0, 0.5, 1.5], "A' = {:?}", l.a.as_slice());

    // (IA)3 literal: v_task * (t * ratio).
    let (v, vt, vs) = ([2.0, 4.0, 0.5], [6.0, 2.0, 3.0], [2.0, 2.0, 7.0]);
    let mut worst: f64 = 0.0;
    for t in [0.0, 0.3, 1.0, 1.9] {
        let cfg = MergeConfig::new(t).with_ia3_interpretation(Ia3Interpretation::Literal);
        let out = merge(
            &single(AdapterKind::Ia3, "k", ia3(&v)),
            &single(AdapterKind::Ia3, "k", ia3(&vt)),
            &single(AdapterKind::Ia3, "k", ia3(&vs)),
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        let AdapterLayer::Ia3(m) = out.set.get("k").unwrap() else { unreachable!() };
        let expect: Vec<f64> = (0..3).map(|i| v[i] * (t * (vt[i] / vs[i]))).collect();
        let err = rel_error(&m.v, &Tensor::vector(expect).unwrap()).unwrap();
        worst = worst.max(if err.is_finite() { err } else { f64::INFINITY });
    }
    ensure!(worst <= 1e-12, "ia3 literal relative error {worst:.2e}");

    // Prefix: 2 * [[1,1],[0,2]] * pinv(diag(2,4)) * [[1,2],[3,4]] = [[2.5,4],[3,4]].
    let p = |rows: &[&[f64]]| single(AdapterKind::Prefix, "prefix.0", prefix(Tensor::from_rows(rows)));
    let out = merge(
        &p(&[&[1.0, 2.0], &[3.0, 4.0]]),
        &p(&[&[1.0, 1.0], &[0.0, 2.0]]),
        &p(&[&[2.0, 0.0], &[0.0, 4.0]]),
        &MergeConfig::new(2.0),
    )
    .map_err(|e| e.to_string())?;
    let AdapterLayer::Prefix(m) = out.set.get("prefix.0").unwrap() else { unreachable!() };
    let err = rel_error(&m.p, &Tensor::from_rows(&[[2.5, 4.0], [3.0, 4.0]])).unwrap();
    ensure!(err <= 1e-10, "prefix relative error {err:.2e}");
    Ok(format!("lora exact, ia3 literal {worst:.1e}, prefix {err:.1e}"))
}

fn penrose_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut deficient = 0;
    for (m, n) in [(2, 2), (3, 5), (8, 8), (64, 32)] {
        for i in 0..100 {
            // Every third matrix is a product through a smaller inner dimension.
            let a = if i % 3 == 0 {
                let q = (m.min(n) / 2).max(1);
                deficient += 1;
                matmul(&random(m, q, &mut rng), &random(q, n, &mut rng)).unwrap()
            } else {
                random(m, n, &mut rng)
            };
            let p = pinv(&a, None).map_err(|e| e.to_string())?;
            let ap = matmul(&a, &p).unwrap();
            let pa = matmul(&p, &a).unwrap();
            let errs = [
                rel_error(&matmul(&ap, &a).unwrap(), &a).unwrap(),
                rel_error(&matmul(&pa, &p).unwrap(), &p).unwrap(),
                rel_error(&ap.transpose().unwrap(), &ap).unwrap(),
                rel_error(&pa.transpose().unwrap(), &pa).unwrap(),
            ];
            let e = errs.iter().cloned().fold(0.0, f64::max);
            ensure!(e <= 1e-8, "{m}x{n} case {i}: Penrose error {e:.2e}");
            worst = worst.max(e);
        }
    }
    let took = within(Duration::from_secs(10), start)?;
    Ok(format!("400 matrices ({deficient} rank-deficient), worst {worst:.1e}, {took:.2?}"))
}

fn synthetic_exactness() -> Outcome {
    let start = Instant::now();
    let mut add = SyntheticSpec::new(16, 16, 6, Structure::Additive, 2024);
    add.n = 128;
    add.lora_mode = LoraMode::Composed;
    let ra = run_experiment(&add).map_err(|e| e.to_string())?;
    let at_one = |r: &adapter_merge::ExperimentReport| r.sweep.iter().find(|p| p.t == 1.0).unwrap().merged_vs_direct;
    let ea = at_one(&ra);
    ensure!(ea <= 1e-6, "additive t=1 error {ea:.2e}");
    let cos = ra.divergence_similarity.min_cosine.ok_or("divergence similarity undefined")?;
    ensure!(cos >= 1.0 - 1e-10, "divergence cosine {cos}");

    let mut mul = SyntheticSpec::new(16, 16, 6, Structure::Multiplicative, 2024);
    mul.n = 128;
    mul.ia3_interpretation = Ia3Interpretation::Affine;
    let rm = run_experiment(&mul).map_err(|e| e.to_string())?;
    let em = at_one(&rm);
    ensure!(em <= 1e-6, "multiplicative t=1 error {em:.2e}");
    let took = within(Duration::from_secs(30), start)?;
    Ok(format!("additive {ea:.1e}, multiplicative {em:.1e}, min cosine {cos:.12}, {took:.2?}"))
}

fn noisy_robustness() -> Outcome {
    let mut good = 0;
    let mut worst_ratio: f64 = 0.0;
    let mut ts = Vec::new();
    for seed in 0..10 {
        let mut spec = SyntheticSpec::new(16, 16, 6, Structure::Additive, 100 + seed);
        spec.sigma = 0.01;
        spec.n = 4 * spec.k;
        spec.lora_mode = LoraMode::Composed;
        let r = run_experiment(&spec).map_err(|e| e.to_string())?;
        let ratio = r.best_merged_vs_truth / r.target_fit_error;
        worst_ratio = worst_ratio.max(ratio);
        ensure!((0.5..=1.5).contains(&r.best_t), "seed {}: best t = {}", spec.seed, r.best_t);
        ts.push(r.best_t);
        if ratio <= 2.0 {
            good += 1;
        }
    }
    ensure!(good >= 9, "only {good}/10 seeds within 2x of the direct fit");
    Ok(format!("{good}/10 seeds within 2x (worst {worst_ratio:.2}x), best t in {ts:?}"))
}

fn sweep_correctness() -> Outcome {
    let set = single(AdapterKind::Lora, "q_proj", lora(&[&[1.0], &[2.0]], &[&[0.5, 0.5]]));
    let cfg = MergeConfig::new(0.0);
    let plan = SweepPlan::new(FnScorer(|t: f64, _: &AdapterSet| -(t - 0.7).abs()));
    let a = sweep_t(&set, &set, &set, &cfg, &plan).map_err(|e| e.to_string())?;
    ensure!(a.best_t == 0.7, "analytic scorer picked {}", a.best_t);
    let plan = SweepPlan::new(FnScorer(|_, _: &AdapterSet| 1.0));
    let c = sweep_t(&set, &set, &set, &cfg, &plan).map_err(|e| e.to_string())?;
    ensure!(c.best_t == 0.0, "constant scorer picked {}", c.best_t);
    let empty = SweepPlan::new(FnScorer(|_, _: &AdapterSet| 1.0)).with_grid(vec![]);
    ensure!(sweep_t(&set, &set, &set, &cfg, &empty).is_err(), "empty grid accepted");
    Ok("analytic -> 0.7, constant -> 0.0, empty grid rejected".into())
}

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data")
}

fn format_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut set = AdapterSet::new(AdapterKind::Lora, AdapterMeta::new("sw", "xcopa"));
    set.meta.notes.insert("note".into(), "kept".into());
    for (i, m) in ["a.q_proj", "b.v_proj", "c.k_proj"].iter().enumerate() {
        let layer = AdapterLayer::Lora(
            LoraLayer::with_scale(random(5, 2, &mut rng), random(2, 4, &mut rng), 0.5 + i as f64).unwrap(),
        );
        let layer = if i == 1 { layer.to_dtype(adapter_merge::DType::F32) } else { layer };
        set.insert(*m, layer).unwrap();
    }
    let back =
        decode(&encode(&set, WriteOptions::default()).unwrap(), ReadOptions::default()).map_err(|e| e.to_string())?;
    ensure!(back.bitwise_eq(&set), "roundtrip differs");

    let golden = golden_dir().join("golden_lora.amgx");
    let expected: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(golden_dir().join("golden_lora.manifest.json")).unwrap())
            .unwrap();
    ensure!(read_manifest(&golden).map_err(|e| e.to_string())? == expected, "golden manifest differs");
    read_checkpoint(&golden).map_err(|e| e.to_string())?;

    let bytes = std::fs::read(&golden).unwrap();
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload = &bytes[16 + hlen..];
    let rebuild = |header: &[u8]| {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header);
        out.extend_from_slice(payload);
        out
    };
    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"ZZZZ");
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
    let t = &mut header["modules"][1]["tensors"][0];
    t["offset_begin"] = (t["offset_begin"].as_u64().unwrap() - 4).into();
    t["offset_end"] = (t["offset_end"].as_u64().unwrap() - 4).into();
    let cases = [
        ("magic", magic),
        ("header", rebuild(b"{\"format_version\": 1, \"modules\": [")),
        ("overlap", rebuild(&serde_json::to_vec(&header).unwrap())),
        ("truncation", bytes[..bytes.len() - 3].to_vec()),
    ];
    let mut codes = Vec::new();
    for (class, data) in &cases {
        match decode(data, ReadOptions::default()) {
            Ok(_) => return Err(format!("{class} corruption was accepted")),
            Err(e) => codes.push(format!("{class}={}", e.code())),
        }
    }
    let distinct: std::collections::BTreeSet<_> = codes.iter().map(|c| c.split('=').nth(1).unwrap()).collect();
    ensure!(distinct.len() == cases.len(), "codes not distinct: {codes:?}");
    Ok(format!("roundtrip bitwise, golden ok, {}", codes.join(" ")))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_adapter-merge")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let p = |name: &str| root.join(name).display().to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for name in ["task", "tgt", "src"] {
        let mut set = AdapterSet::new(AdapterKind::Lora, AdapterMeta::new(name, name));
        for layer in 0..12 {
            let l = LoraLayer::new(random(24, 4, &mut rng), random(4, 20, &mut rng)).unwrap();
            set.insert(format!("layers.{layer}.q_proj"), AdapterLayer::Lora(l)).unwrap();
        }
        adapter_merge::write_checkpoint(&set, root.join(format!("{name}.amgx")), WriteOptions::default()).unwrap();
    }
    std::fs::write(
        root.join("spec.json"),
        r#"{"d": 16, "k": 12, "r": 4, "L": 3, "T": 3, "sigma": 0.02, "n": 48, "seed": 31, "structure": "additive"}"#,
    )
    .unwrap();
    for threads in ["1", "8"] {
        for mode in ["factorwise", "composed"] {
            cli(&[
                "--threads",
                threads,
                "merge",
                "--task-src",
                &p("task.amgx"),
                "--ref-tgt",
                &p("tgt.amgx"),
                "--ref-src",
                &p("src.amgx"),
                "--t",
                "0.7",
                "--lora-mode",
                mode,
                "--out",
                &p(&format!("m_{mode}_{threads}.amgx")),
            ])?;
        }
        cli(&["--threads", threads, "synth", "--spec", &p("spec.json"), "--out", &p(&format!("s_{threads}.json"))])?;
    }
    let same = |a: &str, b: &str| std::fs::read(root.join(a)).unwrap() == std::fs::read(root.join(b)).unwrap();
    for f in ["m_factorwise", "m_composed"] {
        ensure!(same(&format!("{f}_1.amgx"), &format!("{f}_8.amgx")), "{f} differs between 1 and 8 threads");
    }
    ensure!(same("s_1.json", "s_8.json"), "synth report differs between 1 and 8 threads");
    Ok("merge (both lora modes) and synth byte-identical at 1 and 8 threads".into())
}

fn ablation_structure() -> Outcome {
    let mut worst = f64::INFINITY;
    for seed in 0..10 {
        let mut matched = SyntheticSpec::new(16, 16, 6, Structure::Additive, 500 + seed);
        matched.sigma = 0.01;
        matched.n = 64;
        let crossed = SyntheticSpec { cross_rule: Some(MergeRule::Ia3Multiplicative), ..matched.clone() };
        let m = run_experiment(&matched).map_err(|e| e.to_string())?;
        let c = run_experiment(&crossed).map_err(|e| e.to_string())?;
        ensure!(c.cross_rule, "cross-rule flag missing from report");
        let ratio = c.best_merged_vs_direct / m.best_merged_vs_direct;
        worst = worst.min(ratio);
        ensure!(ratio >= 10.0, "seed {}: cross-rule only {ratio:.1}x worse", matched.seed);
    }
    Ok(format!("cross-rule error >= {worst:.1}x matched over 10 seeds"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("merge-rule identities", merge_identities),
        ("literal rule fixtures", literal_checks),
        ("Penrose suite", penrose_suite),
        ("synthetic exactness", synthetic_exactness),
        ("noisy robustness", noisy_robustness),
        ("sweep correctness", sweep_correctness),
        ("format fidelity", format_fidelity),
        ("thread determinism", determinism),
        ("ablation structure", ablation_structure),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS  {}. {name}: {detail}", i + 1),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {}. {name}: {reason}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
