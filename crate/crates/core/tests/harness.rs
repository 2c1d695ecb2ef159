use adapter_merge::harness::{adapter_repr, run_experiment, Experiment, Structure, SyntheticSpec, MODULE};
use adapter_merge::tensor::rel_error;
use adapter_merge::tuning::{sweep_t, FnScorer, SweepPlan};
use adapter_merge::{AdapterSet, Ia3Interpretation, LoraMode};

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn harness_as_scorer_selects_unit_t() {
    for structure in [Structure::Additive, Structure::Multiplicative] {
        let spec = SyntheticSpec::new(8, 8, 4, structure, 17);
        let exp = Experiment::prepare(&spec).unwrap();
        let scorer_exp = exp.clone();
        let plan = SweepPlan::new(FnScorer(move |_, merged: &AdapterSet| -scorer_exp.merged_vs_direct(merged)));
        let cfg = exp.merge_config(0.0);
        let res = sweep_t(&exp.task_src, &exp.ref_tgt, &exp.ref_src, &cfg, &plan).unwrap();
        assert_eq!(res.best_t, 1.0, "{structure:?}");
    }
}

#[test]
fn reports_are_deterministic_given_seed() {
    let mut spec = SyntheticSpec::new(10, 8, 4, Structure::Additive, 5);
    spec.sigma = 0.05;
    let a = serde_json::to_string(&run_experiment(&spec).unwrap()).unwrap();
    let b = serde_json::to_string(&run_experiment(&spec).unwrap()).unwrap();
    assert_eq!(a, b);
    spec.seed = 6;
    assert_ne!(a, serde_json::to_string(&run_experiment(&spec).unwrap()).unwrap());
}

#[test]
fn parallel_report_matches_serial() {
    for structure in [Structure::Additive, Structure::Multiplicative] {
        let mut spec = SyntheticSpec::new(12, 9, 4, structure, 11);
        spec.sigma = 0.02;
        spec.languages = 3;
        spec.tasks = 3;
        let serial = in_pool(1, || run_experiment(&spec).unwrap());
        let parallel = in_pool(8, || run_experiment(&spec).unwrap());
        assert_eq!(serde_json::to_vec(&serial).unwrap(), serde_json::to_vec(&parallel).unwrap());
        assert_eq!(serial.to_table(), parallel.to_table());
    }
}

#[test]
fn no_language_effect_means_task_source_everywhere() {
    for structure in [Structure::Additive, Structure::Multiplicative] {
        let mut spec = SyntheticSpec::new(8, 8, 4, structure, 23);
        spec.language_scale = 0.0;
        let exp = Experiment::prepare(&spec).unwrap();
        let task_src = adapter_repr(exp.task_src.get(MODULE).unwrap());
        for &t in &spec.t_grid {
            let merged = adapter_merge::merge(&exp.task_src, &exp.ref_tgt, &exp.ref_src, &exp.merge_config(t)).unwrap();
            let m = adapter_repr(merged.set.get(MODULE).unwrap());
            assert!(rel_error(&m, &task_src).unwrap() < 1e-8, "{structure:?} t={t}");
        }
        let report = run_experiment(&spec).unwrap();
        let errs: Vec<f64> = report.sweep.iter().map(|p| p.merged_vs_direct).collect();
        let spread = errs.iter().cloned().fold(f64::MIN, f64::max) - errs.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 1e-8, "{structure:?} curve not flat: {errs:?}");
        assert!(report.divergence_similarity.min_cosine.is_none());
    }
}

#[test]
fn noiseless_exactness_at_unit_t() {
    let mut add = SyntheticSpec::new(16, 16, 6, Structure::Additive, 2);
    add.n = 128;
    add.t_grid = vec![1.0];
    let r = run_experiment(&add).unwrap();
    assert!(r.sweep[0].merged_vs_direct <= 1e-6);

    let mut mul = SyntheticSpec::new(16, 16, 6, Structure::Multiplicative, 2);
    mul.n = 128;
    mul.t_grid = vec![1.0];
    mul.ia3_interpretation = Ia3Interpretation::Affine;
    let r = run_experiment(&mul).unwrap();
    assert!(r.sweep[0].merged_vs_direct <= 1e-6);
}

#[test]
fn factorwise_and_composed_are_both_reported() {
    let spec = SyntheticSpec::new(8, 8, 4, Structure::Additive, 3);
    let composed = run_experiment(&spec).unwrap();
    let factorwise = run_experiment(&SyntheticSpec { lora_mode: LoraMode::Factorwise, ..spec }).unwrap();
    for (c, f) in composed.sweep.iter().zip(&factorwise.sweep) {
        assert_eq!(c.composed_vs_direct, f.composed_vs_direct);
        assert_eq!(c.factorwise_vs_direct, f.factorwise_vs_direct);
        assert_eq!(Some(c.merged_vs_direct), c.composed_vs_direct);
        assert_eq!(Some(f.merged_vs_direct), f.factorwise_vs_direct);
    }
}

#[test]
fn report_renders_as_json_and_table() {
    let spec = SyntheticSpec::new(6, 6, 2, Structure::Multiplicative, 4);
    let report = run_experiment(&spec).unwrap();
    let json: serde_json::Value = serde_json::to_value(&report).unwrap();
    assert_eq!(json["sweep"].as_array().unwrap().len(), 21);
    assert!(json["best_t"].is_number());
    let table = report.to_table();
    assert_eq!(table.lines().count(), 2 + 21 + 2);
    assert!(report.sweep.iter().all(|p| p.merged_vs_direct >= 0.0 && p.merged_vs_truth >= 0.0));
    assert!(spec.t_grid.contains(&report.best_t));
}
