//! Merging parameter-efficient adapters across languages and tasks.
//!
//! Given an adapter fine-tuned for a task in a source language and two
//! adapters for a reference task (one per language), the divergence between
//! the reference adapters is applied to the task adapter to produce an
//! adapter for the task in the target language. The rule used depends on how
//! the adapter enters the model: LoRA updates add to the weight, (IA)³
//! vectors multiply it, and prefix tokens enter through a matrix product.
//!
//! ```
//! use adapter_merge::{merge, AdapterKind, AdapterLayer, AdapterMeta, AdapterSet, Ia3Layer, MergeConfig, Tensor};
//!
//! let set = |v: Vec<f64>| {
//!     let mut s = AdapterSet::new(AdapterKind::Ia3, AdapterMeta::new("en", "qa"));
//!     s.insert("k_proj", AdapterLayer::Ia3(Ia3Layer::new(Tensor::vector(v).unwrap()).unwrap())).unwrap();
//!     s
//! };
//! let out = merge(&set(vec![2.0, 4.0]), &set(vec![6.0, 2.0]), &set(vec![2.0, 2.0]), &MergeConfig::new(1.0)).unwrap();
//! let v = match out.set.get("k_proj").unwrap() {
//!     AdapterLayer::Ia3(l) => l.v.as_slice().to_vec(),
//!     _ => unreachable!(),
//! };
//! assert_eq!(v, vec![6.0, 4.0]);
//! ```

pub mod adapter;
pub mod checkpoint;
pub mod harness;
pub mod linalg;
pub mod merge;
pub mod tensor;
pub mod tuning;

pub use adapter::{
    compose_delta, AdapterError, AdapterKind, AdapterLayer, AdapterMeta, AdapterSet, CompatibilityReport, Ia3Layer,
    LoraLayer, PrefixLayer, Violation,
};
pub use checkpoint::{
    read_checkpoint, write_checkpoint, CheckpointError, CheckpointManifest, ReadOptions, WriteOptions,
};
pub use harness::{run_experiment, ExperimentReport, Structure, SyntheticSpec};
pub use merge::{
    diverge, merge, Ia3Interpretation, LoraMode, MergeConfig, MergeError, MergeOutcome, MergeRule, ModuleFilter,
};
pub use tensor::{DType, Tensor, TensorError};
pub use tuning::{sweep_t, Direction, SweepPlan, SweepResult};
