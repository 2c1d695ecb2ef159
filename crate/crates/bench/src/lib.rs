//! Input builders shared by the benchmarks.

use adapter_merge::{AdapterKind, AdapterLayer, AdapterMeta, AdapterSet, Ia3Layer, LoraLayer, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(m: usize, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(m, n, (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// `layers` transformer blocks with q/k/v projections of width `d` and rank `r`.
pub fn lora_set(layers: usize, d: usize, r: usize, seed: u64) -> AdapterSet {
    let mut rng = rng(seed);
    let mut set = AdapterSet::new(AdapterKind::Lora, AdapterMeta::new("xx", "yy"));
    for i in 0..layers {
        for proj in ["q_proj", "k_proj", "v_proj"] {
            let l = LoraLayer::new(random_matrix(d, r, &mut rng), random_matrix(r, d, &mut rng)).expect("conformable");
            set.insert(format!("layers.{i}.self_attn.{proj}"), AdapterLayer::Lora(l)).expect("lora");
        }
    }
    set
}

pub fn ia3_set(layers: usize, k: usize, seed: u64) -> AdapterSet {
    let mut rng = rng(seed);
    let mut set = AdapterSet::new(AdapterKind::Ia3, AdapterMeta::new("xx", "yy"));
    for i in 0..layers {
        for proj in ["k_proj", "v_proj", "ffn"] {
            let v = (0..k).map(|_| rng.random_range(0.5..2.0)).collect();
            let layer = Ia3Layer::new(Tensor::vector(v).expect("finite")).expect("1-d");
            set.insert(format!("layers.{i}.{proj}"), AdapterLayer::Ia3(layer)).expect("ia3");
        }
    }
    set
}
