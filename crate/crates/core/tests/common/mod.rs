#![allow(dead_code)]

pub mod oracle;

use attnseg::fixture::{random_bundle, RandomBundleSpec};
use attnseg::ActivationBundle;

/// Random bundle for seed `seed`; every fourth one has adversarial heads.
pub fn sweep_bundle(seed: u64) -> ActivationBundle {
    let mut spec = RandomBundleSpec::new(seed);
    spec.adversarial_heads = seed % 4 == 3;
    random_bundle(&spec).expect("random bundle")
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).fold(0.0, f64::max)
}
