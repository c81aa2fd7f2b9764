//! Random small models and batches for gradient checks.

#![allow(dead_code)]

use std::collections::BTreeMap;

use fairwell::adcore::{finite_difference_check, GradCheckReport};
use fairwell::data::SubjectRecord;
use fairwell::losses::{LossConfig, LossWeights, Method, Pooling, StatScope};
use fairwell::training::{loss_graph, EncoderArch, Model, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// (label, method, epoch) for the six checked method variants.
pub const VARIANTS: [(&str, Method, u32); 6] = [
    ("vicreg", Method::Vicreg, 1),
    ("m1", Method::M1, 1),
    ("m2", Method::M2, 1),
    ("m3", Method::M3, 1),
    ("m4-epoch-1", Method::M4, 1),
    ("m4-epoch-2", Method::M4, 2),
];

pub struct Case {
    pub model: Model,
    pub batch: Vec<SubjectRecord>,
    pub loss: LossConfig,
}

/// A random model (d <= 8) and batch (<= 4 subjects, 2..=5 segments).
pub fn random_case(seed: u64, method: Method, epoch: u32, pooling: Pooling) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..=8);
    let in_a = rng.random_range(2..=5);
    let in_b = rng.random_range(2..=5);
    let hidden = if rng.random_bool(0.5) { vec![rng.random_range(3..=6)] } else { vec![] };
    let n = rng.random_range(1..=4);
    let same_label = method.needs_same_label(epoch);
    let label = rng.random_range(0..2u8);
    let batch: Vec<SubjectRecord> = (0..n)
        .map(|i| {
            let mut seg = |dim: usize| -> Vec<Vec<f64>> {
                let k = rng.random_range(2..=5);
                (0..k).map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
            };
            let modalities = BTreeMap::from([("a".to_string(), seg(in_a)), ("b".to_string(), seg(in_b))]);
            let y = if same_label { label } else { rng.random_range(0..2u8) };
            SubjectRecord { subject_id: format!("s{i}"), group: "G".into(), label: y, modalities }
        })
        .collect();
    let cfg = TrainConfig {
        seed,
        pooled_modality: Some("a".into()),
        aligned_modality: Some("b".into()),
        encoder: EncoderArch { hidden_dims: hidden, output_dim: d, projection: rng.random_bool(0.3) },
        ..Default::default()
    };
    let model = Model::init(&batch, &cfg).expect("model");
    let weights = LossWeights {
        lambda: rng.random_range(0.5..30.0),
        mu: rng.random_range(0.5..30.0),
        nu: rng.random_range(0.1..3.0),
        gamma: rng.random_range(0.5..2.0),
        epsilon: 1e-4,
    };
    let stat_scope = if rng.random_bool(0.5) { StatScope::PerSubject } else { StatScope::Batch };
    Case { model, batch, loss: LossConfig { weights, pooling, include_diagonal: true, stat_scope } }
}

pub fn check(case: &Case, method: Method, epoch: u32) -> GradCheckReport {
    let refs: Vec<&SubjectRecord> = case.batch.iter().collect();
    let (mut g, bindings, _) = loss_graph(&case.model, &refs, method, epoch, &case.loss).expect("graph");
    finite_difference_check(&mut g, &bindings, STEP, TOLERANCE).expect("gradcheck")
}
