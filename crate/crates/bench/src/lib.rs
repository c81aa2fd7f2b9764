//! Shared fixtures for the benchmarks.

use fairwell::data::{generate, SubjectRecord, SynthConfig};
use fairwell::fairness::{Prediction, PredictionSet};
use fairwell::training::{Model, TrainConfig};

/// A synthetic dataset and a freshly initialized model over it.
pub fn fixture(n_subjects: usize) -> (Vec<SubjectRecord>, Model, TrainConfig) {
    let records = generate(&SynthConfig { n_subjects, seed: 1, ..Default::default() }).expect("default synth config is valid");
    let cfg = TrainConfig::default();
    let model = Model::init(&records, &cfg).expect("model init");
    (records, model, cfg)
}

/// Deterministic, well-spread points in the unit square.
pub fn scatter(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let x = (i as f64 * 0.618_033_988_749_895).fract();
            let y = (i as f64 * 0.754_877_666_246_692_7).fract();
            (x, y)
        })
        .collect()
}

pub fn predictions(n: usize) -> PredictionSet {
    let rows = scatter(n)
        .into_iter()
        .enumerate()
        .map(|(i, (s, t))| Prediction {
            subject_id: format!("s{i}"),
            group: if t < 0.34 { "M" } else { "F" }.to_string(),
            label: u8::from((s + t) > 1.0),
            score: s,
            pred: u8::from(s >= 0.5),
        })
        .collect();
    PredictionSet::new(rows).expect("bits are valid")
}
