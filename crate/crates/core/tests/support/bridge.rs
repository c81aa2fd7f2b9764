//! Conversions between the scalar oracle's batch type and the library's.

#![allow(dead_code)]

use std::collections::BTreeMap;

use fairwell::encoders::EmbeddingSet;
use fairwell::losses::{LossBreakdown, LossWeights, ModalityRoles, Pooling, SubjectEmbeddings};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::oracle::{Pool, Subj, W};

pub fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

pub fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize, same_label: bool) -> Vec<Subj> {
    (0..b)
        .map(|_| {
            let n1 = rng.random_range(2..7);
            let n2 = rng.random_range(2..7);
            let label = if same_label { 1 } else { rng.random_range(0..2) };
            Subj { label, m1: rows(rng, n1, d), m2: rows(rng, n2, d) }
        })
        .collect()
}

pub fn to_lib(batch: &[Subj]) -> Vec<SubjectEmbeddings> {
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let id = format!("s{i}");
            let mut sets = BTreeMap::new();
            sets.insert("a".to_string(), EmbeddingSet::new(&id, "a", s.m1.clone()));
            sets.insert("b".to_string(), EmbeddingSet::new(&id, "b", s.m2.clone()));
            SubjectEmbeddings { subject_id: id, label: s.label, sets }
        })
        .collect()
}

pub fn roles() -> ModalityRoles {
    ModalityRoles { pooled: "a".into(), aligned: "b".into() }
}

pub fn pool(p: Pooling) -> Pool {
    match p {
        Pooling::None => Pool::None,
        Pooling::Single => Pool::Single,
        Pooling::Double => Pool::Double,
    }
}

pub fn ow(w: &LossWeights) -> W {
    W { lambda: w.lambda, mu: w.mu, nu: w.nu, gamma: w.gamma, eps: w.epsilon }
}

pub fn parts(b: &LossBreakdown) -> [f64; 6] {
    [b.invariance, b.variance_m1, b.variance_m2, b.covariance_m1, b.covariance_m2, b.total]
}

