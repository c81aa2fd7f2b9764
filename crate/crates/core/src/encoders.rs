//! Per-modality segment encoders and segment pooling.
//!
//! Each modality's variable-length input arrives as a list of fixed-length
//! segments. A [`SegmentEncoder`] maps every segment independently to a
//! `d`-dimensional embedding; [`pool`] averages a subject's segment
//! embeddings into one vector.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adcore::{AdError, Axis, Bindings, Graph, NodeId, Tensor};
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("modality `{modality}`: no segments to encode")]
    EmptySegments { modality: String },
    #[error("modality `{modality}`: segment {index} has length {found}, expected {expected}")]
    FeatureLength { modality: String, index: usize, found: usize, expected: usize },
    #[error("invalid encoder spec: {0}")]
    Spec(String),
    #[error("encoders disagree on output dimension: {0}")]
    OutputDim(String),
    #[error(transparent)]
    Tensor(#[from] AdError),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
}

/// Architecture of one modality's encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub modality: String,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    /// Appends a linear `d -> d` projection after the output layer.
    #[serde(default)]
    pub projection: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_in x fan_out`
    pub weight: Tensor,
    /// `1 x fan_out`
    pub bias: Tensor,
}

impl Layer {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut seed::Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)).collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, w).expect("finite init"),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    fn apply(&self, x: &[f64], rows: usize, relu: bool) -> Vec<f64> {
        let (k, m) = self.weight.dims2();
        let mut out = crate::adcore::matmul_raw(x, self.weight.values(), rows, k, m);
        let b = self.bias.values();
        for r in 0..rows {
            for c in 0..m {
                let v = out[r * m + c] + b[c];
                out[r * m + c] = if relu { v.max(0.0) } else { v };
            }
        }
        out
    }
}

/// Multilayer perceptron with ReLU hidden layers and a linear output layer,
/// applied to each segment separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEncoder {
    pub spec: EncoderSpec,
    pub layers: Vec<Layer>,
    #[serde(default)]
    pub projection: Option<Layer>,
}

impl SegmentEncoder {
    /// Glorot-uniform weights and zero biases, seeded per modality.
    pub fn new(spec: EncoderSpec, seed: u64) -> Result<Self, EncoderError> {
        validate_spec(&spec)?;
        let mut rng = seed::rng(seed, &format!("encoder/{}", spec.modality));
        let mut dims = vec![spec.input_dim];
        dims.extend(&spec.hidden_dims);
        dims.push(spec.output_dim);
        let layers = dims.windows(2).map(|w| Layer::glorot(w[0], w[1], &mut rng)).collect();
        let projection = spec.projection.then(|| Layer::glorot(spec.output_dim, spec.output_dim, &mut rng));
        Ok(Self { spec, layers, projection })
    }

    /// Builds an encoder from explicit layers, checking they chain.
    pub fn from_layers(spec: EncoderSpec, layers: Vec<Layer>, projection: Option<Layer>) -> Result<Self, EncoderError> {
        validate_spec(&spec)?;
        let mut dims = vec![spec.input_dim];
        dims.extend(&spec.hidden_dims);
        dims.push(spec.output_dim);
        if layers.len() != dims.len() - 1 {
            return Err(EncoderError::Spec(format!("expected {} layers, got {}", dims.len() - 1, layers.len())));
        }
        for (i, (layer, w)) in layers.iter().zip(dims.windows(2)).enumerate() {
            if layer.weight.shape() != [w[0], w[1]] || layer.bias.shape() != [1, w[1]] {
                return Err(EncoderError::Spec(format!(
                    "layer {i}: weight {:?} / bias {:?} do not match {}->{}",
                    layer.weight.shape(),
                    layer.bias.shape(),
                    w[0],
                    w[1]
                )));
            }
        }
        if spec.projection != projection.is_some() {
            return Err(EncoderError::Spec("projection flag and projection layer disagree".into()));
        }
        Ok(Self { spec, layers, projection })
    }

    pub fn modality(&self) -> &str {
        &self.spec.modality
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    /// Named parameter tensors in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let m = &self.spec.modality;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("{m}/l{i}/w"), &layer.weight));
            out.push((format!("{m}/l{i}/b"), &layer.bias));
        }
        if let Some(p) = &self.projection {
            out.push((format!("{m}/proj/w"), &p.weight));
            out.push((format!("{m}/proj/b"), &p.bias));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let m = self.spec.modality.clone();
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("{m}/l{i}/w"), &mut layer.weight));
            out.push((format!("{m}/l{i}/b"), &mut layer.bias));
        }
        if let Some(p) = &mut self.projection {
            out.push((format!("{m}/proj/w"), &mut p.weight));
            out.push((format!("{m}/proj/b"), &mut p.bias));
        }
        out
    }

    pub fn bind_parameters(&self, bindings: &mut Bindings) {
        for (name, t) in self.parameters() {
            bindings.insert(name, t.clone());
        }
    }

    /// Records the encoder applied to the `N x input_dim` node `x`.
    pub fn build(&self, graph: &mut Graph, x: NodeId, trainable: bool) -> NodeId {
        let names: Vec<String> = self.parameters().into_iter().map(|(n, _)| n).collect();
        let mut h = x;
        let n_layers = self.layers.len();
        for i in 0..n_layers {
            let w = graph.input(names[2 * i].clone(), trainable);
            let b = graph.input(names[2 * i + 1].clone(), trainable);
            let hw = graph.matmul(h, w);
            let bb = graph.broadcast_as(b, hw);
            h = graph.add(hw, bb);
            if i + 1 < n_layers {
                h = graph.relu(h);
            }
        }
        if self.projection.is_some() {
            let w = graph.input(names[2 * n_layers].clone(), trainable);
            let b = graph.input(names[2 * n_layers + 1].clone(), trainable);
            let hw = graph.matmul(h, w);
            let bb = graph.broadcast_as(b, hw);
            h = graph.add(hw, bb);
        }
        h
    }

    fn check_segments(&self, segments: &[Vec<f64>]) -> Result<(), EncoderError> {
        if segments.is_empty() {
            return Err(EncoderError::EmptySegments { modality: self.spec.modality.clone() });
        }
        if let Some((index, seg)) = segments.iter().enumerate().find(|(_, s)| s.len() != self.spec.input_dim) {
            return Err(EncoderError::FeatureLength {
                modality: self.spec.modality.clone(),
                index,
                found: seg.len(),
                expected: self.spec.input_dim,
            });
        }
        Ok(())
    }

    /// Segment features as an `N x input_dim` tensor, validated.
    pub fn segment_matrix(&self, segments: &[Vec<f64>]) -> Result<Tensor, EncoderError> {
        self.check_segments(segments)?;
        Ok(Tensor::from_rows(segments)?)
    }

    /// Direct (graph-free) forward pass over an `N x input_dim` matrix.
    pub fn encode_matrix(&self, x: &Tensor) -> Result<Tensor, EncoderError> {
        let rows = x.rows();
        if x.cols() != self.spec.input_dim {
            return Err(EncoderError::FeatureLength {
                modality: self.spec.modality.clone(),
                index: 0,
                found: x.cols(),
                expected: self.spec.input_dim,
            });
        }
        let mut h = x.values().to_vec();
        let n_layers = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h, rows, i + 1 < n_layers);
        }
        if let Some(p) = &self.projection {
            h = p.apply(&h, rows, false);
        }
        let out = Tensor::matrix(rows, self.spec.output_dim, h)?;
        Ok(out)
    }

    /// Encodes each segment separately, preserving order.
    pub fn encode_segments(&self, subject_id: &str, segments: &[Vec<f64>]) -> Result<EmbeddingSet, EncoderError> {
        let x = self.segment_matrix(segments)?;
        let z = self.encode_matrix(&x)?;
        Ok(EmbeddingSet {
            subject_id: subject_id.to_string(),
            modality_name: self.spec.modality.clone(),
            segments: z.to_rows(),
            pooled: None,
        })
    }
}

fn validate_spec(spec: &EncoderSpec) -> Result<(), EncoderError> {
    if spec.input_dim == 0 || spec.output_dim == 0 || spec.hidden_dims.contains(&0) {
        return Err(EncoderError::Spec(format!("`{}`: all dimensions must be positive", spec.modality)));
    }
    Ok(())
}

/// Checks that every encoder emits the same embedding dimension.
pub fn check_shared_output_dim(encoders: &[SegmentEncoder]) -> Result<usize, EncoderError> {
    let Some(first) = encoders.first() else {
        return Err(EncoderError::OutputDim("no encoders".into()));
    };
    let d = first.output_dim();
    if let Some(bad) = encoders.iter().find(|e| e.output_dim() != d) {
        return Err(EncoderError::OutputDim(format!(
            "`{}` emits {} but `{}` emits {}",
            first.modality(),
            d,
            bad.modality(),
            bad.output_dim()
        )));
    }
    Ok(d)
}

/// Segment embeddings of one subject for one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub subject_id: String,
    pub modality_name: String,
    pub segments: Vec<Vec<f64>>,
    pub pooled: Option<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(subject_id: impl Into<String>, modality_name: impl Into<String>, segments: Vec<Vec<f64>>) -> Self {
        Self { subject_id: subject_id.into(), modality_name: modality_name.into(), segments, pooled: None }
    }

    pub fn dim(&self) -> usize {
        self.segments.first().map_or(0, Vec::len)
    }
}

/// Sum in a canonical order: values are sorted, then added pairwise. The
/// result depends only on the multiset of inputs.
pub fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    pairwise(values)
}

fn pairwise(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => {
            let mid = n / 2;
            pairwise(&v[..mid]) + pairwise(&v[mid..])
        }
    }
}

/// Componentwise mean of `segments` using [`canonical_sum`].
pub fn mean_vector(segments: &[Vec<f64>]) -> Vec<f64> {
    let d = segments.first().map_or(0, Vec::len);
    let n = segments.len() as f64;
    let mut column = Vec::with_capacity(segments.len());
    (0..d)
        .map(|j| {
            column.clear();
            column.extend(segments.iter().map(|s| s[j]));
            canonical_sum(&mut column) / n
        })
        .collect()
}

/// Average-pools the segment embeddings into `pooled`.
pub fn pool(mut set: EmbeddingSet) -> Result<EmbeddingSet, EncoderError> {
    if set.segments.is_empty() {
        return Err(EncoderError::EmptySegments { modality: set.modality_name.clone() });
    }
    set.pooled = Some(mean_vector(&set.segments));
    Ok(set)
}

/// Graph form of pooling: `1 x d` mean over the rows of `z`.
pub fn pool_node(graph: &mut Graph, z: NodeId) -> NodeId {
    graph.mean(z, Axis::Rows)
}

pub const CHECKPOINT_FORMAT: &str = "fairwell-checkpoint/1";

/// Self-describing model file: encoder shapes and parameters plus the hash
/// of the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config_hash: String,
    /// Modality on the pooled side of the cross-modal invariance term.
    pub pooled_modality: String,
    pub encoders: Vec<SegmentEncoder>,
}

impl Checkpoint {
    pub fn new(config_hash: String, pooled_modality: String, encoders: Vec<SegmentEncoder>) -> Self {
        Self { format: CHECKPOINT_FORMAT.into(), config_hash, pooled_modality, encoders }
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(EncoderError::Spec(format!("unknown checkpoint format `{}`", ckpt.format)));
        }
        for enc in &ckpt.encoders {
            SegmentEncoder::from_layers(enc.spec.clone(), enc.layers.clone(), enc.projection.clone())?;
        }
        check_shared_output_dim(&ckpt.encoders)?;
        Ok(ckpt)
    }

    pub fn encoder(&self, modality: &str) -> Option<&SegmentEncoder> {
        self.encoders.iter().find(|e| e.modality() == modality)
    }
}

/// Hex SHA-256 of any serializable value's canonical JSON.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    // serde_json::Value keeps object keys sorted, which fixes the byte layout.
    let canonical = serde_json::to_value(value).map(|v| v.to_string()).unwrap_or_default();
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Encodes and pools every modality of one subject.
pub fn embed_subject(
    encoders: &[SegmentEncoder],
    subject_id: &str,
    modalities: &BTreeMap<String, Vec<Vec<f64>>>,
) -> Result<Vec<EmbeddingSet>, EncoderError> {
    encoders
        .iter()
        .map(|enc| {
            let segs = modalities
                .get(enc.modality())
                .ok_or_else(|| EncoderError::EmptySegments { modality: enc.modality().to_string() })?;
            pool(enc.encode_segments(subject_id, segs)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(input: usize, hidden: Vec<usize>, out: usize) -> EncoderSpec {
        EncoderSpec { modality: "audio".into(), input_dim: input, hidden_dims: hidden, output_dim: out, projection: false }
    }

    fn identity_encoder(dim: usize) -> SegmentEncoder {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        let layer = Layer { weight: Tensor::matrix(dim, dim, w).unwrap(), bias: Tensor::zeros(&[1, dim]) };
        SegmentEncoder::from_layers(spec(dim, vec![], dim), vec![layer], None).unwrap()
    }

    #[test]
    fn identity_encoder_returns_input() {
        let enc = identity_encoder(3);
        let set = enc.encode_segments("s1", &[vec![0.5, -2.0, 7.0]]).unwrap();
        assert_eq!(set.segments, vec![vec![0.5, -2.0, 7.0]]);
    }

    #[test]
    fn one_embedding_per_segment() {
        let enc = SegmentEncoder::new(spec(4, vec![6], 5), 11).unwrap();
        let segs: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64; 4]).collect();
        let set = enc.encode_segments("s", &segs).unwrap();
        assert_eq!(set.segments.len(), 5);
        assert!(set.segments.iter().all(|z| z.len() == 5));
    }

    #[test]
    fn zero_weights_emit_bias() {
        let layer = Layer {
            weight: Tensor::zeros(&[2, 3]),
            bias: Tensor::matrix(1, 3, vec![0.1, -0.2, 0.3]).unwrap(),
        };
        let enc = SegmentEncoder::from_layers(spec(2, vec![], 3), vec![layer], None).unwrap();
        let set = enc.encode_segments("s", &[vec![1.0, 2.0], vec![-4.0, 9.0]]).unwrap();
        for z in &set.segments {
            assert_eq!(z, &vec![0.1, -0.2, 0.3]);
        }
    }

    #[test]
    fn empty_and_wrong_length_segments_rejected() {
        let enc = identity_encoder(2);
        assert!(matches!(enc.encode_segments("s", &[]), Err(EncoderError::EmptySegments { .. })));
        let err = enc.encode_segments("s", &[vec![1.0, 2.0], vec![1.0]]).unwrap_err();
        match err {
            EncoderError::FeatureLength { modality, index, .. } => {
                assert_eq!(modality, "audio");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pool_examples() {
        let set = EmbeddingSet::new("s", "m", vec![vec![1.0, 3.0], vec![3.0, 1.0]]);
        assert_eq!(pool(set).unwrap().pooled, Some(vec![2.0, 2.0]));
        let set = EmbeddingSet::new("s", "m", vec![vec![5.0, 6.0]]);
        assert_eq!(pool(set).unwrap().pooled, Some(vec![5.0, 6.0]));
        assert!(pool(EmbeddingSet::new("s", "m", vec![])).is_err());
    }

    #[test]
    fn pool_matches_naive_oracle_on_100_segments() {
        let mut rng = seed::rng(3, "pool-oracle");
        let segs: Vec<Vec<f64>> =
            (0..100).map(|_| (0..7).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
        let pooled = pool(EmbeddingSet::new("s", "m", segs.clone())).unwrap().pooled.unwrap();
        for j in 0..7 {
            let mut naive = 0.0;
            for s in &segs {
                naive += s[j];
            }
            naive /= 100.0;
            assert!((pooled[j] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_build_matches_direct_forward() {
        let enc = SegmentEncoder::new(
            EncoderSpec { modality: "eeg".into(), input_dim: 3, hidden_dims: vec![5, 4], output_dim: 2, projection: true },
            5,
        )
        .unwrap();
        let segs = vec![vec![0.3, -1.0, 2.0], vec![1.5, 0.1, -0.7]];
        let x = enc.segment_matrix(&segs).unwrap();
        let mut g = Graph::new();
        let xi = g.input("x", false);
        enc.build(&mut g, xi, true);
        let mut b = Bindings::new();
        b.insert("x".into(), x.clone());
        enc.bind_parameters(&mut b);
        let via_graph = g.forward(&b).unwrap();
        let direct = enc.encode_matrix(&x).unwrap();
        assert_eq!(via_graph.values(), direct.values());
    }

    #[test]
    fn output_dim_must_agree() {
        let a = SegmentEncoder::new(spec(3, vec![], 4), 1).unwrap();
        let mut s = spec(5, vec![2], 4);
        s.modality = "video".into();
        let b = SegmentEncoder::new(s.clone(), 1).unwrap();
        assert_eq!(check_shared_output_dim(&[a.clone(), b]).unwrap(), 4);
        s.output_dim = 3;
        let c = SegmentEncoder::new(s, 1).unwrap();
        assert!(check_shared_output_dim(&[a, c]).is_err());
    }

    #[test]
    fn glorot_bounds_respected() {
        let enc = SegmentEncoder::new(spec(10, vec![20], 6), 9).unwrap();
        let limit = (6.0f64 / 30.0).sqrt();
        assert!(enc.layers[0].weight.values().iter().all(|w| w.abs() <= limit));
        assert!(enc.layers[0].bias.values().iter().all(|&b| b == 0.0));
        assert_eq!(enc, SegmentEncoder::new(spec(10, vec![20], 6), 9).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let enc = SegmentEncoder::new(
            EncoderSpec { modality: "audio".into(), input_dim: 4, hidden_dims: vec![3], output_dim: 2, projection: true },
            42,
        )
        .unwrap();
        let mut s2 = spec(6, vec![], 2);
        s2.modality = "video".into();
        let enc2 = SegmentEncoder::new(s2, 42).unwrap();
        let ckpt = Checkpoint::new("abc".into(), "audio".into(), vec![enc, enc2]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        for (a, b) in ckpt.encoders.iter().zip(&back.encoders) {
            for ((_, ta), (_, tb)) in a.parameters().iter().zip(b.parameters()) {
                let bits_a: Vec<u64> = ta.values().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = tb.values().iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_a, bits_b);
            }
        }
        assert_eq!(back, ckpt);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn pooling_is_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..20),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut seed::rng(seed, "perm"));
            let a = pool(EmbeddingSet::new("s", "m", rows.clone())).unwrap().pooled.unwrap();
            let b = pool(EmbeddingSet::new("s", "m", shuffled)).unwrap().pooled.unwrap();
            prop_assert_eq!(&a, &b);
            // Mean identity within 1e-9 of the plain arithmetic mean.
            for j in 0..3 {
                let naive: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
                prop_assert!((a[j] - naive).abs() <= 1e-9 * naive.abs().max(1.0));
            }
        }

        #[test]
        fn batched_encoding_equals_one_at_a_time(
            rows in prop::collection::vec(prop::collection::vec(-5f64..5.0, 4), 1..8),
            seed in any::<u64>(),
        ) {
            let enc = SegmentEncoder::new(spec(4, vec![5], 3), seed).unwrap();
            let batched = enc.encode_segments("s", &rows).unwrap();
            for (i, r) in rows.iter().enumerate() {
                let single = enc.encode_segments("s", std::slice::from_ref(r)).unwrap();
                prop_assert_eq!(&single.segments[0], &batched.segments[i]);
            }
        }
    }
}
