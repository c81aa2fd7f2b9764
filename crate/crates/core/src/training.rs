//! Self-supervised pretraining of the two segment encoders, an optional
//! supervised fine-tune, and the frozen-encoder linear probe.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adcore::{sigmoid, AdError, Axis, Bindings, Gradients, Graph, Tensor};
use crate::data::{self, BatchMode, BatchSampler, DataError, SubjectRecord};
use crate::encoders::{self, Checkpoint, EncoderError, EncoderSpec, SegmentEncoder};
use crate::fairness::{Prediction, PredictionSet};
use crate::losses::{
    build_batch_loss, LossConfig, LossError, LossNodes, LossRecord, LossWeights, Method, ModalityRoles, Pooling,
    StatScope, SubjectNodes,
};
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Graph(#[from] AdError),
    #[error("training diverged at epoch {epoch}, step {step}: {cause}")]
    Diverged { epoch: u32, step: u64, cause: String, last_good: Box<Model>, log: Vec<LossRecord> },
    #[error("probe training labels contain a single class ({0})")]
    SingleClass(u8),
    #[error("probe: {0}")]
    Probe(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    SgdMomentum { momentum: f64 },
    AdaptiveMoments { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::AdaptiveMoments { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Encoder shape shared by both modalities (input widths come from the data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderArch {
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub projection: bool,
}

impl Default for EncoderArch {
    fn default() -> Self {
        Self { hidden_dims: vec![32], output_dim: 8, projection: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub max_steps: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Stop once every gradient coordinate is below this.
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { max_steps: 5000, learning_rate: 0.5, l2: 1e-3, tolerance: 1e-7 }
    }
}

/// Supervised fine-tune of the encoders with a logistic head before probing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub enabled: bool,
    pub epochs: u32,
    pub learning_rate: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self { enabled: false, epochs: 10, learning_rate: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub pooling: Pooling,
    pub weights: LossWeights,
    pub epochs: u32,
    /// Subjects per batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Modality on the pooled side; defaults to the one with more segments on average.
    pub pooled_modality: Option<String>,
    /// The other modality; inferred when the data has exactly two.
    pub aligned_modality: Option<String>,
    pub include_diagonal: bool,
    pub stat_scope: StatScope,
    pub encoder: EncoderArch,
    pub probe: ProbeConfig,
    pub finetune: FineTuneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::M2,
            pooling: Pooling::Single,
            weights: LossWeights::default(),
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            pooled_modality: None,
            aligned_modality: None,
            include_diagonal: true,
            stat_scope: StatScope::PerSubject,
            encoder: EncoderArch::default(),
            probe: ProbeConfig::default(),
            finetune: FineTuneConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return err("epochs must be at least 1");
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return err("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1");
        }
        if self.pooling == Pooling::None && self.method != Method::Vicreg {
            return err("pooling=none is only valid with method=vicreg");
        }
        self.weights.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        match self.optimizer {
            OptimizerConfig::SgdMomentum { momentum } if !(0.0..1.0).contains(&momentum) => {
                return err("momentum must lie in [0, 1)")
            }
            OptimizerConfig::AdaptiveMoments { beta1, beta2, epsilon }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(epsilon > 0.0) =>
            {
                return err("adaptive-moment decays must lie in [0, 1) and epsilon must be positive")
            }
            _ => {}
        }
        if self.encoder.output_dim == 0 || self.encoder.hidden_dims.contains(&0) {
            return err("encoder dimensions must be positive");
        }
        if self.probe.max_steps == 0 || !(self.probe.learning_rate > 0.0) || self.probe.l2 < 0.0 {
            return err("probe needs max_steps >= 1, learning_rate > 0 and l2 >= 0");
        }
        if self.finetune.enabled && (self.finetune.epochs == 0 || !(self.finetune.learning_rate > 0.0)) {
            return err("fine-tune needs epochs >= 1 and learning_rate > 0");
        }
        if let (Some(a), Some(b)) = (&self.pooled_modality, &self.aligned_modality) {
            if a == b {
                return err("pooled and aligned modalities must differ");
            }
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            weights: self.weights,
            pooling: self.pooling,
            include_diagonal: self.include_diagonal,
            stat_scope: self.stat_scope,
        }
    }

    /// Fixes the modality roles against a dataset.
    pub fn resolve_roles(&self, records: &[SubjectRecord]) -> Result<ModalityRoles, TrainError> {
        let dims = data::feature_dims(records);
        let pooled = match &self.pooled_modality {
            Some(m) => m.clone(),
            None => data::default_pooled_modality(records).ok_or_else(|| TrainError::Config("dataset has no modalities".into()))?,
        };
        let aligned = match &self.aligned_modality {
            Some(m) => m.clone(),
            None => {
                let others: Vec<&String> = dims.keys().filter(|m| **m != pooled).collect();
                match others.as_slice() {
                    [one] => (*one).clone(),
                    _ => {
                        return Err(TrainError::Config(format!(
                            "cannot infer the aligned modality from {:?}; set aligned_modality",
                            dims.keys().collect::<Vec<_>>()
                        )))
                    }
                }
            }
        };
        if pooled == aligned {
            return Err(TrainError::Config("pooled and aligned modalities must differ".into()));
        }
        for m in [&pooled, &aligned] {
            if !dims.contains_key(m) {
                return Err(TrainError::Config(format!("modality `{m}` not present in the data")));
            }
        }
        Ok(ModalityRoles { pooled, aligned })
    }
}

/// The pair of encoders with their modality roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub roles: ModalityRoles,
    pub pooled: SegmentEncoder,
    pub aligned: SegmentEncoder,
}

impl Model {
    pub fn init(records: &[SubjectRecord], cfg: &TrainConfig) -> Result<Self, TrainError> {
        let roles = cfg.resolve_roles(records)?;
        let dims = data::feature_dims(records);
        let spec = |m: &str| EncoderSpec {
            modality: m.to_string(),
            input_dim: dims[m],
            hidden_dims: cfg.encoder.hidden_dims.clone(),
            output_dim: cfg.encoder.output_dim,
            projection: cfg.encoder.projection,
        };
        let pooled = SegmentEncoder::new(spec(&roles.pooled), cfg.seed)?;
        let aligned = SegmentEncoder::new(spec(&roles.aligned), cfg.seed)?;
        Ok(Self { roles, pooled, aligned })
    }

    pub fn dim(&self) -> usize {
        self.pooled.output_dim()
    }

    pub fn bindings(&self) -> Bindings {
        let mut b = Bindings::new();
        self.pooled.bind_parameters(&mut b);
        self.aligned.bind_parameters(&mut b);
        b
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut p = self.pooled.parameters_mut();
        p.extend(self.aligned.parameters_mut());
        p
    }

    pub fn parameter_count(&self) -> usize {
        self.bindings().values().map(Tensor::len).sum()
    }

    pub fn to_checkpoint(&self, config_hash: String) -> Checkpoint {
        Checkpoint::new(config_hash, self.roles.pooled.clone(), vec![self.pooled.clone(), self.aligned.clone()])
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let pooled = ckpt
            .encoder(&ckpt.pooled_modality)
            .ok_or_else(|| TrainError::Config(format!("checkpoint lacks pooled encoder `{}`", ckpt.pooled_modality)))?
            .clone();
        let others: Vec<&SegmentEncoder> = ckpt.encoders.iter().filter(|e| e.modality() != ckpt.pooled_modality).collect();
        let [aligned] = others.as_slice() else {
            return Err(TrainError::Config(format!("checkpoint must hold exactly two encoders, found {}", ckpt.encoders.len())));
        };
        let roles = ModalityRoles { pooled: pooled.modality().to_string(), aligned: aligned.modality().to_string() };
        Ok(Self { roles, pooled, aligned: (*aligned).clone() })
    }

    /// Pooled embeddings of both modalities, pooled side first (`2d` values).
    pub fn features(&self, record: &SubjectRecord) -> Result<Vec<f64>, TrainError> {
        let mut out = Vec::with_capacity(2 * self.dim());
        for enc in [&self.pooled, &self.aligned] {
            let set = enc.encode_segments(&record.subject_id, record.segments(enc.modality())?)?;
            out.extend(encoders::pool(set)?.pooled.expect("pooled"));
        }
        Ok(out)
    }

    /// Mean over dimensions of the per-dimension std of segment embeddings,
    /// per modality.
    pub fn embedding_std(&self, records: &[SubjectRecord]) -> Result<BTreeMap<String, f64>, TrainError> {
        let mut out = BTreeMap::new();
        for enc in [&self.pooled, &self.aligned] {
            let mut rows = Vec::new();
            for r in records {
                rows.extend(enc.encode_segments(&r.subject_id, r.segments(enc.modality())?)?.segments);
            }
            let n = rows.len();
            if n < 2 {
                return Err(TrainError::Config("need at least two segments to measure embedding spread".into()));
            }
            let d = enc.output_dim();
            let mut total = 0.0;
            for j in 0..d {
                let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
                let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
                total += var.sqrt();
            }
            out.insert(enc.modality().to_string(), total / d as f64);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Optimizers

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    learning_rate: f64,
    t: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, learning_rate: f64) -> Self {
        Self { config, learning_rate, t: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (String, &'a mut Tensor)>, grads: &Gradients) {
        self.t += 1;
        let lr = self.learning_rate;
        for (name, p) in params {
            let Some(g) = grads.get(&name) else { continue };
            let g = g.values();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            match self.config {
                OptimizerConfig::SgdMomentum { momentum } => {
                    for ((w, v), gi) in p.values_mut().iter_mut().zip(m.iter_mut()).zip(g) {
                        *v = momentum * *v + gi;
                        *w -= lr * *v;
                    }
                }
                OptimizerConfig::AdaptiveMoments { beta1, beta2, epsilon } => {
                    let v = self.second.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - beta1.powi(self.t as i32);
                    let c2 = 1.0 - beta2.powi(self.t as i32);
                    for (((w, mi), vi), gi) in p.values_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + epsilon);
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pretraining

/// Stacks the batch's segments of `modality` into one matrix, returning the
/// per-subject row counts.
fn stacked_segments(batch: &[&SubjectRecord], modality: &str) -> Result<(Tensor, Vec<usize>), TrainError> {
    let mut rows = Vec::new();
    let mut counts = Vec::with_capacity(batch.len());
    for r in batch {
        let segs = r.segments(modality)?;
        counts.push(segs.len());
        rows.extend_from_slice(segs);
    }
    Ok((Tensor::from_rows(&rows)?, counts))
}

/// Records the batch loss with trainable encoder parameters. Returns the
/// graph, the parameter bindings, and the loss handles.
pub fn loss_graph(
    model: &Model,
    batch: &[&SubjectRecord],
    method: Method,
    epoch: u32,
    cfg: &LossConfig,
) -> Result<(Graph, Bindings, LossNodes), TrainError> {
    let mut g = Graph::new();
    let mut sides = Vec::with_capacity(2);
    for enc in [&model.pooled, &model.aligned] {
        let (x, counts) = stacked_segments(batch, enc.modality())?;
        if x.cols() != enc.spec.input_dim {
            return Err(EncoderError::FeatureLength {
                modality: enc.modality().to_string(),
                index: 0,
                found: x.cols(),
                expected: enc.spec.input_dim,
            }
            .into());
        }
        let xn = g.constant(x);
        let z = enc.build(&mut g, xn, true);
        let mut start = 0;
        let mut parts = Vec::with_capacity(counts.len());
        for n in counts {
            parts.push((g.slice_rows(z, start, n), n));
            start += n;
        }
        sides.push(parts);
    }
    let subjects: Vec<SubjectNodes> = batch
        .iter()
        .enumerate()
        .map(|(i, r)| SubjectNodes {
            subject_id: r.subject_id.clone(),
            label: r.label,
            z1: sides[0][i].0,
            n1: sides[0][i].1,
            z2: sides[1][i].0,
            n2: sides[1][i].1,
        })
        .collect();
    let nodes = build_batch_loss(&mut g, &subjects, model.dim(), method, epoch, cfg)?;
    Ok((g, model.bindings(), nodes))
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: Model,
    pub log: Vec<LossRecord>,
}

/// Pretrains from a fresh initialization.
pub fn pretrain(records: &[SubjectRecord], cfg: &TrainConfig) -> Result<Pretrained, TrainError> {
    cfg.validate()?;
    let model = Model::init(records, cfg)?;
    pretrain_from(model, records, cfg)
}

pub fn pretrain_from(mut model: Model, records: &[SubjectRecord], cfg: &TrainConfig) -> Result<Pretrained, TrainError> {
    cfg.validate()?;
    data::require_modalities(records, &[&model.roles.pooled, &model.roles.aligned])?;
    let loss_cfg = cfg.loss_config();
    let sampler = BatchSampler::new(records.iter().map(|r| r.label).collect(), cfg.batch_size, seed::derive(cfg.seed, "pretrain"))?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut log = Vec::new();
    let mut step: u64 = 0;
    for epoch in 1..=cfg.epochs {
        let mode = if cfg.method.needs_same_label(epoch) { BatchMode::SameLabel } else { BatchMode::Unconstrained };
        for batch in sampler.epoch(epoch, mode)? {
            let recs: Vec<&SubjectRecord> = batch.iter().map(|&i| &records[i]).collect();
            let (mut g, bindings, nodes) = loss_graph(&model, &recs, cfg.method, epoch, &loss_cfg)?;
            let diverged = |cause: String, model: &Model, log: &[LossRecord]| TrainError::Diverged {
                epoch,
                step,
                cause,
                last_good: Box::new(model.clone()),
                log: log.to_vec(),
            };
            let out = match g.forward(&bindings) {
                Ok(out) => out,
                Err(e @ AdError::NumericInstability { .. }) => return Err(diverged(e.to_string(), &model, &log)),
                Err(e) => return Err(e.into()),
            };
            let grads = g.backward(&Tensor::full(out.shape(), 1.0))?;
            if grads.values().any(|t| !t.is_finite()) {
                return Err(diverged("non-finite gradient".into(), &model, &log));
            }
            let breakdown = nodes.breakdown(&g).expect("forward ran");
            let snapshot = model.clone();
            opt.step(model.parameters_mut(), &grads);
            if model.bindings().values().any(|t| !t.is_finite()) {
                return Err(diverged("non-finite parameters after update".into(), &snapshot, &log));
            }
            log.push(LossRecord { epoch, step, breakdown });
            step += 1;
        }
    }
    Ok(Pretrained { model, log })
}

/// Mean logged total per epoch, in epoch order.
pub fn epoch_means(log: &[LossRecord]) -> Vec<(u32, f64)> {
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for r in log {
        let e = acc.entry(r.epoch).or_default();
        e.0 += r.breakdown.total;
        e.1 += 1;
    }
    acc.into_iter().map(|(e, (s, n))| (e, s / n as f64)).collect()
}

// ---------------------------------------------------------------------------
// Supervised fine-tune

/// Trains the encoders jointly with a logistic head on pooled embeddings,
/// minimizing binary cross-entropy. The head is discarded afterwards.
pub fn fine_tune(mut model: Model, records: &[SubjectRecord], cfg: &TrainConfig) -> Result<Model, TrainError> {
    let ft = &cfg.finetune;
    data::require_modalities(records, &[&model.roles.pooled, &model.roles.aligned])?;
    let d = model.dim();
    let mut rng = seed::rng(cfg.seed, "finetune/head");
    let limit = (6.0 / (d + 1) as f64).sqrt();
    let mut head = Bindings::new();
    for name in ["head/w1", "head/w2"] {
        let w = (0..d).map(|_| rng.random_range(-limit..=limit)).collect();
        head.insert(name.to_string(), Tensor::matrix(d, 1, w)?);
    }
    head.insert("head/b".into(), Tensor::zeros(&[1, 1]));
    let sampler = BatchSampler::new(records.iter().map(|r| r.label).collect(), cfg.batch_size, seed::derive(cfg.seed, "finetune"))?;
    let mut opt = Optimizer::new(cfg.optimizer, ft.learning_rate);
    let mut step = 0u64;
    for epoch in 1..=ft.epochs {
        for batch in sampler.epoch(epoch, BatchMode::Unconstrained)? {
            let recs: Vec<&SubjectRecord> = batch.iter().map(|&i| &records[i]).collect();
            let mut g = Graph::new();
            let mut pooled_sides = Vec::new();
            for enc in [&model.pooled, &model.aligned] {
                let (x, counts) = stacked_segments(&recs, enc.modality())?;
                let xn = g.constant(x);
                let z = enc.build(&mut g, xn, true);
                let mut start = 0;
                let mut rows = Vec::new();
                for n in counts {
                    let s = g.slice_rows(z, start, n);
                    rows.push(g.mean(s, Axis::Rows));
                    start += n;
                }
                pooled_sides.push(g.concat_rows(rows));
            }
            let w1 = g.input("head/w1", true);
            let w2 = g.input("head/w2", true);
            let b = g.input("head/b", true);
            let l1 = g.matmul(pooled_sides[0], w1);
            let l2 = g.matmul(pooled_sides[1], w2);
            let l = g.add(l1, l2);
            let bb = g.broadcast_as(b, l);
            let logits = g.add(l, bb);
            let y = g.constant(Tensor::matrix(recs.len(), 1, recs.iter().map(|r| f64::from(r.label)).collect())?);
            let sp = g.softplus(logits);
            let ly = g.mul(logits, y);
            let bce = g.sub(sp, ly);
            let loss = g.mean(bce, Axis::All);
            g.set_output(loss);
            let mut bindings = model.bindings();
            bindings.extend(head.clone());
            let out = g.forward(&bindings).map_err(|e| match e {
                AdError::NumericInstability { .. } => TrainError::Diverged {
                    epoch,
                    step,
                    cause: e.to_string(),
                    last_good: Box::new(model.clone()),
                    log: Vec::new(),
                },
                other => other.into(),
            })?;
            let grads = g.backward(&Tensor::full(out.shape(), 1.0))?;
            let mut params = model.parameters_mut();
            params.extend(head.iter_mut().map(|(k, v)| (k.clone(), v)));
            opt.step(params, &grads);
            step += 1;
        }
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Linear probe

/// Logistic regression on raw features: `score = sigmoid(w·x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn score(&self, x: &[f64]) -> f64 {
        sigmoid(self.weight.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias)
    }
}

/// L2-regularized logistic regression by full-batch gradient descent on
/// standardized features; the standardization is folded back into the
/// returned weights.
pub fn fit_logistic(x: &[Vec<f64>], y: &[u8], cfg: &ProbeConfig, seed: u64) -> Result<LinearModel, TrainError> {
    if x.is_empty() || x.len() != y.len() {
        return Err(TrainError::Probe(format!("need matching non-empty features and labels ({} vs {})", x.len(), y.len())));
    }
    if let Some(&first) = y.first() {
        if y.iter().all(|&v| v == first) {
            return Err(TrainError::SingleClass(first));
        }
    }
    let n = x.len();
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(TrainError::Probe("ragged feature rows".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let s = (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let z: Vec<Vec<f64>> = x.iter().map(|r| (0..d).map(|j| (r[j] - mean[j]) / scale[j]).collect()).collect();
    let mut rng = seed::rng(seed, "probe/init");
    let mut w: Vec<f64> = (0..d).map(|_| rng.random_range(-0.01..0.01)).collect();
    let mut b = 0.0;
    let mut gw = vec![0.0; d];
    for _ in 0..cfg.max_steps {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (row, &label) in z.iter().zip(y) {
            let s = sigmoid(w.iter().zip(row).map(|(a, v)| a * v).sum::<f64>() + b);
            let r = s - f64::from(label);
            for (g, v) in gw.iter_mut().zip(row) {
                *g += r * v;
            }
            gb += r;
        }
        let mut worst = (gb / n as f64).abs();
        for (g, wj) in gw.iter_mut().zip(&w) {
            *g = *g / n as f64 + cfg.l2 * wj;
            worst = worst.max(g.abs());
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= cfg.learning_rate * g;
        }
        b -= cfg.learning_rate * gb / n as f64;
        if worst < cfg.tolerance {
            break;
        }
    }
    let weight: Vec<f64> = (0..d).map(|j| w[j] / scale[j]).collect();
    let bias = b - (0..d).map(|j| w[j] * mean[j] / scale[j]).sum::<f64>();
    Ok(LinearModel { weight, bias })
}

/// Threshold maximizing F1 of `score >= t` over the given scores. Ties prefer
/// higher accuracy, then the larger threshold. Falls back to 0.5 without
/// positives.
pub fn choose_threshold(scores: &[f64], labels: &[u8]) -> f64 {
    if scores.is_empty() || !labels.contains(&1) {
        return 0.5;
    }
    let mut cands: Vec<f64> = scores.to_vec();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0.5);
    for &t in &cands {
        let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
        for (&s, &y) in scores.iter().zip(labels) {
            let p = u8::from(s >= t);
            correct += usize::from(p == y);
            match (y, p) {
                (1, 1) => tp += 1,
                (0, 1) => fp += 1,
                (1, 0) => fn_ += 1,
                _ => {}
            }
        }
        let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        let acc = correct as f64 / scores.len() as f64;
        if (f1, acc) >= (best.0, best.1) {
            best = (f1, acc, t);
        }
    }
    best.2.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    /// Over the concatenated pooled embeddings (pooled modality first).
    pub weight: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
}

impl Probe {
    pub fn score(&self, features: &[f64]) -> f64 {
        LinearModel { weight: self.weight.clone(), bias: self.bias }.score(features)
    }
}

/// Fits the probe on `train` and picks its threshold on `val`.
pub fn fit_probe(model: &Model, train: &[SubjectRecord], val: &[SubjectRecord], cfg: &ProbeConfig, seed: u64) -> Result<Probe, TrainError> {
    let x = train.iter().map(|r| model.features(r)).collect::<Result<Vec<_>, _>>()?;
    let y: Vec<u8> = train.iter().map(|r| r.label).collect();
    let lin = fit_logistic(&x, &y, cfg, seed)?;
    let (scores, labels): (Vec<f64>, Vec<u8>) = val
        .iter()
        .map(|r| model.features(r).map(|f| (lin.score(&f), r.label)))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .unzip();
    let threshold = choose_threshold(&scores, &labels);
    Ok(Probe { weight: lin.weight, bias: lin.bias, threshold })
}

/// One prediction per record, in input order.
pub fn predict(model: &Model, probe: &Probe, records: &[SubjectRecord]) -> Result<PredictionSet, TrainError> {
    let rows = records
        .iter()
        .map(|r| {
            let score = probe.score(&model.features(r)?);
            Ok(Prediction {
                subject_id: r.subject_id.clone(),
                group: r.group.clone(),
                label: r.label,
                score,
                pred: u8::from(score >= probe.threshold),
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    PredictionSet::new(rows).map_err(|e| TrainError::Probe(e.to_string()))
}
