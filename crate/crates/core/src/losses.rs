//! VICReg regularizers and their subject-aware batch variants.
//!
//! Every term is recorded on an [`adcore::Graph`](crate::adcore::Graph) so
//! the same code path serves direct evaluation (the plain functions at the
//! bottom of this module, which wrap embeddings in constants) and training
//! (where the embeddings come out of the encoders).
//!
//! Batch variants, for a batch `B` of subjects with a pooled modality `m1`
//! and an aligned modality `m2`:
//!
//! * `m1`: each subject's pooled `m1` vector is pulled towards its own `m2`
//!   segments; variance/covariance terms per subject; everything averaged
//!   over `B`.
//! * `m2`: the invariance term runs over all ordered subject pairs `(i, k)`,
//!   pairing subject `i`'s pooled `m1` with subject `k`'s `m2` segments, and
//!   the sum is divided by `|B|^2`.
//! * `m3`: arithmetic identical to `m2`, but every subject in the batch must
//!   share one label.
//! * `m4`: `m2` on odd epochs, `m3` on even epochs.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adcore::{AdError, Axis, Graph, NodeId, Tensor};
use crate::encoders::EmbeddingSet;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("{what}: need at least {need} embeddings, got {got}")]
    TooFewSamples { what: String, need: usize, got: usize },
    #[error("paired sets differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("empty embedding set: {0}")]
    Empty(String),
    #[error("subject `{subject}` is missing modality `{modality}`")]
    MissingModality { subject: String, modality: String },
    #[error("same-label constraint violated: batch mixes labels {0:?}")]
    MixedLabels(Vec<u8>),
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Graph(#[from] AdError),
}

/// Loss weights and the variance-term hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Invariance weight.
    pub lambda: f64,
    /// Variance weight.
    pub mu: f64,
    /// Covariance weight.
    pub nu: f64,
    /// Target standard deviation of every embedding dimension.
    pub gamma: f64,
    /// Added under the square root of the variance.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 25.0, mu: 25.0, nu: 1.0, gamma: 1.0, epsilon: 1e-4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [self.lambda, self.mu, self.nu, self.gamma, self.epsilon];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(LossError::Weights("weights must be finite".into()));
        }
        if self.lambda < 0.0 || self.mu < 0.0 || self.nu < 0.0 {
            return Err(LossError::Weights("lambda, mu, nu must be non-negative".into()));
        }
        if self.gamma <= 0.0 || self.epsilon <= 0.0 {
            return Err(LossError::Weights("gamma and epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Vicreg,
    M1,
    M2,
    M3,
    M4,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Vicreg, Method::M1, Method::M2, Method::M3, Method::M4];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vicreg => "vicreg",
            Method::M1 => "m1",
            Method::M2 => "m2",
            Method::M3 => "m3",
            Method::M4 => "m4",
        }
    }

    /// The method actually applied at `epoch` (only `m4` depends on it).
    pub fn resolve(self, epoch: u32) -> Method {
        match self {
            Method::M4 => select_m4(epoch),
            other => other,
        }
    }

    /// Whether batches for this method (at `epoch`) must be single-label.
    pub fn needs_same_label(self, epoch: u32) -> bool {
        self.resolve(epoch) == Method::M3
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown method `{s}` (expected vicreg, m1, m2, m3 or m4)"))
    }
}

/// Epoch-parity schedule of the alternating method: odd epochs use `m2`,
/// even epochs `m3`. Epochs are 1-based.
pub fn select_m4(epoch: u32) -> Method {
    debug_assert!(epoch >= 1, "epochs are 1-based");
    if epoch % 2 == 1 {
        Method::M2
    } else {
        Method::M3
    }
}

/// How the cross-modal invariance term treats segment sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Segments are paired index-wise (truncated to the shorter set).
    None,
    /// The pooled `m1` vector is compared with every `m2` segment.
    Single,
    /// Pooled `m1` against pooled `m2`.
    Double,
}

impl Pooling {
    pub const ALL: [Pooling; 3] = [Pooling::None, Pooling::Single, Pooling::Double];

    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::None => "none",
            Pooling::Single => "single",
            Pooling::Double => "double",
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Pooling::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown pooling `{s}` (expected none, single or double)"))
    }
}

/// Set over which variance and covariance are computed in `m1`–`m4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatScope {
    /// Each subject's own segment set.
    #[default]
    PerSubject,
    /// All segments of the batch, per modality.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub pooling: Pooling,
    /// Include the `i == k` pairs in the `m2`/`m3` double sum.
    pub include_diagonal: bool,
    pub stat_scope: StatScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { weights: LossWeights::default(), pooling: Pooling::Single, include_diagonal: true, stat_scope: StatScope::PerSubject }
    }
}

/// Loss components for one batch. Components are raw (unweighted) averages;
/// `total` applies `weights`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub invariance: f64,
    pub variance_m1: f64,
    pub variance_m2: f64,
    pub covariance_m1: f64,
    pub covariance_m2: f64,
    pub total: f64,
    /// Method actually applied (`m4` is resolved to `m2`/`m3`).
    pub method: Method,
    pub epoch: u32,
    /// Weights used for `total`; plain VICReg carries `lambda = 1`.
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// `lambda * I + mu * (V1 + V2) + nu * (C1 + C2)` from the stored parts.
    pub fn recombined_total(&self) -> f64 {
        let w = &self.weights;
        w.lambda * self.invariance
            + w.mu * (self.variance_m1 + self.variance_m2)
            + w.nu * (self.covariance_m1 + self.covariance_m2)
    }
}

// ---------------------------------------------------------------------------
// Graph builders

/// `N x d` node minus its column means.
fn centered(g: &mut Graph, z: NodeId) -> NodeId {
    let mean = g.mean(z, Axis::Rows);
    let mb = g.broadcast_as(mean, z);
    g.sub(z, mb)
}

/// Hinge on the per-dimension standard deviation of the `n x d` node `z`,
/// averaged over dimensions. Uses the unbiased (`n - 1`) variance.
pub fn variance_term(g: &mut Graph, z: NodeId, n: usize, gamma: f64, eps: f64) -> NodeId {
    debug_assert!(n >= 2);
    let c = centered(g, z);
    let sq = g.square(c);
    let col = g.sum(sq, Axis::Rows);
    let var = g.scale(col, 1.0 / (n as f64 - 1.0));
    let std = g.sqrt_eps(var, eps);
    let neg = g.scale(std, -1.0);
    let gap = g.offset(neg, gamma);
    let hinge = g.max_const(gap, 0.0);
    g.mean(hinge, Axis::All)
}

/// Sum of squared off-diagonal entries of the unbiased covariance matrix of
/// the `n x d` node `z`, divided by `d`.
pub fn covariance_term(g: &mut Graph, z: NodeId, n: usize, d: usize) -> NodeId {
    debug_assert!(n >= 2);
    let c = centered(g, z);
    let ct = g.transpose(c);
    let gram = g.matmul(ct, c);
    let cov = g.scale(gram, 1.0 / (n as f64 - 1.0));
    let mut mask = vec![1.0; d * d];
    for j in 0..d {
        mask[j * d + j] = 0.0;
    }
    let mask = g.constant(Tensor::matrix(d, d, mask).expect("finite mask"));
    let off = g.mul(cov, mask);
    let sq = g.square(off);
    let total = g.sum(sq, Axis::All);
    g.scale(total, 1.0 / d as f64)
}

/// Mean squared Euclidean distance between paired rows of two `n x d` nodes.
pub fn invariance_term(g: &mut Graph, a: NodeId, b: NodeId, n: usize) -> NodeId {
    let diff = g.sub(a, b);
    let sq = g.square(diff);
    let total = g.sum(sq, Axis::All);
    g.scale(total, 1.0 / n as f64)
}

/// Mean squared distance from the `1 x d` pooled node to each of the `n`
/// rows of `segments`.
pub fn pooled_invariance_term(g: &mut Graph, pooled: NodeId, segments: NodeId, n: usize) -> NodeId {
    let pb = g.broadcast_as(pooled, segments);
    invariance_term(g, pb, segments, n)
}

/// Mean of scalar nodes.
fn mean_of(g: &mut Graph, parts: Vec<NodeId>) -> NodeId {
    if parts.len() == 1 {
        return parts[0];
    }
    let stacked = g.concat_rows(parts);
    g.mean(stacked, Axis::All)
}

fn weighted_total(g: &mut Graph, parts: &LossParts, w: &LossWeights) -> NodeId {
    let inv = g.scale(parts.invariance, w.lambda);
    let v = g.add(parts.variance_m1, parts.variance_m2);
    let v = g.scale(v, w.mu);
    let c = g.add(parts.covariance_m1, parts.covariance_m2);
    let c = g.scale(c, w.nu);
    let ic = g.add(inv, v);
    g.add(ic, c)
}

struct LossParts {
    invariance: NodeId,
    variance_m1: NodeId,
    variance_m2: NodeId,
    covariance_m1: NodeId,
    covariance_m2: NodeId,
}

/// Graph handles for one subject's encoded segments.
#[derive(Debug, Clone)]
pub struct SubjectNodes {
    pub subject_id: String,
    pub label: u8,
    /// `n1 x d` segment embeddings of the pooled modality.
    pub z1: NodeId,
    pub n1: usize,
    /// `n2 x d` segment embeddings of the aligned modality.
    pub z2: NodeId,
    pub n2: usize,
}

/// Recorded loss; read values after a forward pass with [`LossNodes::breakdown`].
#[derive(Debug, Clone)]
pub struct LossNodes {
    pub invariance: NodeId,
    pub variance_m1: NodeId,
    pub variance_m2: NodeId,
    pub covariance_m1: NodeId,
    pub covariance_m2: NodeId,
    pub total: NodeId,
    pub method: Method,
    pub epoch: u32,
    pub weights: LossWeights,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> Option<LossBreakdown> {
        let v = |id: NodeId| g.value(id).and_then(Tensor::item);
        Some(LossBreakdown {
            invariance: v(self.invariance)?,
            variance_m1: v(self.variance_m1)?,
            variance_m2: v(self.variance_m2)?,
            covariance_m1: v(self.covariance_m1)?,
            covariance_m2: v(self.covariance_m2)?,
            total: v(self.total)?,
            method: self.method,
            epoch: self.epoch,
            weights: self.weights,
        })
    }
}

struct PairBuilder<'a> {
    subjects: &'a [SubjectNodes],
    pooled1: Vec<Option<NodeId>>,
    pooled2: Vec<Option<NodeId>>,
}

impl<'a> PairBuilder<'a> {
    fn new(subjects: &'a [SubjectNodes]) -> Self {
        Self { subjects, pooled1: vec![None; subjects.len()], pooled2: vec![None; subjects.len()] }
    }

    fn pooled1(&mut self, g: &mut Graph, i: usize) -> NodeId {
        *self.pooled1[i].get_or_insert_with(|| g.mean(self.subjects[i].z1, Axis::Rows))
    }

    fn pooled2(&mut self, g: &mut Graph, k: usize) -> NodeId {
        *self.pooled2[k].get_or_insert_with(|| g.mean(self.subjects[k].z2, Axis::Rows))
    }

    /// Invariance between subject `i`'s pooled-side and subject `k`'s
    /// aligned-side embeddings.
    fn invariance(&mut self, g: &mut Graph, i: usize, k: usize, pooling: Pooling) -> NodeId {
        let (si, sk) = (&self.subjects[i], &self.subjects[k]);
        match pooling {
            Pooling::None => {
                let n = si.n1.min(sk.n2);
                let a = if n == si.n1 { si.z1 } else { g.slice_rows(si.z1, 0, n) };
                let b = if n == sk.n2 { sk.z2 } else { g.slice_rows(sk.z2, 0, n) };
                invariance_term(g, a, b, n)
            }
            Pooling::Single => {
                let (z2, n2) = (sk.z2, sk.n2);
                let p = self.pooled1(g, i);
                pooled_invariance_term(g, p, z2, n2)
            }
            Pooling::Double => {
                let p1 = self.pooled1(g, i);
                let p2 = self.pooled2(g, k);
                invariance_term(g, p1, p2, 1)
            }
        }
    }
}

fn check_stat_samples(subjects: &[SubjectNodes], scope: StatScope) -> Result<(), LossError> {
    match scope {
        StatScope::PerSubject => {
            for s in subjects {
                for (side, n) in [("pooled modality", s.n1), ("aligned modality", s.n2)] {
                    if n < 2 {
                        return Err(LossError::TooFewSamples {
                            what: format!("subject `{}` {side} variance/covariance", s.subject_id),
                            need: 2,
                            got: n,
                        });
                    }
                }
            }
        }
        StatScope::Batch => {
            let n1: usize = subjects.iter().map(|s| s.n1).sum();
            let n2: usize = subjects.iter().map(|s| s.n2).sum();
            if n1.min(n2) < 2 {
                return Err(LossError::TooFewSamples { what: "batch variance/covariance".into(), need: 2, got: n1.min(n2) });
            }
        }
    }
    Ok(())
}

/// Variance/covariance of each modality over the whole batch.
fn batch_stats(g: &mut Graph, subjects: &[SubjectNodes], d: usize, w: &LossWeights) -> [NodeId; 4] {
    let z1 = g.concat_rows(subjects.iter().map(|s| s.z1).collect());
    let z2 = g.concat_rows(subjects.iter().map(|s| s.z2).collect());
    let n1 = subjects.iter().map(|s| s.n1).sum();
    let n2 = subjects.iter().map(|s| s.n2).sum();
    [
        variance_term(g, z1, n1, w.gamma, w.epsilon),
        variance_term(g, z2, n2, w.gamma, w.epsilon),
        covariance_term(g, z1, n1, d),
        covariance_term(g, z2, n2, d),
    ]
}

/// Records the batch loss of `method` at `epoch` and marks its total as the
/// graph output.
pub fn build_batch_loss(
    g: &mut Graph,
    subjects: &[SubjectNodes],
    d: usize,
    method: Method,
    epoch: u32,
    cfg: &LossConfig,
) -> Result<LossNodes, LossError> {
    cfg.weights.validate()?;
    if subjects.is_empty() {
        return Err(LossError::Empty("batch has no subjects".into()));
    }
    let method = method.resolve(epoch);
    let w = cfg.weights;
    let mut pairs = PairBuilder::new(subjects);

    let (parts, weights) = match method {
        Method::Vicreg => {
            let invariance = match cfg.pooling {
                Pooling::None => {
                    let mut f1 = Vec::new();
                    let mut f2 = Vec::new();
                    let mut n = 0;
                    for s in subjects {
                        let m = s.n1.min(s.n2);
                        f1.push(if m == s.n1 { s.z1 } else { g.slice_rows(s.z1, 0, m) });
                        f2.push(if m == s.n2 { s.z2 } else { g.slice_rows(s.z2, 0, m) });
                        n += m;
                    }
                    if n < 2 {
                        return Err(LossError::TooFewSamples { what: "paired views".into(), need: 2, got: n });
                    }
                    let a = g.concat_rows(f1);
                    let b = g.concat_rows(f2);
                    let inv = invariance_term(g, a, b, n);
                    let parts = LossParts {
                        invariance: inv,
                        variance_m1: variance_term(g, a, n, w.gamma, w.epsilon),
                        variance_m2: variance_term(g, b, n, w.gamma, w.epsilon),
                        covariance_m1: covariance_term(g, a, n, d),
                        covariance_m2: covariance_term(g, b, n, d),
                    };
                    let weights = LossWeights { lambda: 1.0, ..w };
                    let total = weighted_total(g, &parts, &weights);
                    g.set_output(total);
                    return Ok(finish(parts, total, method, epoch, weights));
                }
                pooling => {
                    let per: Vec<NodeId> = (0..subjects.len()).map(|i| pairs.invariance(g, i, i, pooling)).collect();
                    mean_of(g, per)
                }
            };
            check_stat_samples(subjects, StatScope::Batch)?;
            let [v1, v2, c1, c2] = batch_stats(g, subjects, d, &w);
            (
                LossParts { invariance, variance_m1: v1, variance_m2: v2, covariance_m1: c1, covariance_m2: c2 },
                LossWeights { lambda: 1.0, ..w },
            )
        }
        Method::M1 | Method::M2 | Method::M3 => {
            if method == Method::M3 {
                let mut labels: Vec<u8> = subjects.iter().map(|s| s.label).collect();
                labels.sort_unstable();
                labels.dedup();
                if labels.len() > 1 {
                    return Err(LossError::MixedLabels(labels));
                }
            }
            check_stat_samples(subjects, cfg.stat_scope)?;
            let b = subjects.len();
            let pair_list: Vec<(usize, usize)> = if method == Method::M1 {
                (0..b).map(|i| (i, i)).collect()
            } else {
                let all: Vec<(usize, usize)> = (0..b).flat_map(|i| (0..b).map(move |k| (i, k))).collect();
                let off: Vec<(usize, usize)> = all.iter().copied().filter(|(i, k)| i != k).collect();
                // A single-subject batch has no off-diagonal pairs; fall back to the diagonal.
                if cfg.include_diagonal || off.is_empty() {
                    all
                } else {
                    off
                }
            };
            let inv_parts: Vec<NodeId> =
                pair_list.iter().map(|&(i, k)| pairs.invariance(g, i, k, cfg.pooling)).collect();
            let invariance = mean_of(g, inv_parts);

            let [v1, v2, c1, c2] = match cfg.stat_scope {
                StatScope::Batch => batch_stats(g, subjects, d, &w),
                StatScope::PerSubject => {
                    let mut v1 = Vec::with_capacity(b);
                    let mut v2 = Vec::with_capacity(b);
                    let mut c1 = Vec::with_capacity(b);
                    let mut c2 = Vec::with_capacity(b);
                    for s in subjects {
                        v1.push(variance_term(g, s.z1, s.n1, w.gamma, w.epsilon));
                        v2.push(variance_term(g, s.z2, s.n2, w.gamma, w.epsilon));
                        c1.push(covariance_term(g, s.z1, s.n1, d));
                        c2.push(covariance_term(g, s.z2, s.n2, d));
                    }
                    [mean_of(g, v1), mean_of(g, v2), mean_of(g, c1), mean_of(g, c2)]
                }
            };
            (LossParts { invariance, variance_m1: v1, variance_m2: v2, covariance_m1: c1, covariance_m2: c2 }, w)
        }
        Method::M4 => unreachable!("resolved above"),
    };
    let total = weighted_total(g, &parts, &weights);
    g.set_output(total);
    Ok(finish(parts, total, method, epoch, weights))
}

fn finish(parts: LossParts, total: NodeId, method: Method, epoch: u32, weights: LossWeights) -> LossNodes {
    LossNodes {
        invariance: parts.invariance,
        variance_m1: parts.variance_m1,
        variance_m2: parts.variance_m2,
        covariance_m1: parts.covariance_m1,
        covariance_m2: parts.covariance_m2,
        total,
        method,
        epoch,
        weights,
    }
}

// ---------------------------------------------------------------------------
// Direct evaluation on embedding lists

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<(Tensor, usize, usize), LossError> {
    if rows.is_empty() {
        return Err(LossError::Empty(what.to_string()));
    }
    let d = rows[0].len();
    if d == 0 {
        return Err(LossError::Empty(format!("{what}: zero-dimensional embeddings")));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(LossError::DimMismatch(d, bad.len()));
    }
    Ok((Tensor::from_rows(rows)?, rows.len(), d))
}

fn eval_scalar(mut g: Graph) -> Result<f64, LossError> {
    let out = g.forward(&Default::default())?;
    Ok(out.item().expect("scalar loss"))
}

/// Mean over dimensions of `max(0, gamma - sqrt(Var_j + eps))`.
pub fn variance_reg(embeddings: &[Vec<f64>], gamma: f64, eps: f64) -> Result<f64, LossError> {
    let (t, n, _) = matrix(embeddings, "variance_reg")?;
    if n < 2 {
        return Err(LossError::TooFewSamples { what: "variance_reg".into(), need: 2, got: n });
    }
    let mut g = Graph::new();
    let z = g.constant(t);
    variance_term(&mut g, z, n, gamma, eps);
    eval_scalar(g)
}

/// Mean squared Euclidean distance between paired embeddings.
pub fn invariance_reg(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, LossError> {
    if a.len() != b.len() {
        return Err(LossError::LengthMismatch(a.len(), b.len()));
    }
    let (ta, n, da) = matrix(a, "invariance_reg")?;
    let (tb, _, db) = matrix(b, "invariance_reg")?;
    if da != db {
        return Err(LossError::DimMismatch(da, db));
    }
    let mut g = Graph::new();
    let za = g.constant(ta);
    let zb = g.constant(tb);
    invariance_term(&mut g, za, zb, n);
    eval_scalar(g)
}

/// Sum of squared off-diagonal covariances divided by `d`.
pub fn covariance_reg(embeddings: &[Vec<f64>]) -> Result<f64, LossError> {
    let (t, n, d) = matrix(embeddings, "covariance_reg")?;
    if n < 2 {
        return Err(LossError::TooFewSamples { what: "covariance_reg".into(), need: 2, got: n });
    }
    let mut g = Graph::new();
    let z = g.constant(t);
    covariance_term(&mut g, z, n, d);
    eval_scalar(g)
}

/// Mean squared distance between a pooled vector and each segment embedding.
pub fn pooled_invariance(pooled: &[f64], segments: &[Vec<f64>]) -> Result<f64, LossError> {
    let (ts, n, d) = matrix(segments, "pooled_invariance segments")?;
    if pooled.len() != d {
        return Err(LossError::DimMismatch(pooled.len(), d));
    }
    let mut g = Graph::new();
    let p = g.constant(Tensor::matrix(1, d, pooled.to_vec())?);
    let z = g.constant(ts);
    pooled_invariance_term(&mut g, p, z, n);
    eval_scalar(g)
}

/// `I(F1, F2) + mu (V(F1) + V(F2)) + nu (C(F1) + C(F2))`; `lambda` is not
/// applied (the breakdown records `lambda = 1`).
pub fn vicreg_loss(f1: &[Vec<f64>], f2: &[Vec<f64>], w: &LossWeights) -> Result<LossBreakdown, LossError> {
    w.validate()?;
    if f1.len() != f2.len() {
        return Err(LossError::LengthMismatch(f1.len(), f2.len()));
    }
    let (t1, n, d1) = matrix(f1, "vicreg_loss F1")?;
    let (t2, _, d2) = matrix(f2, "vicreg_loss F2")?;
    if d1 != d2 {
        return Err(LossError::DimMismatch(d1, d2));
    }
    if n < 2 {
        return Err(LossError::TooFewSamples { what: "vicreg_loss".into(), need: 2, got: n });
    }
    let mut g = Graph::new();
    let a = g.constant(t1);
    let b = g.constant(t2);
    let parts = LossParts {
        invariance: invariance_term(&mut g, a, b, n),
        variance_m1: variance_term(&mut g, a, n, w.gamma, w.epsilon),
        variance_m2: variance_term(&mut g, b, n, w.gamma, w.epsilon),
        covariance_m1: covariance_term(&mut g, a, n, d1),
        covariance_m2: covariance_term(&mut g, b, n, d1),
    };
    let weights = LossWeights { lambda: 1.0, ..*w };
    let total = weighted_total(&mut g, &parts, &weights);
    g.set_output(total);
    let nodes = finish(parts, total, Method::Vicreg, 1, weights);
    g.forward(&Default::default())?;
    Ok(nodes.breakdown(&g).expect("evaluated"))
}

/// One subject's embeddings for a batch loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEmbeddings {
    pub subject_id: String,
    pub label: u8,
    pub sets: BTreeMap<String, EmbeddingSet>,
}

/// Names the pooled (`m1`) and aligned (`m2`) modalities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityRoles {
    pub pooled: String,
    pub aligned: String,
}

/// Evaluates a batch loss directly on precomputed embeddings.
pub fn batch_loss(
    batch: &[SubjectEmbeddings],
    roles: &ModalityRoles,
    method: Method,
    epoch: u32,
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    let mut g = Graph::new();
    let mut nodes = Vec::with_capacity(batch.len());
    let mut dim = None;
    for s in batch {
        let get = |m: &str| {
            s.sets.get(m).ok_or_else(|| LossError::MissingModality { subject: s.subject_id.clone(), modality: m.to_string() })
        };
        let e1 = get(&roles.pooled)?;
        let e2 = get(&roles.aligned)?;
        let (t1, n1, d1) = matrix(&e1.segments, &format!("subject `{}` {}", s.subject_id, roles.pooled))?;
        let (t2, n2, d2) = matrix(&e2.segments, &format!("subject `{}` {}", s.subject_id, roles.aligned))?;
        for d in [d1, d2] {
            match dim {
                None => dim = Some(d),
                Some(prev) if prev != d => return Err(LossError::DimMismatch(prev, d)),
                _ => {}
            }
        }
        let z1 = g.constant(t1);
        let z2 = g.constant(t2);
        nodes.push(SubjectNodes { subject_id: s.subject_id.clone(), label: s.label, z1, n1, z2, n2 });
    }
    let d = dim.ok_or_else(|| LossError::Empty("batch has no subjects".into()))?;
    let loss = build_batch_loss(&mut g, &nodes, d, method, epoch, cfg)?;
    g.forward(&Default::default())?;
    Ok(loss.breakdown(&g).expect("evaluated"))
}

pub fn batch_loss_m1(batch: &[SubjectEmbeddings], roles: &ModalityRoles, cfg: &LossConfig) -> Result<LossBreakdown, LossError> {
    batch_loss(batch, roles, Method::M1, 1, cfg)
}

pub fn batch_loss_m2(batch: &[SubjectEmbeddings], roles: &ModalityRoles, cfg: &LossConfig) -> Result<LossBreakdown, LossError> {
    batch_loss(batch, roles, Method::M2, 1, cfg)
}

pub fn batch_loss_m3(batch: &[SubjectEmbeddings], roles: &ModalityRoles, cfg: &LossConfig) -> Result<LossBreakdown, LossError> {
    batch_loss(batch, roles, Method::M3, 1, cfg)
}

// ---------------------------------------------------------------------------
// Loss log

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: u32,
    pub step: u64,
    pub breakdown: LossBreakdown,
}

pub const LOSS_CSV_HEADER: &str =
    "epoch,step,method,invariance,variance_m1,variance_m2,covariance_m1,covariance_m2,total";

pub fn write_loss_csv<W: Write>(mut out: W, records: &[LossRecord]) -> io::Result<()> {
    writeln!(out, "{LOSS_CSV_HEADER}")?;
    for r in records {
        let b = &r.breakdown;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.step,
            b.method,
            b.invariance,
            b.variance_m1,
            b.variance_m2,
            b.covariance_m1,
            b.covariance_m2,
            b.total
        )?;
    }
    Ok(())
}

/// Parsed row of a loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub epoch: u32,
    pub step: u64,
    pub method: Method,
    pub values: [f64; 6],
}

pub fn read_loss_csv<R: BufRead>(input: R) -> io::Result<Vec<LossRow>> {
    let bad = |line: usize, msg: String| io::Error::new(io::ErrorKind::InvalidData, format!("line {line}: {msg}"));
    let mut rows = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != LOSS_CSV_HEADER {
                return Err(bad(1, "unexpected header".into()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(bad(i + 1, format!("expected 9 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 1, e.to_string()));
        rows.push(LossRow {
            epoch: f[0].parse().map_err(|e: std::num::ParseIntError| bad(i + 1, e.to_string()))?,
            step: f[1].parse().map_err(|e: std::num::ParseIntError| bad(i + 1, e.to_string()))?,
            method: f[2].parse().map_err(|e: String| bad(i + 1, e))?,
            values: [num(f[3])?, num(f[4])?, num(f[5])?, num(f[6])?, num(f[7])?, num(f[8])?],
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-4;

    #[test]
    fn variance_examples() {
        let same = vec![vec![0.3, -1.0]; 4];
        assert!((variance_reg(&same, 1.0, EPS).unwrap() - 0.99).abs() < 1e-12);
        assert_eq!(variance_reg(&[vec![0.0], vec![2.0]], 1.0, EPS).unwrap(), 0.0);
        // Var = 0.125, sqrt(0.1251) = 0.353695...
        let v = variance_reg(&[vec![0.0], vec![0.5]], 1.0, EPS).unwrap();
        assert!((v - (1.0 - 0.1251f64.sqrt())).abs() < 1e-12);
        assert!((v - 0.6463).abs() < 1e-4);
        assert!(matches!(variance_reg(&[vec![1.0]], 1.0, EPS), Err(LossError::TooFewSamples { .. })));
    }

    #[test]
    fn invariance_examples() {
        let a = vec![vec![1.0, 2.0], vec![-3.0, 0.5]];
        assert_eq!(invariance_reg(&a, &a).unwrap(), 0.0);
        assert_eq!(invariance_reg(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]]).unwrap(), 25.0);
        let b = vec![vec![0.0, 1.0], vec![2.0, 2.0]];
        assert_eq!(invariance_reg(&a, &b).unwrap(), invariance_reg(&b, &a).unwrap());
        assert!(matches!(invariance_reg(&a, &b[..1]), Err(LossError::LengthMismatch(2, 1))));
    }

    #[test]
    fn covariance_examples() {
        assert_eq!(covariance_reg(&[vec![1.0], vec![5.0], vec![-2.0]]).unwrap(), 0.0);
        let square = [vec![1.0, 1.0], vec![-1.0, 1.0], vec![1.0, -1.0], vec![-1.0, -1.0]];
        assert_eq!(covariance_reg(&square).unwrap(), 0.0);
        assert_eq!(covariance_reg(&[vec![1.0, 1.0], vec![-1.0, -1.0]]).unwrap(), 4.0);
        assert!(covariance_reg(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn pooled_invariance_examples() {
        let segs = vec![vec![0.5, 0.5]; 3];
        assert_eq!(pooled_invariance(&[0.5, 0.5], &segs).unwrap(), 0.0);
        assert_eq!(pooled_invariance(&[0.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 1.0);
        let p = [0.2, -0.7];
        let s = vec![vec![1.5, 2.0]];
        assert_eq!(pooled_invariance(&p, &s).unwrap(), invariance_reg(&[p.to_vec()], &s).unwrap());
        assert!(matches!(pooled_invariance(&p, &[]), Err(LossError::Empty(_))));
    }

    #[test]
    fn vicreg_examples() {
        let rows = vec![vec![2.0, -1.0, 0.5]; 5];
        let w = LossWeights { mu: 1.0, nu: 1.0, ..LossWeights::default() };
        let b = vicreg_loss(&rows, &rows, &w).unwrap();
        assert!((b.total - 1.98).abs() < 1e-12);
        assert_eq!(b.weights.lambda, 1.0);

        let f1 = vec![vec![0.1, 0.4], vec![1.0, -2.0], vec![0.3, 0.3]];
        let f2 = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![-0.5, 2.0]];
        let w0 = LossWeights { mu: 0.0, nu: 0.0, ..LossWeights::default() };
        let b = vicreg_loss(&f1, &f2, &w0).unwrap();
        assert_eq!(b.total, invariance_reg(&f1, &f2).unwrap());
        assert!((b.recombined_total() - b.total).abs() < 1e-12);
    }

    #[test]
    fn m4_schedule() {
        assert_eq!(select_m4(1), Method::M2);
        assert_eq!(select_m4(2), Method::M3);
        assert_eq!(select_m4(17), Method::M2);
        assert!(Method::M4.needs_same_label(2));
        assert!(!Method::M4.needs_same_label(3));
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { mu: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { gamma: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { epsilon: 0.0, ..Default::default() }.validate().is_err());
    }

    fn subject(id: &str, label: u8, s1: Vec<Vec<f64>>, s2: Vec<Vec<f64>>) -> SubjectEmbeddings {
        let mut sets = BTreeMap::new();
        sets.insert("a".to_string(), EmbeddingSet::new(id, "a", s1));
        sets.insert("v".to_string(), EmbeddingSet::new(id, "v", s2));
        SubjectEmbeddings { subject_id: id.into(), label, sets }
    }

    fn roles() -> ModalityRoles {
        ModalityRoles { pooled: "a".into(), aligned: "v".into() }
    }

    #[test]
    fn all_terms_vanish_for_ideal_subject() {
        // Rows (±1, ±1): std sqrt(4/3) per dim, no covariance, mean at the origin.
        let square = vec![vec![1.0, 1.0], vec![-1.0, 1.0], vec![1.0, -1.0], vec![-1.0, -1.0]];
        let batch = vec![subject("s", 1, square.clone(), square.clone())];
        let cfg = LossConfig { pooling: Pooling::Double, ..Default::default() };
        let b = batch_loss_m1(&batch, &roles(), &cfg).unwrap();
        assert_eq!(b.total, 0.0);
        assert_eq!(b.invariance, 0.0);
    }

    #[test]
    fn zero_lambda_ignores_alignment() {
        let s1 = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![0.5, 0.5]];
        let s2 = vec![vec![0.0, 1.0], vec![3.0, 1.0]];
        let cfg = LossConfig { weights: LossWeights { lambda: 0.0, ..Default::default() }, ..Default::default() };
        let a = batch_loss_m1(&[subject("x", 0, s1.clone(), s2.clone())], &roles(), &cfg).unwrap();
        let shifted: Vec<Vec<f64>> = s2.iter().map(|r| vec![r[0] + 10.0, r[1] - 4.0]).collect();
        let b = batch_loss_m1(&[subject("x", 0, s1, shifted)], &roles(), &cfg).unwrap();
        assert!(a.invariance != b.invariance);
        assert!((a.total - b.total).abs() < 1e-9);
    }

    #[test]
    fn missing_modality_names_subject() {
        let mut s = subject("sub-7", 0, vec![vec![1.0]; 2], vec![vec![1.0]; 2]);
        s.sets.remove("v");
        match batch_loss_m1(&[s], &roles(), &LossConfig::default()) {
            Err(LossError::MissingModality { subject, modality }) => {
                assert_eq!(subject, "sub-7");
                assert_eq!(modality, "v");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn m3_rejects_mixed_labels() {
        let a = subject("a", 0, vec![vec![0.0], vec![1.0]], vec![vec![0.0], vec![2.0]]);
        let b = subject("b", 1, vec![vec![1.0], vec![3.0]], vec![vec![0.5], vec![1.0]]);
        assert!(matches!(batch_loss_m3(&[a.clone(), b.clone()], &roles(), &LossConfig::default()), Err(LossError::MixedLabels(_))));
        let b0 = SubjectEmbeddings { label: 0, ..b };
        let m3 = batch_loss_m3(&[a.clone(), b0.clone()], &roles(), &LossConfig::default()).unwrap();
        let m2 = batch_loss_m2(&[a, b0], &roles(), &LossConfig::default()).unwrap();
        assert_eq!(m3.total, m2.total);
        assert_eq!(m3.method, Method::M3);
    }

    #[test]
    fn diagonal_exclusion_changes_only_invariance() {
        let a = subject("a", 0, vec![vec![0.0, 1.0], vec![1.0, 0.0]], vec![vec![0.0, 2.0], vec![2.0, 1.0]]);
        let b = subject("b", 0, vec![vec![1.0, 3.0], vec![3.0, 1.0]], vec![vec![0.5, 1.0], vec![1.0, -1.0]]);
        let with = batch_loss_m2(&[a.clone(), b.clone()], &roles(), &LossConfig::default()).unwrap();
        let cfg = LossConfig { include_diagonal: false, ..Default::default() };
        let without = batch_loss_m2(&[a.clone(), b], &roles(), &cfg).unwrap();
        assert_eq!(with.variance_m1, without.variance_m1);
        assert!(with.invariance != without.invariance);
        // A single subject falls back to its own pair.
        let solo = batch_loss_m2(std::slice::from_ref(&a), &roles(), &cfg).unwrap();
        assert_eq!(solo.total, batch_loss_m1(&[a], &roles(), &LossConfig::default()).unwrap().total);
    }

    #[test]
    fn loss_csv_round_trip() {
        let b = vicreg_loss(&[vec![0.0, 1.0], vec![1.0, 0.0]], &[vec![0.5, 0.5], vec![0.1, 0.2]], &LossWeights::default()).unwrap();
        let recs = vec![LossRecord { epoch: 1, step: 0, breakdown: b }, LossRecord { epoch: 2, step: 1, breakdown: b }];
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &recs).unwrap();
        let rows = read_loss_csv(io::Cursor::new(buf)).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].epoch, 2);
        assert_eq!(rows[0].values[5], b.total);
        assert_eq!(rows[0].method, Method::Vicreg);
    }

    #[test]
    fn method_and_pooling_parse() {
        assert_eq!("M2".parse::<Method>().unwrap(), Method::M2);
        assert!("m9".parse::<Method>().is_err());
        assert_eq!("double".parse::<Pooling>().unwrap(), Pooling::Double);
    }
}
