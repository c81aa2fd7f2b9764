//! Subject records, the synthetic generator, JSONL I/O, stratified splits and
//! batch samplers.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("subject `{subject}`: modality `{modality}` {msg}")]
    Segments { subject: String, modality: String, msg: String },
    #[error("duplicate subject_id `{0}`")]
    DuplicateSubject(String),
    #[error("subject `{subject}` is missing modality `{modality}`")]
    MissingModality { subject: String, modality: String },
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("invalid split fractions: {0}")]
    Fractions(String),
    #[error("stratification cell (group `{group}`, label {label}) is empty")]
    EmptyCell { group: String, label: u8 },
    #[error("cannot sample batches: {0}")]
    Sampler(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One subject with its demographic group, binary label and segmented
/// modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub group: String,
    pub label: u8,
    pub modalities: BTreeMap<String, Vec<Vec<f64>>>,
}

impl SubjectRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        let seg_err = |modality: &str, msg: String| DataError::Segments {
            subject: self.subject_id.clone(),
            modality: modality.to_string(),
            msg,
        };
        if self.label > 1 {
            return Err(DataError::Config(format!("subject `{}`: label must be 0 or 1, got {}", self.subject_id, self.label)));
        }
        for (name, segs) in &self.modalities {
            let Some(first) = segs.first() else {
                return Err(seg_err(name, "has no segments".into()));
            };
            if first.is_empty() {
                return Err(seg_err(name, "has zero-length segments".into()));
            }
            if let Some((i, s)) = segs.iter().enumerate().find(|(_, s)| s.len() != first.len()) {
                return Err(seg_err(name, format!("segment {i} has length {}, expected {}", s.len(), first.len())));
            }
            if segs.iter().flatten().any(|v| !v.is_finite()) {
                return Err(seg_err(name, "contains non-finite values".into()));
            }
        }
        Ok(())
    }

    pub fn segments(&self, modality: &str) -> Result<&[Vec<f64>], DataError> {
        self.modalities.get(modality).map(Vec::as_slice).ok_or_else(|| DataError::MissingModality {
            subject: self.subject_id.clone(),
            modality: modality.to_string(),
        })
    }
}

/// Validates a record collection: per-record invariants, unique ids, and one
/// feature length per modality across subjects.
pub fn validate_records(records: &[SubjectRecord]) -> Result<(), DataError> {
    let mut ids = BTreeSet::new();
    let mut lengths: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for r in records {
        r.validate()?;
        if !ids.insert(r.subject_id.as_str()) {
            return Err(DataError::DuplicateSubject(r.subject_id.clone()));
        }
        for (name, segs) in &r.modalities {
            let len = segs[0].len();
            match lengths.get(name.as_str()) {
                Some(&(expected, first)) if expected != len => {
                    return Err(DataError::Segments {
                        subject: r.subject_id.clone(),
                        modality: name.clone(),
                        msg: format!("has feature length {len}, but subject `{first}` has {expected}"),
                    })
                }
                Some(_) => {}
                None => {
                    lengths.insert(name, (len, &r.subject_id));
                }
            }
        }
    }
    Ok(())
}

/// Every record must carry each of `modalities`.
pub fn require_modalities(records: &[SubjectRecord], modalities: &[&str]) -> Result<(), DataError> {
    for r in records {
        for m in modalities {
            r.segments(m)?;
        }
    }
    Ok(())
}

/// Feature length of each modality (taken from the first subject carrying it).
pub fn feature_dims(records: &[SubjectRecord]) -> BTreeMap<String, usize> {
    let mut dims = BTreeMap::new();
    for r in records {
        for (name, segs) in &r.modalities {
            dims.entry(name.clone()).or_insert(segs[0].len());
        }
    }
    dims
}

/// Modality with the larger average segment count; ties go to the
/// lexicographically first name.
pub fn default_pooled_modality(records: &[SubjectRecord]) -> Option<String> {
    let mut stats: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in records {
        for (name, segs) in &r.modalities {
            let e = stats.entry(name).or_default();
            e.0 += segs.len();
            e.1 += 1;
        }
    }
    let mut best: Option<(&str, f64)> = None;
    for (name, (total, count)) in stats {
        let avg = total as f64 / count as f64;
        if best.is_none_or(|(_, b)| avg > b) {
            best = Some((name, avg));
        }
    }
    best.map(|(n, _)| n.to_string())
}

/// Group with the smallest share of subjects; ties broken lexicographically.
pub fn minority_group<'a>(groups: impl IntoIterator<Item = &'a str>) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for g in groups {
        *counts.entry(g).or_default() += 1;
    }
    counts.into_iter().min_by_key(|&(_, c)| c).map(|(g, _)| g.to_string())
}

// ---------------------------------------------------------------------------
// JSONL

pub fn parse_jsonl<R: BufRead>(input: R) -> Result<Vec<SubjectRecord>, DataError> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SubjectRecord =
            serde_json::from_str(&line).map_err(|e| DataError::Schema { line: i + 1, msg: e.to_string() })?;
        rec.validate().map_err(|e| DataError::Schema { line: i + 1, msg: e.to_string() })?;
        records.push(rec);
    }
    validate_records(&records)?;
    Ok(records)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<SubjectRecord>, DataError> {
    parse_jsonl(BufReader::new(File::open(path)?))
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[SubjectRecord]) -> Result<(), DataError> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_jsonl(path: impl AsRef<Path>, records: &[SubjectRecord]) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_jsonl(&mut out, records)?;
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic generator

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySynth {
    pub feature_dim: usize,
    /// Inclusive `[min, max]` segments per subject.
    pub segment_count_range: (usize, usize),
    /// Size of the label shift.
    pub signal_strength: f64,
    /// Size of the minority-group shift.
    pub group_leak_strength: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub group_proportions: BTreeMap<String, f64>,
    pub label_rate_per_group: BTreeMap<String, f64>,
    pub modalities: BTreeMap<String, ModalitySynth>,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    pub seed: u64,
}

fn default_latent_dim() -> usize {
    8
}

impl Default for SynthConfig {
    /// Group and label marginals shaped like a vlog depression corpus
    /// (34% / 66% group split, roughly balanced labels).
    fn default() -> Self {
        let group_proportions = BTreeMap::from([("M".to_string(), 0.34), ("F".to_string(), 0.66)]);
        let label_rate_per_group = BTreeMap::from([("M".to_string(), 0.5), ("F".to_string(), 0.56)]);
        let modalities = BTreeMap::from([
            (
                "audio".to_string(),
                ModalitySynth {
                    feature_dim: 12,
                    segment_count_range: (4, 8),
                    signal_strength: 1.0,
                    group_leak_strength: 1.5,
                    noise_std: 0.5,
                },
            ),
            (
                "visual".to_string(),
                ModalitySynth {
                    feature_dim: 10,
                    segment_count_range: (2, 5),
                    signal_strength: 1.0,
                    group_leak_strength: 1.5,
                    noise_std: 0.5,
                },
            ),
        ]);
        Self { n_subjects: 200, group_proportions, label_rate_per_group, modalities, latent_dim: 8, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Config(m));
        if self.n_subjects == 0 {
            return err("n_subjects must be positive".into());
        }
        if self.group_proportions.is_empty() {
            return err("group_proportions is empty".into());
        }
        if self.group_proportions.values().any(|p| !p.is_finite() || *p < 0.0) {
            return err("group proportions must be finite and non-negative".into());
        }
        let sum: f64 = self.group_proportions.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return err(format!("group proportions sum to {sum}, expected 1"));
        }
        for g in self.group_proportions.keys() {
            match self.label_rate_per_group.get(g) {
                Some(r) if (0.0..=1.0).contains(r) => {}
                Some(r) => return err(format!("label rate {r} for group `{g}` outside [0, 1]")),
                None => return err(format!("no label rate for group `{g}`")),
            }
        }
        if self.modalities.is_empty() {
            return err("no modalities configured".into());
        }
        if self.latent_dim == 0 {
            return err("latent_dim must be positive".into());
        }
        for (name, m) in &self.modalities {
            let (lo, hi) = m.segment_count_range;
            if m.feature_dim == 0 {
                return err(format!("modality `{name}`: feature_dim must be positive"));
            }
            if lo == 0 || lo > hi {
                return err(format!("modality `{name}`: segment_count_range ({lo}, {hi}) is empty or allows zero segments"));
            }
            let vals = [m.signal_strength, m.group_leak_strength, m.noise_std];
            if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return err(format!("modality `{name}`: strengths and noise must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Group with the smallest configured proportion (ties: lexicographic).
    pub fn minority(&self) -> &str {
        let mut best: Option<(&str, f64)> = None;
        for (g, &p) in &self.group_proportions {
            if best.is_none_or(|(_, b)| p < b) {
                best = Some((g, p));
            }
        }
        best.expect("validated").0
    }
}

struct ModalityParams {
    w: Vec<Vec<f64>>,
    label_dir: Vec<f64>,
    group_dir: Vec<f64>,
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws subjects from the linear-Gaussian story
/// `x = W_m u + s_m b_m 1[y=1] + l_m c_m 1[g=minority] + noise`, with a per-subject
/// latent `u ~ N(0, I)` shared across modalities and unit directions `b_m`, `c_m`.
pub fn generate(config: &SynthConfig) -> Result<Vec<SubjectRecord>, DataError> {
    config.validate()?;
    let mut prng = seed::rng(config.seed, "synth/params");
    let k = config.latent_dim;
    let scale = 1.0 / (k as f64).sqrt();
    let params: BTreeMap<&str, ModalityParams> = config
        .modalities
        .iter()
        .map(|(name, m)| {
            let w = (0..m.feature_dim)
                .map(|_| (0..k).map(|_| { let z: f64 = StandardNormal.sample(&mut prng); scale * z }).collect())
                .collect();
            let p = ModalityParams {
                w,
                label_dir: unit_vector(&mut prng, m.feature_dim),
                group_dir: unit_vector(&mut prng, m.feature_dim),
            };
            (name.as_str(), p)
        })
        .collect();

    let groups: Vec<(&String, f64)> = config.group_proportions.iter().map(|(g, p)| (g, *p)).collect();
    let minority = config.minority();
    let width = config.n_subjects.to_string().len().max(4);
    let mut out = Vec::with_capacity(config.n_subjects);
    for i in 0..config.n_subjects {
        let mut rng = seed::rng_indexed(config.seed, "synth/subject", i as u64);
        let draw: f64 = rng.random();
        let mut acc = 0.0;
        let mut group = groups.last().expect("validated").0;
        for (g, p) in &groups {
            acc += p;
            if draw < acc {
                group = g;
                break;
            }
        }
        let label = u8::from(rng.random::<f64>() < config.label_rate_per_group[group]);
        let u: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut modalities = BTreeMap::new();
        for (name, m) in &config.modalities {
            let p = &params[name.as_str()];
            let (lo, hi) = m.segment_count_range;
            let count = rng.random_range(lo..=hi);
            let noise = Normal::new(0.0, m.noise_std).map_err(|e| DataError::Config(e.to_string()))?;
            let base: Vec<f64> = (0..m.feature_dim)
                .map(|j| {
                    let mut v: f64 = p.w[j].iter().zip(&u).map(|(a, b)| a * b).sum();
                    if label == 1 {
                        v += m.signal_strength * p.label_dir[j];
                    }
                    if group == minority {
                        v += m.group_leak_strength * p.group_dir[j];
                    }
                    v
                })
                .collect();
            let segs = (0..count).map(|_| base.iter().map(|b| b + noise.sample(&mut rng)).collect()).collect();
            modalities.insert(name.clone(), segs);
        }
        out.push(SubjectRecord { subject_id: format!("subj-{i:0width$}"), group: group.clone(), label, modalities });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    /// Accept (group, label) cells with no subjects.
    #[serde(default)]
    pub allow_empty_cells: bool,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.7, val: 0.15, test: 0.15, allow_empty_cells: false }
    }
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test, allow_empty_cells: false }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DataError::Fractions("fractions must be finite and non-negative".into()));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::Fractions(format!("fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellReport {
    pub group: String,
    pub label: u8,
    pub total: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub fractions: SplitFractions,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub cells: Vec<CellReport>,
}

impl SplitPlan {
    /// Records of one split, in the order they appear in `records`.
    pub fn select<'a>(&self, records: &'a [SubjectRecord], split: Split) -> Vec<&'a SubjectRecord> {
        let ids: BTreeSet<&str> = self.ids(split).iter().map(String::as_str).collect();
        records.iter().filter(|r| ids.contains(r.subject_id.as_str())).collect()
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

fn hashed_order(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

/// Largest-remainder rounding of `total * fractions` to integers summing to `total`.
fn apportion(total: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>().min(total);
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Rounds the `cells x splits` table `cell_sizes[k] * fractions[s]` so that row
/// sums equal the cell sizes, column sums equal the apportioned split sizes,
/// and each entry is the floor or ceiling of its exact value.
fn controlled_rounding(cell_sizes: &[usize], fractions: &[f64; 3]) -> Vec<[usize; 3]> {
    let total: usize = cell_sizes.iter().sum();
    let targets = apportion(total, fractions);
    let exact: Vec<[f64; 3]> =
        cell_sizes.iter().map(|&c| [0, 1, 2].map(|s| c as f64 * fractions[s])).collect();
    let mut table: Vec<[usize; 3]> = exact.iter().map(|row| row.map(|x| x.floor() as usize)).collect();
    let mut row_need: Vec<usize> =
        cell_sizes.iter().zip(&table).map(|(&c, row)| c - row.iter().sum::<usize>().min(c)).collect();
    let mut col_need: Vec<usize> =
        (0..3).map(|s| targets[s].saturating_sub(table.iter().map(|r| r[s]).sum::<usize>())).collect();
    // Bipartite augmenting paths: a unit moves from a cell to a split through a
    // fractional entry; `extra[k][s]` marks entries already rounded up.
    let n = cell_sizes.len();
    let mut extra = vec![[false; 3]; n];
    let can_round = |k: usize, s: usize| exact[k][s] - exact[k][s].floor() > 1e-12;
    loop {
        let Some(src) = (0..n).find(|&k| row_need[k] > 0) else { break };
        // BFS over cells; edges cell->split when roundable and unused, split->cell when used.
        let mut prev_cell: Vec<Option<(usize, usize)>> = vec![None; n];
        let mut seen_cell = vec![false; n];
        let mut seen_split = [false; 3];
        let mut split_from = [usize::MAX; 3];
        let mut queue = std::collections::VecDeque::from([src]);
        seen_cell[src] = true;
        let mut found = None;
        while let Some(k) = queue.pop_front() {
            for s in 0..3 {
                if seen_split[s] || extra[k][s] || !can_round(k, s) {
                    continue;
                }
                seen_split[s] = true;
                split_from[s] = k;
                if col_need[s] > 0 {
                    found = Some(s);
                    break;
                }
                for k2 in 0..n {
                    if !seen_cell[k2] && extra[k2][s] {
                        seen_cell[k2] = true;
                        prev_cell[k2] = Some((s, k));
                        queue.push_back(k2);
                    }
                }
            }
            if found.is_some() {
                break;
            }
        }
        let Some(mut s) = found else {
            // Unreachable for consistent inputs; fall back to any split with room.
            let s = (0..3).find(|&s| col_need[s] > 0).unwrap_or(0);
            table[src][s] += 1;
            row_need[src] -= 1;
            col_need[s] = col_need[s].saturating_sub(1);
            continue;
        };
        col_need[s] -= 1;
        let mut k = split_from[s];
        loop {
            extra[k][s] = true;
            match prev_cell[k] {
                Some((s_prev, k_prev)) => {
                    extra[k][s_prev] = false;
                    s = s_prev;
                    k = k_prev;
                }
                None => break,
            }
        }
        row_need[src] -= 1;
    }
    for k in 0..n {
        for s in 0..3 {
            if extra[k][s] {
                table[k][s] += 1;
            }
        }
    }
    table
}

/// Subject-level split stratified on (group, label). Within each cell,
/// subjects are ordered by a seeded hash of their id and dealt into
/// train/val/test.
pub fn split_subjects(records: &[SubjectRecord], fractions: SplitFractions, seed: u64) -> Result<SplitPlan, DataError> {
    fractions.validate()?;
    validate_records(records)?;
    let mut cells: BTreeMap<(String, u8), Vec<&str>> = BTreeMap::new();
    let groups: BTreeSet<&str> = records.iter().map(|r| r.group.as_str()).collect();
    for g in &groups {
        for y in 0..=1 {
            cells.insert((g.to_string(), y), Vec::new());
        }
    }
    for r in records {
        cells.get_mut(&(r.group.clone(), r.label)).expect("all cells present").push(&r.subject_id);
    }
    if !fractions.allow_empty_cells {
        if let Some(((g, y), _)) = cells.iter().find(|(_, v)| v.is_empty()) {
            return Err(DataError::EmptyCell { group: g.clone(), label: *y });
        }
    }
    let sizes: Vec<usize> = cells.values().map(Vec::len).collect();
    let table = controlled_rounding(&sizes, &fractions.as_array());

    let mut plan = SplitPlan { seed, fractions, train: Vec::new(), val: Vec::new(), test: Vec::new(), cells: Vec::new() };
    for (((group, label), mut ids), counts) in cells.into_iter().zip(table) {
        ids.sort_by_key(|id| (hashed_order(seed, id), id.to_string()));
        let (tr, va) = (counts[0], counts[1]);
        plan.train.extend(ids[..tr].iter().map(|s| s.to_string()));
        plan.val.extend(ids[tr..tr + va].iter().map(|s| s.to_string()));
        plan.test.extend(ids[tr + va..].iter().map(|s| s.to_string()));
        plan.cells.push(CellReport { group, label, total: ids.len(), train: tr, val: va, test: ids.len() - tr - va });
    }
    plan.train.sort();
    plan.val.sort();
    plan.test.sort();
    Ok(plan)
}

// ---------------------------------------------------------------------------
// Batches

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Unconstrained,
    SameLabel,
}

/// Per-epoch batch plans over subject indices.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    labels: Vec<u8>,
    batch_size: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(labels: Vec<u8>, batch_size: usize, seed: u64) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::Sampler("batch_size must be at least 1".into()));
        }
        if labels.is_empty() {
            return Err(DataError::Sampler("no subjects".into()));
        }
        Ok(Self { labels, batch_size, seed })
    }

    /// Batches of epoch `epoch`; every subject appears exactly once.
    pub fn epoch(&self, epoch: u32, mode: BatchMode) -> Result<Vec<Vec<usize>>, DataError> {
        let mut rng = seed::rng_indexed(self.seed, "batches", u64::from(epoch));
        match mode {
            BatchMode::Unconstrained => {
                let mut idx: Vec<usize> = (0..self.labels.len()).collect();
                idx.shuffle(&mut rng);
                Ok(idx.chunks(self.batch_size).map(<[usize]>::to_vec).collect())
            }
            BatchMode::SameLabel => {
                let mut per_class: [Vec<Vec<usize>>; 2] = Default::default();
                for (class, batches) in per_class.iter_mut().enumerate() {
                    let mut idx: Vec<usize> = (0..self.labels.len()).filter(|&i| self.labels[i] as usize == class).collect();
                    if idx.is_empty() {
                        return Err(DataError::Sampler(format!("same-label batches need both classes; class {class} is empty")));
                    }
                    idx.shuffle(&mut rng);
                    *batches = idx.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
                }
                let first = rng.random_range(0..2usize);
                let [a, b] = per_class;
                let (mut x, mut y) = if first == 0 { (a.into_iter(), b.into_iter()) } else { (b.into_iter(), a.into_iter()) };
                let mut out = Vec::new();
                loop {
                    match (x.next(), y.next()) {
                        (None, None) => break,
                        (p, q) => out.extend(p.into_iter().chain(q)),
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Convenience wrapper over [`BatchSampler`] for one epoch.
pub fn sample_batches(records: &[SubjectRecord], batch_size: usize, mode: BatchMode, seed: u64, epoch: u32) -> Result<Vec<Vec<usize>>, DataError> {
    BatchSampler::new(records.iter().map(|r| r.label).collect(), batch_size, seed)?.epoch(epoch, mode)
}
