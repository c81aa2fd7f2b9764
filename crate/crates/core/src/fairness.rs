//! Group-fairness ratios, the aggregated fairness score, classification
//! metrics and Pareto fronts over runs.
//!
//! Every ratio is `numerator group / denominator group`, unclipped. A `0/0`
//! ratio counts as perfectly fair (1); `x/0` with `x > 0` becomes 0 and sets a
//! flag.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum FairnessError {
    #[error("prediction set is empty")]
    Empty,
    #[error("ratio metrics need exactly two groups, found {0:?}")]
    GroupCount(Vec<String>),
    #[error("numerator group `{0}` is not present in the predictions")]
    UnknownGroup(String),
    #[error("invalid prediction row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error("predictions file, line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub group: String,
    pub label: u8,
    pub score: f64,
    pub pred: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub rows: Vec<Prediction>,
}

pub const PREDICTIONS_CSV_HEADER: &str = "subject_id,group,label,score,pred";

impl PredictionSet {
    pub fn new(rows: Vec<Prediction>) -> Result<Self, FairnessError> {
        for (i, r) in rows.iter().enumerate() {
            if r.label > 1 || r.pred > 1 {
                return Err(FairnessError::Row { row: i, msg: "label and pred must be 0 or 1".into() });
            }
        }
        Ok(Self { rows })
    }

    /// Groups present with their row counts.
    pub fn group_counts(&self) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for r in &self.rows {
            *m.entry(r.group.as_str()).or_insert(0) += 1;
        }
        m
    }

    /// Group with the fewest rows; ties go to the lexicographically first.
    pub fn minority_group(&self) -> Option<String> {
        self.group_counts().into_iter().min_by_key(|&(_, c)| c).map(|(g, _)| g.to_string())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{PREDICTIONS_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", csv_field(&r.subject_id), csv_field(&r.group), r.label, r.score, r.pred)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self, FairnessError> {
        let mut rows = Vec::new();
        let parse = |line: usize, msg: String| FairnessError::Parse { line, msg };
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line.trim() != PREDICTIONS_CSV_HEADER {
                    return Err(parse(1, format!("expected header `{PREDICTIONS_CSV_HEADER}`")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f = split_csv_line(&line);
            if f.len() != 5 {
                return Err(parse(i + 1, format!("expected 5 fields, got {}", f.len())));
            }
            let bit = |s: &str| match s {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                _ => Err(parse(i + 1, format!("expected 0 or 1, got `{s}`"))),
            };
            rows.push(Prediction {
                subject_id: f[0].clone(),
                group: f[1].clone(),
                label: bit(&f[2])?,
                score: f[3].parse().map_err(|e| parse(i + 1, format!("score: {e}")))?,
                pred: bit(&f[4])?,
            });
        }
        Ok(Self { rows })
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}

/// A rate with its confusion-count fraction; `None` when the denominator is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub num: usize,
    pub den: usize,
}

impl Rate {
    pub fn value(&self) -> Option<f64> {
        (self.den > 0).then(|| self.num as f64 / self.den as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub group: String,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    /// P(ŷ = 1)
    pub base_rate: Rate,
    pub tpr: Rate,
    pub fpr: Rate,
    pub accuracy: Rate,
}

impl GroupRates {
    fn from_counts(group: &str, tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let n = tp + fp + tn + fn_;
        Self {
            group: group.to_string(),
            tp,
            fp,
            tn,
            fn_,
            base_rate: Rate { num: tp + fp, den: n },
            tpr: Rate { num: tp, den: tp + fn_ },
            fpr: Rate { num: fp, den: fp + tn },
            accuracy: Rate { num: tp + tn, den: n },
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Confusion counts and rates for the two groups, numerator group first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePair {
    pub numerator: GroupRates,
    pub denominator: GroupRates,
}

/// Per-group rates. The numerator group defaults to the minority group of
/// `preds`.
pub fn group_rates(preds: &PredictionSet, numerator: Option<&str>) -> Result<RatePair, FairnessError> {
    if preds.rows.is_empty() {
        return Err(FairnessError::Empty);
    }
    let groups: Vec<String> = preds.group_counts().keys().map(|s| s.to_string()).collect();
    if groups.len() != 2 {
        return Err(FairnessError::GroupCount(groups));
    }
    let num = match numerator {
        Some(g) if groups.iter().any(|x| x == g) => g.to_string(),
        Some(g) => return Err(FairnessError::UnknownGroup(g.to_string())),
        None => preds.minority_group().expect("non-empty"),
    };
    let den = groups.into_iter().find(|g| *g != num).expect("two groups");
    let tally = |g: &str| {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for r in preds.rows.iter().filter(|r| r.group == g) {
            match (r.label, r.pred) {
                (1, 1) => tp += 1,
                (0, 1) => fp += 1,
                (0, 0) => tn += 1,
                _ => fn_ += 1,
            }
        }
        GroupRates::from_counts(g, tp, fp, tn, fn_)
    };
    Ok(RatePair { numerator: tally(&num), denominator: tally(&den) })
}

/// Ratio of two rates under the zero-denominator policy. Returns the value
/// and whether it is undefined.
pub fn rate_ratio(num: Option<f64>, den: Option<f64>) -> (f64, bool) {
    match (num, den) {
        (Some(a), Some(b)) if b > 0.0 => (a / b, false),
        (Some(a), Some(_)) if a == 0.0 => (1.0, false),
        (Some(_), Some(_)) => (0.0, true),
        (None, None) => (1.0, true),
        _ => (0.0, true),
    }
}

/// Which ratio components hit the zero-denominator sentinel or an undefined rate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatioFlags {
    pub sp: bool,
    pub eopp: bool,
    pub eodd: bool,
    pub eacc: bool,
}

impl RatioFlags {
    pub fn any(&self) -> bool {
        self.sp || self.eopp || self.eodd || self.eacc
    }

    /// `;`-joined names of flagged metrics, or `none`.
    pub fn describe(&self) -> String {
        let names: Vec<&str> = [("sp", self.sp), ("eopp", self.eopp), ("eodd", self.eodd), ("eacc", self.eacc)]
            .into_iter()
            .filter_map(|(n, f)| f.then_some(n))
            .collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join(";")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub sp: f64,
    pub eopp: f64,
    pub eodd: f64,
    pub eacc: f64,
    pub flags: RatioFlags,
}

pub fn fairness_ratios(rates: &RatePair) -> Ratios {
    let (n, d) = (&rates.numerator, &rates.denominator);
    let (sp, f_sp) = rate_ratio(n.base_rate.value(), d.base_rate.value());
    let (eopp, f_tpr) = rate_ratio(n.tpr.value(), d.tpr.value());
    let (fpr, f_fpr) = rate_ratio(n.fpr.value(), d.fpr.value());
    let (eacc, f_acc) = rate_ratio(n.accuracy.value(), d.accuracy.value());
    Ratios {
        sp,
        eopp,
        eodd: 0.5 * (eopp + fpr),
        eacc,
        flags: RatioFlags { sp: f_sp, eopp: f_tpr, eodd: f_tpr || f_fpr, eacc: f_acc },
    }
}

/// `|1 - mean_i |F_i - 1||` over the four ratios.
pub fn agg_fairness(sp: f64, eopp: f64, eodd: f64, eacc: f64) -> f64 {
    let dev = ((sp - 1.0).abs() + (eopp - 1.0).abs() + (eodd - 1.0).abs() + (eacc - 1.0).abs()) / 4.0;
    (1.0 - dev).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub acc: f64,
    pub f1: f64,
}

/// Accuracy and positive-class F1. F1 is 0 when there are no true positives.
pub fn performance(preds: &PredictionSet) -> Result<Performance, FairnessError> {
    if preds.rows.is_empty() {
        return Err(FairnessError::Empty);
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for r in &preds.rows {
        correct += usize::from(r.label == r.pred);
        match (r.label, r.pred) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (1, 0) => fn_ += 1,
            _ => {}
        }
    }
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    Ok(Performance { acc: correct as f64 / preds.rows.len() as f64, f1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub sp: f64,
    pub eopp: f64,
    pub eodd: f64,
    pub eacc: f64,
    pub agg_f: f64,
    pub acc: f64,
    pub f1: f64,
    pub numerator_group: String,
    pub flags: RatioFlags,
}

pub fn evaluate(preds: &PredictionSet, numerator: Option<&str>) -> Result<FairnessReport, FairnessError> {
    let rates = group_rates(preds, numerator)?;
    let r = fairness_ratios(&rates);
    let perf = performance(preds)?;
    Ok(FairnessReport {
        sp: r.sp,
        eopp: r.eopp,
        eodd: r.eodd,
        eacc: r.eacc,
        agg_f: agg_fairness(r.sp, r.eopp, r.eodd, r.eacc),
        acc: perf.acc,
        f1: perf.f1,
        numerator_group: rates.numerator.group,
        flags: r.flags,
    })
}

pub const FAIRNESS_CSV_HEADER: &str = "run_id,acc,f1,sp,eopp,eodd,eacc,agg_f,flags";

pub fn write_fairness_csv<W: Write>(mut out: W, rows: &[(String, FairnessReport)]) -> io::Result<()> {
    writeln!(out, "{FAIRNESS_CSV_HEADER}")?;
    for (id, r) in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            csv_field(id),
            r.acc,
            r.f1,
            r.sp,
            r.eopp,
            r.eodd,
            r.eacc,
            r.agg_f,
            r.flags.describe()
        )?;
    }
    Ok(())
}

/// One row of fairness.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessRow {
    pub run_id: String,
    pub acc: f64,
    pub f1: f64,
    pub sp: f64,
    pub eopp: f64,
    pub eodd: f64,
    pub eacc: f64,
    pub agg_f: f64,
    pub flags: String,
}

pub fn read_fairness_csv<R: BufRead>(input: R) -> Result<Vec<FairnessRow>, FairnessError> {
    let mut rows = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let parse = |msg: String| FairnessError::Parse { line: i + 1, msg };
        if i == 0 {
            if line.trim() != FAIRNESS_CSV_HEADER {
                return Err(parse(format!("expected header `{FAIRNESS_CSV_HEADER}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f = split_csv_line(&line);
        if f.len() != 9 {
            return Err(parse(format!("expected 9 fields, got {}", f.len())));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|e| parse(format!("field {}: {e}", k + 1)));
        rows.push(FairnessRow {
            run_id: f[0].clone(),
            acc: num(1)?,
            f1: num(2)?,
            sp: num(3)?,
            eopp: num(4)?,
            eodd: num(5)?,
            eacc: num(6)?,
            agg_f: num(7)?,
            flags: f[8].clone(),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Pareto front

/// Indices of runs not dominated in (f1, agg_f), in input order. A run is
/// dominated when another is ≥ in both coordinates and > in one.
pub fn pareto_front(runs: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..runs.len()).collect();
    // Sort by f1 descending, then agg_f descending; a run survives when its
    // agg_f beats every run strictly ahead of it in f1, or ties the best of
    // an equal-f1 prefix.
    order.sort_by(|&a, &b| runs[b].0.total_cmp(&runs[a].0).then(runs[b].1.total_cmp(&runs[a].1)));
    let mut keep = vec![false; runs.len()];
    let mut best = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let f1 = runs[order[i]].0;
        let mut j = i;
        while j < order.len() && runs[order[j]].0 == f1 {
            j += 1;
        }
        let top = runs[order[i]].1;
        if top > best {
            for &k in &order[i..j] {
                if runs[k].1 == top {
                    keep[k] = true;
                }
            }
            best = top;
        }
        i = j;
    }
    (0..runs.len()).filter(|&k| keep[k]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoRow {
    pub run_id: String,
    pub f1: f64,
    pub agg_f: f64,
    pub on_front: bool,
}

pub const PARETO_CSV_HEADER: &str = "run_id,f1,agg_f,on_front";

pub fn pareto_rows(runs: &[(String, f64, f64)]) -> Vec<ParetoRow> {
    let pts: Vec<(f64, f64)> = runs.iter().map(|r| (r.1, r.2)).collect();
    let front = pareto_front(&pts);
    runs.iter()
        .enumerate()
        .map(|(i, (id, f1, agg))| ParetoRow { run_id: id.clone(), f1: *f1, agg_f: *agg, on_front: front.contains(&i) })
        .collect()
}

pub fn write_pareto_csv<W: Write>(mut out: W, rows: &[ParetoRow]) -> io::Result<()> {
    writeln!(out, "{PARETO_CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", csv_field(&r.run_id), r.f1, r.agg_f, u8::from(r.on_front))?;
    }
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Static scatter of AGG_F (y) against F1 (x); front members are filled and
/// joined by a step line.
pub fn pareto_svg(rows: &[ParetoRow]) -> String {
    let (w, h, pad) = (480.0, 360.0, 48.0);
    let span = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-9 {
            (lo - 0.05, hi + 0.05)
        } else {
            let m = 0.05 * (hi - lo);
            (lo - m, hi + m)
        }
    };
    let (x0, x1) = span(&mut rows.iter().map(|r| r.f1));
    let (y0, y1) = span(&mut rows.iter().map(|r| r.agg_f));
    let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">F1 ({x0:.3} to {x1:.3})</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">AGG_F ({y0:.3} to {y1:.3})</text>"#,
        h / 2.0,
        h / 2.0
    );
    let mut front: Vec<&ParetoRow> = rows.iter().filter(|r| r.on_front).collect();
    front.sort_by(|a, b| a.f1.total_cmp(&b.f1));
    if front.len() > 1 {
        let mut d = format!("M{:.2} {:.2}", px(front[0].f1), py(front[0].agg_f));
        for p in &front[1..] {
            let _ = write!(d, " L{:.2} {:.2}", px(p.f1), py(p.agg_f));
        }
        let _ = writeln!(s, r##"<path d="{d}" fill="none" stroke="#c0392b" stroke-width="1.5"/>"##);
    }
    for r in rows {
        let fill = if r.on_front { "#c0392b" } else { "none" };
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{fill}" stroke="#333"><title>{} (F1 {:.4}, AGG_F {:.4})</title></circle>"##,
            px(r.f1),
            py(r.agg_f),
            xml_escape(&r.run_id),
            r.f1,
            r.agg_f
        );
    }
    s.push_str("</svg>\n");
    s
}
