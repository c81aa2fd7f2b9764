use std::collections::{BTreeMap, BTreeSet};
use std::io::Cursor;

use fairwell::data::*;
use fairwell::training::{fit_logistic, ProbeConfig};
use proptest::prelude::*;

fn subject_features(r: &SubjectRecord) -> Vec<f64> {
    let mut out = Vec::new();
    for segs in r.modalities.values() {
        let d = segs[0].len();
        out.extend((0..d).map(|j| segs.iter().map(|s| s[j]).sum::<f64>() / segs.len() as f64));
    }
    out
}

/// Held-out accuracy of a logistic group probe on per-subject mean features.
fn group_probe_accuracy(leak: f64, seed: u64) -> (f64, f64) {
    let mut cfg = SynthConfig { n_subjects: 600, seed, ..Default::default() };
    for m in cfg.modalities.values_mut() {
        m.group_leak_strength = leak;
    }
    let recs = generate(&cfg).unwrap();
    let x: Vec<Vec<f64>> = recs.iter().map(subject_features).collect();
    let g: Vec<u8> = recs.iter().map(|r| u8::from(r.group == "M")).collect();
    let (train, test) = (0..400, 400..600);
    let lin = fit_logistic(&x[train.clone()], &g[train], &ProbeConfig::default(), seed).unwrap();
    let correct = test.clone().filter(|&i| u8::from(lin.score(&x[i]) >= 0.5) == g[i]).count();
    let majority = test.clone().filter(|&i| g[i] == 0).count().max(test.clone().filter(|&i| g[i] == 1).count());
    (correct as f64 / 200.0, majority as f64 / 200.0)
}

#[test]
fn zero_leak_group_probe_is_at_chance() {
    for seed in 0..3 {
        let (acc, majority) = group_probe_accuracy(0.0, seed);
        assert!((acc - majority).abs() <= 0.05, "seed {seed}: acc {acc} vs majority {majority}");
    }
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn group_leak_raises_probe_accuracy() {
    let strengths = [0.0, 0.5, 1.0, 2.0, 4.0];
    let accs: Vec<f64> = strengths.iter().map(|&s| (0..5).map(|seed| group_probe_accuracy(s, seed).0).sum::<f64>() / 5.0).collect();
    assert!(spearman(&strengths, &accs) > 0.0, "{accs:?}");
}

#[test]
fn same_label_epoch_counts_match_class_populations() {
    let recs = generate(&SynthConfig { n_subjects: 77, seed: 3, ..Default::default() }).unwrap();
    let batches = sample_batches(&recs, 5, BatchMode::SameLabel, 1, 1).unwrap();
    let mut per_class = [0usize; 2];
    for b in &batches {
        let y = recs[b[0]].label;
        assert!(b.iter().all(|&i| recs[i].label == y));
        per_class[y as usize] += b.len();
    }
    let want = [recs.iter().filter(|r| r.label == 0).count(), recs.iter().filter(|r| r.label == 1).count()];
    assert_eq!(per_class, want);
}

fn records_strategy() -> impl Strategy<Value = Vec<SubjectRecord>> {
    prop::collection::vec((0usize..3, 0u8..2, prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..4)), 1..60).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (g, y, segs))| SubjectRecord {
                subject_id: format!("id{i}"),
                group: ["A", "B", "C"][g].to_string(),
                label: y,
                modalities: BTreeMap::from([("m".to_string(), segs)]),
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn splits_are_disjoint_and_cover(recs in records_strategy(), a in 0.0f64..1.0, b in 0.0f64..1.0, seed in any::<u64>()) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let f = SplitFractions { train: lo, val: hi - lo, test: 1.0 - hi, allow_empty_cells: true };
        let plan = split_subjects(&recs, f, seed).unwrap();
        let tr: BTreeSet<_> = plan.train.iter().collect();
        let va: BTreeSet<_> = plan.val.iter().collect();
        let te: BTreeSet<_> = plan.test.iter().collect();
        prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        prop_assert_eq!(tr.len() + va.len() + te.len(), recs.len());
        for c in &plan.cells {
            for (got, frac) in [(c.train, f.train), (c.val, f.val), (c.test, f.test)] {
                prop_assert!((got as f64 - c.total as f64 * frac).abs() < 1.0 + 1e-9);
            }
        }
        prop_assert_eq!(plan.clone(), split_subjects(&recs, f, seed).unwrap());
    }

    #[test]
    fn jsonl_round_trips(recs in records_strategy()) {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        prop_assert_eq!(parse_jsonl(Cursor::new(buf)).unwrap(), recs);
    }
}
