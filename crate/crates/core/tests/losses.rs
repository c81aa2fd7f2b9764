#[path = "support/oracle.rs"]
mod oracle;
#[path = "support/bridge.rs"]
mod bridge;

use bridge::*;
use fairwell::losses::*;
use oracle::{Pool, Subj};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-9;

fn assert_close(got: [f64; 6], want: [f64; 6], ctx: &str) {
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= TOL * w.abs().max(1.0), "{ctx}: got {got:?}, want {want:?}");
    }
}

#[test]
fn vicreg_matches_oracle_on_random_8x4() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = LossWeights::default();
    for _ in 0..20 {
        let f1 = rows(&mut rng, 8, 4);
        let f2 = rows(&mut rng, 8, 4);
        let b = vicreg_loss(&f1, &f2, &w).unwrap();
        let inv = oracle::invariance(&f1, &f2);
        let (v1, v2) = (oracle::variance(&f1, 1.0, 1e-4), oracle::variance(&f2, 1.0, 1e-4));
        let (c1, c2) = (oracle::covariance(&f1), oracle::covariance(&f2));
        assert_close(parts(&b), [inv, v1, v2, c1, c2, inv + 25.0 * (v1 + v2) + c1 + c2], "vicreg");
    }
}

#[test]
fn batch_losses_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..50 {
        let b = rng.random_range(1..5);
        let d = rng.random_range(1..5);
        let batch = random_batch(&mut rng, b, d, true);
        let lib = to_lib(&batch);
        let weights = LossWeights { lambda: rng.random_range(0.0..30.0), mu: rng.random_range(0.0..30.0), nu: rng.random_range(0.0..3.0), ..Default::default() };
        for p in Pooling::ALL {
            let cfg = LossConfig { weights, pooling: p, ..Default::default() };
            let w = ow(&weights);
            let ctx = format!("trial {trial} pooling {p}");
            assert_close(parts(&batch_loss_m1(&lib, &roles(), &cfg).unwrap()), oracle::m1(&batch, pool(p), &w), &ctx);
            let m2 = oracle::m2(&batch, pool(p), &w);
            assert_close(parts(&batch_loss_m2(&lib, &roles(), &cfg).unwrap()), m2, &ctx);
            assert_close(parts(&batch_loss_m3(&lib, &roles(), &cfg).unwrap()), m2, &ctx);
            assert_close(parts(&batch_loss(&lib, &roles(), Method::Vicreg, 1, &cfg).unwrap()), oracle::vicreg(&batch, pool(p), &w), &ctx);
        }
    }
}

#[test]
fn three_subject_m2_is_nine_pair_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = random_batch(&mut rng, 3, 3, false);
    let w = LossWeights::default();
    let cfg = LossConfig { weights: w, ..Default::default() };
    let got = batch_loss_m2(&to_lib(&batch), &roles(), &cfg).unwrap();
    let mut sum = 0.0;
    for i in 0..3 {
        for k in 0..3 {
            let inv = oracle::pooled_invariance(&oracle::mean_row(&batch[i].m1), &batch[k].m2);
            let v = oracle::variance(&batch[i].m1, 1.0, 1e-4) + oracle::variance(&batch[k].m2, 1.0, 1e-4);
            let c = oracle::covariance(&batch[i].m1) + oracle::covariance(&batch[k].m2);
            sum += 25.0 * inv + 25.0 * v + c;
        }
    }
    assert!((got.total - sum / 9.0).abs() < TOL);
}

#[test]
fn excluded_diagonal_matches_off_diagonal_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch = random_batch(&mut rng, 4, 2, false);
    let cfg = LossConfig { include_diagonal: false, ..Default::default() };
    let pairs: Vec<_> = (0..4).flat_map(|i| (0..4).map(move |k| (i, k))).filter(|(i, k)| i != k).collect();
    let want = oracle::fairwell(&batch, &pairs, Pool::Single, &ow(&cfg.weights), false);
    assert_close(parts(&batch_loss_m2(&to_lib(&batch), &roles(), &cfg).unwrap()), want, "off-diagonal");
}

#[test]
fn batch_stat_scope_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = random_batch(&mut rng, 3, 3, false);
    let cfg = LossConfig { stat_scope: StatScope::Batch, ..Default::default() };
    let pairs: Vec<_> = (0..3).flat_map(|i| (0..3).map(move |k| (i, k))).collect();
    let want = oracle::fairwell(&batch, &pairs, Pool::Single, &ow(&cfg.weights), true);
    assert_close(parts(&batch_loss_m2(&to_lib(&batch), &roles(), &cfg).unwrap()), want, "batch scope");
}

#[test]
fn m4_resolves_by_epoch() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = to_lib(&random_batch(&mut rng, 2, 2, true));
    let cfg = LossConfig::default();
    let odd = batch_loss(&batch, &roles(), Method::M4, 3, &cfg).unwrap();
    let even = batch_loss(&batch, &roles(), Method::M4, 4, &cfg).unwrap();
    assert_eq!(odd.method, Method::M2);
    assert_eq!(even.method, Method::M3);
    assert_eq!(odd.epoch, 3);
    assert_eq!(odd.total, even.total);
}

fn matrix_strategy(max_n: usize, max_d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2..=max_n, 1..=max_d).prop_flat_map(|(n, d)| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), n))
}

fn batch_strategy() -> impl Strategy<Value = Vec<Subj>> {
    (1usize..4, 1usize..4).prop_flat_map(|(b, d)| {
        prop::collection::vec(
            (
                prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), 2..5),
                prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), 2..5),
            )
                .prop_map(|(m1, m2)| Subj { label: 0, m1, m2 }),
            b,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn components_are_non_negative(batch in batch_strategy(), p in 0usize..3) {
        let cfg = LossConfig { pooling: Pooling::ALL[p], ..Default::default() };
        for m in Method::ALL {
            let b = batch_loss(&to_lib(&batch), &roles(), m, 1, &cfg).unwrap();
            for v in parts(&b) {
                prop_assert!(v >= 0.0);
            }
            prop_assert!((b.recombined_total() - b.total).abs() <= 1e-9 * b.total.max(1.0));
        }
    }

    #[test]
    fn variance_lies_in_range(x in matrix_strategy(6, 4), gamma in 0.1f64..3.0) {
        let v = variance_reg(&x, gamma, 1e-4).unwrap();
        prop_assert!((0.0..=gamma).contains(&v));
    }

    #[test]
    fn invariance_symmetric_and_zero_on_self(a in matrix_strategy(5, 3)) {
        let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v * 0.5 + 1.0).collect()).collect();
        prop_assert_eq!(invariance_reg(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(invariance_reg(&a, &b).unwrap(), invariance_reg(&b, &a).unwrap());
    }

    #[test]
    fn covariance_is_shift_invariant(x in matrix_strategy(6, 4), shift in -10.0f64..10.0) {
        let y: Vec<Vec<f64>> = x.iter().map(|r| r.iter().enumerate().map(|(j, v)| v + shift * (j as f64 + 1.0)).collect()).collect();
        let (a, b) = (covariance_reg(&x).unwrap(), covariance_reg(&y).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn m2_is_permutation_invariant(batch in batch_strategy(), rot in 0usize..4) {
        let mut perm = batch.clone();
        let k = rot % perm.len();
        perm.rotate_left(k);
        perm.reverse();
        let cfg = LossConfig::default();
        let a = batch_loss_m2(&to_lib(&batch), &roles(), &cfg).unwrap();
        let b = batch_loss_m2(&to_lib(&perm), &roles(), &cfg).unwrap();
        prop_assert!((a.total - b.total).abs() <= 1e-9 * a.total.max(1.0));
    }

    #[test]
    fn single_subject_methods_coincide(batch in batch_strategy(), p in 0usize..3) {
        let one = to_lib(&batch[..1]);
        let cfg = LossConfig { pooling: Pooling::ALL[p], ..Default::default() };
        let m1 = batch_loss_m1(&one, &roles(), &cfg).unwrap().total;
        prop_assert_eq!(m1, batch_loss_m2(&one, &roles(), &cfg).unwrap().total);
        prop_assert_eq!(m1, batch_loss_m3(&one, &roles(), &cfg).unwrap().total);
    }

    #[test]
    fn double_pooling_is_invariance_of_pooled_pair(batch in batch_strategy()) {
        let cfg = LossConfig { pooling: Pooling::Double, ..Default::default() };
        let s = &batch[0];
        let got = batch_loss_m1(&to_lib(&batch[..1]), &roles(), &cfg).unwrap().invariance;
        let want = invariance_reg(&[oracle::mean_row(&s.m1)], &[oracle::mean_row(&s.m2)]).unwrap();
        prop_assert!((got - want).abs() <= 1e-9 * want.max(1.0));
    }
}
