//! Plain scalar re-implementation of the loss terms, written with explicit
//! loops and no shared code with the library.

#![allow(dead_code)]

pub type Rows = Vec<Vec<f64>>;

pub fn col_mean(x: &Rows, j: usize) -> f64 {
    let mut s = 0.0;
    for r in x {
        s += r[j];
    }
    s / x.len() as f64
}

pub fn variance(x: &Rows, gamma: f64, eps: f64) -> f64 {
    let n = x.len();
    let d = x[0].len();
    let mut total = 0.0;
    for j in 0..d {
        let m = col_mean(x, j);
        let mut ss = 0.0;
        for r in x {
            ss += (r[j] - m) * (r[j] - m);
        }
        let var = ss / (n as f64 - 1.0);
        let h = gamma - (var + eps).sqrt();
        if h > 0.0 {
            total += h;
        }
    }
    total / d as f64
}

pub fn covariance(x: &Rows) -> f64 {
    let n = x.len();
    let d = x[0].len();
    let means: Vec<f64> = (0..d).map(|j| col_mean(x, j)).collect();
    let mut total = 0.0;
    for j in 0..d {
        for k in 0..d {
            if j == k {
                continue;
            }
            let mut c = 0.0;
            for r in x {
                c += (r[j] - means[j]) * (r[k] - means[k]);
            }
            c /= n as f64 - 1.0;
            total += c * c;
        }
    }
    total / d as f64
}

pub fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}

pub fn invariance(a: &Rows, b: &Rows) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += sqdist(&a[i], &b[i]);
    }
    s / a.len() as f64
}

pub fn mean_row(x: &Rows) -> Vec<f64> {
    (0..x[0].len()).map(|j| col_mean(x, j)).collect()
}

pub fn pooled_invariance(p: &[f64], segs: &Rows) -> f64 {
    let mut s = 0.0;
    for z in segs {
        s += sqdist(p, z);
    }
    s / segs.len() as f64
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Pool {
    None,
    Single,
    Double,
}

#[derive(Clone, Debug)]
pub struct Subj {
    pub label: u8,
    pub m1: Rows,
    pub m2: Rows,
}

pub struct W {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub gamma: f64,
    pub eps: f64,
}

pub fn pair_invariance(a: &Subj, b: &Subj, pool: Pool) -> f64 {
    match pool {
        Pool::None => {
            let n = a.m1.len().min(b.m2.len());
            invariance(&a.m1[..n].to_vec(), &b.m2[..n].to_vec())
        }
        Pool::Single => pooled_invariance(&mean_row(&a.m1), &b.m2),
        Pool::Double => sqdist(&mean_row(&a.m1), &mean_row(&b.m2)),
    }
}

/// Returns `[I, V1, V2, C1, C2, total]`.
pub fn fairwell(batch: &[Subj], pairs: &[(usize, usize)], pool: Pool, w: &W, batch_stats: bool) -> [f64; 6] {
    let mut acc = [0.0; 6];
    let cat1: Rows = batch.iter().flat_map(|s| s.m1.clone()).collect();
    let cat2: Rows = batch.iter().flat_map(|s| s.m2.clone()).collect();
    for &(i, k) in pairs {
        let inv = pair_invariance(&batch[i], &batch[k], pool);
        let (v1, v2, c1, c2) = if batch_stats {
            (variance(&cat1, w.gamma, w.eps), variance(&cat2, w.gamma, w.eps), covariance(&cat1), covariance(&cat2))
        } else {
            (
                variance(&batch[i].m1, w.gamma, w.eps),
                variance(&batch[k].m2, w.gamma, w.eps),
                covariance(&batch[i].m1),
                covariance(&batch[k].m2),
            )
        };
        let total = w.lambda * inv + w.mu * (v1 + v2) + w.nu * (c1 + c2);
        for (a, v) in acc.iter_mut().zip([inv, v1, v2, c1, c2, total]) {
            *a += v;
        }
    }
    acc.map(|v| v / pairs.len() as f64)
}

pub fn m1(batch: &[Subj], pool: Pool, w: &W) -> [f64; 6] {
    let pairs: Vec<_> = (0..batch.len()).map(|i| (i, i)).collect();
    fairwell(batch, &pairs, pool, w, false)
}

pub fn m2(batch: &[Subj], pool: Pool, w: &W) -> [f64; 6] {
    let mut pairs = Vec::new();
    for i in 0..batch.len() {
        for k in 0..batch.len() {
            pairs.push((i, k));
        }
    }
    fairwell(batch, &pairs, pool, w, false)
}

/// Plain VICReg on the batch: `lambda` fixed at 1.
pub fn vicreg(batch: &[Subj], pool: Pool, w: &W) -> [f64; 6] {
    let (inv, a, b) = if pool == Pool::None {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for s in batch {
            let n = s.m1.len().min(s.m2.len());
            a.extend_from_slice(&s.m1[..n]);
            b.extend_from_slice(&s.m2[..n]);
        }
        (invariance(&a, &b), a, b)
    } else {
        let mut inv = 0.0;
        for s in batch {
            inv += pair_invariance(s, s, pool);
        }
        let a: Rows = batch.iter().flat_map(|s| s.m1.clone()).collect();
        let b: Rows = batch.iter().flat_map(|s| s.m2.clone()).collect();
        (inv / batch.len() as f64, a, b)
    };
    let (v1, v2, c1, c2) = (variance(&a, w.gamma, w.eps), variance(&b, w.gamma, w.eps), covariance(&a), covariance(&b));
    [inv, v1, v2, c1, c2, inv + w.mu * (v1 + v2) + w.nu * (c1 + c2)]
}
