//! Naive reference implementations used as oracles by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, Normal};
use stcorr_core::Matrix;

pub const EPS: f64 = 1e-8;

pub fn kl_distance(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a.max(EPS), b.max(EPS));
        total += (a - b) * (a.ln() - b.ln());
    }
    total
}

pub fn cos_distance(p: &[f64], q: &[f64]) -> f64 {
    let (mut pq, mut pp, mut qq) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(q) {
        pq += a * b;
        pp += a * a;
        qq += b * b;
    }
    1.0 - (pq / (pp.sqrt() * qq.sqrt())).clamp(-1.0, 1.0)
}

/// Direct transcription of the agglomeration loop: list-based, no caching.
/// Returns centroids and member lists in creation order.
pub fn naive_cluster(
    rows: &[Vec<f64>],
    tau: f64,
    dist: fn(&[f64], &[f64]) -> f64,
    renormalize: bool,
) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let mut cents: Vec<Vec<f64>> = rows.to_vec();
    let mut members: Vec<Vec<usize>> = (0..rows.len()).map(|i| vec![i]).collect();
    loop {
        let n = cents.len();
        let mut used = vec![false; n];
        let mut next_c = Vec::new();
        let mut next_m = Vec::new();
        for x in 0..n {
            if used[x] {
                continue;
            }
            let mut group = Vec::new();
            for y in 0..n {
                if !used[y] && (y == x || dist(&cents[x], &cents[y]) < tau) {
                    group.push(y);
                }
            }
            let mut merged: Vec<usize> = Vec::new();
            for &y in &group {
                used[y] = true;
                merged.extend(&members[y]);
            }
            merged.sort();
            let centroid = if group.len() == 1 {
                cents[x].clone()
            } else {
                let mut c = vec![0.0; cents[x].len()];
                for &y in &group {
                    for (a, b) in c.iter_mut().zip(&cents[y]) {
                        *a += b;
                    }
                }
                for a in c.iter_mut() {
                    *a /= group.len() as f64;
                }
                if renormalize {
                    let s: f64 = c.iter().sum();
                    for a in c.iter_mut() {
                        *a /= s;
                    }
                }
                c
            };
            next_c.push(centroid);
            next_m.push(merged);
        }
        let unchanged = next_c.len() == n;
        cents = next_c;
        members = next_m;
        if unchanged {
            return (cents, members);
        }
    }
}

/// ARI by explicit pair enumeration over foreground pixels.
pub fn pair_count_ari(pred: &[u32], gt: &[u32]) -> f64 {
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] > 0).collect();
    let (mut ss, mut sd, mut ds, mut dd) = (0f64, 0f64, 0f64, 0f64);
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            let (i, j) = (idx[a], idx[b]);
            match (pred[i] == pred[j], gt[i] == gt[j]) {
                (true, true) => ss += 1.0,
                (true, false) => sd += 1.0,
                (false, true) => ds += 1.0,
                (false, false) => dd += 1.0,
            }
        }
    }
    let denom = (ss + sd) * (sd + dd) + (ss + ds) * (ds + dd);
    if denom == 0.0 {
        return 1.0;
    }
    2.0 * (ss * dd - sd * ds) / denom
}

/// Best total over every partial injective assignment. For non-negative
/// scores this equals the best maximum-cardinality assignment.
pub fn exhaustive_best(scores: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(scores: &[f64], rows: usize, cols: usize, r: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if r == rows {
            *best = best.max(acc);
            return;
        }
        go(scores, rows, cols, r + 1, used, acc, best);
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                go(scores, rows, cols, r + 1, used, acc + scores[r * cols + c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::NEG_INFINITY;
    go(scores, rows, cols, 0, &mut vec![false; cols], 0.0, &mut best);
    best
}

/// Probability rows drawn around a few random prototypes so that
/// agglomeration has structure at several scales.
pub fn clustered_prob_rows<R: Rng>(rng: &mut R, n: usize, m: usize, groups: usize, spread: f64) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let centers: Vec<Vec<f64>> = (0..groups)
        .map(|_| (0..m).map(|_| 2.0 * normal.sample(rng)).collect())
        .collect();
    (0..n)
        .map(|_| {
            let c = &centers[rng.gen_range(0..groups)];
            let logits: Vec<f64> = c.iter().map(|v| v + spread * normal.sample(rng)).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn to_matrix(rows: &[Vec<f64>]) -> Matrix<f64> {
    Matrix::from_fn(rows.len(), rows[0].len(), |r, c| rows[r][c])
}
