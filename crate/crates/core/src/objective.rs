//! Self-supervised correspondence objective.
//!
//! Positive and negative token sets are mined per query and per frame from the
//! current attention. Fused features are pulled together (cosine margin) and
//! attention rows are pulled together (symmetric-KL margin) for positives
//! against negatives. Patches are weighted by a softmax over negated
//! attention entropy.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::correlator::AttentionField;
use crate::error::{Error, Result};
use crate::numerics::{cosine_distance, entropy, Matrix, Real, KL_EPS};

/// Hinge margins for the two consistency terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margins {
    /// Cosine-distance margin.
    pub semantic: f64,
    /// Symmetric-KL margin.
    pub motion: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            semantic: 0.5,
            motion: 1.0,
        }
    }
}

/// Mined token indices, `[tokens, frames, k]` flattened row-major. Indices
/// are global token ids; the frame-`f` slice only holds frame-`f` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSets {
    pub tokens: usize,
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub k_pos: usize,
    pub k_neg: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl IndexSets {
    /// All `frames · k_pos` positives of token `i`.
    pub fn positives_of(&self, i: usize) -> &[usize] {
        let n = self.frames * self.k_pos;
        &self.positives[i * n..(i + 1) * n]
    }

    pub fn negatives_of(&self, i: usize) -> &[usize] {
        let n = self.frames * self.k_neg;
        &self.negatives[i * n..(i + 1) * n]
    }
}

/// Per-frame top-`k_pos` and bottom-`k_neg` keys of every query row.
///
/// Positives are in descending score order and negatives in ascending order.
/// Ties break toward the lower index for positives; negatives are the tail of
/// the same ordering, so the two sets never overlap.
pub fn sample_index_sets<T: Real>(
    attention: &AttentionField<T>,
    k_pos: usize,
    k_neg: usize,
) -> Result<IndexSets> {
    let hw = attention.tokens_per_frame;
    if !attention.is_self_attention() || attention.n_key() != attention.n_query() {
        return Err(Error::InvalidArgument(
            "index sets need square self-attention".into(),
        ));
    }
    if k_pos + k_neg > hw {
        return Err(Error::InvalidArgument(format!(
            "k_pos + k_neg = {} exceeds {hw} tokens per frame",
            k_pos + k_neg
        )));
    }
    let frames = attention.key_frames;
    let n = attention.n_query();
    let per_row: Vec<(Vec<usize>, Vec<usize>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = attention.probs.row(i);
            let mut pos = Vec::with_capacity(frames * k_pos);
            let mut neg = Vec::with_capacity(frames * k_neg);
            let mut order: Vec<usize> = (0..hw).collect();
            for f in 0..frames {
                let scores = &row[f * hw..(f + 1) * hw];
                order.iter_mut().enumerate().for_each(|(j, o)| *o = j);
                order.sort_by(|&a, &b| {
                    scores[b]
                        .partial_cmp(&scores[a])
                        .unwrap_or(Ordering::Equal)
                        .then(a.cmp(&b))
                });
                pos.extend(order[..k_pos].iter().map(|&j| f * hw + j));
                neg.extend(order[hw - k_neg..].iter().rev().map(|&j| f * hw + j));
            }
            (pos, neg)
        })
        .collect();
    let mut positives = Vec::with_capacity(n * frames * k_pos);
    let mut negatives = Vec::with_capacity(n * frames * k_neg);
    for (p, q) in per_row {
        positives.extend(p);
        negatives.extend(q);
    }
    Ok(IndexSets {
        tokens: n,
        frames,
        tokens_per_frame: hw,
        k_pos,
        k_neg,
        positives,
        negatives,
    })
}

/// One margin term: per-patch hinge sums plus the positive/negative distance
/// tables it was computed from (`[tokens, frames·k]` each).
#[derive(Debug, Clone, PartialEq)]
pub struct MarginTerm {
    pub per_patch: Vec<f64>,
    pub positive: Matrix<f64>,
    pub negative: Matrix<f64>,
}

/// `Σ_j Σ_k max(pos[j] − neg[k] + margin, 0)`, accumulated in `f64`.
pub fn margin_hinge(pos: &[f64], neg: &[f64], margin: f64) -> f64 {
    let mut total = 0.0;
    for &p in pos {
        for &q in neg {
            let v = p - q + margin;
            if v > 0.0 {
                total += v;
            }
        }
    }
    total
}

fn assemble(rows: Vec<(f64, Vec<f64>, Vec<f64>)>, np: usize, nn: usize) -> MarginTerm {
    let mut per_patch = Vec::with_capacity(rows.len());
    let mut pos = Vec::with_capacity(rows.len() * np);
    let mut neg = Vec::with_capacity(rows.len() * nn);
    for (l, p, n) in rows {
        per_patch.push(l);
        pos.extend(p);
        neg.extend(n);
    }
    let t = per_patch.len();
    MarginTerm {
        per_patch,
        positive: Matrix::new(t, np, pos).expect("consistent shape"),
        negative: Matrix::new(t, nn, neg).expect("consistent shape"),
    }
}

fn check_sets(sets: &IndexSets, tokens: usize) -> Result<()> {
    if sets.tokens != tokens {
        return Err(Error::shape(format!(
            "index sets cover {} tokens, input has {tokens}",
            sets.tokens
        )));
    }
    Ok(())
}

/// Cosine-distance margin loss on fused features.
pub fn semantic_loss<T: Real>(
    features: &Matrix<T>,
    sets: &IndexSets,
    margin: f64,
) -> Result<MarginTerm> {
    if margin < 0.0 {
        return Err(Error::InvalidArgument("negative semantic margin".into()));
    }
    check_sets(sets, features.rows())?;
    let rows = (0..features.rows())
        .into_par_iter()
        .map(|i| {
            let q = features.row(i);
            let pos = sets
                .positives_of(i)
                .iter()
                .map(|&j| cosine_distance(q, features.row(j)))
                .collect::<Result<Vec<_>>>()?;
            let neg = sets
                .negatives_of(i)
                .iter()
                .map(|&j| cosine_distance(q, features.row(j)))
                .collect::<Result<Vec<_>>>()?;
            Ok((margin_hinge(&pos, &neg, margin), pos, neg))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(
        rows,
        sets.frames * sets.k_pos,
        sets.frames * sets.k_neg,
    ))
}

/// Attention rows floored at [`KL_EPS`] with their logs and reciprocals,
/// cached once per call.
struct PreparedRows {
    cols: usize,
    floored: Vec<f64>,
    logs: Vec<f64>,
    recips: Vec<f64>,
}

impl PreparedRows {
    fn new<T: Real>(m: &Matrix<T>) -> Self {
        let floored: Vec<f64> = m.data().iter().map(|v| v.as_f64().max(KL_EPS)).collect();
        let logs = floored.iter().map(|v| v.ln()).collect();
        let recips = floored.iter().map(|v| 1.0 / v).collect();
        Self {
            cols: m.cols(),
            floored,
            logs,
            recips,
        }
    }

    #[inline]
    fn row(&self, i: usize) -> (&[f64], &[f64]) {
        let r = i * self.cols..(i + 1) * self.cols;
        (&self.floored[r.clone()], &self.logs[r])
    }

    #[inline]
    fn recip(&self, i: usize) -> &[f64] {
        &self.recips[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    fn sym_kl(&self, i: usize, j: usize) -> f64 {
        let (p, lp) = self.row(i);
        let (q, lq) = self.row(j);
        crate::numerics::sym_kl_prepared(p, lp, q, lq)
    }
}

/// Symmetric-KL margin loss on attention rows.
pub fn motion_loss<T: Real>(
    attention: &AttentionField<T>,
    sets: &IndexSets,
    margin: f64,
) -> Result<MarginTerm> {
    if margin < 0.0 {
        return Err(Error::InvalidArgument("negative motion margin".into()));
    }
    check_sets(sets, attention.n_query())?;
    let prepared = PreparedRows::new(&attention.probs);
    let rows = (0..attention.n_query())
        .into_par_iter()
        .map(|i| {
            let pos: Vec<f64> = sets
                .positives_of(i)
                .iter()
                .map(|&j| prepared.sym_kl(i, j))
                .collect();
            let neg: Vec<f64> = sets
                .negatives_of(i)
                .iter()
                .map(|&j| prepared.sym_kl(i, j))
                .collect();
            (margin_hinge(&pos, &neg, margin), pos, neg)
        })
        .collect();
    Ok(assemble(
        rows,
        sets.frames * sets.k_pos,
        sets.frames * sets.k_neg,
    ))
}

/// Row entropies and their softmax-normalized negation.
pub fn entropy_weights<T: Real>(attention: &AttentionField<T>) -> (Vec<f64>, Vec<f64>) {
    let e: Vec<f64> = attention.probs.row_iter().map(entropy).collect();
    let w = weights_from_entropy(&e);
    (e, w)
}

/// `softmax(−e)`.
pub fn weights_from_entropy(e: &[f64]) -> Vec<f64> {
    let min = e.iter().cloned().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = e.iter().map(|&v| (min - v).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// `Σ_i w[i]·(semantic[i] + motion[i])`.
pub fn total_loss(semantic: &[f64], motion: &[f64], weights: &[f64]) -> Result<f64> {
    if semantic.len() != motion.len() || semantic.len() != weights.len() {
        return Err(Error::shape(format!(
            "loss lengths {}, {}, {}",
            semantic.len(),
            motion.len(),
            weights.len()
        )));
    }
    Ok(semantic
        .iter()
        .zip(motion)
        .zip(weights)
        .map(|((&s, &m), &w)| w * (s + m))
        .sum())
}

/// Everything the objective computes for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub semantic: MarginTerm,
    pub motion: MarginTerm,
    pub entropy: Vec<f64>,
    pub weights: Vec<f64>,
    pub total: f64,
}

/// Evaluates the full objective for already-mined index sets.
pub fn evaluate<T: Real>(
    features: &Matrix<T>,
    attention: &AttentionField<T>,
    sets: &IndexSets,
    margins: Margins,
) -> Result<LossBreakdown> {
    let semantic = semantic_loss(features, sets, margins.semantic)?;
    let motion = motion_loss(attention, sets, margins.motion)?;
    let (entropy, weights) = entropy_weights(attention);
    let total = total_loss(&semantic.per_patch, &motion.per_patch, &weights)?;
    Ok(LossBreakdown {
        semantic,
        motion,
        entropy,
        weights,
        total,
    })
}

/// For a hinge table, `∂/∂pos[j]` and `∂/∂neg[k]` of the summed hinge: the
/// count of active pairs each entry participates in (negated for negatives).
fn hinge_slopes(pos: &[f64], neg: &[f64], margin: f64) -> (Vec<f64>, Vec<f64>) {
    let mut dp = vec![0.0; pos.len()];
    let mut dn = vec![0.0; neg.len()];
    for (j, &p) in pos.iter().enumerate() {
        for (k, &q) in neg.iter().enumerate() {
            if p - q + margin > 0.0 {
                dp[j] += 1.0;
                dn[k] -= 1.0;
            }
        }
    }
    (dp, dn)
}

/// Gradient of `1 − cos(u, v)` with respect to `u`, scaled by `coef` and
/// added into `out`.
fn add_cosine_grad(u: &[f64], v: &[f64], coef: f64, out: &mut [f64]) {
    let uu: f64 = u.iter().map(|x| x * x).sum();
    let vv: f64 = v.iter().map(|x| x * x).sum();
    let uv: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let (nu, nv) = (uu.sqrt(), vv.sqrt());
    let a = coef / (nu * nv);
    let b = coef * uv / (uu * nu * nv);
    for ((o, &ui), &vi) in out.iter_mut().zip(u).zip(v) {
        *o -= a * vi - b * ui;
    }
}

/// Gradient of `symKL(p, q)` with respect to `p`, scaled by `coef`.
/// `rp` holds the reciprocals of `p`.
fn add_sym_kl_grad(raw_p: &[f64], rp: &[f64], lp: &[f64], q: &[f64], lq: &[f64], coef: f64, out: &mut [f64]) {
    for k in 0..out.len() {
        if raw_p[k] > KL_EPS {
            out[k] += coef * (lp[k] - lq[k] + 1.0 - q[k] * rp[k]);
        }
    }
}

/// Exact gradients of the total loss with respect to the fused features and
/// the attention matrix.
///
/// Index sets and patch weights are held fixed; a hinge exactly at zero
/// contributes no slope.
pub fn objective_backward<T: Real>(
    features: &Matrix<T>,
    attention: &AttentionField<T>,
    sets: &IndexSets,
    margins: Margins,
    weights: &[f64],
) -> Result<(Matrix<T>, Matrix<T>)> {
    let n = features.rows();
    check_sets(sets, n)?;
    if attention.n_query() != n || weights.len() != n {
        return Err(Error::shape("objective inputs disagree on token count"));
    }
    let c = features.cols();
    let m = attention.n_key();
    let feats: Vec<Vec<f64>> = features
        .row_iter()
        .map(|r| r.iter().map(|v| v.as_f64()).collect())
        .collect();
    let raw: Vec<f64> = attention.probs.data().iter().map(|v| v.as_f64()).collect();
    let prepared = PreparedRows::new(&attention.probs);

    // Slopes of the weighted loss with respect to every gathered distance.
    let slopes: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| {
            let pos_idx = sets.positives_of(i);
            let neg_idx = sets.negatives_of(i);
            let q = &feats[i];
            let sp: Vec<f64> = pos_idx.iter().map(|&j| cos_dist(q, &feats[j])).collect();
            let sn: Vec<f64> = neg_idx.iter().map(|&j| cos_dist(q, &feats[j])).collect();
            let mp: Vec<f64> = pos_idx.iter().map(|&j| prepared.sym_kl(i, j)).collect();
            let mn: Vec<f64> = neg_idx.iter().map(|&j| prepared.sym_kl(i, j)).collect();
            let (dsp, dsn) = hinge_slopes(&sp, &sn, margins.semantic);
            let (dmp, dmn) = hinge_slopes(&mp, &mn, margins.motion);
            (dsp, dsn, dmp, dmn)
        })
        .collect();

    let mut grad_f = vec![0.0f64; n * c];
    let mut grad_a = vec![0.0f64; n * m];
    for (i, (dsp, dsn, dmp, dmn)) in slopes.into_iter().enumerate() {
        let w = weights[i];
        let pairs = sets
            .positives_of(i)
            .iter()
            .zip(dsp.iter().zip(&dmp))
            .chain(sets.negatives_of(i).iter().zip(dsn.iter().zip(&dmn)));
        let (pi, lpi) = prepared.row(i);
        let raw_i = &raw[i * m..(i + 1) * m];
        for (&j, (&ds, &dm)) in pairs {
            if ds != 0.0 {
                let coef = w * ds;
                add_cosine_grad(&feats[i], &feats[j], coef, &mut grad_f[i * c..(i + 1) * c]);
                add_cosine_grad(&feats[j], &feats[i], coef, &mut grad_f[j * c..(j + 1) * c]);
            }
            if dm != 0.0 {
                let coef = w * dm;
                let (pj, lpj) = prepared.row(j);
                let raw_j = &raw[j * m..(j + 1) * m];
                add_sym_kl_grad(raw_i, prepared.recip(i), lpi, pj, lpj, coef, &mut grad_a[i * m..(i + 1) * m]);
                add_sym_kl_grad(raw_j, prepared.recip(j), lpj, pi, lpi, coef, &mut grad_a[j * m..(j + 1) * m]);
            }
        }
    }
    Ok((
        Matrix::new(n, c, grad_f.into_iter().map(T::of).collect())?,
        Matrix::new(n, m, grad_a.into_iter().map(T::of).collect())?,
    ))
}

fn cos_dist(u: &[f64], v: &[f64]) -> f64 {
    let uu: f64 = u.iter().map(|x| x * x).sum();
    let vv: f64 = v.iter().map(|x| x * x).sum();
    let uv: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    1.0 - (uv / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(frames: usize, hw: usize, data: Vec<f64>) -> AttentionField<f64> {
        let n = frames * hw;
        AttentionField {
            probs: Matrix::new(data.len() / n, n, data).unwrap(),
            query_frames: frames,
            key_frames: frames,
            tokens_per_frame: hw,
        }
    }

    fn four_token_field() -> AttentionField<f64> {
        field(
            2,
            2,
            vec![
                0.40, 0.10, 0.45, 0.05, //
                0.25, 0.25, 0.25, 0.25, //
                0.10, 0.20, 0.30, 0.40, //
                0.70, 0.10, 0.10, 0.10,
            ],
        )
    }

    #[test]
    fn index_set_examples() {
        let sets = sample_index_sets(&four_token_field(), 1, 1).unwrap();
        assert_eq!(sets.positives_of(0), &[0, 2]);
        assert_eq!(sets.negatives_of(0), &[1, 3]);
        // Ties: uniform row picks lowest index first for positives.
        assert_eq!(sets.positives_of(1), &[0, 2]);
        assert_eq!(sets.negatives_of(1), &[1, 3]);
        assert_eq!(sets.positives_of(2), &[1, 3]);
    }

    #[test]
    fn index_sets_partition_when_full() {
        let a = four_token_field();
        let sets = sample_index_sets(&a, 1, 1).unwrap();
        for i in 0..4 {
            let mut all: Vec<usize> = sets
                .positives_of(i)
                .iter()
                .chain(sets.negatives_of(i))
                .copied()
                .collect();
            all.sort();
            assert_eq!(all, vec![0, 1, 2, 3]);
        }
        assert!(sample_index_sets(&a, 2, 1).is_err());
    }

    #[test]
    fn index_sets_invariant_to_monotone_transform() {
        let a = four_token_field();
        let mut b = a.clone();
        b.probs = a.probs.map(|v| (3.0 * v).exp() + 1.0);
        assert_eq!(
            sample_index_sets(&a, 1, 1).unwrap(),
            sample_index_sets(&b, 1, 1).unwrap()
        );
    }

    #[test]
    fn hinge_examples() {
        assert!((margin_hinge(&[0.2], &[0.4], 0.3) - 0.1).abs() < 1e-12);
        assert_eq!(margin_hinge(&[0.1, 0.2], &[0.9, 1.0], 0.5), 0.0);
        assert_eq!(margin_hinge(&[0.3, 0.3], &[0.3, 0.3], 0.0), 0.0);
        assert_eq!(margin_hinge(&[0.5], &[2.0], 1.0), 0.0);
        assert!((margin_hinge(&[1.5], &[1.0], 1.0) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn semantic_loss_uses_cosine_distances() {
        // Token 0 = (1, 0); positive (1, 1) at distance 1 − 1/√2; negative (−1, 0) at 2.
        let f = Matrix::new(2, 2, vec![1.0f64, 0.0, -1.0, 0.0]).unwrap();
        let sets = IndexSets {
            tokens: 2,
            frames: 1,
            tokens_per_frame: 2,
            k_pos: 1,
            k_neg: 1,
            positives: vec![0, 1],
            negatives: vec![1, 0],
        };
        let term = semantic_loss(&f, &sets, 0.5).unwrap();
        assert_eq!(term.positive.get(0, 0), 0.0);
        assert_eq!(term.negative.get(0, 0), 2.0);
        assert_eq!(term.per_patch, vec![0.0, 0.0]);
        let zero = Matrix::new(2, 2, vec![0.0f64, 0.0, -1.0, 0.0]).unwrap();
        assert!(matches!(
            semantic_loss(&zero, &sets, 0.5),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn motion_loss_identical_positive() {
        let a = field(1, 2, vec![0.5, 0.5, 0.9, 0.1]);
        let sets = IndexSets {
            tokens: 2,
            frames: 1,
            tokens_per_frame: 2,
            k_pos: 1,
            k_neg: 1,
            positives: vec![0, 1],
            negatives: vec![1, 0],
        };
        let term = motion_loss(&a, &sets, 1.0).unwrap();
        assert_eq!(term.positive.get(0, 0), 0.0);
        let mn = term.negative.get(0, 0);
        assert!((term.per_patch[0] - (1.0 - mn).max(0.0)).abs() < 1e-15);
    }

    #[test]
    fn entropy_weight_examples() {
        let w = weights_from_entropy(&[0.0, 2f64.ln()]);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12 && (w[1] - 1.0 / 3.0).abs() < 1e-12);
        let w = weights_from_entropy(&[0.7; 5]);
        assert!(w.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let shifted = weights_from_entropy(&[10.0, 10.0 + 2f64.ln()]);
        assert!((shifted[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(&[0.0; 3], &[0.0; 3], &[1.0 / 3.0; 3]).unwrap(), 0.0);
        let l = total_loss(&[0.5, 1.0], &[0.5, 2.0], &[0.75, 0.25]).unwrap();
        assert!((l - 1.5).abs() < 1e-12);
        let l = total_loss(&[1.0, 2.0, 0.5, 2.5], &[1.0, 0.0, 1.5, -0.5], &[0.25; 4]).unwrap();
        assert!((l - 2.0).abs() < 1e-12);
        assert!(total_loss(&[0.0], &[0.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn inactive_hinges_give_zero_gradients() {
        let f = Matrix::new(2, 2, vec![1.0f64, 0.0, -1.0, 0.1]).unwrap();
        let a = field(1, 2, vec![0.9, 0.1, 0.1, 0.9]);
        let sets = IndexSets {
            tokens: 2,
            frames: 1,
            tokens_per_frame: 2,
            k_pos: 1,
            k_neg: 1,
            positives: vec![0, 1],
            negatives: vec![1, 0],
        };
        let margins = Margins {
            semantic: 0.0,
            motion: 0.0,
        };
        let l = evaluate(&f, &a, &sets, margins).unwrap();
        assert_eq!(l.total, 0.0);
        let (gf, ga) = objective_backward(&f, &a, &sets, margins, &l.weights).unwrap();
        assert!(gf.data().iter().all(|&v| v == 0.0));
        assert!(ga.data().iter().all(|&v| v == 0.0));
    }
}
