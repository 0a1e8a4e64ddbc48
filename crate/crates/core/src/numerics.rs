//! Dense row-major matrices and the distance/entropy primitives the rest of
//! the engine is built on.
//!
//! Storage is generic over [`Real`] so the same kernels run in `f32` for
//! production and `f64` for gradient checking. Long reductions (entropy, KL,
//! norms) always accumulate in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const KL_EPS: f64 = 1e-8;

/// Rows with fewer elements than this are multiplied serially.
const PAR_THRESHOLD: usize = 1 << 14;

/// Scalar storage type for matrices.
pub trait Real: Float + Sum + Debug + Display + Default + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix[{}x{}]", self.rows, self.cols)
    }
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} elements cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v = *v * s);
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a = *a + b);
    }

    /// Select a subset of rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// Column-wise sum, as a `1 x cols` matrix.
    pub fn col_sums(&self) -> Self {
        let mut acc = vec![0.0f64; self.cols];
        for row in self.row_iter() {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v.as_f64();
            }
        }
        Self {
            rows: 1,
            cols: self.cols,
            data: acc.into_iter().map(T::of).collect(),
        }
    }

    /// Frobenius inner product, accumulated in `f64`.
    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "dot shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.as_f64() * b.as_f64())
            .sum()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(n, m);
        let kernel = |(r, out_row): (usize, &mut [T])| {
            let a = &self.data[r * k..(r + 1) * k];
            for (p, &av) in a.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let b = &other.data[p * m..(p + 1) * m];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o = *o + av * bv;
                }
            }
        };
        if m == 0 {
            return out;
        }
        if n * k * m >= PAR_THRESHOLD * 8 {
            out.data.par_chunks_mut(m).enumerate().for_each(kernel);
        } else {
            out.data.chunks_mut(m).enumerate().for_each(kernel);
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dimension mismatch");
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = Self::zeros(n, m);
        let kernel = |(r, out_row): (usize, &mut [T])| {
            let a = &self.data[r * k..(r + 1) * k];
            for (c, o) in out_row.iter_mut().enumerate() {
                let b = &other.data[c * k..(c + 1) * k];
                *o = a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            }
        };
        if m == 0 {
            return out;
        }
        if n * k * m >= PAR_THRESHOLD * 8 {
            out.data.par_chunks_mut(m).enumerate().for_each(kernel);
        } else {
            out.data.chunks_mut(m).enumerate().for_each(kernel);
        }
        out
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dimension mismatch");
        let (n, m) = (self.cols, other.cols);
        let mut out = Self::zeros(n, m);
        for p in 0..self.rows {
            let a = self.row(p);
            let b = other.row(p);
            for (r, &av) in a.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let out_row = &mut out.data[r * m..(r + 1) * m];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o = *o + av * bv;
                }
            }
        }
        out
    }
}

/// A borrowed row validated as a probability distribution.
#[derive(Debug, Clone, Copy)]
pub struct ProbRow<'a, T>(&'a [T]);

impl<'a, T: Real> ProbRow<'a, T> {
    pub const SUM_TOLERANCE: f64 = 1e-5;

    pub fn new(values: &'a [T]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("probability row"));
        }
        let mut sum = 0.0f64;
        for &v in values {
            let v = v.as_f64();
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "probability entry {v} outside [0, 1]"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "probability row sums to {sum}"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &'a [T] {
        self.0
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<T: Real>(logits: &Matrix<T>) -> Result<Matrix<T>> {
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let mut out = logits.clone();
    if out.cols() > 0 {
        out.data_mut()
            .chunks_mut(logits.cols())
            .for_each(softmax_in_place);
    }
    Ok(out)
}

/// Softmax of one row in place, with max subtraction.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += v.as_f64();
    }
    let inv = T::of(1.0 / sum);
    row.iter_mut().for_each(|v| *v = *v * inv);
}

/// Symmetric KL divergence `KL(p‖q) + KL(q‖p)` with entries floored at `eps`.
///
/// Evaluated as `Σ (p̃ − q̃)(ln p̃ − ln q̃)`, which is invariant under swapping
/// the arguments term by term, so the result is bit-exactly symmetric.
pub fn sym_kl<T: Real>(p: &[T], q: &[T], eps: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!(
            "sym_kl lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let a = a.as_f64().max(eps);
            let b = b.as_f64().max(eps);
            (a - b) * (a.ln() - b.ln())
        })
        .sum())
}

/// Same value as [`sym_kl`], given rows already floored and their logarithms.
#[inline]
pub(crate) fn sym_kl_prepared(p: &[f64], log_p: &[f64], q: &[f64], log_q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .zip(log_p.iter().zip(log_q))
        .map(|((&a, &b), (&la, &lb))| (a - b) * (la - lb))
        .sum()
}

/// Floor a row at `eps` and return it together with its logarithms.
pub(crate) fn prepare_kl_row<T: Real>(row: &[T], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let floored: Vec<f64> = row.iter().map(|v| v.as_f64().max(eps)).collect();
    let logs = floored.iter().map(|v| v.ln()).collect();
    (floored, logs)
}

/// Shannon entropy (natural log) of every row; `0 · ln 0` is taken as 0.
pub fn row_entropy<T: Real>(a: &Matrix<T>) -> Vec<f64> {
    a.row_iter().map(entropy).collect()
}

pub(crate) fn entropy<T: Real>(row: &[T]) -> f64 {
    -row
        .iter()
        .map(|&v| {
            let v = v.as_f64();
            if v > 0.0 {
                v * v.ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

/// `1 − cos(u, v)`.
pub fn cosine_distance<T: Real>(u: &[T], v: &[T]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!(
            "cosine_distance lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (mut uv, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.as_f64(), b.as_f64());
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let cos = (uv / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// Euclidean norm, accumulated in `f64`.
pub fn norm<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let m = Matrix::new(1, 2, vec![0.0f64, 0.0]).unwrap();
        assert_eq!(softmax_rows(&m).unwrap().data(), &[0.5, 0.5]);

        let m = Matrix::new(1, 2, vec![2f64.ln(), 0.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert!((s.get(0, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.get(0, 1) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let m = Matrix::new(1, 2, vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_rows(&m), Err(Error::NonFinite(_))));
        let m = Matrix::new(1, 2, vec![f32::INFINITY, 0.0]).unwrap();
        assert!(softmax_rows(&m).is_err());
    }

    #[test]
    fn softmax_handles_large_logits() {
        let m = Matrix::new(1, 3, vec![1000.0f32, 999.0, -1000.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert!(s.is_finite());
        assert!((s.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sym_kl_examples() {
        assert_eq!(sym_kl(&[0.5f64, 0.5], &[0.5, 0.5], KL_EPS).unwrap(), 0.0);
        let d = sym_kl(&[0.75f64, 0.25], &[0.25, 0.75], KL_EPS).unwrap();
        assert!((d - 3f64.ln()).abs() < 1e-12, "{d}");
        assert!(sym_kl(&[1.0f32], &[0.5, 0.5], KL_EPS).is_err());
    }

    #[test]
    fn sym_kl_prepared_matches_direct() {
        let p = [0.1f32, 0.0, 0.6, 0.3];
        let q = [0.25f32, 0.25, 0.25, 0.25];
        let (pf, pl) = prepare_kl_row(&p, KL_EPS);
        let (qf, ql) = prepare_kl_row(&q, KL_EPS);
        assert_eq!(
            sym_kl(&p, &q, KL_EPS).unwrap(),
            sym_kl_prepared(&pf, &pl, &qf, &ql)
        );
    }

    #[test]
    fn entropy_examples() {
        let m = Matrix::new(
            3,
            4,
            vec![
                0.25f64, 0.25, 0.25, 0.25, //
                0.0, 1.0, 0.0, 0.0, //
                0.5, 0.25, 0.25, 0.0,
            ],
        )
        .unwrap();
        let e = row_entropy(&m);
        assert!((e[0] - 4f64.ln()).abs() < 1e-12);
        assert_eq!(e[1], 0.0);
        assert!((e[2] - 1.5 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        let u = [1.0f64, 2.0, -3.0];
        assert!(cosine_distance(&u, &u).unwrap().abs() < 1e-12);
        assert!((cosine_distance(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert!((cosine_distance(&u, &neg).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(
            cosine_distance(&[0.0f64, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn prob_row_validation() {
        assert!(ProbRow::new(&[0.5f32, 0.5]).is_ok());
        assert!(ProbRow::new(&[0.6f32, 0.5]).is_err());
        assert!(ProbRow::new(&[1.5f32, -0.5]).is_err());
        assert!(ProbRow::<f32>::new(&[]).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.5 - 2.0);
        let b = Matrix::from_fn(4, 2, |r, c| (r as f64 - c as f64) * 0.25);
        let ab = a.matmul(&b);
        assert_eq!(ab, a.matmul_nt(&b.transpose()));
        assert_eq!(ab, a.transpose().matmul_tn(&b));
        assert_eq!(ab.get(1, 1), (0..4).map(|k| a.get(1, k) * b.get(k, 1)).sum::<f64>());
    }

    fn prob_row(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, len).prop_map(|v| {
            let s: f64 = v.iter().sum::<f64>() + 1e-12;
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized(data in prop::collection::vec(-50.0f32..50.0, 35)) {
            let m = Matrix::new(5, 7, data).unwrap();
            let s = softmax_rows(&m).unwrap();
            for row in s.row_iter() {
                let sum: f64 = row.iter().map(|&v| v as f64).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
                prop_assert!(ProbRow::new(row).is_ok());
            }
        }

        #[test]
        fn sym_kl_properties((p, q) in (1usize..12).prop_flat_map(|n| (prob_row(n), prob_row(n)))) {
            prop_assert!(sym_kl(&p, &p, KL_EPS).unwrap() <= 1e-9);
            let pq = sym_kl(&p, &q, KL_EPS).unwrap();
            let qp = sym_kl(&q, &p, KL_EPS).unwrap();
            prop_assert!(pq >= 0.0);
            prop_assert_eq!(pq.to_bits(), qp.to_bits());
        }

        #[test]
        fn entropy_bounded(p in (1usize..20).prop_flat_map(prob_row)) {
            let n = p.len();
            let m = Matrix::new(1, n, p).unwrap();
            let e = row_entropy(&m)[0];
            prop_assert!(e >= -1e-12 && e <= (n as f64).ln() + 1e-6);
        }

        #[test]
        fn cosine_scale_invariant(
            u in prop::collection::vec(-10.0f64..10.0, 6),
            v in prop::collection::vec(-10.0f64..10.0, 6),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&u) > 1e-3 && norm(&v) > 1e-3);
            let d = cosine_distance(&u, &v).unwrap();
            let us: Vec<f64> = u.iter().map(|x| x * a).collect();
            let vs: Vec<f64> = v.iter().map(|x| x * b).collect();
            prop_assert!((cosine_distance(&us, &vs).unwrap() - d).abs() <= 1e-6);
            prop_assert!((0.0..=2.0).contains(&d));
        }
    }
}
