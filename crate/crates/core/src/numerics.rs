//! Dense row-major matrices, stable softmax / log-sum-exp, and seeded randomness.

use std::ops::{Index, IndexMut};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every logarithm in the library clamps its argument to at least this value.
pub const LOG_FLOOR: f64 = 1e-300;

/// `ln(max(x, LOG_FLOOR))`.
#[inline]
pub fn safe_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// `x ln x` with the `0 ln 0 = 0` convention.
#[inline]
pub fn xlnx(x: f64) -> f64 {
    x * safe_ln(x)
}

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::shape(format!(
                "row {i} has {} entries, expected {cols}",
                rows[i].len()
            )));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a 0-column matrix still has `rows` empty rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Matrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(format!(
                "matmul {}x{} by transposed {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn transposed_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(format!(
                "transposed {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for n in 0..self.rows {
            let b = other.row(n);
            for (i, &a) in self.row(n).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    /// Adds `v` to every row.
    pub fn add_row_vector(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.cols {
            return Err(Error::shape(format!(
                "row vector of length {} added to {} columns",
                v.len(),
                self.cols
            )));
        }
        for i in 0..self.rows {
            for (x, &b) in self.row_mut(i).iter_mut().zip(v) {
                *x += b;
            }
        }
        Ok(())
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.row_iter() {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.row_iter().map(|r| r.iter().sum()).collect()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.ensure_same_shape(other, "elementwise op")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.ensure_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// True when every row is nonnegative and sums to one within `tol`.
    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        self.row_iter().all(|r| {
            r.iter().all(|&v| v >= 0.0 && v.is_finite()) && (r.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl AsRef<Matrix> for Matrix {
    fn as_ref(&self) -> &Matrix {
        self
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `ln Σ exp(v_j)` evaluated after subtracting the maximum.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::invalid("log_sum_exp of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("log_sum_exp of a non-finite vector"));
    }
    Ok(lse_unchecked(v))
}

#[inline]
fn lse_unchecked(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// In-place softmax of a single row. The row must be finite.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    if !logits.is_finite() {
        return Err(Error::invalid("softmax_rows: non-finite logits"));
    }
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

/// `Σ (a − b)²` over all entries.
pub fn frobenius_sq_diff(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.ensure_same_shape(b, "frobenius_sq_diff")?;
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

/// Euclidean projection of `v` onto the probability simplex (sort-and-threshold).
pub fn project_to_simplex(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (j as f64 + 1.0);
        if u - t > 0.0 {
            tau = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - tau).max(0.0);
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// Index of the smallest entry; the lowest index wins ties.
pub fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = j;
        }
    }
    best
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seeded generator. ChaCha8 keeps draw sequences identical across platforms.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child generator for a named sub-stream; does not advance `self`.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(stream.wrapping_add(1))))
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample::<f64, _>(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..n).collect();
        self.shuffle(&mut v);
        v
    }

    /// A random point of the probability simplex (normalized exponentials).
    pub fn simplex_point(&mut self, k: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..k).map(|_| -safe_ln(1.0 - self.uniform())).collect();
        let s: f64 = v.iter().sum();
        for x in &mut v {
            *x /= s;
        }
        v
    }

    /// An `n × k` matrix whose rows are independent random simplex points.
    pub fn stochastic_matrix(&mut self, n: usize, k: usize) -> Matrix {
        let mut m = Matrix::zeros(n, k);
        for i in 0..n {
            let p = self.simplex_point(k);
            m.row_mut(i).copy_from_slice(&p);
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_row() {
        let p = softmax_rows(&Matrix::zeros(1, 3)).unwrap();
        for &v in p.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ratio_three() {
        for a in [-50.0, 0.0, 3.7, 400.0] {
            let m = Matrix::from_vec(1, 2, vec![a, a + 3f64.ln()]).unwrap();
            let p = softmax_rows(&m).unwrap();
            assert!((p[(0, 0)] - 0.25).abs() < 1e-12);
            assert!((p[(0, 1)] - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_extreme_logits() {
        // exp(-1000) ≈ 5e-435 is below the smallest subnormal, so the oracle value is 0 in f64.
        let p = softmax_rows(&Matrix::from_vec(1, 2, vec![1000.0, 0.0]).unwrap()).unwrap();
        assert_eq!(p[(0, 0)], 1.0);
        assert_eq!(p[(0, 1)], 0.0);
    }

    #[test]
    fn softmax_rejects_nan() {
        let m = Matrix {
            rows: 1,
            cols: 2,
            data: vec![f64::NAN, 0.0],
        };
        assert!(matches!(softmax_rows(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn lse_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[-3.25]).unwrap(), -3.25);
        // 700 + ln 2, exact in the oracle; naive exp(700) would overflow the sum of two.
        let v = log_sum_exp(&[700.0, 700.0]).unwrap();
        assert!((v - (700.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        assert!(matches!(log_sum_exp(&[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn frobenius_examples() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(frobenius_sq_diff(&a, &a).unwrap(), 0.0);
        assert_eq!(frobenius_sq_diff(&a, &b).unwrap(), 2.0);
        let c = Matrix::zeros(2, 1);
        assert!(matches!(frobenius_sq_diff(&a, &c), Err(Error::Shape(_))));

        let mut rng = Rng::new(3);
        let x = Matrix::from_fn(3, 3, |_, _| rng.normal());
        let y = Matrix::from_fn(3, 3, |_, _| rng.normal());
        let mut oracle = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                oracle += (x[(i, j)] - y[(i, j)]).powi(2);
            }
        }
        assert!((frobenius_sq_diff(&x, &y).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = Rng::new(11);
        let a = Matrix::from_fn(4, 3, |_, _| rng.normal());
        let b = Matrix::from_fn(3, 5, |_, _| rng.normal());
        let ab = a.matmul(&b).unwrap();
        let ab2 = a.matmul_transposed(&b.transpose()).unwrap();
        let ab3 = a.transpose().transposed_matmul(&b).unwrap();
        assert!(frobenius_sq_diff(&ab, &ab2).unwrap() < 1e-24);
        assert!(frobenius_sq_diff(&ab, &ab3).unwrap() < 1e-24);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn simplex_projection() {
        let mut v = vec![0.5, 0.5, 0.5];
        project_to_simplex(&mut v);
        for x in &v {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut w = vec![2.0, 0.0, -1.0];
        project_to_simplex(&mut w);
        assert_eq!(w, vec![1.0, 0.0, 0.0]);
        let mut u = vec![0.2, 0.3, 0.5];
        project_to_simplex(&mut u);
        assert!((u[0] - 0.2).abs() < 1e-15 && (u[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rng_is_reproducible_and_forks_differ() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let xs: Vec<u64> = (0..64).map(|_| a.uniform().to_bits()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.uniform().to_bits()).collect();
        assert_eq!(xs, ys);
        let mut f1 = a.fork(1);
        let mut f2 = a.fork(2);
        assert_ne!(f1.uniform().to_bits(), f2.uniform().to_bits());
    }

    #[test]
    fn ties_take_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmin(&[1.0, 0.0, 0.0]), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(v in proptest::collection::vec(-1e3f64..1e3, 1..12)) {
                let m = Matrix::from_vec(1, v.len(), v).unwrap();
                let p = softmax_rows(&m).unwrap();
                prop_assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(p.row(0).iter().all(|&x| (0.0..=1.0).contains(&x)));
            }

            #[test]
            fn softmax_shift_invariant(v in proptest::collection::vec(-50f64..50.0, 1..8), c in -100f64..100.0) {
                let m = Matrix::from_vec(1, v.len(), v.clone()).unwrap();
                let shifted = Matrix::from_vec(1, v.len(), v.iter().map(|x| x + c).collect()).unwrap();
                let p = softmax_rows(&m).unwrap();
                let q = softmax_rows(&shifted).unwrap();
                for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn lse_shift(v in proptest::collection::vec(-100f64..100.0, 1..8), c in -100f64..100.0) {
                let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
                let d = log_sum_exp(&shifted).unwrap() - log_sum_exp(&v).unwrap() - c;
                prop_assert!(d.abs() < 1e-10);
            }
        }
    }
}
