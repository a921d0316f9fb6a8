//! Dense row-major f64 matrices and the seeded generator used everywhere else.
//!
//! Deliberately small: no strides, no views, no broadcasting rules. Copies are
//! explicit, and the handful of in-place mutators exist only so the toy
//! trainer can apply updates without reallocating. Single precision never
//! appears here; the bench harness keeps its own f32 kernels.

use crate::error::{Error, Result};

/// Row-major 2-D matrix of f64 with nonzero dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix2D {
    /// Builds a matrix from row-major data. Rejects empty shapes and
    /// data whose length does not equal rows * cols.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyInput("Matrix2D::new"));
        }
        if data.len() != rows * cols {
            return Err(Error::DataLength { rows, cols, got: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    /// Zero matrix. Panics on zero dimensions, which is always a programmer
    /// error rather than a data error.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "Matrix2D::zeros: zero dimension");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Identity matrix of size n.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Convenience constructor from per-row slices; rows must agree in length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("Matrix2D::from_rows"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DataLength {
                    rows: rows.len(),
                    cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Fills entry by entry from `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Seeded uniform fill over [lo, hi), drawn in row-major order so the same
    /// seed always produces bit-identical contents.
    pub fn random_uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.uniform(lo, hi))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    /// Borrow of row `r` as a contiguous slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Copies a single row out as a 1 x cols matrix.
    pub fn row_matrix(&self, r: usize) -> Result<Matrix2D> {
        if r >= self.rows {
            return Err(Error::IndexOutOfRange { what: "row", index: r, len: self.rows });
        }
        Matrix2D::new(1, self.cols, self.row(r).to_vec())
    }

    /// Copies rows r0..r1 out as a new matrix; the explicit-copy way the
    /// layers slice a gating group out of a batch.
    pub fn row_range(&self, r0: usize, r1: usize) -> Result<Matrix2D> {
        if r0 >= r1 || r1 > self.rows {
            return Err(Error::IndexOutOfRange { what: "row range end", index: r1, len: self.rows });
        }
        Matrix2D::new(r1 - r0, self.cols, self.data[r0 * self.cols..r1 * self.cols].to_vec())
    }

    pub fn transpose(&self) -> Matrix2D {
        let mut out = Matrix2D::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Plain triple-loop matrix product in i-k-j order so the inner loop walks
    /// both operands contiguously. No blocking, no BLAS; fast enough for every
    /// size this crate touches.
    pub fn matmul(&self, other: &Matrix2D) -> Result<Matrix2D> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix2D::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let aik = self.data[i * self.cols + k];
                let b_row = &other.data[k * n..(k + 1) * n];
                for j in 0..n {
                    out_row[j] += aik * b_row[j];
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix2D) -> Result<Matrix2D> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix2D::new(self.rows, self.cols, data)
    }

    pub fn sub(&self, other: &Matrix2D) -> Result<Matrix2D> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "sub",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix2D::new(self.rows, self.cols, data)
    }

    pub fn scale(&self, c: f64) -> Matrix2D {
        Matrix2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix2D {
        Matrix2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place `self += c * other`; the only mutating arithmetic op, used by
    /// the toy trainer's descent step.
    pub fn add_scaled_in_place(&mut self, other: &Matrix2D, c: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_scaled_in_place",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    /// Frobenius inner product, sum of elementwise products.
    pub fn frob_dot(&self, other: &Matrix2D) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "frob_dot",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Column sums as a vector of length cols.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j] += self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Row-wise softmax with per-row max subtraction, so rows with large
    /// logits cannot overflow. Each output row is nonnegative and sums to 1
    /// within 1e-12.
    pub fn softmax_rows(&self) -> Matrix2D {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    /// Column means collapsed to a single 1 x cols row. Infallible because the
    /// constructor already rejects empty matrices.
    pub fn mean_rows(&self) -> Matrix2D {
        let inv = 1.0 / self.rows as f64;
        let sums = self.col_sums();
        Matrix2D {
            rows: 1,
            cols: self.cols,
            data: sums.into_iter().map(|s| s * inv).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; the gap metric the oracles use.
    pub fn max_abs_diff(&self, other: &Matrix2D) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Deterministic 64-bit generator: xorshift64* core seeded through a
/// splitmix64 scramble. Written out here so seeded runs reproduce the same
/// bit pattern on every platform, independent of external crate versions.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        // splitmix64 finalizer; also lifts seed 0 away from the forbidden
        // all-zero xorshift state.
        let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        Self { state: if z == 0 { 0x9e37_79b9_7f4a_7c15 } else { z } }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.state = x;
        x.wrapping_mul(0x2545_f491_4f6c_dd1d)
    }

    /// Uniform in [0, 1) with 53 random mantissa bits.
    pub fn next_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard Box-Muller draw, cosine branch only.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1], keeps ln away from zero
        let u2 = self.next_f64();
        mean + std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] x [[5],[6]]: row 0 is 1*5 + 2*6 = 17, row 1 is 3*5 + 4*6 = 39.
        let a = Matrix2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix2D::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), (2, 1));
        assert_eq!(c.get(0, 0), 17.0);
        assert_eq!(c.get(1, 0), 39.0);
    }

    #[test]
    fn matmul_against_scalar_loops() {
        let mut rng = Rng::new(11);
        let a = Matrix2D::random_uniform(4, 6, -1.0, 1.0, &mut rng);
        let b = Matrix2D::random_uniform(6, 3, -1.0, 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..6 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_identity_is_exact() {
        let mut rng = Rng::new(5);
        let a = Matrix2D::random_uniform(3, 3, -2.0, 2.0, &mut rng);
        let i3 = Matrix2D::identity(3);
        assert_eq!(a.matmul(&i3).unwrap(), a);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix2D::zeros(2, 3);
        let b = Matrix2D::zeros(4, 5);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x5"), "message was: {msg}");
    }

    #[test]
    fn new_rejects_bad_data_length() {
        let err = Matrix2D::new(2, 2, vec![1.0, 2.0, 3.0]).unwrap_err();
        assert_eq!(err, Error::DataLength { rows: 2, cols: 2, got: 3 });
    }

    #[test]
    fn new_rejects_empty_shape() {
        assert!(Matrix2D::new(0, 3, vec![]).is_err());
        assert!(Matrix2D::new(3, 0, vec![]).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = Rng::new(3);
        let a = Matrix2D::random_uniform(5, 2, -1.0, 1.0, &mut rng);
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.transpose().shape(), (2, 5));
    }

    #[test]
    fn softmax_matches_direct_exp_sum() {
        let logits = Matrix2D::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let sm = logits.softmax_rows();
        for i in 0..2 {
            let row = logits.row(i);
            let sum: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..3 {
                let expected = row[j].exp() / sum;
                assert!((sm.get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(7);
        let logits = Matrix2D::random_uniform(6, 9, -5.0, 5.0, &mut rng);
        let sm = logits.softmax_rows();
        for i in 0..6 {
            let sum: f64 = sm.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(sm.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let logits = Matrix2D::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let sm = logits.softmax_rows();
        assert!(sm.is_finite());
        assert!((sm.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(sm.get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn softmax_of_zeros_is_exactly_uniform() {
        let sm = Matrix2D::zeros(1, 4).softmax_rows();
        for j in 0..4 {
            assert_eq!(sm.get(0, j), 0.25);
        }
    }

    #[test]
    fn mean_rows_matches_column_sums() {
        let mut rng = Rng::new(9);
        let a = Matrix2D::random_uniform(5, 4, -1.0, 1.0, &mut rng);
        let mean = a.mean_rows();
        assert_eq!(mean.shape(), (1, 4));
        let sums = a.col_sums();
        for j in 0..4 {
            assert!((mean.get(0, j) - sums[j] / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn frob_dot_hand_case() {
        let a = Matrix2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix2D::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        // 1*5 + 2*6 + 3*7 + 4*8 = 70
        assert_eq!(a.frob_dot(&b).unwrap(), 70.0);
    }

    #[test]
    fn add_scaled_in_place_applies_update() {
        let mut a = Matrix2D::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let g = Matrix2D::from_rows(&[vec![2.0, -4.0]]).unwrap();
        a.add_scaled_in_place(&g, -0.5).unwrap();
        assert_eq!(a.row(0), &[0.0, 3.0]);
    }

    #[test]
    fn rng_same_seed_same_stream() {
        let mut a = Rng::new(123);
        let mut b = Rng::new(123);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn rng_different_seeds_diverge() {
        let mut a = Rng::new(1);
        let mut b = Rng::new(2);
        let same = (0..16).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn rng_zero_seed_is_usable() {
        let mut r = Rng::new(0);
        let v = r.next_u64();
        assert_ne!(v, 0);
        assert_ne!(v, r.next_u64());
    }

    #[test]
    fn rng_unit_range() {
        let mut r = Rng::new(42);
        for _ in 0..1000 {
            let v = r.next_f64();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn rng_uniform_respects_bounds() {
        let mut r = Rng::new(8);
        for _ in 0..1000 {
            let v = r.uniform(-0.25, 0.75);
            assert!((-0.25..0.75).contains(&v));
        }
    }

    #[test]
    fn rng_normal_moments_are_plausible() {
        let mut r = Rng::new(77);
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| r.normal(1.0, 2.0)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean drifted: {mean}");
        assert!((var - 4.0).abs() < 0.2, "variance drifted: {var}");
    }

    #[test]
    fn seeded_matrix_fill_is_bit_identical() {
        let mut r1 = Rng::new(99);
        let mut r2 = Rng::new(99);
        let a = Matrix2D::random_uniform(4, 4, -1.0, 1.0, &mut r1);
        let b = Matrix2D::random_uniform(4, 4, -1.0, 1.0, &mut r2);
        assert_eq!(a, b);
    }
}
