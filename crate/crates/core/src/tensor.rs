//! Dense row-major matrices and the seeded generator used everywhere else.
//!
//! Everything is `f64`. Kernels use a fixed accumulation order so repeated
//! calls on the same inputs are bit-identical.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Result, TssError};

/// A dense 2-D matrix stored row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Element-wise binary operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Mul,
    Add,
    Sub,
    Max,
}

impl BinaryOp {
    #[inline]
    fn apply(self, x: f64, y: f64) -> f64 {
        match self {
            BinaryOp::Mul => x * y,
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Max => {
                if y > x {
                    y
                } else {
                    x
                }
            }
        }
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TssError::Shape(format!(
                "buffer of length {} cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    /// A single-row matrix.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copies the listed rows into a new matrix, in the order given.
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Column sums, as a vector of length `cols`.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// Adds `bias` to every row in place.
    pub fn add_row_broadcast(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(TssError::Shape(format!(
                "bias of length {} cannot broadcast over {} columns",
                bias.len(),
                self.cols
            )));
        }
        for r in 0..self.rows {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }
}

fn check_same_shape(op: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TssError::Shape(format!(
            "{op}: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

/// Matrix product `a · b`, accumulated in i-k-j order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(TssError::Shape(format!(
            "matmul: {}x{} · {}x{} (inner dimensions {} != {})",
            a.rows, a.cols, b.rows, b.cols, a.cols, b.rows
        )));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// Element-wise `op(a, b)`.
pub fn ew(op: BinaryOp, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_same_shape(&format!("{op:?}"), a, b)?;
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| op.apply(x, y))
            .collect(),
    })
}

/// Element-wise `op(a, s)` against a scalar.
pub fn ew_scalar(op: BinaryOp, a: &Matrix, s: f64) -> Matrix {
    a.map(|x| op.apply(x, s))
}

pub fn scale(a: &Matrix, s: f64) -> Matrix {
    a.map(|x| x * s)
}

pub fn tanh(a: &Matrix) -> Matrix {
    a.map(f64::tanh)
}

pub fn abs(a: &Matrix) -> Matrix {
    a.map(f64::abs)
}

/// Arithmetic mean and population standard deviation (two-pass).
pub fn stats(a: &Matrix) -> (f64, f64) {
    assert!(!a.is_empty(), "stats of an empty matrix");
    let n = a.len() as f64;
    let mean = a.data.iter().sum::<f64>() / n;
    let var = a.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Seeded generator: ChaCha8 keyed by a 64-bit seed, with independent
/// substreams selected through the ChaCha stream id.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent generator from the original seed and a path of
    /// labels. The result does not depend on how many draws this generator
    /// has already made.
    pub fn split(&self, labels: &[u64]) -> Rng {
        let mut key = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        for &label in labels {
            key = splitmix64(key ^ splitmix64(label.wrapping_add(0x632b_e59b_d9b4_e019)));
        }
        let mut inner = ChaCha8Rng::seed_from_u64(key);
        inner.set_stream(labels.len() as u64);
        Rng { seed: key, inner }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `rows × cols` i.i.d. draws from N(0, std²).
pub fn randn(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    assert!(std >= 0.0, "negative standard deviation");
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Matrix { rows, cols, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn rel_close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
    }

    #[test]
    fn matmul_identity() {
        let i = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = Matrix::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(matmul(&i, &b).unwrap(), b);
    }

    #[test]
    fn matmul_dot_product() {
        let a = Matrix::from_rows(&[&[1.0, 2.0]]);
        let b = Matrix::from_rows(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = randn(&mut rng, 5, 7, 1.0);
        let b = randn(&mut rng, 7, 3, 1.0);
        assert!(rel_close(
            &matmul(&a, &b).unwrap(),
            &naive_matmul(&a, &b),
            1e-12
        ));
        for (n, k, m) in [(1, 1, 1), (32, 32, 32), (3, 17, 29), (32, 1, 8)] {
            let a = randn(&mut rng, n, k, 1.0);
            let b = randn(&mut rng, k, m, 1.0);
            assert!(rel_close(
                &matmul(&a, &b).unwrap(),
                &naive_matmul(&a, &b),
                1e-12
            ));
        }
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(err.to_string().contains("2x3 · 2x3"), "{err}");
    }

    #[test]
    fn elementwise_ops() {
        let a = Matrix::row_vector(&[2.0, 3.0]);
        let b = Matrix::row_vector(&[1.0, 0.0]);
        assert_eq!(ew(BinaryOp::Mul, &a, &b).unwrap().data(), &[2.0, 0.0]);
        let p = Matrix::row_vector(&[0.2, 0.9]);
        let q = Matrix::row_vector(&[0.5, 0.1]);
        assert_eq!(ew(BinaryOp::Max, &p, &q).unwrap().data(), &[0.5, 0.9]);
        let t = abs(&tanh(&Matrix::row_vector(&[-1.0, 1.0])));
        for v in t.data() {
            assert!((v - 1f64.tanh()).abs() < 1e-15);
            assert!((v - 0.76159).abs() < 1e-5);
        }
        assert!(ew(BinaryOp::Add, &a, &Matrix::zeros(2, 1)).is_err());
        assert_eq!(ew_scalar(BinaryOp::Sub, &a, 1.0).data(), &[1.0, 2.0]);
        assert_eq!(scale(&a, 0.5).data(), &[1.0, 1.5]);
    }

    #[test]
    fn stats_small_cases() {
        assert_eq!(stats(&Matrix::row_vector(&[1.0, -1.0])), (0.0, 1.0));
        assert_eq!(stats(&Matrix::filled(3, 4, 2.5)).1, 0.0);
    }

    #[test]
    fn stats_matches_two_pass_oracle() {
        let mut rng = Rng::new(3);
        let a = randn(&mut rng, 10, 10, 3.0);
        let v = a.data();
        let mut mean = 0.0;
        for x in v {
            mean += x;
        }
        mean /= v.len() as f64;
        let mut ss = 0.0;
        for x in v {
            ss += (x - mean).powi(2);
        }
        let std = (ss / v.len() as f64).sqrt();
        let (m, s) = stats(&a);
        assert!((m - mean).abs() <= 1e-12);
        assert!((s - std).abs() <= 1e-12 * std);
    }

    #[test]
    fn randn_zero_std_and_determinism() {
        let mut rng = Rng::new(1);
        assert!(randn(&mut rng, 3, 3, 0.0).data().iter().all(|&v| v == 0.0));
        let a = randn(&mut Rng::new(42), 4, 5, 1.0);
        let b = randn(&mut Rng::new(42), 4, 5, 1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn randn_moments() {
        let m = randn(&mut Rng::new(11), 1000, 100, 1.0);
        let (mean, std) = stats(&m);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((std - 1.0).abs() < 0.02, "std {std}");
    }

    #[test]
    fn split_is_independent_of_parent_position() {
        let mut parent = Rng::new(5);
        let a = parent.split(&[1, 2]).normal();
        parent.normal();
        let b = parent.split(&[1, 2]).normal();
        assert_eq!(a, b);
        assert_ne!(parent.split(&[1, 3]).normal(), a);
    }
}
