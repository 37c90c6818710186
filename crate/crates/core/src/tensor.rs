//! Dense row-major matrices.

use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<S = f64> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: S) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape {rows}x{cols} vs {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<S>) -> Self {
        let n = data.len();
        Self::from_vec(1, n, data)
    }

    pub fn scalar(v: S) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = S::one();
        }
        m
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
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// The scalar value of a 1×1 matrix.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on {}x{}", self.rows, self.cols);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: S, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: S) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · other`
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul {:?} · {:?}", self.shape(), other.shape());
        let mut out = Self::zeros(self.rows, other.cols);
        S::gemm(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            self.cols as isize,
            1,
            &other.data,
            other.cols as isize,
            1,
            S::zero(),
            &mut out.data,
        );
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_t {:?} · {:?}ᵀ", self.shape(), other.shape());
        let mut out = Self::zeros(self.rows, other.rows);
        S::gemm(
            self.rows,
            self.cols,
            other.rows,
            &self.data,
            self.cols as isize,
            1,
            &other.data,
            1,
            other.cols as isize,
            S::zero(),
            &mut out.data,
        );
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "t_matmul {:?}ᵀ · {:?}", self.shape(), other.shape());
        let mut out = Self::zeros(self.cols, other.cols);
        S::gemm(
            self.cols,
            self.rows,
            other.cols,
            &self.data,
            1,
            self.cols as isize,
            &other.data,
            other.cols as isize,
            1,
            S::zero(),
            &mut out.data,
        );
        out
    }

    pub fn dot(&self, other: &Self) -> S {
        assert_eq!(self.len(), other.len());
        let mut acc = S::zero();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        acc
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_f64(&self) -> Mat<f64> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x.re()).collect(),
        }
    }
}

impl Mat<f64> {
    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::from_vec(rows, cols, data)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<S: Scalar>(&self) -> Mat<S> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| S::from_f64(x)).collect(),
        }
    }
}

/// Cosine similarity of two equally sized vectors; 0 when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}
