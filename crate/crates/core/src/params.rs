//! Flat list of named-by-position parameter matrices with vector-space ops.

use crate::tensor::Mat;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamVec(pub Vec<Mat<f64>>);

impl ParamVec {
    pub fn zeros_like(&self) -> Self {
        Self(self.0.iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.0.iter().map(Mat::len).sum()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.0.iter().map(Mat::shape).collect()
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        assert_eq!(self.0.len(), other.0.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.iter_mut().for_each(|m| m.scale(alpha));
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(Mat::all_finite)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten) for the shapes of `self`.
    pub fn unflatten_like(&self, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), self.num_scalars());
        let mut off = 0;
        Self(
            self.0
                .iter()
                .map(|m| {
                    let n = m.len();
                    let out = Mat::from_vec(m.rows(), m.cols(), flat[off..off + n].to_vec());
                    off += n;
                    out
                })
                .collect(),
        )
    }

    /// SHA-256 over shapes and little-endian values.
    pub fn checksum(&self) -> String {
        checksum_of(self.0.iter())
    }
}

pub(crate) fn checksum_of<'a>(mats: impl Iterator<Item = &'a Mat<f64>>) -> String {
    let mut h = Sha256::new();
    for m in mats {
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for v in m.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
