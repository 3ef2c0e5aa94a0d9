//! Dense row-major f64 tensors and the matrix kernels the engine runs on.
//!
//! The single matmul kernel is register-blocked (4 output rows) and
//! K-chunked so each operand streams from memory once; callers arrange
//! transposed operands explicitly via [`transpose`]. Summation order is
//! fixed, so results are bit-reproducible run to run.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Zero-filled tensor.
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        }
    }

    /// Builds a tensor from raw values, checking length and finiteness.
    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("zero extent in {shape:?}")));
        }
        if n != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} wants {n} values, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("value {bad}")));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
        })
    }

    /// Same-storage view with a different shape (element count must match).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} values) to {shape:?}",
                self.shape,
                self.values.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values: self.values.clone(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let n = self.shape[1];
        &self.values[i * n..(i + 1) * n]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Register block height of the matmul kernel.
const MR: usize = 4;
/// K-chunk: keeps the active B panel (KC × n) in cache while every row
/// block of A passes over it, so B streams from memory once.
const KC: usize = 384;

/// c += a · b with a: m×k, b: k×n, c: m×n, all row-major.
pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k, "a length");
    assert_eq!(b.len(), k * n, "b length");
    assert_eq!(c.len(), m * n, "c length");
    let mut l0 = 0;
    while l0 < k {
        let kc = KC.min(k - l0);
        let mut i = 0;
        while i + MR <= m {
            let ab = i * k + l0;
            let (c01, c23) = c[i * n..(i + MR) * n].split_at_mut(2 * n);
            let (c0, c1) = c01.split_at_mut(n);
            let (c2, c3) = c23.split_at_mut(n);
            for l in 0..kc {
                let brow = &b[(l0 + l) * n..(l0 + l + 1) * n];
                let v0 = a[ab + l];
                let v1 = a[ab + k + l];
                let v2 = a[ab + 2 * k + l];
                let v3 = a[ab + 3 * k + l];
                for j in 0..n {
                    let bv = brow[j];
                    c0[j] += v0 * bv;
                    c1[j] += v1 * bv;
                    c2[j] += v2 * bv;
                    c3[j] += v3 * bv;
                }
            }
            i += MR;
        }
        while i < m {
            let crow = &mut c[i * n..(i + 1) * n];
            for l in 0..kc {
                let v = a[i * k + l0 + l];
                let brow = &b[(l0 + l) * n..(l0 + l + 1) * n];
                for j in 0..n {
                    crow[j] += v * brow[j];
                }
            }
            i += 1;
        }
        l0 += kc;
    }
}

/// a · b into a fresh buffer.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(&mut c, a, b, m, k, n);
    c
}

/// Out-of-place transpose of an r×c row-major matrix, tiled for locality.
pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    assert_eq!(a.len(), r * c);
    let mut t = vec![0.0; r * c];
    const TB: usize = 32;
    let mut i0 = 0;
    while i0 < r {
        let ib = TB.min(r - i0);
        let mut j0 = 0;
        while j0 < c {
            let jb = TB.min(c - j0);
            for i in i0..i0 + ib {
                for j in j0..j0 + jb {
                    t[j * r + i] = a[i * c + j];
                }
            }
            j0 += jb;
        }
        i0 += TB;
    }
    t
}
