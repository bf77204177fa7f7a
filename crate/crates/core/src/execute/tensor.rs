//! Dense row-major matrices with a fixed floating-point evaluation order.
//!
//! Every output row depends only on the matching input row (and, for
//! attention, on the key/value rows in their global order), so splitting a
//! sequence into row blocks changes no result bit.

use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            "matrix data has {} entries, expected {rows} x {cols}",
            data.len()
        );
        Ok(Mat { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rows `start..start + len` as a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Mat {
        Mat {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Overwrites rows starting at `start` with `block`.
    pub fn set_rows(&mut self, start: usize, block: &Mat) {
        debug_assert_eq!(block.cols, self.cols);
        self.data[start * self.cols..(start + block.rows) * self.cols].copy_from_slice(&block.data);
    }

    /// `self * w`, each output element summed over `k` in ascending order.
    pub fn matmul(&self, w: &Mat) -> Mat {
        assert_eq!(self.cols, w.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, w.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * w.cols..(i + 1) * w.cols];
            for (k, &ak) in a.iter().enumerate() {
                for (o, &wk) in o.iter_mut().zip(w.row(k)) {
                    *o += ak * wk;
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add shape mismatch");
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "sub shape mismatch");
        self.zip_map(other, |a, b| a - b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Adds `bias` to every row.
    pub fn add_row(&self, bias: &[f64]) -> Mat {
        assert_eq!(bias.len(), self.cols);
        let mut out = self.clone();
        for i in 0..self.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(bias) {
                *o += b;
            }
        }
        out
    }
}

/// Multi-head softmax attention of `q` over key/value blocks taken in order.
///
/// Scores, the softmax denominator and the weighted value sum are all
/// accumulated key by key in block order, so the result only depends on the
/// concatenated key sequence, not on how it is blocked.
pub fn attention(q: &Mat, blocks: &[(&Mat, &Mat)], heads: usize) -> Mat {
    let hs = q.cols;
    let dh = hs / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let keys: usize = blocks.iter().map(|(k, _)| k.rows).sum();
    let mut out = Mat::zeros(q.rows, hs);
    let mut scores = Vec::with_capacity(keys);
    for i in 0..q.rows {
        let qi = q.row(i);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = &qi[cols.clone()];
            scores.clear();
            for (k, _) in blocks {
                for r in 0..k.rows {
                    let kh = &k.row(r)[cols.clone()];
                    let mut s = 0.0;
                    for (a, b) in qh.iter().zip(kh) {
                        s += a * b;
                    }
                    scores.push(s * scale);
                }
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom += *s;
            }
            let o = &mut out.row_mut(i)[cols.clone()];
            let mut idx = 0;
            for (_, v) in blocks {
                for r in 0..v.rows {
                    let w = scores[idx];
                    idx += 1;
                    for (o, x) in o.iter_mut().zip(&v.row(r)[cols.clone()]) {
                        *o += w * x;
                    }
                }
            }
            for o in o.iter_mut() {
                *o /= denom;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, seed: u64) -> Mat {
        // Small deterministic values without pulling in an RNG.
        let data = (0..rows * cols)
            .map(|i| (((i as u64 + 1) * (seed * 2 + 7919)) % 97) as f64 / 48.0 - 1.0)
            .collect();
        Mat::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_small() {
        let a = Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Mat::from_vec(2, 1, vec![5.0, 6.0]).unwrap();
        assert_eq!(a.matmul(&b).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_is_row_local() {
        let a = mat(6, 4, 1);
        let w = mat(4, 3, 2);
        let full = a.matmul(&w);
        let top = a.slice_rows(0, 2).matmul(&w);
        let rest = a.slice_rows(2, 4).matmul(&w);
        assert_eq!(full.slice_rows(0, 2), top);
        assert_eq!(full.slice_rows(2, 4), rest);
    }

    #[test]
    fn attention_blocking_is_bitwise_invariant() {
        let q = mat(8, 8, 3);
        let k = mat(8, 8, 4);
        let v = mat(8, 8, 5);
        let whole = attention(&q, &[(&k, &v)], 2);
        let parts: Vec<(Mat, Mat)> = (0..4).map(|j| (k.slice_rows(2 * j, 2), v.slice_rows(2 * j, 2))).collect();
        let refs: Vec<(&Mat, &Mat)> = parts.iter().map(|(k, v)| (k, v)).collect();
        let blocked = attention(&q.slice_rows(4, 2), &refs, 2);
        assert_eq!(whole.slice_rows(4, 2), blocked);
    }

    #[test]
    fn attention_uniform_keys_average_values() {
        let q = mat(1, 4, 1);
        let k = Mat::zeros(2, 4);
        let v = Mat::from_vec(2, 4, vec![1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = attention(&q, &[(&k, &v)], 2);
        assert_eq!(out.data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn shape_checked() {
        assert!(Mat::from_vec(2, 2, vec![0.0; 3]).is_err());
        let mut m = Mat::zeros(3, 2);
        m.set_rows(1, &Mat::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
        assert_eq!(m.data(), &[0.0, 0.0, 1.0, 2.0, 0.0, 0.0]);
        assert_eq!(m.frobenius_norm(), 5f64.sqrt());
    }
}
