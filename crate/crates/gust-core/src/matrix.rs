//! Dense row-major matrices of 64-bit floats.
//!
//! Everything downstream (the tape, the encoder, the trainer) works in f64:
//! the gradient-check gate needs the precision headroom and the graphs this
//! engine targets are small enough that the cost is irrelevant.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Additive offset inside `ln` so confidently wrong predictions cannot
/// produce an infinite cross-entropy.
pub const LOG_EPSILON: f64 = 1e-12;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Matrix filled with a single value.
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from a row-major buffer, validating length and
    /// finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidConfig(format!(
                "matrix buffer has {} entries, expected {}x{}={}",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(String::from("matrix constructor input")));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Convenient in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::InvalidConfig(String::from("ragged rows")));
            }
            data.extend_from_slice(row);
        }
        DenseMatrix::from_vec(r, c, data)
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

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::dim_mismatch("matmul", self.shape(), other.shape()));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        let bc = other.cols;
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * bc..(i + 1) * bc];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * bc..(k + 1) * bc];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Entrywise map.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> DenseMatrix {
        self.map(|v| v * factor)
    }

    /// `self += factor * other`, used for gradient accumulation.
    pub fn add_assign_scaled(&mut self, other: &DenseMatrix, factor: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim_mismatch(
                "add_assign_scaled",
                self.shape(),
                other.shape(),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    fn zip(
        &self,
        other: &DenseMatrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<DenseMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim_mismatch(op, self.shape(), other.shape()));
        }
        Ok(DenseMatrix {
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

    /// Row-wise softmax with per-row max subtraction for stability.
    ///
    /// Each output row is nonnegative and sums to 1 for any finite input.
    pub fn softmax_rows(&self) -> DenseMatrix {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    /// Entrywise `max(0, x)`.
    pub fn relu(&self) -> DenseMatrix {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// Per-row index of the largest entry, ties broken by the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Mean cross-entropy over a set of rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedCrossEntropy {
    pub value: f64,
    /// Set when the row mask was empty; the value degenerates to zero and the
    /// caller should treat the split as degenerate.
    pub empty_mask: bool,
}

/// Mean over the masked rows of `-sum_k target[k] * ln(pred[k] + LOG_EPSILON)`.
///
/// `pred` and `target` rows are expected to be probability vectors; the mask
/// lists row indices. An empty mask yields zero with `empty_mask` set.
pub fn cross_entropy_rows(
    pred: &DenseMatrix,
    target: &DenseMatrix,
    rows: &[usize],
) -> Result<MaskedCrossEntropy> {
    if pred.shape() != target.shape() {
        return Err(Error::dim_mismatch(
            "cross_entropy_rows",
            pred.shape(),
            target.shape(),
        ));
    }
    if rows.is_empty() {
        return Ok(MaskedCrossEntropy {
            value: 0.0,
            empty_mask: true,
        });
    }
    let mut total = 0.0;
    for &i in rows {
        if i >= pred.rows() {
            return Err(Error::IndexOutOfBounds {
                context: "cross_entropy_rows mask",
                index: i,
                len: pred.rows(),
            });
        }
        let p = pred.row(i);
        let t = target.row(i);
        let mut row_loss = 0.0;
        for (&pv, &tv) in p.iter().zip(t) {
            if tv != 0.0 {
                row_loss -= tv * libm::log(pv + LOG_EPSILON);
            }
        }
        total += row_loss;
    }
    Ok(MaskedCrossEntropy {
        value: total / rows.len() as f64,
        empty_mask: false,
    })
}
