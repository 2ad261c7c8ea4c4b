//! Dense row-major 2-D buffers used as node values on the tape.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Row-major matrix of `f64`. A scalar is a 1x1 tensor; a batch of `n`
/// samples with `k` features is `n x k`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = String;

    fn try_from(raw: RawTensor) -> Result<Self, String> {
        if raw.rows * raw.cols != raw.data.len() {
            return Err(format!(
                "{}x{} tensor with {} values",
                raw.rows,
                raw.cols,
                raw.data.len()
            ));
        }
        Ok(Tensor {
            rows: raw.rows,
            cols: raw.cols,
            data: raw.data,
        })
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor data length does not match shape {rows}x{cols}"
        );
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(1, 1, vec![value])
    }

    /// `n x 1` column from a slice.
    pub fn column(values: &[f64]) -> Self {
        Self::new(values.len(), 1, values.to_vec())
    }

    /// `1 x n` row from a slice.
    pub fn row(values: &[f64]) -> Self {
        Self::new(1, values.len(), values.to_vec())
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
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
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Repeat a broadcastable tensor (1x1, 1xC or Nx1) up to `rows x cols`.
    pub fn broadcast_to(&self, rows: usize, cols: usize) -> Self {
        if self.shape() == (rows, cols) {
            return self.clone();
        }
        assert!(
            (self.rows == rows || self.rows == 1) && (self.cols == cols || self.cols == 1),
            "cannot broadcast {}x{} to {rows}x{cols}",
            self.rows,
            self.cols
        );
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let sr = if self.rows == 1 { 0 } else { r };
            for c in 0..cols {
                let sc = if self.cols == 1 { 0 } else { c };
                out.push(self.data[sr * self.cols + sc]);
            }
        }
        Self::new(rows, cols, out)
    }

    /// Sum over broadcast axes so the result has shape `rows x cols`.
    /// Inverse of [`Tensor::broadcast_to`] for adjoints.
    pub fn reduce_to(&self, rows: usize, cols: usize) -> Self {
        if self.shape() == (rows, cols) {
            return self.clone();
        }
        assert!(
            (rows == self.rows || rows == 1) && (cols == self.cols || cols == 1),
            "cannot reduce {}x{} to {rows}x{cols}",
            self.rows,
            self.cols
        );
        let mut out = vec![0.0; rows * cols];
        for r in 0..self.rows {
            let dr = if rows == 1 { 0 } else { r };
            for c in 0..self.cols {
                let dc = if cols == 1 { 0 } else { c };
                out[dr * cols + dc] += self.data[r * self.cols + c];
            }
        }
        Self::new(rows, cols, out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![0.0; self.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self::new(self.cols, self.rows, out)
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul(a: &Self, trans_a: bool, b: &Self, trans_b: bool) -> Self {
        let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let (k2, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
        assert_eq!(k, k2, "matmul inner dimension mismatch ({k} vs {k2})");
        let mut out = Self::zeros(m, n);
        gemm_acc(a, trans_a, b, trans_b, &mut out);
        out
    }
}

/// `out += op(a) * op(b)`.
pub(crate) fn gemm_acc(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool, out: &mut Tensor) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = out.cols;
    debug_assert_eq!(out.rows, m);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: strides and dimensions describe exactly the buffers owned by
    // `a`, `b` and `out`, which do not alias (out is borrowed mutably).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            1.0,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}", self.rows, self.cols)?;
        if self.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}
