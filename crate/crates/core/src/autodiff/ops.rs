//! Differentiable operations recorded on a [`Tape`].

use super::tape::{OpKind, Tape, Var};
use super::tensor::Tensor;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inv domain is y > 0, got {y}");
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `d/dx silu(x) = s (1 + x (1 - s))`, `s = sigmoid(x)`.
#[inline]
pub fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `d2/dx2 silu(x) = s (1 - s) (2 + x (1 - 2 s))`.
#[inline]
pub fn silu_second(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push_add(a, b, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push_add(a, b, -1.0)
    }

    /// Elementwise product with broadcasting of 1x1, 1xC and Nx1 operands.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push_mul(a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let (r, c) = (va.rows().max(vb.rows()), va.cols().max(vb.cols()));
        let (va, vb) = (va.broadcast_to(r, c), vb.broadcast_to(r, c));
        let value = va.zip_map(&vb, |x, y| x / y);
        let da = vb.map(|y| 1.0 / y);
        let db = value.zip_map(&vb, |q, y| -q / y);
        self.record(OpKind::Div, &[a, b], value, vec![da, db])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.push_scale(x, -1.0)
    }

    /// Multiply by a fixed real.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.push_scale(x, factor)
    }

    /// Add a fixed real.
    pub fn offset(&mut self, x: Var, shift: f64) -> Var {
        let v = self.value(x);
        let value = v.map(|a| a + shift);
        let ones = Tensor::filled(v.rows(), v.cols(), 1.0);
        self.record(OpKind::Offset, &[x], value, vec![ones])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let local = value.clone();
        self.record(OpKind::Exp, &[x], value, vec![local])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = v.map(f64::ln);
        let local = v.map(|a| 1.0 / a);
        self.record(OpKind::Ln, &[x], value, vec![local])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = v.map(|a| a * a);
        let local = v.map(|a| 2.0 * a);
        self.record(OpKind::Square, &[x], value, vec![local])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let local = value.map(|s| s * (1.0 - s));
        self.record(OpKind::Sigmoid, &[x], value, vec![local])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = v.map(softplus);
        let local = v.map(sigmoid);
        self.record(OpKind::Softplus, &[x], value, vec![local])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = v.map(silu);
        let local = v.map(silu_prime);
        self.record(OpKind::Silu, &[x], value, vec![local])
    }

    /// Derivative of SiLU as a differentiable node; used when a tangent is
    /// propagated through a SiLU layer on the tape.
    pub fn silu_prime(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = v.map(silu_prime);
        let local = v.map(silu_second);
        self.record(OpKind::SiluPrime, &[x], value, vec![local])
    }

    /// `op(a) * op(b)`.
    pub fn matmul(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Var {
        self.push_matmul(a, trans_a, b, trans_b)
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, x: Var) -> Var {
        self.push_sum(x)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.push_sum(x);
        self.push_scale(s, 1.0 / n as f64)
    }

    /// Row-wise sum: `N x C -> N x 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        self.push_sum_cols(x)
    }

    /// Column `col` of `x` as `N x 1`.
    pub fn column(&mut self, x: Var, col: usize) -> Var {
        self.push_column(x, col)
    }

    /// Rows of `x` at `rows`, in that order (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        self.push_gather(x, rows)
    }

    /// Horizontal concatenation of nodes with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        self.push_concat(parts)
    }
}
