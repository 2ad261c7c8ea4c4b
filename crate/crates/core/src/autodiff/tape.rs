//! Append-only Wengert tape with reverse-mode sweep.
//!
//! Node values are [`Tensor`]s so a whole batch of collocation points moves
//! through one node; scalars are 1x1 tensors. Every node only references
//! nodes recorded before it, so the node index is already a topological
//! order and the reverse sweep is a single pass from the output down.

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it,
/// and only until the tape is rewound past it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Label of the operation that produced a node. Used for diagnostics and
/// by [`Tape::record`] callers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    Offset,
    Exp,
    Ln,
    Square,
    Sigmoid,
    Softplus,
    Silu,
    SiluPrime,
    MatMul,
    Sum,
    SumCols,
    Column,
    Gather,
    Concat,
    Custom,
}

#[derive(Debug)]
enum Backward {
    None,
    /// `grad_in[i] += reduce(grad_out * local[i])`.
    Local { inputs: Vec<usize>, locals: Vec<Tensor> },
    Add { a: usize, b: usize, sign_b: f64 },
    Mul { a: usize, b: usize },
    Scale { input: usize, factor: f64 },
    MatMul { a: usize, trans_a: bool, b: usize, trans_b: bool },
    Sum { input: usize },
    SumCols { input: usize },
    Column { input: usize, col: usize },
    Gather { input: usize, rows: Vec<usize> },
    Concat { inputs: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    kind: OpKind,
    value: Tensor,
    backward: Backward,
}

/// Position on a tape that can be rewound to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Checkpoint(usize);

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint(self.nodes.len())
    }

    /// Drop every node recorded after `cp`.
    pub fn rewind(&mut self, cp: Checkpoint) {
        self.nodes.truncate(cp.0);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check_input(v);
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].kind
    }

    /// Overwrite the value of a leaf, e.g. after an optimizer step when the
    /// parameters were recorded before a checkpoint.
    pub fn set_leaf_value(&mut self, v: Var, value: Tensor) {
        let node = &mut self.nodes[v.0];
        assert_eq!(node.kind, OpKind::Leaf, "set_leaf_value on a non-leaf");
        assert_eq!(node.value.shape(), value.shape(), "leaf shape changed");
        node.value = value;
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(OpKind::Leaf, value, Backward::None)
    }

    /// Non-differentiable input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(OpKind::Constant, value, Backward::None)
    }

    /// Append a node whose adjoint rule is elementwise: each input receives
    /// `grad_out * local_grads[i]`, summed back over any broadcast axes.
    /// `local_grads[i]` must have the shape of `value` or be broadcastable
    /// to it.
    pub fn record(
        &mut self,
        kind: OpKind,
        inputs: &[Var],
        value: Tensor,
        local_grads: Vec<Tensor>,
    ) -> Var {
        assert_eq!(
            inputs.len(),
            local_grads.len(),
            "one local gradient per input"
        );
        for v in inputs {
            self.check_input(*v);
        }
        let (r, c) = value.shape();
        let locals = local_grads
            .into_iter()
            .map(|l| l.broadcast_to(r, c))
            .collect();
        self.push(
            kind,
            value,
            Backward::Local {
                inputs: inputs.iter().map(|v| v.0).collect(),
                locals,
            },
        )
    }

    fn check_input(&self, v: Var) {
        // Inputs always precede the node being recorded; anything else would
        // be a cycle or a handle from a rewound region.
        assert!(
            v.0 < self.nodes.len(),
            "tape invariant violated: input {} not on tape (len {})",
            v.0,
            self.nodes.len()
        );
    }

    fn push(&mut self, kind: OpKind, value: Tensor, backward: Backward) -> Var {
        self.nodes.push(Node {
            kind,
            value,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_add(&mut self, a: Var, b: Var, sign_b: f64) -> Var {
        self.check_input(a);
        self.check_input(b);
        let (va, vb) = (self.value(a), self.value(b));
        let (r, c) = broadcast_shape(va, vb);
        let value = if va.shape() == vb.shape() {
            va.zip_map(vb, |x, y| x + sign_b * y)
        } else {
            va.broadcast_to(r, c)
                .zip_map(&vb.broadcast_to(r, c), |x, y| x + sign_b * y)
        };
        let kind = if sign_b > 0.0 { OpKind::Add } else { OpKind::Sub };
        self.push(
            kind,
            value,
            Backward::Add {
                a: a.0,
                b: b.0,
                sign_b,
            },
        )
    }

    pub(crate) fn push_mul(&mut self, a: Var, b: Var) -> Var {
        self.check_input(a);
        self.check_input(b);
        let (va, vb) = (self.value(a), self.value(b));
        let (r, c) = broadcast_shape(va, vb);
        let value = if va.shape() == vb.shape() {
            va.zip_map(vb, |x, y| x * y)
        } else {
            va.broadcast_to(r, c)
                .zip_map(&vb.broadcast_to(r, c), |x, y| x * y)
        };
        self.push(OpKind::Mul, value, Backward::Mul { a: a.0, b: b.0 })
    }

    pub(crate) fn push_scale(&mut self, x: Var, factor: f64) -> Var {
        self.check_input(x);
        let value = self.value(x).map(|v| v * factor);
        self.push(
            OpKind::Scale,
            value,
            Backward::Scale {
                input: x.0,
                factor,
            },
        )
    }

    pub(crate) fn push_matmul(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Var {
        self.check_input(a);
        self.check_input(b);
        let value = Tensor::matmul(self.value(a), trans_a, self.value(b), trans_b);
        self.push(
            OpKind::MatMul,
            value,
            Backward::MatMul {
                a: a.0,
                trans_a,
                b: b.0,
                trans_b,
            },
        )
    }

    pub(crate) fn push_sum(&mut self, x: Var) -> Var {
        self.check_input(x);
        let value = Tensor::scalar(self.value(x).sum());
        self.push(OpKind::Sum, value, Backward::Sum { input: x.0 })
    }

    pub(crate) fn push_sum_cols(&mut self, x: Var) -> Var {
        self.check_input(x);
        let v = self.value(x);
        let sums = (0..v.rows())
            .map(|r| (0..v.cols()).map(|c| v.get(r, c)).sum())
            .collect::<Vec<f64>>();
        self.push(
            OpKind::SumCols,
            Tensor::column(&sums),
            Backward::SumCols { input: x.0 },
        )
    }

    pub(crate) fn push_column(&mut self, x: Var, col: usize) -> Var {
        self.check_input(x);
        let v = self.value(x);
        assert!(col < v.cols(), "column {col} out of range");
        let data = (0..v.rows()).map(|r| v.get(r, col)).collect::<Vec<f64>>();
        self.push(
            OpKind::Column,
            Tensor::column(&data),
            Backward::Column { input: x.0, col },
        )
    }

    pub(crate) fn push_gather(&mut self, x: Var, rows: &[usize]) -> Var {
        self.check_input(x);
        let v = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * v.cols());
        for &r in rows {
            assert!(r < v.rows(), "row {r} out of range");
            data.extend_from_slice(&v.as_slice()[r * v.cols()..(r + 1) * v.cols()]);
        }
        let value = Tensor::new(rows.len(), v.cols(), data);
        self.push(
            OpKind::Gather,
            value,
            Backward::Gather {
                input: x.0,
                rows: rows.to_vec(),
            },
        )
    }

    pub(crate) fn push_concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        for p in parts {
            self.check_input(*p);
        }
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                for c in 0..v.cols() {
                    out.set(r, offset + c, v.get(r, c));
                }
            }
            offset += v.cols();
        }
        self.push(
            OpKind::Concat,
            out,
            Backward::Concat {
                inputs: parts.iter().map(|p| p.0).collect(),
            },
        )
    }

    /// Reverse sweep from a scalar output. Returns adjoints for every leaf;
    /// intermediate adjoints are released as soon as they are consumed.
    pub fn backward(&self, output: Var) -> Gradients {
        assert!(output.0 < self.nodes.len(), "output not on tape");
        assert_eq!(
            self.value(output).shape(),
            (1, 1),
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.kind, OpKind::Leaf | OpKind::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.backward {
                Backward::None => {}
                Backward::Local { inputs, locals } => {
                    for (&inp, local) in inputs.iter().zip(locals) {
                        let contrib = g.zip_map(local, |a, b| a * b);
                        self.accumulate(&mut grads, inp, contrib);
                    }
                }
                Backward::Add { a, b, sign_b } => {
                    self.accumulate(&mut grads, *a, g.clone());
                    let gb = if *sign_b == 1.0 { g } else { g.map(|x| -x) };
                    self.accumulate(&mut grads, *b, gb);
                }
                Backward::Mul { a, b } => {
                    let (r, c) = g.shape();
                    let va = self.nodes[*a].value.broadcast_to(r, c);
                    let vb = self.nodes[*b].value.broadcast_to(r, c);
                    self.accumulate(&mut grads, *a, g.zip_map(&vb, |x, y| x * y));
                    self.accumulate(&mut grads, *b, g.zip_map(&va, |x, y| x * y));
                }
                Backward::Scale { input, factor } => {
                    let f = *factor;
                    self.accumulate(&mut grads, *input, g.map(|x| x * f));
                }
                Backward::MatMul {
                    a,
                    trans_a,
                    b,
                    trans_b,
                } => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    // C = op(A) op(B). dop(A) = G op(B)^T, dop(B) = op(A)^T G.
                    let ga = if *trans_a {
                        // dA = (G op(B)^T)^T = op(B) G^T
                        Tensor::matmul(vb, *trans_b, &g, true)
                    } else {
                        Tensor::matmul(&g, false, vb, !*trans_b)
                    };
                    let gb = if *trans_b {
                        // dB = (op(A)^T G)^T = G^T op(A)
                        Tensor::matmul(&g, true, va, *trans_a)
                    } else {
                        Tensor::matmul(va, !*trans_a, &g, false)
                    };
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Backward::Sum { input } => {
                    let (r, c) = self.nodes[*input].value.shape();
                    self.accumulate(&mut grads, *input, Tensor::filled(r, c, g.item()));
                }
                Backward::SumCols { input } => {
                    let (r, c) = self.nodes[*input].value.shape();
                    self.accumulate(&mut grads, *input, g.broadcast_to(r, c));
                }
                Backward::Column { input, col } => {
                    let (r, c) = self.nodes[*input].value.shape();
                    let mut full = Tensor::zeros(r, c);
                    for row in 0..r {
                        full.set(row, *col, g.get(row, 0));
                    }
                    self.accumulate(&mut grads, *input, full);
                }
                Backward::Gather { input, rows } => {
                    let (r, c) = self.nodes[*input].value.shape();
                    let mut full = Tensor::zeros(r, c);
                    for (k, &row) in rows.iter().enumerate() {
                        for col in 0..c {
                            let cur = full.get(row, col);
                            full.set(row, col, cur + g.get(k, col));
                        }
                    }
                    self.accumulate(&mut grads, *input, full);
                }
                Backward::Concat { inputs } => {
                    let mut offset = 0;
                    for &inp in inputs {
                        let (r, c) = self.nodes[inp].value.shape();
                        let mut part = Tensor::zeros(r, c);
                        for row in 0..r {
                            for col in 0..c {
                                part.set(row, col, g.get(row, offset + col));
                            }
                        }
                        offset += c;
                        self.accumulate(&mut grads, inp, part);
                    }
                }
            }
        }

        Gradients {
            grads,
            shapes: self.nodes[..=output.0]
                .iter()
                .map(|n| n.value.shape())
                .collect(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: usize, contrib: Tensor) {
        if self.nodes[target].kind == OpKind::Constant {
            return;
        }
        let (r, c) = self.nodes[target].value.shape();
        let contrib = if contrib.shape() == (r, c) {
            contrib
        } else {
            contrib.reduce_to(r, c)
        };
        match &mut grads[target] {
            Some(acc) => acc.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor) -> (usize, usize) {
    let dim = |x: usize, y: usize| -> usize {
        assert!(
            x == y || x == 1 || y == 1,
            "incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        );
        x.max(y)
    };
    (dim(a.rows(), b.rows()), dim(a.cols(), b.cols()))
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`; zeros if the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes.get(v.0).copied().unwrap_or((1, 1));
                Tensor::zeros(r, c)
            }
        }
    }

    /// Borrowing variant of [`Gradients::wrt`]; `None` means zero.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
