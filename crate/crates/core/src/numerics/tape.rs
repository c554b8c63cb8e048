//! Minimal reverse-mode tape over dense matrices.
//!
//! Values are recorded eagerly as operations are applied. Only leaves
//! created with [`Tape::leaf`] receive gradients; constants and everything
//! computed purely from constants are skipped during the backward sweep, so
//! frozen parameters never accumulate anything.
//!
//! The vocabulary is deliberately small: matmul, add, scale, row softmax with
//! temperature, layer normalisation, GELU, concatenation, row-wise cosine
//! similarity, log, sum, plus an elementwise absolute value used by the L1
//! alignment variant.

use super::matrix::matmul_into;
use super::{softmax_into, Matrix, NumericsError, EPS};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add { a: Var, b: Var, broadcast: bool },
    Scale { a: Var, factor: f64 },
    SoftmaxRows { a: Var, tau: f64 },
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Gelu { a: Var },
    Concat { parts: Vec<Var>, axis: Axis },
    CosineRows { a: Var, b: Var },
    Log { a: Var },
    Sum { a: Var },
    Abs { a: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Concat { .. } => "concat",
            Op::CosineRows { .. } => "cosine_rows",
            Op::Log { .. } => "log",
            Op::Sum { .. } => "sum",
            Op::Abs { .. } => "abs",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<Option<Matrix>>,
    visit_order: Vec<usize>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf with zeros substituted when the loss ignores it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Matrix::zeros(r, c)
        })
    }

    /// Node indices in the order the backward sweep visited them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }
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

    /// Names of the recorded operations in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Trainable parameter.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    fn push_raw(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul { a, b, transpose_b: false }, &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).matmul_transposed(self.value(b))?;
        self.push(value, Op::MatMul { a, b, transpose_b: true }, &[a, b])
    }

    /// Elementwise sum. `b` may also be a single row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        let broadcast = av.shape() != bv.shape();
        if broadcast && !(bv.rows() == 1 && bv.cols() == av.cols()) {
            return Err(NumericsError::DimensionMismatch(format!(
                "add {}x{} with {}x{}",
                av.rows(),
                av.cols(),
                bv.rows(),
                bv.cols()
            )));
        }
        let mut value = av.clone();
        if broadcast {
            let cols = av.cols();
            for chunk in value.as_mut_slice().chunks_mut(cols) {
                for (x, y) in chunk.iter_mut().zip(bv.as_slice()) {
                    *x += y;
                }
            }
        } else {
            value.add_assign(bv);
        }
        self.push(value, Op::Add { a, b, broadcast }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NumericsError> {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale { a, factor }, &[a])
    }

    /// `a − b`, recorded as `a + (−1)·b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    /// Row-wise `softmax(x / tau)`.
    pub fn softmax_rows(&mut self, a: Var, tau: f64) -> Result<Var, NumericsError> {
        if !(tau > 0.0) {
            return Err(NumericsError::Config(format!(
                "softmax temperature must be positive, got {tau}"
            )));
        }
        let av = self.value(a);
        let mut value = Matrix::zeros(av.rows(), av.cols());
        let cols = av.cols();
        for (src, dst) in av
            .as_slice()
            .chunks(cols)
            .zip(value.as_mut_slice().chunks_mut(cols))
        {
            softmax_into(src, tau, dst);
        }
        self.push(value, Op::SoftmaxRows { a, tau }, &[a])
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let cols = av.cols();
        let mut value = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows());
        for row in value.as_mut_slice().chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(value, Op::LayerNorm { a, inv_std }, &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).map(|x| {
            let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        self.push(value, Op::Gelu { a }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vstack(&mats)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis: Axis::Rows,
            },
            parts,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::hstack(&mats)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis: Axis::Cols,
            },
            parts,
        )
    }

    /// Cosine similarity of every row of `a` (m×d) with every row of `b`
    /// (n×d), giving an m×n matrix. Norms are guarded by `max(‖·‖, ε)`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(NumericsError::DimensionMismatch(format!(
                "cosine of {}-dim rows against {}-dim rows",
                av.cols(),
                bv.cols()
            )));
        }
        let na: Vec<f64> = av.row_iter().map(|r| super::norm(r).max(EPS)).collect();
        let nb: Vec<f64> = bv.row_iter().map(|r| super::norm(r).max(EPS)).collect();
        let value = Matrix::from_fn(av.rows(), bv.rows(), |i, j| {
            (super::dot(av.row(i), bv.row(j)) / (na[i] * nb[j])).clamp(-1.0, 1.0)
        });
        self.push(value, Op::CosineRows { a, b }, &[a, b])
    }

    /// `ln(max(x, ε))` elementwise.
    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).map(|x| x.max(EPS).ln());
        self.push(value, Op::Log { a }, &[a])
    }

    /// Sum of all entries as a 1×1 matrix.
    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        self.push(value, Op::Sum { a }, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).map(f64::abs);
        self.push(value, Op::Abs { a }, &[a])
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    /// Reverse sweep from a scalar `loss`. Nodes are visited in exact reverse
    /// recording order; intermediate gradients are dropped once propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.value(loss).shape() != (1, 1) {
            return Err(NumericsError::Contract(
                "backward requires a scalar (1x1) loss".to_string(),
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        let mut leaves: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut visit_order = Vec::with_capacity(n);
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..n).rev() {
            visit_order.push(idx);
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => leaves[idx] = Some(g),
                Op::Constant => {}
                op => self.propagate(op, &node.value, &g, &mut grads)?,
            }
        }
        Ok(Gradients {
            leaves,
            visit_order,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Matrix,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<(), NumericsError> {
        match op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    let ga = if *transpose_b {
                        let mut ga = Matrix::zeros(av.rows(), av.cols());
                        matmul_into(g, bv, &mut ga);
                        ga
                    } else {
                        g.matmul_transposed(bv)?
                    };
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = if *transpose_b {
                        g.transposed_matmul(av)?
                    } else {
                        av.transposed_matmul(g)?
                    };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add { a, b, broadcast } => {
                self.accumulate(grads, *a, g.clone());
                if *broadcast {
                    if self.nodes[b.0].requires_grad {
                        let cols = g.cols();
                        let mut gb = vec![0.0; cols];
                        for row in g.row_iter() {
                            for (s, v) in gb.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        self.accumulate(grads, *b, Matrix::from_vec(1, cols, gb)?);
                    }
                } else {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::Scale { a, factor } => self.accumulate(grads, *a, g.scale(*factor)),
            Op::SoftmaxRows { a, tau } => {
                let cols = out.cols();
                let mut ga = Matrix::zeros(out.rows(), cols);
                for ((y, dy), dx) in out
                    .as_slice()
                    .chunks(cols)
                    .zip(g.as_slice().chunks(cols))
                    .zip(ga.as_mut_slice().chunks_mut(cols))
                {
                    let inner: f64 = y.iter().zip(dy).map(|(p, d)| p * d).sum();
                    for ((x, p), d) in dx.iter_mut().zip(y).zip(dy) {
                        *x = p * (d - inner) / tau;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm { a, inv_std } => {
                let cols = out.cols();
                let n = cols as f64;
                let mut ga = Matrix::zeros(out.rows(), cols);
                for (r, ((xhat, dy), dx)) in out
                    .as_slice()
                    .chunks(cols)
                    .zip(g.as_slice().chunks(cols))
                    .zip(ga.as_mut_slice().chunks_mut(cols))
                    .enumerate()
                {
                    let mean_dy = dy.iter().sum::<f64>() / n;
                    let mean_dy_xhat = dy.iter().zip(xhat).map(|(d, x)| d * x).sum::<f64>() / n;
                    for ((v, d), x) in dx.iter_mut().zip(dy).zip(xhat) {
                        *v = inv_std[r] * (d - mean_dy - x * mean_dy_xhat);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu { a } => {
                let av = self.value(*a);
                let ga = Matrix::from_fn(av.rows(), av.cols(), |r, c| {
                    let x = av.get(r, c);
                    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                    let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                    g.get(r, c) * (0.5 * (1.0 + t) + 0.5 * x * dt)
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).shape();
                    if self.nodes[p.0].requires_grad {
                        let gp = match axis {
                            Axis::Rows => g.row_block(offset, offset + pr),
                            Axis::Cols => Matrix::from_fn(pr, pc, |r, c| g.get(r, offset + c)),
                        };
                        self.accumulate(grads, p, gp);
                    }
                    offset += match axis {
                        Axis::Rows => pr,
                        Axis::Cols => pc,
                    };
                }
            }
            Op::CosineRows { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let na: Vec<f64> = av.row_iter().map(super::norm).collect();
                let nb: Vec<f64> = bv.row_iter().map(super::norm).collect();
                let d = av.cols();
                let need_a = self.nodes[a.0].requires_grad;
                let need_b = self.nodes[b.0].requires_grad;
                let mut ga = Matrix::zeros(av.rows(), d);
                let mut gb = Matrix::zeros(bv.rows(), d);
                for i in 0..av.rows() {
                    let ai = av.row(i);
                    let nai = na[i].max(EPS);
                    for j in 0..bv.rows() {
                        let w = g.get(i, j);
                        if w == 0.0 {
                            continue;
                        }
                        let bj = bv.row(j);
                        let nbj = nb[j].max(EPS);
                        let denom = nai * nbj;
                        let raw = super::dot(ai, bj) / denom;
                        if need_a {
                            let shrink = if na[i] > EPS { raw / (na[i] * na[i]) } else { 0.0 };
                            let dst = &mut ga.as_mut_slice()[i * d..(i + 1) * d];
                            for k in 0..d {
                                dst[k] += w * (bj[k] / denom - shrink * ai[k]);
                            }
                        }
                        if need_b {
                            let shrink = if nb[j] > EPS { raw / (nb[j] * nb[j]) } else { 0.0 };
                            let dst = &mut gb.as_mut_slice()[j * d..(j + 1) * d];
                            for k in 0..d {
                                dst[k] += w * (ai[k] / denom - shrink * bj[k]);
                            }
                        }
                    }
                }
                if need_a {
                    self.accumulate(grads, *a, ga);
                }
                if need_b {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Log { a } => {
                let av = self.value(*a);
                let ga = Matrix::from_fn(av.rows(), av.cols(), |r, c| {
                    let x = av.get(r, c);
                    if x > EPS {
                        g.get(r, c) / x
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Sum { a } => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.as_slice()[0]));
            }
            Op::Abs { a } => {
                let av = self.value(*a);
                let ga = Matrix::from_fn(av.rows(), av.cols(), |r, c| {
                    let x = av.get(r, c);
                    let s = if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    g.get(r, c) * s
                });
                self.accumulate(grads, *a, ga);
            }
        }
        Ok(())
    }
}
