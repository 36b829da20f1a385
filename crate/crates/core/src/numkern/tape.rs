//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its operands, so node order is already a topological order. A backward
//! pass walks the nodes in reverse, accumulating vector-Jacobian products
//! into per-node gradient buffers. Nodes that no parameter flows into are
//! never differentiated.
//!
//! Gradients persist on the tape: calling [`Tape::backward`] twice without
//! [`Tape::zero_grads`] in between adds the second pass on top of the first.

use crate::error::{Error, Result};

use super::matrix::{matmul_acc, matmul_at_acc, matmul_bt_acc, softmax, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// Adds a length-`cols` bias to every row.
    AddBias(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    SumRows(Var),
    SumAll(Var),
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    SliceCols(Var, usize),
    Row(Var, usize),
    Softmax(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded computation tape. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
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

    /// Registers a differentiable leaf (a parameter).
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a non-differentiable leaf (an input or a fixed value).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of the last backward passes, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the right shape when nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Matrix {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.value(v).shape();
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.cols() != bm.cols() {
            return Err(Error::shape(
                "matmul_bt",
                format!(
                    "{}x{} · ({}x{})ᵀ",
                    am.rows(),
                    am.cols(),
                    bm.rows(),
                    bm.cols()
                ),
            ));
        }
        let mut value = Matrix::zeros(am.rows(), bm.rows());
        matmul_bt_acc(am, bm, &mut value);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulBt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Broadcast-adds `bias` (any shape holding exactly `cols` values) to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(bias));
        if bm.len() != am.cols() {
            return Err(Error::shape(
                "add_bias",
                format!(
                    "bias {}x{} cannot broadcast over {}x{}",
                    bm.rows(),
                    bm.cols(),
                    am.rows(),
                    am.cols()
                ),
            ));
        }
        let mut value = am.clone();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(bm.as_slice()) {
                *v += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(a, bias), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Hadamard(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).sigmoid();
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).tanh();
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    /// Column-wise sum: `L x H -> 1 x H`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_rows();
        let rg = self.rg(a);
        self.push(value, Op::SumRows(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    /// Stacks `1 x n` rows into an `len x n` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::shape("stack_rows", "no rows"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        let mut rg = false;
        for &r in rows {
            let m = self.value(r);
            if m.rows() != 1 || m.cols() != cols {
                return Err(Error::shape(
                    "stack_rows",
                    format!("row {}x{} in a stack of 1x{cols}", m.rows(), m.cols()),
                ));
            }
            data.extend_from_slice(m.as_slice());
            rg |= self.rg(r);
        }
        let value = Matrix::from_vec(rows.len(), cols, data)?;
        Ok(self.push(value, Op::StackRows(rows.to_vec()), rg))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let am = self.value(a);
        if start >= end || end > am.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{end} of {}x{}", am.rows(), am.cols()),
            ));
        }
        let mut value = Matrix::zeros(am.rows(), end - start);
        for r in 0..am.rows() {
            value.row_mut(r).copy_from_slice(&am.row(r)[start..end]);
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Row `i` of `a` as a `1 x cols` matrix.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let am = self.value(a);
        if i >= am.rows() {
            return Err(Error::shape(
                "row",
                format!("row {i} of {}x{}", am.rows(), am.cols()),
            ));
        }
        let value = Matrix::row_vector(am.row(i));
        let rg = self.rg(a);
        Ok(self.push(value, Op::Row(a, i), rg))
    }

    /// Softmax over every entry of `a`, keeping its shape.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let am = self.value(a);
        let w = softmax(am.as_slice())?;
        let value = Matrix::from_vec(am.rows(), am.cols(), w)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Reverse pass from a scalar `root`, accumulating into the tape's gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("root must be 1x1, got {}x{}", shape.0, shape.1),
            ));
        }
        let mut local: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        local[root.0] = Some(Matrix::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut local);
            }
            local[i] = Some(g);
        }

        if self.grads.is_empty() {
            self.grads = local;
        } else {
            if self.grads.len() < local.len() {
                self.grads.resize(local.len(), None);
            }
            for (acc, g) in self.grads.iter_mut().zip(local) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign(&g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Matrix, local: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        // Gradient buffer for operand `v`, or None when `v` needs no gradient.
        let slot = |v: Var, local: &mut [Option<Matrix>]| -> bool {
            if !nodes[v.0].requires_grad {
                return false;
            }
            if local[v.0].is_none() {
                let (r, c) = nodes[v.0].value.shape();
                local[v.0] = Some(Matrix::zeros(r, c));
            }
            true
        };
        let val = |v: Var| &nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if slot(*a, local) {
                    matmul_bt_acc(g, val(*b), local[a.0].as_mut().unwrap());
                }
                if slot(*b, local) {
                    matmul_at_acc(val(*a), g, local[b.0].as_mut().unwrap());
                }
            }
            Op::MatMulBt(a, b) => {
                if slot(*a, local) {
                    matmul_acc(g, val(*b), local[a.0].as_mut().unwrap());
                }
                if slot(*b, local) {
                    matmul_at_acc(g, val(*a), local[b.0].as_mut().unwrap());
                }
            }
            Op::Transpose(a) => {
                if slot(*a, local) {
                    local[a.0].as_mut().unwrap().add_assign(&g.transpose());
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if slot(*v, local) {
                        local[v.0].as_mut().unwrap().add_assign(g);
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if slot(*a, local) {
                    local[a.0].as_mut().unwrap().add_assign(g);
                }
                if slot(*bias, local) {
                    let db = local[bias.0].as_mut().unwrap().as_mut_slice();
                    for r in 0..g.rows() {
                        for (d, x) in db.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if slot(*a, local) {
                    local[a.0].as_mut().unwrap().add_assign(g);
                }
                if slot(*b, local) {
                    let db = local[b.0].as_mut().unwrap().as_mut_slice();
                    for (d, x) in db.iter_mut().zip(g.as_slice()) {
                        *d -= x;
                    }
                }
            }
            Op::Hadamard(a, b) => {
                for (x, other) in [(a, b), (b, a)] {
                    if slot(*x, local) {
                        let d = local[x.0].as_mut().unwrap().as_mut_slice();
                        for ((d, gi), oi) in
                            d.iter_mut().zip(g.as_slice()).zip(val(*other).as_slice())
                        {
                            *d += gi * oi;
                        }
                    }
                }
            }
            Op::Scale(a, k) => {
                if slot(*a, local) {
                    let d = local[a.0].as_mut().unwrap().as_mut_slice();
                    for (d, gi) in d.iter_mut().zip(g.as_slice()) {
                        *d += k * gi;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if slot(*a, local) {
                    let d = local[a.0].as_mut().unwrap().as_mut_slice();
                    for ((d, gi), y) in d.iter_mut().zip(g.as_slice()).zip(node.value.as_slice()) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if slot(*a, local) {
                    let d = local[a.0].as_mut().unwrap().as_mut_slice();
                    for ((d, gi), y) in d.iter_mut().zip(g.as_slice()).zip(node.value.as_slice()) {
                        *d += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Abs(a) => {
                if slot(*a, local) {
                    let d = local[a.0].as_mut().unwrap().as_mut_slice();
                    for ((d, gi), x) in d.iter_mut().zip(g.as_slice()).zip(val(*a).as_slice()) {
                        // Subgradient 0 at the kink.
                        let s = if *x > 0.0 {
                            1.0
                        } else if *x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *d += gi * s;
                    }
                }
            }
            Op::SumRows(a) => {
                if slot(*a, local) {
                    let da = local[a.0].as_mut().unwrap();
                    for r in 0..da.rows() {
                        for (d, gi) in da.row_mut(r).iter_mut().zip(g.as_slice()) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if slot(*a, local) {
                    let gi = g.as_slice()[0];
                    for d in local[a.0].as_mut().unwrap().as_mut_slice() {
                        *d += gi;
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let split = val(*a).cols();
                if slot(*a, local) {
                    let da = local[a.0].as_mut().unwrap();
                    for r in 0..g.rows() {
                        for (d, gi) in da.row_mut(r).iter_mut().zip(&g.row(r)[..split]) {
                            *d += gi;
                        }
                    }
                }
                if slot(*b, local) {
                    let db = local[b.0].as_mut().unwrap();
                    for r in 0..g.rows() {
                        for (d, gi) in db.row_mut(r).iter_mut().zip(&g.row(r)[split..]) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::StackRows(rows) => {
                for (i, v) in rows.iter().enumerate() {
                    if slot(*v, local) {
                        let d = local[v.0].as_mut().unwrap().as_mut_slice();
                        for (d, gi) in d.iter_mut().zip(g.row(i)) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::SliceCols(a, start) => {
                if slot(*a, local) {
                    let da = local[a.0].as_mut().unwrap();
                    for r in 0..g.rows() {
                        let dst = &mut da.row_mut(r)[*start..*start + g.cols()];
                        for (d, gi) in dst.iter_mut().zip(g.row(r)) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Row(a, i) => {
                if slot(*a, local) {
                    let d = local[a.0].as_mut().unwrap().row_mut(*i);
                    for (d, gi) in d.iter_mut().zip(g.as_slice()) {
                        *d += gi;
                    }
                }
            }
            Op::Softmax(a) => {
                if slot(*a, local) {
                    let y = node.value.as_slice();
                    let dot: f64 = g.as_slice().iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    let d = local[a.0].as_mut().unwrap().as_mut_slice();
                    for ((d, gi), yi) in d.iter_mut().zip(g.as_slice()).zip(y) {
                        *d += yi * (gi - dot);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_gradient() {
        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(2.0));
        let y = t.param(Matrix::scalar(3.0));
        let z = t.hadamard(x, y).unwrap();
        t.backward(z).unwrap();
        assert_eq!(t.grad(x).unwrap().item().unwrap(), 3.0);
        assert_eq!(t.grad(y).unwrap().item().unwrap(), 2.0);
        assert_eq!(t.grad(z).unwrap().item().unwrap(), 1.0);
    }

    #[test]
    fn zero_weight_path_gives_zero_grad() {
        let mut t = Tape::new();
        let v = t.param(Matrix::row_vector(&[0.3, -1.2, 4.0]));
        let zero = t.constant(Matrix::scalar(0.0));
        let zv = t.matmul(zero, v).unwrap();
        let s = t.sigmoid(zv);
        let root = t.sum_all(s);
        t.backward(root).unwrap();
        assert_eq!(t.grad(v).unwrap(), &Matrix::zeros(1, 3));
    }

    #[test]
    fn constant_model_mae_bias_grad() {
        // Loss = mean |b - y_i| for y = [1, 5, 9] at b = 4: signs (+, -, -) / 3.
        let mut t = Tape::new();
        let b = t.param(Matrix::scalar(4.0));
        let mut terms = Vec::new();
        for y in [1.0, 5.0, 9.0] {
            let yv = t.constant(Matrix::scalar(y));
            let d = t.sub(b, yv).unwrap();
            terms.push(t.abs(d));
        }
        let stacked = t.stack_rows(&terms).unwrap();
        let total = t.sum_all(stacked);
        let loss = t.scale(total, 1.0 / 3.0);
        t.backward(loss).unwrap();
        let g = t.grad(b).unwrap().item().unwrap();
        assert!((g - (-1.0 / 3.0)).abs() < 1e-15);

        // Exactly at a label the subgradient contribution is zero.
        let mut t = Tape::new();
        let b = t.param(Matrix::scalar(5.0));
        let yv = t.constant(Matrix::scalar(5.0));
        let d = t.sub(b, yv).unwrap();
        let l = t.abs(d);
        t.backward(l).unwrap();
        assert_eq!(t.grad(b).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn fan_out_accumulates_and_repeated_backward_adds() {
        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(3.0));
        let sq = t.hadamard(x, x).unwrap();
        let out = t.add(sq, x).unwrap();
        t.backward(out).unwrap();
        assert_eq!(t.grad(x).unwrap().item().unwrap(), 7.0);
        t.backward(out).unwrap();
        assert_eq!(t.grad(x).unwrap().item().unwrap(), 14.0);
        t.zero_grads();
        assert!(t.grad(x).is_none());
        t.backward(out).unwrap();
        assert_eq!(t.grad(x).unwrap().item().unwrap(), 7.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(Matrix::zeros(2, 1));
        assert!(matches!(t.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::scalar(2.0));
        let w = t.param(Matrix::scalar(5.0));
        let y = t.hadamard(x, w).unwrap();
        t.backward(y).unwrap();
        assert!(t.grad(x).is_none());
        assert_eq!(t.grad(w).unwrap().item().unwrap(), 2.0);
    }
}
