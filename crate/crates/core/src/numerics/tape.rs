//! Reverse-mode differentiation over dense matrices.
//!
//! Every operation evaluates eagerly and appends a node to the tape, so node
//! order is a topological order by construction. `backward` walks the nodes
//! in reverse and accumulates vector-Jacobian products.

use crate::error::{Error, Result};
use crate::numerics::matrix::{gemm, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    ClampMin(Var, f64),
    ConcatCols(Var, Var),
    Sum(Var),
    RowSum(Var),
    CosineRows(Var, Var),
    Mix { a: Var, b: Var, w: Var },
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Single-writer record of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `var`; zeros when `var` does not reach the root.
    pub fn get(&self, var: Var) -> Matrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Matrix {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

const SIGMOID_UPPER: f64 = 1.0 - f64::EPSILON / 2.0;

fn sigmoid_scalar(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // keep the open interval (0, 1) representable at saturation
    y.clamp(f64::MIN_POSITIVE, SIGMOID_UPPER)
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: no gradient is computed for it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let needs = self.needs(&[a]);
        self.push(value, op, needs)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, op, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    /// Adds a `1×O` bias row to every row of a `B×O` input.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if bs.0 != 1 || bs.1 != xs.1 {
            return Err(Error::dim("add_row_bias", xs, bs));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..value.rows() {
            for (v, bv) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let needs = self.needs(&[x, bias]);
        Ok(self.push(value, Op::AddRowBias(x, bias), needs))
    }

    /// `input · weight + bias` for `input: B×I`, `weight: I×O`, `bias: 1×O`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (is, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if is.1 != ws.0 {
            return Err(Error::dim("affine (input·weight)", is, ws));
        }
        if bs != (1, ws.1) {
            return Err(Error::dim("affine (bias)", ws, bs));
        }
        let prod = self.matmul(input, weight)?;
        self.add_row_bias(prod, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Multiplies each row of `x: B×D` by the matching entry of `col: B×1`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (xs, cs) = (self.shape(x), self.shape(col));
        if cs != (xs.0, 1) {
            return Err(Error::dim("mul_col", xs, cs));
        }
        let mut value = self.value(x).clone();
        let c = self.value(col).data().to_vec();
        for (r, cv) in c.iter().enumerate() {
            value.row_mut(r).iter_mut().for_each(|v| *v *= cv);
        }
        let needs = self.needs(&[x, col]);
        Ok(self.push(value, Op::MulCol(x, col), needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn offset(&mut self, a: Var, shift: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + shift)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same var has same shape")
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// Elementwise logistic function, stable for large `|x|`.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid_scalar)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Elementwise `max(floor, x)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::ClampMin(a, floor), |x| if x > floor { x } else { floor })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hcat(self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::ConcatCols(a, b), needs))
    }

    /// Sum of all entries, as `1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let needs = self.needs(&[a]);
        self.push(value, Op::Sum(a), needs)
    }

    /// Mean of all entries, as `1×1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, as `B×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = m.iter_rows().map(|r| r.iter().sum()).collect();
        let value = Matrix::new(m.rows(), 1, data).expect("row count");
        let needs = self.needs(&[a]);
        self.push(value, Op::RowSum(a), needs)
    }

    /// Row-wise cosine similarity of two `B×S` inputs, as `B×1`.
    ///
    /// A zero-norm row on either side is a degenerate-input error.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let (am, bm) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(am.rows());
        for r in 0..am.rows() {
            let (ra, rb) = (am.row(r), bm.row(r));
            let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Degenerate(format!("cosine similarity of zero-norm row {r}")));
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            data.push((dot / (na * nb)).clamp(-1.0, 1.0));
        }
        let value = Matrix::new(am.rows(), 1, data).expect("row count");
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::CosineRows(a, b), needs))
    }

    /// Row-wise convex combination `w·a + (1−w)·b` with `w: B×1`.
    ///
    /// The result is kept inside the `[min(a,b), max(a,b)]` envelope so
    /// rounding never leaves the segment.
    pub fn mix(&mut self, a: Var, b: Var, w: Var) -> Result<Var> {
        self.same_shape("mix", a, b)?;
        let (as_, ws) = (self.shape(a), self.shape(w));
        if ws != (as_.0, 1) {
            return Err(Error::dim("mix (weight)", as_, ws));
        }
        let (am, bm, wm) = (self.value(a), self.value(b), self.value(w));
        let mut value = Matrix::zeros(as_.0, as_.1);
        for r in 0..as_.0 {
            let eta = wm.get(r, 0);
            for ((o, &x), &y) in value.row_mut(r).iter_mut().zip(am.row(r)).zip(bm.row(r)) {
                *o = (y + eta * (x - y)).clamp(x.min(y), x.max(y));
            }
        }
        let needs = self.needs(&[a, b, w]);
        Ok(self.push(value, Op::Mix { a, b, w }, needs))
    }

    /// Reverse sweep from a `1×1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(Error::Contract(format!("backward root must be 1x1, got {shape:?}")));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Matrix>], v: Var) -> Option<&'g mut Matrix> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let (r, c) = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c)))
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, f: impl Fn(usize) -> f64) {
        if let Some(slot) = self.slot(grads, v) {
            for (i, s) in slot.data_mut().iter_mut().enumerate() {
                *s += f(i);
            }
        }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let gd = g.data();
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if let Some(slot) = self.slot(grads, a) {
                    gemm(g, false, self.value(b), true, slot, 1.0);
                }
                if let Some(slot) = self.slot(grads, b) {
                    gemm(self.value(a), true, g, false, slot, 1.0);
                }
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, x, |i| gd[i]);
                if let Some(slot) = self.slot(grads, bias) {
                    for row in g.iter_rows() {
                        for (s, v) in slot.data_mut().iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, |i| gd[i]);
                self.accumulate(grads, b, |i| gd[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, |i| gd[i]);
                self.accumulate(grads, b, |i| -gd[i]);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |i| gd[i] * bd[i]);
                self.accumulate(grads, b, |i| gd[i] * ad[i]);
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |i| gd[i] / bd[i]);
                self.accumulate(grads, b, |i| -gd[i] * ad[i] / (bd[i] * bd[i]));
            }
            Op::MulCol(x, col) => {
                let cols = out.cols();
                let (xd, cd) = (self.value(x).data(), self.value(col).data());
                self.accumulate(grads, x, |i| gd[i] * cd[i / cols]);
                if let Some(slot) = self.slot(grads, col) {
                    for (r, s) in slot.data_mut().iter_mut().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        *s += gd[span.clone()].iter().zip(&xd[span]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, a, |i| gd[i] * f),
            Op::Offset(a) => self.accumulate(grads, a, |i| gd[i]),
            Op::Relu(a) => {
                let ad = self.value(a).data();
                self.accumulate(grads, a, |i| if ad[i] > 0.0 { gd[i] } else { 0.0 });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.accumulate(grads, a, |i| gd[i] * y[i] * (1.0 - y[i]));
            }
            Op::Exp(a) => {
                let y = out.data();
                self.accumulate(grads, a, |i| gd[i] * y[i]);
            }
            Op::ClampMin(a, floor) => {
                let ad = self.value(a).data();
                self.accumulate(grads, a, |i| if ad[i] > floor { gd[i] } else { 0.0 });
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.shape(a).1, self.shape(b).1);
                let width = ca + cb;
                self.accumulate(grads, a, |i| gd[(i / ca.max(1)) * width + i % ca.max(1)]);
                self.accumulate(grads, b, |i| gd[(i / cb.max(1)) * width + ca + i % cb.max(1)]);
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(grads, a, |_| s);
            }
            Op::RowSum(a) => {
                let cols = self.shape(a).1;
                self.accumulate(grads, a, |i| gd[i / cols]);
            }
            Op::CosineRows(a, b) => {
                let (am, bm) = (self.value(a), self.value(b));
                let cols = am.cols();
                let mut da = vec![0.0; am.len()];
                let mut db = vec![0.0; bm.len()];
                for r in 0..am.rows() {
                    let (ra, rb) = (am.row(r), bm.row(r));
                    let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let c = out.get(r, 0);
                    for j in 0..cols {
                        da[r * cols + j] = gd[r] * (rb[j] / (na * nb) - c * ra[j] / (na * na));
                        db[r * cols + j] = gd[r] * (ra[j] / (na * nb) - c * rb[j] / (nb * nb));
                    }
                }
                self.accumulate(grads, a, |i| da[i]);
                self.accumulate(grads, b, |i| db[i]);
            }
            Op::Mix { a, b, w } => {
                let cols = out.cols();
                let (ad, bd, wd) = (self.value(a).data(), self.value(b).data(), self.value(w).data());
                self.accumulate(grads, a, |i| gd[i] * wd[i / cols]);
                self.accumulate(grads, b, |i| gd[i] * (1.0 - wd[i / cols]));
                if let Some(slot) = self.slot(grads, w) {
                    for (r, s) in slot.data_mut().iter_mut().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        *s += span.map(|i| gd[i] * (ad[i] - bd[i])).sum::<f64>();
                    }
                }
            }
        }
    }
}
