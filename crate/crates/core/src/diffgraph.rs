//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitive operations in execution order. Every node
//! references only nodes created before it, so walking the tape backwards is
//! a valid reverse topological order. One tape is built per training example
//! and dropped afterwards.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{len} values do not fill shape {shape:?}")]
    Length { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(GraphError::Length {
                shape,
                len: values.len(),
            });
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(GraphError::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            values.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, values)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Row count of a 2-D tensor (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Column count of a 2-D tensor (length for vectors).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(GraphError::Length {
                shape: self.shape.clone(),
                len: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.clone(),
            requires_grad: false,
            grad: None,
        }
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        other => Err(GraphError::Shape {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n`.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a: m×k`, `b: n×k`.
fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += aᵀ · b` for `a: k×m`, `b: k×n`.
fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(GraphError::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(&a.values, &b.values, &mut out, m, k, n);
    Tensor::matrix(m, n, out)
}

fn softmax_row(row: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| allowed(*j))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (j, (o, v)) in out.iter_mut().zip(row).enumerate() {
        *o = if allowed(j) { (v - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Row-wise softmax of a 2-D tensor, stabilized by subtracting each row's max.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    softmax_rows_impl(x, None)
}

fn softmax_rows_impl(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    if x.shape.len() != 2 {
        return Err(GraphError::Shape {
            op: "softmax_rows",
            lhs: x.shape.clone(),
            rhs: vec![],
        });
    }
    if !x.is_finite() {
        return Err(GraphError::NonFinite { op: "softmax_rows" });
    }
    let (r, c) = (x.shape[0], x.shape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        softmax_row(
            &x.values[i * c..(i + 1) * c],
            mask.map(|m| &m[i * c..(i + 1) * c]),
            &mut out[i * c..(i + 1) * c],
        );
    }
    Tensor::matrix(r, c, out)
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Softmax(Var),
    Sum(Var),
    /// Scalar produced outside the tape with a known gradient w.r.t. its input.
    External(Var, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Records `value` as an op result, or as a constant when no input needs gradients.
    fn record(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.tracked(*v));
        value.requires_grad = tracked;
        self.push(value, if tracked { op } else { Op::Leaf })
    }

    /// Registers a tensor; gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Same value as `v`, cut from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.detached();
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.record(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` with `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_nt")?;
        let (n, k2) = dims2(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(GraphError::Shape {
                op: "matmul_nt",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(&self.value(a).values, &self.value(b).values, &mut out, m, k, n);
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.record(out, Op::MatMulNt(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa != sb {
            return Err(GraphError::Shape {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let vals = va.values.iter().zip(&vb.values).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape.clone(), vals)?;
        Ok(self.record(out, Op::Add(a, b), &[a, b]))
    }

    /// Broadcast-adds the vector `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "add_row")?;
        if self.value(bias).len() != n {
            return Err(GraphError::Shape {
                op: "add_row",
                lhs: self.value(x).shape.clone(),
                rhs: self.value(bias).shape.clone(),
            });
        }
        let b = &self.value(bias).values;
        let mut vals = self.value(x).values.clone();
        for row in vals.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let out = Tensor::matrix(m, n, vals)?;
        Ok(self.record(out, Op::AddRow(x, bias), &[x, bias]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let vals = va.values.iter().zip(&vb.values).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape.clone(), vals)?;
        Ok(self.record(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let out = Tensor {
            shape: va.shape.clone(),
            values: va.values.iter().map(|x| x * s).collect(),
            requires_grad: false,
            grad: None,
        };
        self.record(out, Op::Scale(a, s), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor {
            shape: va.shape.clone(),
            values: va.values.iter().map(|x| x.tanh()).collect(),
            requires_grad: false,
            grad: None,
        };
        self.record(out, Op::Tanh(a), &[a])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x))?;
        Ok(self.record(out, Op::Softmax(x), &[x]))
    }

    /// Row softmax restricted to entries where `mask` is true; masked entries
    /// come out as exact zeros. Every row must allow at least one entry.
    pub fn softmax_rows_masked(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(GraphError::Shape {
                op: "softmax_rows_masked",
                lhs: self.value(x).shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let out = softmax_rows_impl(self.value(x), Some(&mask))?;
        Ok(self.record(out, Op::Softmax(x), &[x]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values.iter().sum();
        self.record(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Attaches a scalar computed elsewhere, with `grad` = d(value)/d(input).
    pub fn external_scalar(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).len() {
            return Err(GraphError::Length {
                shape: self.value(input).shape.clone(),
                len: grad.len(),
            });
        }
        Ok(self.record(Tensor::scalar(value), Op::External(input, grad), &[input]))
    }

    /// Populates gradients of `loss` w.r.t. every tracked node. Gradients from
    /// an earlier call are discarded, so repeated calls give identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(GraphError::EmptyTape);
        }
        if !self.value(loss).is_scalar() {
            return Err(GraphError::NonScalarLoss(self.value(loss).shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.value.requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.requires_grad {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.tracked(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = dims2(va, "matmul").unwrap();
                let n = vb.cols();
                acc(*a, &mut |ga| gemm_nt_acc(g, &vb.values, ga, m, n, k));
                acc(*b, &mut |gb| gemm_tn_acc(&va.values, g, gb, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = dims2(va, "matmul_nt").unwrap();
                let n = vb.rows();
                acc(*a, &mut |ga| gemm_acc(g, &vb.values, ga, m, n, k));
                acc(*b, &mut |gb| gemm_tn_acc(g, &va.values, gb, m, n, k));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |gv| gv.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let n = self.value(*bias).len();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(&vb.values) {
                        *x += gy * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(&va.values) {
                        *x += gy * av;
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::Tanh(a) => {
                let y = &node.value.values;
                acc(*a, &mut |ga| {
                    for ((x, gy), yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += gy * (1.0 - yv * yv);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value.values;
                let c = node.value.cols();
                acc(*a, &mut |ga| {
                    for ((gx, gy), yr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gy.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((x, gv), yv) in gx.iter_mut().zip(gy).zip(yr) {
                            *x += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::External(a, local) => {
                acc(*a, &mut |ga| {
                    for (x, l) in ga.iter_mut().zip(local) {
                        *x += g[0] * l;
                    }
                });
            }
        }
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` is tracked
    /// and reachable.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy of the node's value carrying its gradient.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.value(v).clone();
        t.grad = self.grad(v).map(<[f64]>::to_vec);
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get(i, p) * b.get(p, j);
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let col = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&eye, &col).unwrap().values(), &[3.0, 4.0]);
        let a = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let b = Tensor::matrix(1, 1, vec![5.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().values(), &[10.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let got = matmul(&a, &b).unwrap();
        assert_eq!(got.shape(), &[3, 2]);
        for (x, y) in got.values().iter().zip(naive_matmul(&a, &b)) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        assert_eq!(
            err,
            GraphError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![1f64.ln(), 3f64.ln()],
            vec![1000.0, 1000.0],
        ])
        .unwrap();
        let y = softmax_rows(&x).unwrap();
        assert_abs_diff_eq!(y.values()[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(y.values()[2], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(y.values()[3], 0.75, epsilon = 1e-15);
        assert_eq!(y.row(2), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert_eq!(
            softmax_rows(&x).unwrap_err(),
            GraphError::NonFinite { op: "softmax_rows" }
        );
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]).with_requires_grad(true));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_square_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1], vec![3.0]).unwrap().with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]).with_requires_grad(true));
        assert_eq!(
            tape.backward(x).unwrap_err(),
            GraphError::NonScalarLoss(vec![2, 2])
        );
    }

    #[test]
    fn constants_are_not_recorded_as_ops() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        let c = tape.add(a, b).unwrap();
        assert!(!tape.value(c).requires_grad());
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert!(tape.grad(a).is_none());
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![5.0, 1.0, 1.0]]).unwrap());
        let y = tape.softmax_rows_masked(x, vec![false, true, true]).unwrap();
        assert_eq!(tape.value(y).values(), &[0.0, 0.5, 0.5]);
    }
}
