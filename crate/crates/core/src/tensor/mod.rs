//! Dense f64 tensors and a reverse-mode tape.
//!
//! A [`Graph`] is rebuilt for every optimisation step. Values are recorded
//! eagerly as ops are applied; [`Graph::backward`] walks the tape once in
//! reverse. Broadcasting is limited to tensor-scalar ops plus the explicit
//! [`Graph::add_row`] used for biases.

mod ctf;

pub use ctf::{read_ctf, read_ctf_from, write_ctf, write_ctf_to};

use crate::error::{shape_err, Error, Result};

/// Row-major dense array of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return shape_err("Tensor::new", format!("zero-sized dimension in {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("Tensor::from_rows", "ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a 2-D tensor (1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a 2-D tensor (length for vectors).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Plain (tape-free) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = as_matrix(self, "matmul")?;
        let (k2, n) = as_matrix(other, "matmul")?;
        if k != k2 {
            return shape_err("matmul", format!("{:?} x {:?}", self.shape, other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
        Tensor::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = as_matrix(self, "transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::matrix(n, m, out)
    }
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [m, n] => Ok((*m, *n)),
        s => shape_err(op, format!("expected a matrix, got shape {s:?}")),
    }
}

/// `c = a' b' + beta c` where `'` optionally transposes. All operands row-major
/// with their untransposed shapes `a: m x k` (or `k x m`), `b: k x n` (or `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise unary functions with registered derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    /// Slope 0.2 on the negative side.
    LeakyRelu,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Neg,
    Square,
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::LeakyRelu => "leaky_relu",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Neg => "neg",
            Unary::Square => "square",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Neg => -x,
            Unary::Square => x * x,
        }
    }

    /// d/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Neg => -1.0,
            Unary::Square => 2.0 * x,
        }
    }
}

type CustomBackward = Box<dyn Fn(&Tensor) -> Result<Vec<Tensor>> + Send + Sync>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    AddRow(Var, Var),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    SliceCols(Var, usize, usize),
    Custom(Vec<Var>, CustomBackward),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient wrt `v`, zeros when no path reaches the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parent node ids of `v`, in argument order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.parents_of(&self.nodes[v.0].op)
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.parents_of(&op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node { op, value, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Unary(a, _)
            | Op::Clamp(a, _, _)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::SliceCols(a, _, _) => vec![*a],
            Op::Custom(ins, _) => ins.clone(),
        }
    }

    /// Leaf whose gradient will be tracked.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        let v = self.push(Op::Leaf, t, "param")?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Leaf, t, "constant")
    }

    /// Copy of `v`'s value as a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor { shape: x.shape.clone(), data };
        self.push(op, value, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |p, q| p * q)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar(a), value, "add_scalar")
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.push(Op::MulScalar(a, s), value, "mul_scalar")
    }

    /// Adds the vector `row` (length n) to every row of the `m x n` matrix `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let x = self.value(a);
        let r = self.value(row);
        if x.ndim() != 2 || r.len() != x.cols() {
            return shape_err("add_row", format!("{:?} + row {:?}", x.shape, r.shape));
        }
        let n = x.cols();
        let data = x.data.iter().enumerate().map(|(i, &v)| v + r.data[i % n]).collect();
        let value = Tensor { shape: x.shape.clone(), data };
        self.push(Op::AddRow(a, row), value, "add_row")
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Result<Var> {
        let x = self.value(a);
        if f == Unary::Log {
            if let Some(bad) = x.data.iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain { op: "log", detail: format!("log of {bad}") });
            }
        }
        let value = x.map(|v| f.apply(v));
        self.push(Op::Unary(a, f), value, f.name())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::LeakyRelu)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Neg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), value, "clamp")
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let value = reduce_sum(self.value(a), axis, "sum")?;
        self.push(Op::Sum(a, axis), value, "sum")
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let x = self.value(a);
        let count = match axis {
            None => x.len(),
            Some(ax) => *x.shape.get(ax).unwrap_or(&1),
        } as f64;
        let mut value = reduce_sum(x, axis, "mean")?;
        value.data.iter_mut().for_each(|v| *v /= count);
        self.push(Op::Mean(a, axis), value, "mean")
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = as_matrix(x, "slice_cols")?;
        if start >= end || end > n {
            return shape_err("slice_cols", format!("{start}..{end} of {n} columns"));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&x.data[i * n + start..i * n + end]);
        }
        let value = Tensor { shape: vec![m, w], data };
        self.push(Op::SliceCols(a, start, end), value, "slice_cols")
    }

    /// Records an op computed outside the tape. `backward` maps the output
    /// gradient to one gradient per input, each shaped like that input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        name: &'static str,
        backward: impl Fn(&Tensor) -> Result<Vec<Tensor>> + Send + Sync + 'static,
    ) -> Result<Var> {
        self.push(Op::Custom(inputs.to_vec(), Box::new(backward)), value, name)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        let seed = self.value(loss);
        if seed.len() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", seed.shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.0] = Some(Tensor::full(&seed.shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.local_grads(node, &g)?;
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                accumulate(&mut grads[parent.0], pg);
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (m, k) = (x.shape[0], x.shape[1]);
                let n = y.shape[1];
                let mut res = Vec::new();
                if want(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, &g.data, false, &y.data, true, &mut ga, 0.0);
                    res.push((*a, Tensor { shape: vec![m, k], data: ga }));
                }
                if want(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, &x.data, true, &g.data, false, &mut gb, 0.0);
                    res.push((*b, Tensor { shape: vec![k, n], data: gb }));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let ga = zip_with(g, y, |p, q| p * q);
                let gb = zip_with(g, x, |p, q| p * q);
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MulScalar(a, s) => {
                let s = *s;
                vec![(*a, g.map(|v| v * s))]
            }
            Op::AddRow(a, row) => {
                let n = g.cols();
                let mut gr = vec![0.0; n];
                for (i, &v) in g.data.iter().enumerate() {
                    gr[i % n] += v;
                }
                let rshape = val(*row).shape.clone();
                vec![(*a, g.clone()), (*row, Tensor { shape: rshape, data: gr })]
            }
            Op::Unary(a, f) => {
                let x = val(*a);
                let y = &node.value;
                let data = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .zip(&y.data)
                    .map(|((&gv, &xv), &yv)| gv * f.derivative(xv, yv))
                    .collect();
                vec![(*a, Tensor { shape: x.shape.clone(), data })]
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                let data = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(&gv, &xv)| if xv < *lo || xv > *hi { 0.0 } else { gv })
                    .collect();
                vec![(*a, Tensor { shape: x.shape.clone(), data })]
            }
            Op::Sum(a, axis) => vec![(*a, expand_reduced(g, &val(*a).shape, *axis, 1.0))],
            Op::Mean(a, axis) => {
                let shape = &val(*a).shape;
                let count = match axis {
                    None => shape.iter().product::<usize>(),
                    Some(ax) => shape[*ax],
                } as f64;
                vec![(*a, expand_reduced(g, shape, *axis, 1.0 / count))]
            }
            Op::SliceCols(a, start, end) => {
                let x = val(*a);
                let (m, n) = (x.shape[0], x.shape[1]);
                let w = end - start;
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    data[i * n + start..i * n + end].copy_from_slice(&g.data[i * w..(i + 1) * w]);
                }
                vec![(*a, Tensor { shape: x.shape.clone(), data })]
            }
            Op::Custom(ins, backward) => {
                let gs = backward(g)?;
                if gs.len() != ins.len() {
                    return shape_err("custom backward", "gradient count differs from inputs");
                }
                for (v, t) in ins.iter().zip(&gs) {
                    if t.shape != val(*v).shape {
                        return shape_err("custom backward", format!("{:?} vs {:?}", t.shape, val(*v).shape));
                    }
                }
                ins.iter().copied().zip(gs).collect()
            }
        };
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data.iter().zip(&b.data).map(|(&p, &q)| f(p, q)).collect();
    Tensor { shape: a.shape.clone(), data }
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduce_sum(x: &Tensor, axis: Option<usize>, op: &'static str) -> Result<Tensor> {
    match axis {
        None => Ok(Tensor::scalar(x.data.iter().sum())),
        Some(ax) if ax < x.ndim() => {
            let (outer, len, inner) = split_axis(&x.shape, ax);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for a in 0..len {
                    let base = (o * len + a) * inner;
                    for i in 0..inner {
                        data[o * inner + i] += x.data[base + i];
                    }
                }
            }
            let mut shape = x.shape.clone();
            shape.remove(ax);
            Ok(Tensor { shape, data })
        }
        Some(ax) => shape_err(op, format!("axis {ax} out of range for {:?}", x.shape)),
    }
}

fn expand_reduced(g: &Tensor, shape: &[usize], axis: Option<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    match axis {
        None => Tensor { shape: shape.to_vec(), data: vec![g.data[0] * scale; n] },
        Some(ax) => {
            let (outer, len, inner) = split_axis(shape, ax);
            let mut data = vec![0.0; n];
            for o in 0..outer {
                for a in 0..len {
                    let base = (o * len + a) * inner;
                    for i in 0..inner {
                        data[base + i] = g.data[o * inner + i] * scale;
                    }
                }
            }
            Tensor { shape: shape.to_vec(), data }
        }
    }
}

