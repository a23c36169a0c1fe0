//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every operation records the tensors it consumed together with a
//! [`Backward`] rule. Calling [`Tensor::backward`] on a scalar walks the
//! recorded graph in reverse topological order and accumulates gradients
//! into the leaves that were created with `requires_grad = true`.
//!
//! Tensors are immutable once built. Only the gradient buffer of a leaf
//! changes, and only through `backward` or [`Tensor::zero_grad`].
//! Parameter updates therefore replace a leaf with a fresh one.
//!
//! Broadcasting is deliberately narrow: binary elementwise ops accept two
//! operands of identical shape, or one operand with a single element.
//! Row-vector bias addition has its own op, [`Tensor::add_row`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Numeric { op: &'static str, detail: String },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Gradient rule of a recorded operation.
pub trait Backward {
    fn name(&self) -> &'static str;

    /// Maps the gradient of the output to one gradient per input.
    ///
    /// Entries may be `None` for inputs that do not require a gradient.
    fn backward(&self, grad: &[f64], inputs: &[Tensor], output: &[f64]) -> Vec<Option<Vec<f64>>>;
}

struct Edge {
    op: Box<dyn Backward>,
    inputs: Vec<Tensor>,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    edge: Option<Edge>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.edge.as_ref().map(|e| e.op.name()))
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// A constant leaf.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// A trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    pub fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if data.len() != numel(shape) || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "leaf",
                lhs: vec![data.len()],
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::raw(data, shape.to_vec(), requires_grad, None))
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(vec![value], Vec::new(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(vec![0.0; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::raw(vec![1.0; numel(shape)], shape.to_vec(), false, None)
    }

    fn raw(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, edge: Option<Edge>) -> Self {
        Tensor(Rc::new(Node {
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            edge,
        }))
    }

    /// Builds the output of an operation, recording the edge only when
    /// some input participates in differentiation.
    pub fn from_op(data: Vec<f64>, shape: Vec<usize>, op: impl Backward + 'static, inputs: Vec<Tensor>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        if inputs.iter().any(Tensor::requires_grad) {
            let edge = Edge {
                op: Box::new(op),
                inputs,
            };
            Self::raw(data, shape, true, Some(edge))
        } else {
            Self::raw(data, shape, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.edge.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::raw(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    /// A fresh leaf holding the same values with the given flag.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Tensor {
        Self::raw(self.0.data.clone(), self.0.shape.clone(), requires_grad, None)
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::Contract(format!("{op}: expected a matrix, got shape {other:?}"))),
        }
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Accumulates d(self)/d(leaf) into every reachable trainable leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(grad) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.edge {
                Some(edge) => {
                    let input_grads = edge.op.backward(&grad, &edge.inputs, node.data());
                    debug_assert_eq!(input_grads.len(), edge.inputs.len());
                    for (input, g) in edge.inputs.iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), input.numel(), "{}", edge.op.name());
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(input.id(), g);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                        None => *slot = Some(grad),
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over nodes that require a gradient.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(edge) = &node.0.edge {
                for input in edge.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

// ---------------------------------------------------------------------------
// matmul / transpose

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Backward for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, grad: &[f64], inputs: &[Tensor], _output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let ga = inputs[0].requires_grad().then(|| {
            // g[m×n] · bᵀ[n×k]
            let mut out = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    let brow = &b[p * n..(p + 1) * n];
                    let grow = &grad[i * n..(i + 1) * n];
                    out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
            out
        });
        let gb = inputs[1].requires_grad().then(|| {
            // aᵀ[k×m] · g[m×n]
            let mut out = vec![0.0; k * n];
            for i in 0..m {
                let grow = &grad[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let orow = &mut out[p * n..(p + 1) * n];
                    for (o, g) in orow.iter_mut().zip(grow) {
                        *o += av * g;
                    }
                }
            }
            out
        });
        vec![ga, gb]
    }
}

struct Transpose {
    rows: usize,
    cols: usize,
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

impl Backward for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn backward(&self, grad: &[f64], _inputs: &[Tensor], _output: &[f64]) -> Vec<Option<Vec<f64>>> {
        // output is cols×rows
        vec![Some(transpose_data(grad, self.cols, self.rows))]
    }
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = other.rows_cols("matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(self.data(), other.data(), &mut out, m, k, n);
        Ok(Tensor::from_op(out, vec![m, n], MatMul { m, k, n }, vec![self.clone(), other.clone()]))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols("transpose")?;
        let out = transpose_data(self.data(), rows, cols);
        Ok(Tensor::from_op(out, vec![cols, rows], Transpose { rows, cols }, vec![self.clone()]))
    }
}

// ---------------------------------------------------------------------------
// elementwise

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct Binary {
    kind: BinaryKind,
    lhs_scalar: bool,
    rhs_scalar: bool,
}

impl Backward for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn backward(&self, grad: &[f64], inputs: &[Tensor], _output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let at = |t: &Tensor, scalar: bool, i: usize| if scalar { t.data()[0] } else { t.data()[i] };
        // local derivative of the output w.r.t. each side, per element
        let side = |which: usize, scalar: bool, t: &Tensor| -> Option<Vec<f64>> {
            if !t.requires_grad() {
                return None;
            }
            let local = |i: usize| -> f64 {
                match (self.kind, which) {
                    (BinaryKind::Add, _) => 1.0,
                    (BinaryKind::Sub, 0) => 1.0,
                    (BinaryKind::Sub, _) => -1.0,
                    (BinaryKind::Mul, 0) => at(b, self.rhs_scalar, i),
                    (BinaryKind::Mul, _) => at(a, self.lhs_scalar, i),
                }
            };
            if scalar {
                Some(vec![grad.iter().enumerate().map(|(i, g)| g * local(i)).sum()])
            } else {
                Some(grad.iter().enumerate().map(|(i, g)| g * local(i)).collect())
            }
        };
        vec![side(0, self.lhs_scalar, a), side(1, self.rhs_scalar, b)]
    }
}

struct Unary<F: Fn(f64, f64) -> f64> {
    name: &'static str,
    /// derivative given (input, output)
    derivative: F,
}

impl<F: Fn(f64, f64) -> f64> Backward for Unary<F> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, grad: &[f64], inputs: &[Tensor], output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        vec![Some(
            grad.iter()
                .zip(x)
                .zip(output)
                .map(|((g, &xi), &yi)| g * (self.derivative)(xi, yi))
                .collect(),
        )]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn binary(&self, other: &Tensor, kind: BinaryKind, op: &'static str) -> Result<Tensor> {
        let lhs_scalar = self.numel() == 1 && other.numel() != 1;
        let rhs_scalar = other.numel() == 1 && self.numel() != 1;
        if !lhs_scalar && !rhs_scalar && self.shape() != other.shape() {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let shape = if lhs_scalar { other.shape() } else { self.shape() }.to_vec();
        let n = numel(&shape);
        let a = |i: usize| if lhs_scalar { self.data()[0] } else { self.data()[i] };
        let b = |i: usize| if rhs_scalar { other.data()[0] } else { other.data()[i] };
        let out: Vec<f64> = (0..n)
            .map(|i| match kind {
                BinaryKind::Add => a(i) + b(i),
                BinaryKind::Sub => a(i) - b(i),
                BinaryKind::Mul => a(i) * b(i),
            })
            .collect();
        let node = Binary {
            kind,
            lhs_scalar,
            rhs_scalar,
        };
        Ok(Tensor::from_op(out, shape, node, vec![self.clone(), other.clone()]))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    fn unary<F>(&self, name: &'static str, f: impl Fn(f64) -> f64, derivative: F) -> Tensor
    where
        F: Fn(f64, f64) -> f64 + 'static,
    {
        let out = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(out, self.shape().to_vec(), Unary { name, derivative }, vec![self.clone()])
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary("scale", |x| c * x, move |_, _| c)
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn gelu(&self) -> Tensor {
        self.unary("gelu", gelu, |x, _| gelu_derivative(x))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }
}

// ---------------------------------------------------------------------------
// row-wise ops

struct AddRow {
    rows: usize,
    cols: usize,
}

impl Backward for AddRow {
    fn name(&self) -> &'static str {
        "add_row"
    }

    fn backward(&self, grad: &[f64], inputs: &[Tensor], _output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let gx = inputs[0].requires_grad().then(|| grad.to_vec());
        let gb = inputs[1].requires_grad().then(|| {
            let mut out = vec![0.0; self.cols];
            for r in 0..self.rows {
                for (o, g) in out.iter_mut().zip(&grad[r * self.cols..(r + 1) * self.cols]) {
                    *o += g;
                }
            }
            out
        });
        vec![gx, gb]
    }
}

struct SoftmaxRows {
    cols: usize,
}

impl Backward for SoftmaxRows {
    fn name(&self) -> &'static str {
        "softmax_rows"
    }

    fn backward(&self, grad: &[f64], _inputs: &[Tensor], output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![0.0; grad.len()];
        for ((o, g), y) in out
            .chunks_mut(self.cols)
            .zip(grad.chunks(self.cols))
            .zip(output.chunks(self.cols))
        {
            let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
            for ((oi, gi), yi) in o.iter_mut().zip(g).zip(y) {
                *oi = yi * (gi - dot);
            }
        }
        vec![Some(out)]
    }
}

struct LayerNorm {
    cols: usize,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Backward for LayerNorm {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, grad: &[f64], inputs: &[Tensor], _output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let d = self.cols;
        let gain = inputs[1].data();
        let gx = inputs[0].requires_grad().then(|| {
            let mut out = vec![0.0; grad.len()];
            for (r, ((o, g), xhat)) in out
                .chunks_mut(d)
                .zip(grad.chunks(d))
                .zip(self.normalized.chunks(d))
                .enumerate()
            {
                let dxhat: Vec<f64> = g.iter().zip(gain).map(|(a, b)| a * b).collect();
                let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for ((oi, di), xi) in o.iter_mut().zip(&dxhat).zip(xhat) {
                    *oi = self.inv_std[r] * (di - mean_d - xi * mean_dx);
                }
            }
            out
        });
        let ggain = inputs[1].requires_grad().then(|| {
            let mut out = vec![0.0; d];
            for (g, xhat) in grad.chunks(d).zip(self.normalized.chunks(d)) {
                for ((o, gi), xi) in out.iter_mut().zip(g).zip(xhat) {
                    *o += gi * xi;
                }
            }
            out
        });
        let gbias = inputs[2].requires_grad().then(|| {
            let mut out = vec![0.0; d];
            for g in grad.chunks(d) {
                out.iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
            }
            out
        });
        vec![gx, ggain, gbias]
    }
}

impl Tensor {
    /// Adds a length-`cols` vector to every row of a `rows×cols` matrix.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols("add_row")?;
        if bias.shape() != [cols] {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let mut out = self.to_vec();
        for row in out.chunks_mut(cols) {
            row.iter_mut().zip(bias.data()).for_each(|(o, b)| *o += b);
        }
        Ok(Tensor::from_op(out, vec![rows, cols], AddRow { rows, cols }, vec![self.clone(), bias.clone()]))
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols("softmax_rows")?;
        if self.data().iter().any(|x| x.is_nan()) {
            return Err(TensorError::Numeric {
                op: "softmax_rows",
                detail: "NaN in input".into(),
            });
        }
        let mut out = vec![0.0; rows * cols];
        for (o, x) in out.chunks_mut(cols).zip(self.data().chunks(cols)) {
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (oi, xi) in o.iter_mut().zip(x) {
                *oi = (xi - max).exp();
                total += *oi;
            }
            o.iter_mut().for_each(|v| *v /= total);
        }
        Ok(Tensor::from_op(out, vec![rows, cols], SoftmaxRows { cols }, vec![self.clone()]))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().unwrap_or(&1);
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Contract(format!("layer_norm: eps must be positive, got {eps}")));
        }
        let rows = self.numel() / d;
        let mut normalized = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; self.numel()];
        for r in 0..rows {
            let x = &self.data()[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let xh = (x[j] - mean) * inv;
                normalized[r * d + j] = xh;
                out[r * d + j] = gain.data()[j] * xh + bias.data()[j];
            }
        }
        let node = LayerNorm {
            cols: d,
            normalized,
            inv_std,
        };
        Ok(Tensor::from_op(out, self.shape().to_vec(), node, vec![self.clone(), gain.clone(), bias.clone()]))
    }
}

// ---------------------------------------------------------------------------
// slicing and gathering

struct SliceCols {
    cols: usize,
    start: usize,
    end: usize,
}

impl Backward for SliceCols {
    fn name(&self) -> &'static str {
        "slice_cols"
    }

    fn backward(&self, grad: &[f64], inputs: &[Tensor], _output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let width = self.end - self.start;
        let mut out = vec![0.0; inputs[0].numel()];
        for (r, g) in grad.chunks(width).enumerate() {
            out[r * self.cols + self.start..r * self.cols + self.end].copy_from_slice(g);
        }
        vec![Some(out)]
    }
}

struct ConcatRows {
    sizes: Vec<usize>,
}

impl Backward for ConcatRows {
    fn name(&self) -> &'static str {
        "concat_rows"
    }

    fn backward(&self, grad: &[f64], inputs: &[Tensor], _output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut offset = 0;
        inputs
            .iter()
            .zip(&self.sizes)
            .map(|(input, &n)| {
                let g = input.requires_grad().then(|| grad[offset..offset + n].to_vec());
                offset += n;
                g
            })
            .collect()
    }
}

struct ConcatCols {
    widths: Vec<usize>,
}

impl Backward for ConcatCols {
    fn name(&self) -> &'static str {
        "concat_cols"
    }

    fn backward(&self, grad: &[f64], inputs: &[Tensor], _output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.widths.iter().sum();
        let rows = grad.len() / total;
        let mut offset = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (input, &w) in inputs.iter().zip(&self.widths) {
            if input.requires_grad() {
                let mut g = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    g.extend_from_slice(&grad[r * total + offset..r * total + offset + w]);
                }
                grads.push(Some(g));
            } else {
                grads.push(None);
            }
            offset += w;
        }
        grads
    }
}

struct SelectRows {
    indices: Vec<usize>,
    cols: usize,
}

impl Backward for SelectRows {
    fn name(&self) -> &'static str {
        "select_rows"
    }

    fn backward(&self, grad: &[f64], inputs: &[Tensor], _output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let c = self.cols;
        let mut out = vec![0.0; inputs[0].numel()];
        for (g, &idx) in grad.chunks(c).zip(&self.indices) {
            out[idx * c..(idx + 1) * c].iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
        }
        vec![Some(out)]
    }
}

struct Reduce {
    scale: f64,
}

impl Backward for Reduce {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, grad: &[f64], inputs: &[Tensor], _output: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![grad[0] * self.scale; inputs[0].numel()])]
    }
}

struct Reshape;

impl Backward for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, grad: &[f64], _inputs: &[Tensor], _output: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec())]
    }
}

impl Tensor {
    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols("slice_cols")?;
        if start >= end || end > cols {
            return Err(TensorError::Contract(format!(
                "slice_cols: range {start}..{end} invalid for {cols} columns"
            )));
        }
        let width = end - start;
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&self.data()[r * cols + start..r * cols + end]);
        }
        Ok(Tensor::from_op(out, vec![rows, width], SliceCols { cols, start, end }, vec![self.clone()]))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows: no inputs".into()))?;
        let (_, cols) = first.rows_cols("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, c) = p.rows_cols("concat_rows")?;
            if c != cols {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(p.data());
        }
        let sizes = parts.iter().map(Tensor::numel).collect();
        Ok(Tensor::from_op(out, vec![rows, cols], ConcatRows { sizes }, parts.to_vec()))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols: no inputs".into()))?;
        let (rows, _) = first.rows_cols("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.rows_cols("concat_cols")?;
            if r != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        Ok(Tensor::from_op(out, vec![rows, total], ConcatCols { widths }, parts.to_vec()))
    }

    /// Gathers rows by index; repeated indices are allowed.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols("select_rows")?;
        if indices.is_empty() {
            return Err(TensorError::Contract("select_rows: empty index list".into()));
        }
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::Contract(format!("select_rows: row {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(&self.data()[i * cols..(i + 1) * cols]);
        }
        let node = SelectRows {
            indices: indices.to_vec(),
            cols,
        };
        Ok(Tensor::from_op(out, vec![indices.len(), cols], node, vec![self.clone()]))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let picked = self.select_rows(&[i])?;
        picked.reshape(&[self.shape()[1]])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), Reshape, vec![self.clone()]))
    }

    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        Tensor::from_op(vec![total], Vec::new(), Reduce { scale: 1.0 }, vec![self.clone()])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        let total: f64 = self.data().iter().sum();
        Tensor::from_op(vec![total / n], Vec::new(), Reduce { scale: 1.0 / n }, vec![self.clone()])
    }

    /// Inner product of two vectors of equal shape.
    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        Ok(self.mul(other)?.sum())
    }

    /// Sum of a list of scalars.
    pub fn sum_all(terms: &[Tensor]) -> Result<Tensor> {
        let mut iter = terms.iter();
        let first = iter
            .next()
            .ok_or_else(|| TensorError::Contract("sum_all: no terms".into()))?;
        iter.try_fold(first.clone(), |acc, t| acc.add(t))
    }
}

// ---------------------------------------------------------------------------
// losses

struct CrossEntropy {
    cols: usize,
    probs: Vec<f64>,
    targets: Vec<usize>,
}

impl Backward for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, grad: &[f64], _inputs: &[Tensor], _output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let n = self.targets.len() as f64;
        let mut out = self.probs.clone();
        for (r, &t) in self.targets.iter().enumerate() {
            out[r * self.cols + t] -= 1.0;
        }
        out.iter_mut().for_each(|v| *v *= grad[0] / n);
        vec![Some(out)]
    }
}

/// Log-softmax of each row, computed with max subtraction.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|x| x - lse).collect()
}

impl Tensor {
    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols("cross_entropy")?;
        if targets.len() != rows {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(TensorError::Contract(format!("cross_entropy: class {bad} out of range {cols}")));
        }
        let mut probs = Vec::with_capacity(rows * cols);
        let mut loss = 0.0;
        for (row, &t) in self.data().chunks(cols).zip(targets) {
            let logp = log_softmax(row);
            loss -= logp[t];
            probs.extend(logp.iter().map(|l| l.exp()));
        }
        let node = CrossEntropy {
            cols,
            probs,
            targets: targets.to_vec(),
        };
        Ok(Tensor::from_op(vec![loss / rows as f64], Vec::new(), node, vec![self.clone()]))
    }
}
