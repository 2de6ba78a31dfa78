//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Handles
//! ([`Var`]) are plain indices, so a tape can be built on one thread and
//! moved to another as long as no backward pass is running. Graphs are
//! rebuilt on every forward pass; parameters live in a [`ParamStore`]
//! outside the tape and are copied in as leaves on first use.

mod checkpoint;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{Gradients, ParamId, ParamStore, Parameter};

use std::collections::HashMap;

use thiserror::Error;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric domain violation in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major array of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    /// Accumulated gradient; `None` until a backward pass reaches this tensor.
    pub grad: Option<Vec<f64>>,
}

impl DiffTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(TensorError::Shape {
                op: "new",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Rows and columns of a 2-D tensor; a 1-D tensor is treated as a single row.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [c] => Some((1, *c)),
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Square,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    ShiftedSoftplus,
    Softplus,
    Sigmoid,
    Tanhshrink,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    /// Mean over axis 0 of an `n x d` matrix, giving `1 x d`.
    MeanRows,
    /// Mean over axis 1 of an `n x d` matrix, giving `n x 1`.
    MeanCols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
    },
    Unary(UnaryOp, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MulConst(Var, Vec<f64>),
    AddBias(Var, Var),
    Act(Activation, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reduce(Reduction, Var),
    Cosine {
        a: Var,
        b: Var,
        norm_a: f64,
        norm_b: f64,
    },
    Norm(Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Clamp(Var, f64, f64),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    tensor: DiffTensor,
    op: Op,
}

/// Records a computation graph for one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
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

pub fn shifted_softplus(x: f64) -> f64 {
    softplus(x) - std::f64::consts::LN_2
}

pub fn tanhshrink(x: f64) -> f64 {
    x - x.tanh()
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::ShiftedSoftplus => shifted_softplus(x),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanhshrink => tanhshrink(x),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            // d/dx ln(1 + e^x) = sigmoid(x)
            Activation::ShiftedSoftplus | Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanhshrink => {
                let t = x.tanh();
                t * t
            }
            Activation::Tanh => 1.0 - y * y,
        }
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

    pub fn tensor(&self, v: Var) -> &DiffTensor {
        &self.nodes[v.0].tensor
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].tensor.values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    /// First element; convenient for scalar outputs.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].tensor.values[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            tensor: DiffTensor {
                shape,
                values,
                requires_grad,
                grad: None,
            },
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    pub fn leaf(&mut self, t: DiffTensor) -> Var {
        let DiffTensor {
            shape,
            values,
            requires_grad,
            ..
        } = t;
        self.push(shape, values, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = DiffTensor::new(shape, values)?;
        Ok(self.leaf(t))
    }

    pub fn variable(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let mut t = DiffTensor::new(shape, values)?;
        t.requires_grad = true;
        Ok(self.leaf(t))
    }

    /// Registers (once per tape) a trainable parameter as a leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_leaves.get(&id) {
            return *v;
        }
        let t = &store.get(id).tensor;
        let v = self.push(t.shape.clone(), t.values.clone(), true, Op::Leaf);
        self.param_leaves.insert(id, v);
        v
    }

    /// Value-identical copy that blocks gradient flow to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].tensor;
        let (shape, values) = (t.shape.clone(), t.values.clone());
        self.push(shape, values, false, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.tensor(a);
        let tb = self.tensor(b);
        let (m, k) = ta.dims2().ok_or_else(|| shape_err("matmul", ta, tb))?;
        let (k2, n) = tb.dims2().ok_or_else(|| shape_err("matmul", ta, tb))?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = matmul_raw(&ta.values, &tb.values, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let ta = self.tensor(a);
        let tb = self.tensor(b);
        let (shape, n) = if ta.shape == tb.shape || tb.numel() == 1 {
            (ta.shape.clone(), ta.numel())
        } else if ta.numel() == 1 {
            (tb.shape.clone(), tb.numel())
        } else {
            return Err(shape_err("elementwise", ta, tb));
        };
        let av = |i: usize| if ta.numel() == 1 { ta.values[0] } else { ta.values[i] };
        let bv = |i: usize| if tb.numel() == 1 { tb.values[0] } else { tb.values[i] };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = (av(i), bv(i));
            out.push(match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => {
                    if y == 0.0 {
                        return Err(TensorError::Domain {
                            op: "div",
                            detail: "division by zero".into(),
                        });
                    }
                    x / y
                }
            });
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, Op::Binary { op, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let t = self.tensor(a);
        let mut out = Vec::with_capacity(t.numel());
        for &x in &t.values {
            out.push(match op {
                UnaryOp::Neg => -x,
                UnaryOp::Exp => x.exp(),
                UnaryOp::Log => {
                    if x <= 0.0 {
                        return Err(TensorError::Domain {
                            op: "log",
                            detail: format!("non-positive input {x}"),
                        });
                    }
                    x.ln()
                }
                UnaryOp::Square => x * x,
                UnaryOp::Sqrt => {
                    if x < 0.0 {
                        return Err(TensorError::Domain {
                            op: "sqrt",
                            detail: format!("negative input {x}"),
                        });
                    }
                    x.sqrt()
                }
            });
        }
        let shape = t.shape.clone();
        let rg = self.rg(a);
        Ok(self.push(shape, out, rg, Op::Unary(op, a)))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.tensor(a);
        let out = t.values.iter().map(|x| x + c).collect();
        let shape = t.shape.clone();
        let rg = self.rg(a);
        self.push(shape, out, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.tensor(a);
        let out = t.values.iter().map(|x| x * c).collect();
        let shape = t.shape.clone();
        let rg = self.rg(a);
        self.push(shape, out, rg, Op::MulScalar(a, c))
    }

    /// Elementwise product with a constant buffer (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.tensor(a);
        if mask.len() != t.numel() {
            return Err(TensorError::Shape {
                op: "mul_const",
                lhs: t.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let out = t.values.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = t.shape.clone();
        let rg = self.rg(a);
        Ok(self.push(shape, out, rg, Op::MulConst(a, mask)))
    }

    /// Adds a length-`d` bias to every row of an `n x d` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let tx = self.tensor(x);
        let tb = self.tensor(bias);
        let (n, d) = tx.dims2().ok_or_else(|| shape_err("add_bias", tx, tb))?;
        if tb.numel() != d {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut out = tx.values.clone();
        for r in 0..n {
            for (o, b) in out[r * d..(r + 1) * d].iter_mut().zip(&tb.values) {
                *o += b;
            }
        }
        let shape = tx.shape.clone();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(shape, out, rg, Op::AddBias(x, bias)))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let t = self.tensor(x);
        let out = t.values.iter().map(|&v| kind.apply(v)).collect();
        let shape = t.shape.clone();
        let rg = self.rg(x);
        self.push(shape, out, rg, Op::Act(kind, x))
    }

    /// Per-row normalization followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.tensor(x);
        let (n, d) = tx.dims2().ok_or_else(|| shape_err("layer_norm", tx, tx))?;
        if d == 0 {
            return Err(TensorError::Empty("layer_norm"));
        }
        let (tg, tb) = (self.tensor(gain), self.tensor(bias));
        if tg.numel() != d || tb.numel() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &tx.values[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.values[c] + tb.values[c];
            }
        }
        let shape = tx.shape.clone();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn reduce(&mut self, kind: Reduction, x: Var) -> Result<Var> {
        let t = self.tensor(x);
        if t.numel() == 0 {
            return Err(TensorError::Empty("reduction"));
        }
        let (shape, out) = match kind {
            Reduction::Sum => (vec![1], vec![t.values.iter().sum()]),
            Reduction::Mean => (vec![1], vec![t.values.iter().sum::<f64>() / t.numel() as f64]),
            Reduction::MeanRows => {
                let (n, d) = t.dims2().ok_or_else(|| shape_err("mean_axis", t, t))?;
                let mut out = vec![0.0; d];
                for r in 0..n {
                    for (o, v) in out.iter_mut().zip(&t.values[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= n as f64);
                (vec![1, d], out)
            }
            Reduction::MeanCols => {
                let (n, d) = t.dims2().ok_or_else(|| shape_err("mean_axis", t, t))?;
                let out = (0..n)
                    .map(|r| t.values[r * d..(r + 1) * d].iter().sum::<f64>() / d as f64)
                    .collect();
                (vec![n, 1], out)
            }
        };
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::Reduce(kind, x)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduction::Sum, x)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduction::Mean, x)
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduction::MeanRows, x)
    }

    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        if ta.numel() != tb.numel() {
            return Err(shape_err("cosine_similarity", ta, tb));
        }
        let norm_a = l2(&ta.values);
        let norm_b = l2(&tb.values);
        if norm_a == 0.0 || norm_b == 0.0 {
            return Err(TensorError::Domain {
                op: "cosine_similarity",
                detail: "zero-norm operand".into(),
            });
        }
        let dot: f64 = ta.values.iter().zip(&tb.values).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![1],
            vec![dot / (norm_a * norm_b)],
            rg,
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            },
        ))
    }

    /// Euclidean norm; the subgradient at the origin is taken as zero.
    pub fn norm(&mut self, x: Var) -> Var {
        let n = l2(&self.tensor(x).values);
        let rg = self.rg(x);
        self.push(vec![1], vec![n], rg, Op::Norm(x))
    }

    /// Selects rows of an `n x d` matrix: output row `k` is input row `idx[k]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.tensor(x);
        let (n, d) = t.dims2().ok_or_else(|| shape_err("gather_rows", t, t))?;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(TensorError::Contract(format!("gather index {i} out of range {n}")));
            }
            out.extend_from_slice(&t.values[i * d..(i + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![idx.len(), d], out, rg, Op::GatherRows(x, idx.to_vec())))
    }

    /// Sums row `k` of `x` into output row `idx[k]`, producing `n_out` rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let t = self.tensor(x);
        let (m, d) = t.dims2().ok_or_else(|| shape_err("scatter_add_rows", t, t))?;
        if idx.len() != m {
            return Err(TensorError::Shape {
                op: "scatter_add_rows",
                lhs: t.shape.clone(),
                rhs: vec![idx.len()],
            });
        }
        let mut out = vec![0.0; n_out * d];
        for (k, &i) in idx.iter().enumerate() {
            if i >= n_out {
                return Err(TensorError::Contract(format!("scatter index {i} out of range {n_out}")));
            }
            for c in 0..d {
                out[i * d + c] += t.values[k * d + c];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n_out, d], out, rg, Op::ScatterAddRows(x, idx.to_vec())))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.tensor(x);
        let out = t.values.iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = t.shape.clone();
        let rg = self.rg(x);
        self.push(shape, out, rg, Op::Clamp(x, lo, hi))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.tensor(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: t.shape.clone(),
                rhs: shape,
            });
        }
        let values = t.values.clone();
        let rg = self.rg(x);
        Ok(self.push(shape, values, rg, Op::Reshape(x)))
    }

    /// Clears accumulated gradients on every tensor of the tape.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.tensor.grad = None;
        }
    }

    /// Propagates d(loss)/d(node) to every tensor with `requires_grad`.
    ///
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.tensor(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let t = &mut self.nodes[i].tensor;
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => t.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.tensor;
        let val = |v: Var| &self.nodes[v.0].tensor.values;
        let wants = |v: Var| self.nodes[v.0].tensor.requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.tensor(*a).dims2().unwrap();
                let n = out.shape[1];
                if wants(*a) {
                    // dA = G B^T
                    let bv = val(*b);
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * bv[c * n + j];
                            }
                            da[r * k + c] = s;
                        }
                    }
                    accumulate(adj, *a, &da);
                }
                if wants(*b) {
                    // dB = A^T G
                    let av = val(*a);
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for c in 0..k {
                            let x = av[r * k + c];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[c * n + j] += x * g[r * n + j];
                            }
                        }
                    }
                    accumulate(adj, *b, &db);
                }
            }
            Op::Binary { op, a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let get = |v: &Vec<f64>, j: usize| if v.len() == 1 { v[0] } else { v[j] };
                let len = g.len();
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for j in 0..len {
                    let (x, y) = (get(av, j), get(bv, j));
                    let (gx, gy) = match op {
                        BinaryOp::Add => (g[j], g[j]),
                        BinaryOp::Sub => (g[j], -g[j]),
                        BinaryOp::Mul => (g[j] * y, g[j] * x),
                        BinaryOp::Div => (g[j] / y, -g[j] * x / (y * y)),
                    };
                    da[if av.len() == 1 { 0 } else { j }] += gx;
                    db[if bv.len() == 1 { 0 } else { j }] += gy;
                }
                if wants(*a) {
                    accumulate(adj, *a, &da);
                }
                if wants(*b) {
                    accumulate(adj, *b, &db);
                }
            }
            Op::Unary(op, a) => {
                let av = val(*a);
                let d: Vec<f64> = (0..g.len())
                    .map(|j| {
                        let (x, y) = (av[j], out.values[j]);
                        g[j] * match op {
                            UnaryOp::Neg => -1.0,
                            UnaryOp::Exp => y,
                            UnaryOp::Log => 1.0 / x,
                            UnaryOp::Square => 2.0 * x,
                            UnaryOp::Sqrt => 0.5 / y,
                        }
                    })
                    .collect();
                accumulate(adj, *a, &d);
            }
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(adj, *a, g),
            Op::MulScalar(a, c) => {
                let d: Vec<f64> = g.iter().map(|x| x * c).collect();
                accumulate(adj, *a, &d);
            }
            Op::MulConst(a, mask) => {
                let d: Vec<f64> = g.iter().zip(mask).map(|(x, m)| x * m).collect();
                accumulate(adj, *a, &d);
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    accumulate(adj, *x, g);
                }
                if wants(*b) {
                    let d = self.tensor(*b).numel();
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    accumulate(adj, *b, &db);
                }
            }
            Op::Act(kind, x) => {
                let xv = val(*x);
                let d: Vec<f64> = (0..g.len())
                    .map(|j| g[j] * kind.derivative(xv[j], out.values[j]))
                    .collect();
                accumulate(adj, *x, &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.tensor(*gain).numel();
                let n = inv_std.len();
                let gv = val(*gain);
                if wants(*gain) {
                    let mut dg = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                    accumulate(adj, *gain, &dg);
                }
                if wants(*bias) {
                    let mut db = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                    accumulate(adj, *bias, &db);
                }
                if wants(*x) {
                    let mut dx = vec![0.0; n * d];
                    for r in 0..n {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            let dh = g[r * d + c] * gv[c];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for c in 0..d {
                            let dh = g[r * d + c] * gv[c];
                            dx[r * d + c] = inv_std[r] * (dh - mean_dh - xhat[r * d + c] * mean_dh_h);
                        }
                    }
                    accumulate(adj, *x, &dx);
                }
            }
            Op::Reduce(kind, x) => {
                let t = self.tensor(*x);
                let dx = match kind {
                    Reduction::Sum => vec![g[0]; t.numel()],
                    Reduction::Mean => vec![g[0] / t.numel() as f64; t.numel()],
                    Reduction::MeanRows => {
                        let (n, d) = t.dims2().unwrap();
                        let mut dx = Vec::with_capacity(n * d);
                        for _ in 0..n {
                            dx.extend(g.iter().map(|v| v / n as f64));
                        }
                        dx
                    }
                    Reduction::MeanCols => {
                        let (n, d) = t.dims2().unwrap();
                        let mut dx = Vec::with_capacity(n * d);
                        for gr in g.iter().take(n) {
                            dx.extend(std::iter::repeat_n(gr / d as f64, d));
                        }
                        dx
                    }
                };
                accumulate(adj, *x, &dx);
            }
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            } => {
                let (av, bv) = (val(*a), val(*b));
                let cos = out.values[0];
                let scale = g[0];
                if wants(*a) {
                    let da: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| scale * (y / (norm_a * norm_b) - cos * x / (norm_a * norm_a)))
                        .collect();
                    accumulate(adj, *a, &da);
                }
                if wants(*b) {
                    let db: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| scale * (x / (norm_a * norm_b) - cos * y / (norm_b * norm_b)))
                        .collect();
                    accumulate(adj, *b, &db);
                }
            }
            Op::Norm(x) => {
                let n = out.values[0];
                let xv = val(*x);
                let dx: Vec<f64> = if n == 0.0 {
                    vec![0.0; xv.len()]
                } else {
                    xv.iter().map(|v| g[0] * v / n).collect()
                };
                accumulate(adj, *x, &dx);
            }
            Op::GatherRows(x, idx) => {
                let t = self.tensor(*x);
                let (n, d) = t.dims2().unwrap();
                let mut dx = vec![0.0; n * d];
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        dx[i * d + c] += g[k * d + c];
                    }
                }
                accumulate(adj, *x, &dx);
            }
            Op::ScatterAddRows(x, idx) => {
                let d = out.shape[1];
                let mut dx = Vec::with_capacity(idx.len() * d);
                for &i in idx {
                    dx.extend_from_slice(&g[i * d..(i + 1) * d]);
                }
                accumulate(adj, *x, &dx);
            }
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x);
                let dx: Vec<f64> = xv
                    .iter()
                    .zip(g)
                    .map(|(v, gv)| if v < lo || v > hi { 0.0 } else { *gv })
                    .collect();
                accumulate(adj, *x, &dx);
            }
        }
    }

    /// Gradients of every parameter leaf on this tape, aligned to `store`.
    ///
    /// Parameters never touched by the graph get zero buffers.
    pub fn param_grads(&self, store: &ParamStore) -> Gradients {
        let mut grads = Gradients::zeros_like(store);
        for (id, v) in &self.param_leaves {
            if let Some(g) = self.grad(*v) {
                grads.add_slice(*id, g);
            }
        }
        grads
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn shape_err(op: &'static str, a: &DiffTensor, b: &DiffTensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let x = a[r * k + c];
            if x == 0.0 {
                continue;
            }
            let brow = &b[c * n..(c + 1) * n];
            for (o, y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
