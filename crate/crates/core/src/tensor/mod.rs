//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Every differentiable quantity in the model runs through a [`Tape`]:
//! operations record themselves during the forward pass and [`Tape::backward`]
//! replays them in exact reverse order to accumulate gradients. Double
//! precision throughout; gradient checking at 1e-4 is unreliable in single
//! precision.

mod gradcheck;

pub use gradcheck::{grad_check, BoundParams, GradCheckReport, ParamStore};

use thiserror::Error;

/// Floor applied to probabilities before `ln` in cross entropy, so a
/// confidently wrong prediction yields a large finite loss instead of -inf.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("empty input list")]
    EmptyInput,
    #[error("leaky relu slope must lie in (0,1), got {0}")]
    InvalidSlope(f64),
    #[error("class index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("input is not a probability distribution (sum = {sum})")]
    NotADistribution { sum: f64 },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Dense tensor in row-major order. `grad`, when present, has the same
/// length as `data`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(vec![1], vec![v])
    }

    /// Row vector of shape `[1, d]`.
    pub fn row(data: Vec<f64>) -> Self {
        let d = data.len();
        Tensor::from_vec(vec![1, d], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len());
        let buf = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, b) in buf.iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    SoftmaxRows(usize),
    LeakyRelu(usize, f64),
    CrossEntropy { probs: usize, class: usize },
    L2Sq(usize),
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of executed primitive ops. Single-use: after
/// [`Tape::backward`] the tape only serves gradient reads until
/// [`Tape::reset`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// Dimensions of a matrix operand: 1-D `[n]` is treated as a single row.
fn mat_dims(shape: &[usize]) -> Option<(usize, usize)> {
    match shape.len() {
        1 => Some((1, shape[0])),
        2 => Some((shape[0], shape[1])),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Clears all recorded nodes so the tape can run another forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {:?}",
            op
        );
        self.nodes.push(Node {
            data,
            shape,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf node, copying its data onto the tape.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf, t.requires_grad)
    }

    /// Constant leaf that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(data, shape, Op::Leaf, false)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let numel = shape.iter().product();
        self.constant(shape, vec![0.0; numel])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last backward pass with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    // ── Primitive operations ────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.elementwise_binary("add", a, b, |x, y| x + y, |ia, ib| Op::Add(ia, ib))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.elementwise_binary("sub", a, b, |x, y| x - y, |ia, ib| Op::Sub(ia, ib))
    }

    fn elementwise_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> TensorResult<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(data, shape, op(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, Op::Scale(a.0, c), rg)
    }

    /// Matrix product. A 1-D operand is treated as a single row.
    /// Gradient contract: dA = G·Bᵀ, dB = Aᵀ·G.
    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (m, ka) = mat_dims(&self.nodes[a.0].shape).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            }
        })?;
        let (kb, n) = mat_dims(&self.nodes[b.0].shape).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            }
        })?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(data, vec![m, n], Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> TensorResult<Var> {
        let (m, n) = mat_dims(&self.nodes[a.0].shape).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: "transpose",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: vec![],
            }
        })?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(data, vec![n, m], Op::Transpose(a.0), rg))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    /// Gradient splits back to the parts.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> TensorResult<Var> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput);
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut out_shape = first.clone();
        let mut axis_total = 0usize;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            axis_total += s[axis];
        }
        out_shape[axis] = axis_total;

        // Row-major copy; treat 1-D as a single row so only two layouts exist.
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        if axis == out_shape.len() - 1 {
            // Last-axis concat: interleave per leading row.
            let rows: usize = out_shape[..out_shape.len() - 1].iter().product();
            let mut col_off = 0usize;
            for p in parts {
                let s = &self.nodes[p.0].shape;
                let w = s[s.len() - 1];
                for r in 0..rows {
                    let src = &self.nodes[p.0].data[r * w..(r + 1) * w];
                    data[r * axis_total + col_off..r * axis_total + col_off + w]
                        .copy_from_slice(src);
                }
                col_off += w;
            }
        } else {
            // Leading-axis concat is a straight append of row blocks.
            let mut off = 0usize;
            for p in parts {
                let src = &self.nodes[p.0].data;
                data[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        let inputs = parts.iter().map(|p| p.0).collect();
        Ok(self.push(data, out_shape, Op::Concat { inputs, axis }, rg))
    }

    /// Softmax applied independently to each row, with max-subtraction for
    /// stability. A 1-D input is one row.
    pub fn softmax_rows(&mut self, a: Var) -> TensorResult<Var> {
        let (rows, cols) = mat_dims(&self.nodes[a.0].shape).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: "softmax_rows",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: vec![],
            }
        })?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                data[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                data[r * cols + j] /= sum;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(data, shape, Op::SoftmaxRows(a.0), rg))
    }

    /// y = x for x >= 0, slope*x otherwise. Subgradient at 0 is 1.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> TensorResult<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(TensorError::InvalidSlope(slope));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(data, shape, Op::LeakyRelu(a.0, slope), rg))
    }

    /// −log(probs[class]) with the probability clamped below at [`LOG_CLAMP`].
    /// `probs` must be a distribution (sums to 1 within 1e-6).
    pub fn cross_entropy(&mut self, probs: Var, class: usize) -> TensorResult<Var> {
        let n = self.nodes[probs.0].data.len();
        if class >= n {
            return Err(TensorError::IndexOutOfRange {
                index: class,
                len: n,
            });
        }
        let sum: f64 = self.nodes[probs.0].data.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(TensorError::NotADistribution { sum });
        }
        let p = self.nodes[probs.0].data[class].max(LOG_CLAMP);
        let rg = self.nodes[probs.0].requires_grad;
        Ok(self.push(
            vec![-p.ln()],
            vec![1],
            Op::CrossEntropy {
                probs: probs.0,
                class,
            },
            rg,
        ))
    }

    /// Sum of squared entries, as a scalar node.
    pub fn l2_sq(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().map(|&x| x * x).sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![s], vec![1], Op::L2Sq(a.0), rg)
    }

    /// Element-wise sum of a non-empty list of same-shape vars.
    pub fn sum_all(&mut self, parts: &[Var]) -> TensorResult<Var> {
        let mut it = parts.iter();
        let first = *it.next().ok_or(TensorError::EmptyInput)?;
        let mut acc = first;
        for &p in it {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Accumulates gradients of a scalar loss into every node reachable from
    /// it, visiting ops in exact reverse execution order. Single-use: a
    /// second call without [`Tape::reset`] fails.
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;

        for node in &mut self.nodes {
            node.grad = Some(vec![0.0; node.data.len()]);
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let grad = self.nodes[i].grad.clone().unwrap();
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.add_into(a, &grad);
                    self.add_into(b, &grad);
                }
                Op::Sub(a, b) => {
                    self.add_into(a, &grad);
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.add_into(b, &neg);
                }
                Op::Scale(a, c) => {
                    let g: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.add_into(a, &g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = mat_dims(&self.nodes[a].shape).unwrap();
                    let n = self.nodes[i].shape[1];
                    // dA = G · Bᵀ
                    let bt = transpose_raw(&self.nodes[b].data, k, n);
                    let da = matmul_raw(&grad, &bt, m, n, k);
                    // dB = Aᵀ · G
                    let at = transpose_raw(&self.nodes[a].data, m, k);
                    let db = matmul_raw(&at, &grad, k, m, n);
                    self.add_into(a, &da);
                    self.add_into(b, &db);
                }
                Op::Transpose(a) => {
                    let (n, m) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let g = transpose_raw(&grad, n, m);
                    self.add_into(a, &g);
                }
                Op::Concat { inputs, axis } => {
                    let out_shape = self.nodes[i].shape.clone();
                    if axis == out_shape.len() - 1 {
                        let rows: usize = out_shape[..out_shape.len() - 1].iter().product();
                        let total = out_shape[axis];
                        let mut col_off = 0;
                        for &inp in &inputs {
                            let w = *self.nodes[inp].shape.last().unwrap();
                            let mut g = vec![0.0; rows * w];
                            for r in 0..rows {
                                g[r * w..(r + 1) * w].copy_from_slice(
                                    &grad[r * total + col_off..r * total + col_off + w],
                                );
                            }
                            self.add_into(inp, &g);
                            col_off += w;
                        }
                    } else {
                        let mut off = 0;
                        for &inp in &inputs {
                            let len = self.nodes[inp].data.len();
                            self.add_into(inp, &grad[off..off + len].to_vec());
                            off += len;
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let (rows, cols) = mat_dims(&self.nodes[i].shape).unwrap();
                    let out = &self.nodes[i].data;
                    let mut g = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let s = &out[r * cols..(r + 1) * cols];
                        let gr = &grad[r * cols..(r + 1) * cols];
                        let dot: f64 = s.iter().zip(gr).map(|(&x, &y)| x * y).sum();
                        for j in 0..cols {
                            g[r * cols + j] = s[j] * (gr[j] - dot);
                        }
                    }
                    self.add_into(a, &g);
                }
                Op::LeakyRelu(a, slope) => {
                    let g: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a].data)
                        .map(|(&g, &x)| if x >= 0.0 { g } else { slope * g })
                        .collect();
                    self.add_into(a, &g);
                }
                Op::CrossEntropy { probs, class } => {
                    let p = self.nodes[probs].data[class];
                    let mut g = vec![0.0; self.nodes[probs].data.len()];
                    // Constant in the clamped region.
                    if p > LOG_CLAMP {
                        g[class] = -grad[0] / p;
                    }
                    self.add_into(probs, &g);
                }
                Op::L2Sq(a) => {
                    let g: Vec<f64> = self.nodes[a]
                        .data
                        .iter()
                        .map(|&x| 2.0 * x * grad[0])
                        .collect();
                    self.add_into(a, &g);
                }
            }
        }
        Ok(())
    }

    fn add_into(&mut self, idx: usize, g: &[f64]) {
        let buf = self.nodes[idx].grad.as_mut().unwrap();
        for (a, b) in buf.iter_mut().zip(g) {
            *a += b;
        }
    }
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

#[cfg(test)]
mod tests;
