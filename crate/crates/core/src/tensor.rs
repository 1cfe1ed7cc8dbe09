//! Dense `f64` tensors and a define-by-run tape for reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value and a backward rule. Nodes are appended in execution
//! order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep. Fused operations that live
//! elsewhere in the crate (normalization, the reparameterized activation,
//! softmax entropy) register through [`Tape::custom`] with a [`VjpRule`].
//!
//! Broadcasting is limited to scalar-with-tensor. The one exception is
//! [`Tape::add_row`], which adds a bias row to every row of a matrix.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: element {index} = {value} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value while probing coordinate {index}")]
    NonFinite { index: usize },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major dense array with an optional gradient buffer.
///
/// An empty shape denotes a scalar holding one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(TensorError::Shape {
                op: "new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = numel(&shape);
        Self::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n = numel(&shape);
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// One-dimensional tensor. Panics on an empty vector.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector must hold at least one element");
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::Shape {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
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

    /// Number of rows of a matrix (1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar(self.shape.clone()))
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.set_requires_grad(flag);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::Shape {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![g.len()],
            });
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a fused operation.
///
/// Given the upstream gradient of the output, returns one entry per input in
/// registration order. Entries for inputs with `wants[i] == false` may be
/// `None`.
pub trait VjpRule {
    fn vjp(&self, grad_out: &[f64], wants: &[bool]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Neg,
}

impl ElementwiseOp {
    fn is_unary(self) -> bool {
        matches!(self, Self::Exp | Self::Log | Self::Neg)
    }

    fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
            Self::Exp => "exp",
            Self::Log => "log",
            Self::Neg => "neg",
        }
    }
}

/// Right-hand operand of a binary elementwise operation.
#[derive(Clone, Copy, Debug)]
pub enum Operand {
    Var(Var),
    Scalar(f64),
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: ElementwiseOp,
        a: Var,
        b: Var,
    },
    Scalar {
        kind: ElementwiseOp,
        a: Var,
        s: f64,
    },
    Unary {
        kind: ElementwiseOp,
        a: Var,
    },
    Sum(Var),
    Mean(Var),
    AddRow {
        a: Var,
        row: Var,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn VjpRule>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of `v` into `t`'s gradient buffer when `t`
    /// requires one.
    pub fn write_to(&self, v: Var, t: &mut Tensor) -> Result<()> {
        if !t.requires_grad() {
            return Ok(());
        }
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.len()]),
        }
    }
}

/// Single-threaded operation record for one forward pass.
#[derive(Default)]
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t` as an input; it receives gradients when `t`
    /// requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        Ok(self.push(t.shape, t.data, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Detached copy of a node's value.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// Applies an elementwise operation. Unary kinds take `rhs = None`;
    /// binary kinds need equal shapes or a one-element side.
    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, rhs: Option<Operand>) -> Result<Var> {
        match (kind.is_unary(), rhs) {
            (true, None) => self.unary(kind, a),
            (false, Some(Operand::Var(b))) => self.binary(kind, a, b),
            (false, Some(Operand::Scalar(s))) => self.binary_scalar(kind, a, s),
            (true, Some(_)) => Err(TensorError::Contract(format!(
                "{} is unary and takes no right operand",
                kind.name()
            ))),
            (false, None) => Err(TensorError::Contract(format!(
                "{} needs a right operand",
                kind.name()
            ))),
        }
    }

    fn unary(&mut self, kind: ElementwiseOp, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out: Vec<f64> = match kind {
            ElementwiseOp::Exp => x.iter().map(|v| v.exp()).collect(),
            ElementwiseOp::Neg => x.iter().map(|v| -v).collect(),
            ElementwiseOp::Log => {
                if let Some((index, &value)) = x.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                    return Err(TensorError::Domain {
                        op: "log",
                        index,
                        value,
                    });
                }
                x.iter().map(|v| v.ln()).collect()
            }
            _ => unreachable!("binary kind routed to unary"),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(shape, out, rg, Op::Unary { kind, a }))
    }

    fn binary(&mut self, kind: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        let shape = if self.shape(a) == self.shape(b) || lb == 1 {
            self.shape(a).to_vec()
        } else if la == 1 {
            self.shape(b).to_vec()
        } else {
            return Err(TensorError::Shape {
                op: kind.name(),
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        };
        let n = numel(&shape);
        let (xa, xb) = (self.value(a), self.value(b));
        let at = |i: usize| if la == 1 { xa[0] } else { xa[i] };
        let bt = |i: usize| if lb == 1 { xb[0] } else { xb[i] };
        if kind == ElementwiseOp::Div {
            if let Some(i) = (0..lb).find(|&i| xb[i] == 0.0) {
                return Err(TensorError::Domain {
                    op: "div",
                    index: i,
                    value: 0.0,
                });
            }
        }
        let out: Vec<f64> = (0..n)
            .map(|i| apply_binary(kind, at(i), bt(i)))
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, out, rg, Op::Binary { kind, a, b }))
    }

    fn binary_scalar(&mut self, kind: ElementwiseOp, a: Var, s: f64) -> Result<Var> {
        if kind == ElementwiseOp::Div && s == 0.0 {
            return Err(TensorError::Domain {
                op: "div",
                index: 0,
                value: 0.0,
            });
        }
        let out: Vec<f64> = self.value(a).iter().map(|&x| apply_binary(kind, x, s)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(shape, out, rg, Op::Scalar { kind, a, s }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.binary_scalar(ElementwiseOp::Add, a, s)
            .expect("scalar add cannot fail")
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.binary_scalar(ElementwiseOp::Mul, a, s)
            .expect("scalar mul cannot fail")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(ElementwiseOp::Exp, a).expect("exp cannot fail")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(ElementwiseOp::Neg, a).expect("neg cannot fail")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.requires_grad(a);
        self.push(Vec::new(), vec![s], rg, Op::Sum(a))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.iter().sum::<f64>() / x.len() as f64;
        let rg = self.requires_grad(a);
        self.push(Vec::new(), vec![s], rg, Op::Mean(a))
    }

    /// Adds a length-`n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let sa = self.shape(a);
        let n = self.value(row).len();
        if sa.len() != 2 || sa[1] != n {
            return Err(TensorError::Shape {
                op: "add_row",
                left: sa.to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let shape = sa.to_vec();
        let r = self.value(row);
        let out: Vec<f64> = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, b)| x + b))
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(row);
        Ok(self.push(shape, out, rg, Op::AddRow { a, row }))
    }

    /// Registers a fused operation whose forward value was computed by the
    /// caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<f64>,
        rule: Box<dyn VjpRule>,
    ) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(TensorError::Shape {
                op: "custom",
                left: shape,
                right: vec![value.len()],
            });
        }
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Every node that requires a gradient and is reachable from `loss`
    /// gets one; gradients from multiple uses add up.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 || root.shape.len() > 1 {
            return Err(TensorError::NotScalar(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if root.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let ga = matmul_b_t(g, self.value(b), m, n, k);
                    accumulate(grads, a, &ga);
                }
                if self.wants(b) {
                    let gb = matmul_a_t(self.value(a), g, m, k, n);
                    accumulate(grads, b, &gb);
                }
            }
            &Op::Binary { kind, a, b } => {
                let (xa, xb) = (self.value(a), self.value(b));
                let (la, lb) = (xa.len(), xb.len());
                let at = |i: usize| if la == 1 { xa[0] } else { xa[i] };
                let bt = |i: usize| if lb == 1 { xb[0] } else { xb[i] };
                if self.wants(a) {
                    let mut ga = vec![0.0; la];
                    for (i, gi) in g.iter().enumerate() {
                        let d = match kind {
                            ElementwiseOp::Add | ElementwiseOp::Sub => 1.0,
                            ElementwiseOp::Mul => bt(i),
                            ElementwiseOp::Div => 1.0 / bt(i),
                            _ => unreachable!(),
                        };
                        ga[if la == 1 { 0 } else { i }] += gi * d;
                    }
                    accumulate(grads, a, &ga);
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; lb];
                    for (i, gi) in g.iter().enumerate() {
                        let d = match kind {
                            ElementwiseOp::Add => 1.0,
                            ElementwiseOp::Sub => -1.0,
                            ElementwiseOp::Mul => at(i),
                            ElementwiseOp::Div => -at(i) / (bt(i) * bt(i)),
                            _ => unreachable!(),
                        };
                        gb[if lb == 1 { 0 } else { i }] += gi * d;
                    }
                    accumulate(grads, b, &gb);
                }
            }
            &Op::Scalar { kind, a, s } => {
                if self.wants(a) {
                    let d = match kind {
                        ElementwiseOp::Add | ElementwiseOp::Sub => 1.0,
                        ElementwiseOp::Mul => s,
                        ElementwiseOp::Div => 1.0 / s,
                        _ => unreachable!(),
                    };
                    let ga: Vec<f64> = g.iter().map(|gi| gi * d).collect();
                    accumulate(grads, a, &ga);
                }
            }
            &Op::Unary { kind, a } => {
                if self.wants(a) {
                    let x = self.value(a);
                    let ga: Vec<f64> = match kind {
                        ElementwiseOp::Exp => g.iter().zip(&node.value).map(|(gi, y)| gi * y).collect(),
                        ElementwiseOp::Log => g.iter().zip(x).map(|(gi, xi)| gi / xi).collect(),
                        ElementwiseOp::Neg => g.iter().map(|gi| -gi).collect(),
                        _ => unreachable!(),
                    };
                    accumulate(grads, a, &ga);
                }
            }
            &Op::Sum(a) => {
                if self.wants(a) {
                    let ga = vec![g[0]; self.value(a).len()];
                    accumulate(grads, a, &ga);
                }
            }
            &Op::Mean(a) => {
                if self.wants(a) {
                    let n = self.value(a).len();
                    let ga = vec![g[0] / n as f64; n];
                    accumulate(grads, a, &ga);
                }
            }
            &Op::AddRow { a, row } => {
                if self.wants(a) {
                    accumulate(grads, a, g);
                }
                if self.wants(row) {
                    let n = self.value(row).len();
                    let mut gr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        for (acc, v) in gr.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, row, &gr);
                }
            }
            Op::Custom { inputs, rule } => {
                let wants: Vec<bool> = inputs.iter().map(|&v| self.wants(v)).collect();
                let partials = rule.vjp(g, &wants);
                for ((&v, w), p) in inputs.iter().zip(&wants).zip(partials) {
                    if let (true, Some(p)) = (*w, p) {
                        accumulate(grads, v, &p);
                    }
                }
            }
        }
    }
}

fn apply_binary(kind: ElementwiseOp, a: f64, b: f64) -> f64 {
    match kind {
        ElementwiseOp::Add => a + b,
        ElementwiseOp::Sub => a - b,
        ElementwiseOp::Mul => a * b,
        ElementwiseOp::Div => a / b,
        _ => unreachable!("unary kind routed to binary"),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// `a [m×k] · b [k×n]`.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g [m×n] · bᵀ` where `b` is `[k×n]`.
fn matmul_b_t(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            out[i * k + p] = gr.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` where `a` is `[m×k]` and `g` is `[m×n]`.
fn matmul_a_t(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(gr) {
                *o += av * gv;
            }
        }
    }
    out
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(h > 0.0) {
        return Err(TensorError::Contract(format!("step size must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe);
        probe.data[i] = orig - h;
        let down = f(&probe);
        probe.data[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(TensorError::NonFinite { index: i });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape.clone(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn tensor_rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let eye = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let q = tape.constant(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = tape.matmul(p, q).unwrap();
        assert_eq!(tape.value(out), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, vec![3, 4]);
        let b = random(&mut rng, vec![4, 2]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
        let out = tape.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                assert!((tape.value(out)[i * 2 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::Shape { .. }));
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(vec![2], vec![3.0, 4.0]).unwrap();
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s), &[4.0, 6.0]);

        let c = tape.constant(vec![2], vec![2.0, 3.0]).unwrap();
        let z = tape
            .elementwise(ElementwiseOp::Mul, c, Some(Operand::Scalar(0.0)))
            .unwrap();
        assert_eq!(tape.value(z), &[0.0, 0.0]);

        let x = tape.constant(vec![2], vec![0.5, 1.5]).unwrap();
        let e = tape.exp(x);
        let l = tape.log(e).unwrap();
        for (got, want) in tape.value(l).iter().zip([0.5, 1.5]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(tape.add(a, b), Err(TensorError::Shape { .. })));

        let x = tape.constant(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(
            tape.log(x).unwrap_err(),
            TensorError::Domain {
                op: "log",
                index: 1,
                value: -2.0
            }
        );
        assert!(tape.elementwise(ElementwiseOp::Exp, x, Some(Operand::Scalar(1.0))).is_err());
        assert!(tape.elementwise(ElementwiseOp::Add, x, None).is_err());
    }

    #[test]
    fn backward_sum_and_square() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.sum(v);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        assert!(matches!(tape.backward(v), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn accumulation_is_sum_of_single_uses() {
        let x = Tensor::vector(vec![0.7, -1.2]).with_requires_grad(true);
        let single = |scale: f64| {
            let mut tape = Tape::new();
            let v = tape.leaf(&x);
            let e = tape.exp(v);
            let m = tape.mul_scalar(e, scale);
            let s = tape.sum(m);
            tape.backward(s).unwrap().get(v).unwrap().to_vec()
        };
        let g1 = single(2.0);
        let g2 = single(-0.5);

        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let e = tape.exp(v);
        let m1 = tape.mul_scalar(e, 2.0);
        let e2 = tape.exp(v);
        let m2 = tape.mul_scalar(e2, -0.5);
        let s1 = tape.sum(m1);
        let s2 = tape.sum(m2);
        let tot = tape.add(s1, s2).unwrap();
        let g = tape.backward(tot).unwrap();
        // The two contributions reach the leaf as separate accumulations.
        for i in 0..2 {
            assert_eq!(g.get(v).unwrap()[i], g2[i] + g1[i]);
        }
    }

    #[test]
    fn scalar_broadcast_gradients() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]).with_requires_grad(true);
        let k = Tensor::scalar(2.0).with_requires_grad(true);
        let mut tape = Tape::new();
        let (vx, vk) = (tape.leaf(&x), tape.leaf(&k));
        let y = tape.div(vx, vk).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(vx).unwrap(), &[0.5, 0.5, 0.5]);
        assert!((g.get(vk).unwrap()[0] - (-6.0 / 4.0)).abs() < 1e-15);
    }

    #[test]
    fn finite_diff_examples() {
        let x = Tensor::vector(vec![3.0]);
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);

        let x = Tensor::vector(vec![0.0]);
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v.sin()).sum(), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-8);

        assert!(finite_diff_grad(|_| 0.0, &x, 0.0).is_err());
        let err = finite_diff_grad(|t| if t.data()[0] > 0.0 { f64::NAN } else { 0.0 }, &x, 1e-3);
        assert_eq!(err.unwrap_err(), TensorError::NonFinite { index: 0 });
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, vec![4, 3]);
        let w1 = random(&mut rng, vec![3, 5]).with_requires_grad(true);
        let b1 = random(&mut rng, vec![5]).with_requires_grad(true);
        let w2 = random(&mut rng, vec![5, 2]).with_requires_grad(true);

        // Smooth hidden nonlinearity built from primitives: h = 1 / (1 + exp(-z)).
        let run = |w1: &Tensor, b1: &Tensor, w2: &Tensor| {
            let mut tape = Tape::new();
            let vx = tape.leaf(&x);
            let (v1, vb, v2) = (tape.leaf(w1), tape.leaf(b1), tape.leaf(w2));
            let z = tape.matmul(vx, v1).unwrap();
            let z = tape.add_row(z, vb).unwrap();
            let nz = tape.neg(z);
            let e = tape.exp(nz);
            let d = tape.add_scalar(e, 1.0);
            let one = tape.constant(vec![], vec![1.0]).unwrap();
            let h = tape.div(one, d).unwrap();
            let o = tape.matmul(h, v2).unwrap();
            let sq = tape.mul(o, o).unwrap();
            let loss = tape.mean(sq);
            (tape, loss, [v1, vb, v2])
        };
        let (tape, loss, vars) = run(&w1, &b1, &w2);
        let grads = tape.backward(loss).unwrap();

        let params = [&w1, &b1, &w2];
        for (which, var) in vars.iter().enumerate() {
            let fd = finite_diff_grad(
                |p| {
                    let mut ps = [w1.clone(), b1.clone(), w2.clone()];
                    ps[which] = p.clone();
                    let (t, l, _) = run(&ps[0], &ps[1], &ps[2]);
                    t.value(l)[0]
                },
                params[which],
                1e-5,
            )
            .unwrap();
            for (a, n) in grads.get(*var).unwrap().iter().zip(fd.data()) {
                assert!(rel_err(*a, *n) < 1e-5, "param {which}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, vec![3, 3]).with_requires_grad(true);
        let run = || {
            let mut tape = Tape::new();
            let v = tape.leaf(&a);
            let m = tape.matmul(v, v).unwrap();
            let e = tape.exp(m);
            let s = tape.sum(e);
            tape.backward(s).unwrap().get(v).unwrap().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let mut b = Tensor::vector(vec![3.0, 4.0]).with_requires_grad(true);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
        let m = tape.mul(va, vb).unwrap();
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert!(g.get(va).is_none());
        g.write_to(vb, &mut b).unwrap();
        assert_eq!(b.grad().unwrap(), &[1.0, 2.0]);
    }
}
