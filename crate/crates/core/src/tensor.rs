//! Dense `f64` tensors with a dynamic reverse-mode tape.
//!
//! A [`Var`] carries its value behind an `Rc`, so untracked results are freed
//! as soon as the last handle drops. Only operations touching at least one
//! tracked operand are recorded on the [`Tape`]; inference therefore keeps no
//! history at all.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

/// A leaf tensor: row-major values plus an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        check_shape(&shape, data.len())?;
        let grad = requires_grad.then(|| vec![0.0; data.len()]);
        Ok(Self {
            shape,
            data,
            requires_grad,
            grad,
        })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n], requires_grad).expect("zeros shape is consistent")
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::Shape(
            "shape must have at least one dimension".into(),
        ));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Shape(format!(
            "shape {shape:?} holds {n} values but {len} were given"
        )));
    }
    Ok(())
}

/// The closed set of differentiable operations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    /// Elementwise sum; the right operand may also be a bias row matching the last dimension.
    Add,
    Subtract,
    Multiply,
    Sigmoid,
    Tanh,
    Relu,
    ConcatLastDim,
    Scale(f64),
    Square,
    ReduceSum,
    ReduceMean,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Subtract => "subtract",
            Primitive::Multiply => "elementwise_multiply",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::ConcatLastDim => "concat_last_dim",
            Primitive::Scale(_) => "scale_by_constant",
            Primitive::Square => "square",
            Primitive::ReduceSum => "reduce_sum",
            Primitive::ReduceMean => "reduce_mean",
        }
    }

    /// Parses a primitive by name. `scale_by_constant` takes its factor from `constant`.
    pub fn parse(name: &str, constant: Option<f64>) -> Result<Self> {
        let p = match name {
            "matmul" => Primitive::MatMul,
            "add" => Primitive::Add,
            "subtract" => Primitive::Subtract,
            "elementwise_multiply" | "multiply" => Primitive::Multiply,
            "sigmoid" => Primitive::Sigmoid,
            "tanh" => Primitive::Tanh,
            "relu" => Primitive::Relu,
            "concat_last_dim" => Primitive::ConcatLastDim,
            "scale_by_constant" => Primitive::Scale(
                constant
                    .ok_or_else(|| Error::Usage("scale_by_constant requires a constant".into()))?,
            ),
            "square" => Primitive::Square,
            "reduce_sum" => Primitive::ReduceSum,
            "reduce_mean" => Primitive::ReduceMean,
            other => return Err(Error::Usage(format!("unknown primitive '{other}'"))),
        };
        Ok(p)
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Subtract | Primitive::Multiply => {
                Some(2)
            }
            Primitive::ConcatLastDim => None,
            _ => Some(1),
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::parse(s, None)
    }
}

#[derive(Debug)]
struct Value {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Handle to a value, optionally linked to a node of a [`Tape`].
#[derive(Clone)]
pub struct Var {
    value: Rc<Value>,
    node: Option<usize>,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape)
            .field("node", &self.node)
            .finish()
    }
}

impl Var {
    /// An untracked value.
    pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self {
            value: Rc::new(Value { shape, data }),
            node: None,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.value.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.value.data
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.value.data[0]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: self.value.shape.clone(),
            data: self.value.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }
}

struct Node {
    prim: Option<Primitive>,
    operands: Vec<Var>,
    output: Rc<Value>,
}

/// Dynamic computation record. Single-threaded by construction (`Rc`/`RefCell`).
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every tracked leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, var: &Var) -> Option<&[f64]> {
        var.node
            .and_then(|i| self.grads.get(i))
            .and_then(|g| g.as_deref())
    }

    /// Copies (or zero-fills) the gradient of `var` into `tensor.grad`.
    pub fn write_to(&self, var: &Var, tensor: &mut Tensor) {
        let n = tensor.data.len();
        let buf = tensor.grad.get_or_insert_with(|| vec![0.0; n]);
        match self.wrt(var) {
            Some(g) => buf.copy_from_slice(g),
            None => buf.iter_mut().for_each(|v| *v = 0.0),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded entries (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf. Tensors that do not require grad become untracked constants.
    pub fn watch(&self, t: &Tensor) -> Var {
        let value = Rc::new(Value {
            shape: t.shape.clone(),
            data: t.data.clone(),
        });
        if !t.requires_grad {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            prim: None,
            operands: Vec::new(),
            output: value.clone(),
        });
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    pub fn apply(&self, prim: Primitive, operands: &[&Var]) -> Result<Var> {
        let values: Vec<&Value> = operands.iter().map(|v| v.value.as_ref()).collect();
        let out = Rc::new(forward(prim, &values)?);
        if !operands.iter().any(|v| v.is_tracked()) {
            return Ok(Var {
                value: out,
                node: None,
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            prim: Some(prim),
            operands: operands.iter().map(|v| (*v).clone()).collect(),
            output: out.clone(),
        });
        Ok(Var {
            value: out,
            node: Some(nodes.len() - 1),
        })
    }

    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        self.apply(Primitive::Subtract, &[a, b])
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.apply(Primitive::Multiply, &[a, b])
    }

    pub fn sigmoid(&self, a: &Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn tanh(&self, a: &Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn relu(&self, a: &Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn concat(&self, parts: &[&Var]) -> Result<Var> {
        self.apply(Primitive::ConcatLastDim, parts)
    }

    pub fn scale(&self, a: &Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn square(&self, a: &Var) -> Result<Var> {
        self.apply(Primitive::Square, &[a])
    }

    pub fn sum(&self, a: &Var) -> Result<Var> {
        self.apply(Primitive::ReduceSum, &[a])
    }

    pub fn mean(&self, a: &Var) -> Result<Var> {
        self.apply(Primitive::ReduceMean, &[a])
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)` so inference is a pass-through.
    pub fn dropout<R: Rng + ?Sized>(
        &self,
        x: &Var,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Usage(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..x.data().len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let mask = Var::constant(x.shape().to_vec(), mask)?;
        self.mul(x, &mask)
    }

    /// Reverse sweep from a single-element `loss`. Consumes the record.
    pub fn backward(self, loss: &Var) -> Result<Gradients> {
        if loss.data().len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.into_inner();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let Some(root) = loss.node else {
            return Ok(Gradients { grads });
        };
        if root >= nodes.len() || !Rc::ptr_eq(&nodes[root].output, &loss.value) {
            return Err(Error::Usage("loss was not recorded on this tape".into()));
        }
        grads[root] = Some(vec![1.0]);

        for idx in (0..=root).rev() {
            let node = &nodes[idx];
            let Some(prim) = node.prim else { continue };
            let Some(g_out) = grads[idx].take() else {
                continue;
            };
            let operand_grads = vjp(prim, &node.operands, &node.output, &g_out);
            for (var, g) in node.operands.iter().zip(operand_grads) {
                let (Some(j), Some(g)) = (var.node, g) else {
                    continue;
                };
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Eager evaluation of a primitive on plain tensors (no recording).
pub fn apply_primitive(prim: Primitive, operands: &[&Tensor]) -> Result<Tensor> {
    let values: Vec<Value> = operands
        .iter()
        .map(|t| {
            check_shape(&t.shape, t.data.len())?;
            Ok(Value {
                shape: t.shape.clone(),
                data: t.data.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Value> = values.iter().collect();
    let out = forward(prim, &refs)?;
    Ok(Tensor {
        shape: out.shape,
        data: out.data,
        requires_grad: false,
        grad: None,
    })
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// `c[m×n] += a[m×k] · b[k×n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * k + p] += dot;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// How a matmul maps onto 2-D products.
#[derive(Clone, Copy)]
enum MatMulLayout {
    /// Leading dims of the left operand are flattened into rows.
    Flat { m: usize, k: usize, n: usize },
    /// A single `[m,k]` matrix left-multiplies each `[k,n]` block of the right operand.
    BatchedRight {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
}

fn matmul_layout(a: &[usize], b: &[usize]) -> Result<(MatMulLayout, Vec<usize>)> {
    let err = || Error::Shape(format!("matmul of {a:?} and {b:?}"));
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let k = a[a.len() - 1];
    if b.len() == 2 {
        if b[0] != k {
            return Err(err());
        }
        let m: usize = a[..a.len() - 1].iter().product();
        let mut shape = a.to_vec();
        *shape.last_mut().unwrap() = b[1];
        return Ok((MatMulLayout::Flat { m, k, n: b[1] }, shape));
    }
    if a.len() == 2 {
        let kb = b[b.len() - 2];
        if kb != k {
            return Err(err());
        }
        let n = b[b.len() - 1];
        let batch: usize = b[..b.len() - 2].iter().product();
        let mut shape = b.to_vec();
        let r = shape.len();
        shape[r - 2] = a[0];
        return Ok((
            MatMulLayout::BatchedRight {
                batch,
                m: a[0],
                k,
                n,
            },
            shape,
        ));
    }
    Err(err())
}

fn is_bias_row(a: &[usize], b: &[usize]) -> bool {
    b.len() == 1 && a.len() >= 2 && a[a.len() - 1] == b[0]
}

fn same_shape(prim: Primitive, a: &Value, b: &Value) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "{prim} needs identical shapes, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn forward(prim: Primitive, ops: &[&Value]) -> Result<Value> {
    if let Some(n) = prim.arity() {
        if ops.len() != n {
            return Err(Error::Usage(format!(
                "{prim} takes {n} operand(s), got {}",
                ops.len()
            )));
        }
    } else if ops.is_empty() {
        return Err(Error::Usage(format!("{prim} needs at least one operand")));
    }
    let unary = |f: &dyn Fn(f64) -> f64| Value {
        shape: ops[0].shape.clone(),
        data: ops[0].data.iter().map(|&x| f(x)).collect(),
    };
    let out = match prim {
        Primitive::MatMul => {
            let (layout, shape) = matmul_layout(&ops[0].shape, &ops[1].shape)?;
            let mut data = vec![0.0; shape.iter().product()];
            match layout {
                MatMulLayout::Flat { m, k, n } => {
                    gemm_nn(&ops[0].data, &ops[1].data, &mut data, m, k, n)
                }
                MatMulLayout::BatchedRight { batch, m, k, n } => {
                    for bi in 0..batch {
                        gemm_nn(
                            &ops[0].data,
                            &ops[1].data[bi * k * n..(bi + 1) * k * n],
                            &mut data[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Value { shape, data }
        }
        Primitive::Add => {
            let (a, b) = (ops[0], ops[1]);
            if is_bias_row(&a.shape, &b.shape) {
                let w = b.data.len();
                let data = a
                    .data
                    .chunks(w)
                    .flat_map(|row| row.iter().zip(&b.data).map(|(x, y)| x + y))
                    .collect();
                Value {
                    shape: a.shape.clone(),
                    data,
                }
            } else {
                same_shape(prim, a, b)?;
                Value {
                    shape: a.shape.clone(),
                    data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
                }
            }
        }
        Primitive::Subtract => {
            same_shape(prim, ops[0], ops[1])?;
            Value {
                shape: ops[0].shape.clone(),
                data: ops[0]
                    .data
                    .iter()
                    .zip(&ops[1].data)
                    .map(|(x, y)| x - y)
                    .collect(),
            }
        }
        Primitive::Multiply => {
            same_shape(prim, ops[0], ops[1])?;
            Value {
                shape: ops[0].shape.clone(),
                data: ops[0]
                    .data
                    .iter()
                    .zip(&ops[1].data)
                    .map(|(x, y)| x * y)
                    .collect(),
            }
        }
        Primitive::Sigmoid => unary(&sigmoid),
        Primitive::Tanh => unary(&f64::tanh),
        Primitive::Relu => unary(&|x| x.max(0.0)),
        Primitive::Scale(c) => unary(&|x| c * x),
        Primitive::Square => unary(&|x| x * x),
        Primitive::ConcatLastDim => {
            let lead = &ops[0].shape[..ops[0].shape.len() - 1];
            for o in ops {
                if o.shape.len() != ops[0].shape.len() || &o.shape[..o.shape.len() - 1] != lead {
                    return Err(Error::Shape(format!(
                        "concat_last_dim of {:?} and {:?}",
                        ops[0].shape, o.shape
                    )));
                }
            }
            let widths: Vec<usize> = ops.iter().map(|o| *o.shape.last().unwrap()).collect();
            let total: usize = widths.iter().sum();
            let rows: usize = lead.iter().product();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (o, &w) in ops.iter().zip(&widths) {
                    data.extend_from_slice(&o.data[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Value { shape, data }
        }
        Primitive::ReduceSum => Value {
            shape: vec![1],
            data: vec![ops[0].data.iter().sum()],
        },
        Primitive::ReduceMean => Value {
            shape: vec![1],
            data: vec![ops[0].data.iter().sum::<f64>() / ops[0].data.len() as f64],
        },
    };
    Ok(out)
}

/// Vector-Jacobian products for each operand. Untracked operands get `None`.
fn vjp(prim: Primitive, operands: &[Var], out: &Value, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let want = |i: usize| operands[i].is_tracked();
    let x = |i: usize| operands[i].data();
    match prim {
        Primitive::MatMul => {
            let (a, b) = (operands[0].shape(), operands[1].shape());
            let (layout, _) = matmul_layout(a, b).expect("shape checked in forward");
            let mut ga = want(0).then(|| vec![0.0; x(0).len()]);
            let mut gb = want(1).then(|| vec![0.0; x(1).len()]);
            match layout {
                MatMulLayout::Flat { m, k, n } => {
                    if let Some(ga) = ga.as_mut() {
                        gemm_nt(g, x(1), ga, m, k, n);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gemm_tn(x(0), g, gb, m, k, n);
                    }
                }
                MatMulLayout::BatchedRight { batch, m, k, n } => {
                    for bi in 0..batch {
                        let g_blk = &g[bi * m * n..(bi + 1) * m * n];
                        if let Some(ga) = ga.as_mut() {
                            gemm_nt(g_blk, &x(1)[bi * k * n..(bi + 1) * k * n], ga, m, k, n);
                        }
                        if let Some(gb) = gb.as_mut() {
                            gemm_tn(x(0), g_blk, &mut gb[bi * k * n..(bi + 1) * k * n], m, k, n);
                        }
                    }
                }
            }
            vec![ga, gb]
        }
        Primitive::Add => {
            let gb = want(1).then(|| {
                if is_bias_row(operands[0].shape(), operands[1].shape()) {
                    let w = x(1).len();
                    let mut acc = vec![0.0; w];
                    for row in g.chunks(w) {
                        acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    acc
                } else {
                    g.to_vec()
                }
            });
            vec![want(0).then(|| g.to_vec()), gb]
        }
        Primitive::Subtract => vec![
            want(0).then(|| g.to_vec()),
            want(1).then(|| g.iter().map(|v| -v).collect()),
        ],
        Primitive::Multiply => vec![
            want(0).then(|| g.iter().zip(x(1)).map(|(a, b)| a * b).collect()),
            want(1).then(|| g.iter().zip(x(0)).map(|(a, b)| a * b).collect()),
        ],
        Primitive::Sigmoid => vec![Some(
            g.iter()
                .zip(&out.data)
                .map(|(g, y)| g * y * (1.0 - y))
                .collect(),
        )],
        Primitive::Tanh => vec![Some(
            g.iter()
                .zip(&out.data)
                .map(|(g, y)| g * (1.0 - y * y))
                .collect(),
        )],
        Primitive::Relu => vec![Some(
            g.iter()
                .zip(x(0))
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect(),
        )],
        Primitive::Scale(c) => vec![Some(g.iter().map(|v| c * v).collect())],
        Primitive::Square => vec![Some(g.iter().zip(x(0)).map(|(g, v)| 2.0 * v * g).collect())],
        Primitive::ReduceSum => vec![Some(vec![g[0]; x(0).len()])],
        Primitive::ReduceMean => {
            let n = x(0).len();
            vec![Some(vec![g[0] / n as f64; n])]
        }
        Primitive::ConcatLastDim => {
            let widths: Vec<usize> = operands
                .iter()
                .map(|o| *o.shape().last().unwrap())
                .collect();
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut offset = 0;
            widths
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let start = offset;
                    offset += w;
                    want(i).then(|| {
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(&g[r * total + start..r * total + start + w]);
                        }
                        part
                    })
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf(t: &Tape, shape: &[usize], data: &[f64]) -> Var {
        t.watch(&Tensor::new(shape.to_vec(), data.to_vec(), true).unwrap())
    }

    #[test]
    fn tensor_new_checks_length() {
        let id = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], false).unwrap();
        assert_eq!(id.numel(), 4);
        let z = Tensor::new(vec![15, 12], vec![0.0; 180], true).unwrap();
        assert_eq!(z.grad.as_deref(), Some(&[0.0; 180][..]));
        assert!(matches!(
            Tensor::new(vec![3], vec![1.0, 2.0], false),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Tensor::new(vec![], vec![], false),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn eager_primitives() {
        let i2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], false).unwrap();
        let m = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0], false).unwrap();
        assert_eq!(
            apply_primitive(Primitive::MatMul, &[&i2, &m]).unwrap().data,
            m.data
        );

        let z = Tensor::zeros(vec![3, 4], false);
        let s = apply_primitive(Primitive::Sigmoid, &[&z]).unwrap();
        assert!(s.data.iter().all(|&v| v == 0.5));

        let a = Tensor::zeros(vec![15, 12], false);
        let b = Tensor::zeros(vec![15, 512], false);
        let c = apply_primitive(Primitive::ConcatLastDim, &[&a, &b]).unwrap();
        assert_eq!(c.shape, vec![15, 524]);
    }

    #[test]
    fn shape_and_usage_errors() {
        let a = Tensor::zeros(vec![2, 3], false);
        let b = Tensor::zeros(vec![2, 3], false);
        assert!(matches!(
            apply_primitive(Primitive::MatMul, &[&a, &b]),
            Err(Error::Shape(_))
        ));
        let c = Tensor::zeros(vec![3, 2], false);
        assert!(matches!(
            apply_primitive(Primitive::Add, &[&a, &c]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            apply_primitive(Primitive::Add, &[&a]),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            "softmax".parse::<Primitive>(),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            Primitive::parse("scale_by_constant", None),
            Err(Error::Usage(_))
        ));
        assert_eq!(
            Primitive::parse("scale_by_constant", Some(2.0)).unwrap(),
            Primitive::Scale(2.0)
        );
    }

    #[test]
    fn square_sum_gradient() {
        let t = Tape::new();
        let x = leaf(&t, &[3], &[1.0, 2.0, 3.0]);
        let loss = t.sum(&t.square(&x).unwrap()).unwrap();
        assert_eq!(loss.item(), 14.0);
        let g = t.backward(&loss).unwrap();
        assert_eq!(g.wrt(&x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let t = Tape::new();
        let w = leaf(&t, &[1], &[0.0]);
        let c = Var::constant(vec![1], vec![1.0]).unwrap();
        let loss = t.mul(&t.sigmoid(&w).unwrap(), &c).unwrap();
        let g = t.backward(&loss).unwrap();
        assert_eq!(g.wrt(&w).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tape::new();
        let x = leaf(&t, &[2], &[1.0, 2.0]);
        let y = t.square(&x).unwrap();
        assert!(matches!(t.backward(&y), Err(Error::Usage(_))));
    }

    #[test]
    fn repeated_operand_accumulates() {
        let t = Tape::new();
        let x = leaf(&t, &[2], &[3.0, -1.0]);
        let loss = t.sum(&t.mul(&x, &x).unwrap()).unwrap();
        let g = t.backward(&loss).unwrap();
        assert_eq!(g.wrt(&x).unwrap(), &[6.0, -2.0]);
    }

    #[test]
    fn untracked_ops_are_not_recorded() {
        let t = Tape::new();
        let a = Var::constant(vec![2, 2], vec![1.0; 4]).unwrap();
        let b = t.tanh(&t.matmul(&a, &a).unwrap()).unwrap();
        assert!(!b.is_tracked());
        assert!(t.is_empty());
    }

    #[test]
    fn bias_row_broadcast() {
        let t = Tape::new();
        let x = leaf(&t, &[2, 3, 2], &[0.0; 12]);
        let b = leaf(&t, &[2], &[1.0, -1.0]);
        let y = t.add(&x, &b).unwrap();
        assert_eq!(&y.data()[..4], &[1.0, -1.0, 1.0, -1.0]);
        let loss = t.sum(&y).unwrap();
        let g = t.backward(&loss).unwrap();
        assert_eq!(g.wrt(&b).unwrap(), &[6.0, 6.0]);
    }

    #[test]
    fn batched_left_multiply() {
        // [2,2] · [3,2,1] applies the same matrix to each block.
        let a = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0], false).unwrap();
        let b = Tensor::new(vec![3, 2, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false).unwrap();
        let c = apply_primitive(Primitive::MatMul, &[&a, &b]).unwrap();
        assert_eq!(c.shape, vec![3, 2, 1]);
        assert_eq!(c.data, vec![2.0, 1.0, 4.0, 3.0, 6.0, 5.0]);
    }

    #[test]
    fn dropout_modes() {
        let t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Var::constant(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.dropout(&x, 0.0, &mut rng, true).unwrap().data(), x.data());
        assert_eq!(
            t.dropout(&x, 0.3, &mut rng, false).unwrap().data(),
            x.data()
        );
        assert!(matches!(
            t.dropout(&x, 1.0, &mut rng, true),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            t.dropout(&x, -0.1, &mut rng, true),
            Err(Error::Usage(_))
        ));

        let ones = Var::constant(vec![1_000_000], vec![1.0; 1_000_000]).unwrap();
        let y = t.dropout(&ones, 0.5, &mut rng, true).unwrap();
        let mean = y.data().iter().sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
