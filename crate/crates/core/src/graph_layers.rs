//! Adjacency-adaptive graph convolution and the recurrent cells built on it.
//!
//! Parameter structs are generic over their storage: `T = Tensor` for owned
//! weights and `T = Var` once bound to a [`Tape`] for a forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::AdjacencyMatrix;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, tape: &Tape, x: &Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x.clone()),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    /// Every gate is an AAGC with its own learnable adjacency.
    AagcLstm,
    /// Gates share one constant, symmetric-normalized skeleton adjacency.
    GcLstm,
    /// Linear gates plus one AAGC on the previous hidden state.
    GgruStyle,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::AagcLstm => "aagc_lstm",
            CellKind::GcLstm => "gc_lstm",
            CellKind::GgruStyle => "ggru_style",
        }
    }
}

/// Uniform Glorot initialization, `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data, true).expect("consistent shape")
}

fn learnable(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data, true).expect("consistent shape")
}

/// Mean absolute row sum: the factor by which `Ã` scales node-correlated features.
pub fn adjacency_gain(a: &AdjacencyMatrix) -> f64 {
    a.values.iter().map(|v| v.abs()).sum::<f64>() / a.n as f64
}

/// Glorot weights divided by the adjacency gain so `Ã X W` starts at unit scale.
fn graph_weight<R: Rng + ?Sized>(
    a: &AdjacencyMatrix,
    f_in: usize,
    f_out: usize,
    rng: &mut R,
) -> Tensor {
    let mut w = glorot_uniform(f_in, f_out, rng);
    let g = adjacency_gain(a);
    w.data.iter_mut().for_each(|v| *v /= g);
    w
}

fn adjacency_tensor(a: &AdjacencyMatrix, requires_grad: bool) -> Tensor {
    Tensor::new(vec![a.n, a.n], a.values.clone(), requires_grad).expect("square adjacency")
}

/// `act(Ã X W + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Aagc<T> {
    pub adjacency: T,
    pub weight: T,
    pub bias: T,
}

pub type AagcParams = Aagc<Tensor>;

impl AagcParams {
    pub fn new<R: Rng + ?Sized>(
        adjacency: &AdjacencyMatrix,
        f_in: usize,
        f_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            adjacency: adjacency_tensor(adjacency, true),
            weight: graph_weight(adjacency, f_in, f_out, rng),
            bias: learnable(vec![f_out], vec![0.0; f_out]),
        }
    }

    pub fn nodes(&self) -> usize {
        self.adjacency.shape[0]
    }

    pub fn f_in(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn f_out(&self) -> usize {
        self.weight.shape[1]
    }
}

impl<T> Aagc<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Aagc<U> {
        Aagc {
            adjacency: f(&self.adjacency),
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        f(&self.adjacency);
        f(&self.weight);
        f(&self.bias);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        f(&mut self.adjacency);
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Per-node affine map `X W + b` (no graph mixing).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

impl Linear<Tensor> {
    pub fn new<R: Rng + ?Sized>(f_in: usize, f_out: usize, rng: &mut R) -> Self {
        Self {
            weight: glorot_uniform(f_in, f_out, rng),
            bias: learnable(vec![f_out], vec![0.0; f_out]),
        }
    }
}

impl<T> Linear<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        f(&self.weight);
        f(&self.bias);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

fn check_features(x: &Var, weight: &Var) -> Result<()> {
    let fx = *x.shape().last().unwrap();
    if x.shape().len() < 2 || fx != weight.shape()[0] {
        return Err(Error::Shape(format!(
            "input {:?} does not match weight {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    Ok(())
}

/// Graph convolution `act(A X W + b)` for `X` shaped `[N, F]` or `[B, N, F]`.
/// The cheaper association of the triple product is used.
pub fn graph_conv(
    tape: &Tape,
    x: &Var,
    adjacency: &Var,
    weight: &Var,
    bias: &Var,
    activation: Activation,
) -> Result<Var> {
    check_features(x, weight)?;
    let (f_in, f_out) = (weight.shape()[0], weight.shape()[1]);
    let z = if f_out <= f_in {
        tape.matmul(adjacency, &tape.matmul(x, weight)?)?
    } else {
        tape.matmul(&tape.matmul(adjacency, x)?, weight)?
    };
    activation.apply(tape, &tape.add(&z, bias)?)
}

pub fn aagc_forward(tape: &Tape, x: &Var, p: &Aagc<Var>, activation: Activation) -> Result<Var> {
    graph_conv(tape, x, &p.adjacency, &p.weight, &p.bias, activation)
}

fn linear_forward(tape: &Tape, x: &Var, p: &Linear<Var>, activation: Activation) -> Result<Var> {
    check_features(x, &p.weight)?;
    activation.apply(tape, &tape.add(&tape.matmul(x, &p.weight)?, &p.bias)?)
}

/// Gate order used everywhere: input, forget, candidate, output.
pub const GATES: [&str; 4] = ["i", "f", "c", "o"];
const GATE_ACTIVATIONS: [Activation; 4] = [
    Activation::Sigmoid,
    Activation::Sigmoid,
    Activation::Tanh,
    Activation::Sigmoid,
];

#[derive(Clone, Debug, PartialEq)]
pub struct AagcLstm<T> {
    pub gates: [Aagc<T>; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcLstm<T> {
    /// Shared constant adjacency; never learnable.
    pub adjacency: T,
    pub gates: [Linear<T>; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GgruLstm<T> {
    pub gates: [Linear<T>; 4],
    /// AAGC applied to the previous hidden state before the gates.
    pub hidden_conv: Aagc<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell<T> {
    AagcLstm(AagcLstm<T>),
    GcLstm(GcLstm<T>),
    GgruStyle(GgruLstm<T>),
}

pub type AagcLstmParams = AagcLstm<Tensor>;
pub type CellParams = Cell<Tensor>;

impl CellParams {
    /// A fresh cell. `learned_init` seeds the learnable adjacencies, `fixed` is the
    /// constant matrix of the fixed-adjacency variant.
    pub fn new<R: Rng + ?Sized>(
        kind: CellKind,
        learned_init: &AdjacencyMatrix,
        fixed: &AdjacencyMatrix,
        f_in: usize,
        f_h: usize,
        rng: &mut R,
    ) -> Self {
        let gate_in = f_in + f_h;
        match kind {
            CellKind::AagcLstm => Cell::AagcLstm(AagcLstm {
                gates: std::array::from_fn(|_| AagcParams::new(learned_init, gate_in, f_h, rng)),
            }),
            CellKind::GcLstm => Cell::GcLstm(GcLstm {
                adjacency: adjacency_tensor(fixed, false),
                gates: std::array::from_fn(|_| Linear {
                    weight: graph_weight(fixed, gate_in, f_h, rng),
                    bias: learnable(vec![f_h], vec![0.0; f_h]),
                }),
            }),
            CellKind::GgruStyle => {
                let gates = std::array::from_fn(|_| Linear::new(gate_in, f_h, rng));
                Cell::GgruStyle(GgruLstm {
                    gates,
                    hidden_conv: AagcParams::new(learned_init, f_h, f_h, rng),
                })
            }
        }
    }

    pub fn hidden_size(&self) -> usize {
        match self {
            Cell::AagcLstm(c) => c.gates[0].f_out(),
            Cell::GcLstm(c) => c.gates[0].weight.shape[1],
            Cell::GgruStyle(c) => c.gates[0].weight.shape[1],
        }
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_learnables(&mut |t| n += t.numel());
        n
    }
}

impl<T> Cell<T> {
    pub fn kind(&self) -> CellKind {
        match self {
            Cell::AagcLstm(_) => CellKind::AagcLstm,
            Cell::GcLstm(_) => CellKind::GcLstm,
            Cell::GgruStyle(_) => CellKind::GgruStyle,
        }
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Cell<U> {
        match self {
            Cell::AagcLstm(c) => Cell::AagcLstm(AagcLstm {
                gates: std::array::from_fn(|g| c.gates[g].map(f)),
            }),
            Cell::GcLstm(c) => Cell::GcLstm(GcLstm {
                adjacency: f(&c.adjacency),
                gates: std::array::from_fn(|g| c.gates[g].map(f)),
            }),
            Cell::GgruStyle(c) => {
                let gates = std::array::from_fn(|g| c.gates[g].map(f));
                Cell::GgruStyle(GgruLstm {
                    gates,
                    hidden_conv: c.hidden_conv.map(f),
                })
            }
        }
    }

    /// Visits learnable tensors in declaration order (the constant adjacency is skipped).
    pub fn visit_learnables<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        match self {
            Cell::AagcLstm(c) => c.gates.iter().for_each(|g| g.visit(f)),
            Cell::GcLstm(c) => c.gates.iter().for_each(|g| g.visit(f)),
            Cell::GgruStyle(c) => {
                c.gates.iter().for_each(|g| g.visit(f));
                c.hidden_conv.visit(f);
            }
        }
    }

    pub fn visit_learnables_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        match self {
            Cell::AagcLstm(c) => c.gates.iter_mut().for_each(|g| g.visit_mut(f)),
            Cell::GcLstm(c) => c.gates.iter_mut().for_each(|g| g.visit_mut(f)),
            Cell::GgruStyle(c) => {
                c.gates.iter_mut().for_each(|g| g.visit_mut(f));
                c.hidden_conv.visit_mut(f);
            }
        }
    }
}

/// Hidden state `H` and carry `C`.
#[derive(Clone, Debug)]
pub struct CellState {
    pub hidden: Var,
    pub carry: Var,
}

impl CellState {
    /// Zero state matching the leading dimensions of `input_shape`.
    pub fn zeros(input_shape: &[usize], hidden: usize) -> Self {
        let mut shape = input_shape.to_vec();
        *shape.last_mut().expect("non-empty shape") = hidden;
        let n = shape.iter().product();
        let z = Var::constant(shape, vec![0.0; n]).expect("consistent shape");
        Self {
            hidden: z.clone(),
            carry: z,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOptions {
    pub input_dropout: f64,
    pub hidden_dropout: f64,
    pub training: bool,
    /// `C_t = C_{t-1} ⊙ X_i + X_f ⊙ X_c`; `false` gives the
    /// conventional `C_{t-1} ⊙ X_f + X_i ⊙ X_c`.
    pub input_gate_on_carry: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            input_dropout: 0.2,
            hidden_dropout: 0.3,
            training: false,
            input_gate_on_carry: true,
        }
    }
}

/// Carry/hidden/output update shared by all cell kinds; returns `(O_t, state)`.
fn lstm_update(
    tape: &Tape,
    gates: [Var; 4],
    carry_prev: &Var,
    input_gate_on_carry: bool,
) -> Result<(Var, CellState)> {
    let [xi, xf, xc, xo] = gates;
    let (keep, write) = if input_gate_on_carry {
        (&xi, &xf)
    } else {
        (&xf, &xi)
    };
    let carry = tape.add(&tape.mul(carry_prev, keep)?, &tape.mul(write, &xc)?)?;
    let hidden = tape.mul(&tape.tanh(&carry)?, &xo)?;
    let output = tape.tanh(&hidden)?;
    Ok((output, CellState { hidden, carry }))
}

fn check_state(x: &Var, state: &CellState, f_h: usize) -> Result<()> {
    let lead = &x.shape()[..x.shape().len() - 1];
    for v in [&state.hidden, &state.carry] {
        let s = v.shape();
        if &s[..s.len() - 1] != lead || *s.last().unwrap() != f_h {
            return Err(Error::Shape(format!(
                "state {:?} does not fit input {:?} with hidden size {f_h}",
                s,
                x.shape()
            )));
        }
    }
    Ok(())
}

fn dropped_inputs<R: Rng + ?Sized>(
    tape: &Tape,
    x: &Var,
    state: &CellState,
    opts: &StepOptions,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let x = tape.dropout(x, opts.input_dropout, rng, opts.training)?;
    let h = tape.dropout(&state.hidden, opts.hidden_dropout, rng, opts.training)?;
    Ok((x, h))
}

pub fn aagc_lstm_step<R: Rng + ?Sized>(
    tape: &Tape,
    x: &Var,
    state: &CellState,
    p: &AagcLstm<Var>,
    opts: &StepOptions,
    rng: &mut R,
) -> Result<(Var, CellState)> {
    check_state(x, state, p.gates[0].weight.shape()[1])?;
    let (x, h) = dropped_inputs(tape, x, state, opts, rng)?;
    let joint = tape.concat(&[&x, &h])?;
    let gates = [0, 1, 2, 3].map(|g| aagc_forward(tape, &joint, &p.gates[g], GATE_ACTIVATIONS[g]));
    let [i, f, c, o] = gates;
    lstm_update(
        tape,
        [i?, f?, c?, o?],
        &state.carry,
        opts.input_gate_on_carry,
    )
}

pub fn gc_lstm_step<R: Rng + ?Sized>(
    tape: &Tape,
    x: &Var,
    state: &CellState,
    p: &GcLstm<Var>,
    opts: &StepOptions,
    rng: &mut R,
) -> Result<(Var, CellState)> {
    check_state(x, state, p.gates[0].weight.shape()[1])?;
    let (x, h) = dropped_inputs(tape, x, state, opts, rng)?;
    let joint = tape.concat(&[&x, &h])?;
    let gates = [0, 1, 2, 3].map(|g| {
        let lin = &p.gates[g];
        graph_conv(
            tape,
            &joint,
            &p.adjacency,
            &lin.weight,
            &lin.bias,
            GATE_ACTIVATIONS[g],
        )
    });
    let [i, f, c, o] = gates;
    lstm_update(
        tape,
        [i?, f?, c?, o?],
        &state.carry,
        opts.input_gate_on_carry,
    )
}

pub fn ggru_style_lstm_step<R: Rng + ?Sized>(
    tape: &Tape,
    x: &Var,
    state: &CellState,
    p: &GgruLstm<Var>,
    opts: &StepOptions,
    rng: &mut R,
) -> Result<(Var, CellState)> {
    check_state(x, state, p.gates[0].weight.shape()[1])?;
    let (x, h) = dropped_inputs(tape, x, state, opts, rng)?;
    let h = aagc_forward(tape, &h, &p.hidden_conv, Activation::Identity)?;
    let joint = tape.concat(&[&x, &h])?;
    let gates =
        [0, 1, 2, 3].map(|g| linear_forward(tape, &joint, &p.gates[g], GATE_ACTIVATIONS[g]));
    let [i, f, c, o] = gates;
    lstm_update(
        tape,
        [i?, f?, c?, o?],
        &state.carry,
        opts.input_gate_on_carry,
    )
}

pub fn cell_step<R: Rng + ?Sized>(
    tape: &Tape,
    x: &Var,
    state: &CellState,
    cell: &Cell<Var>,
    opts: &StepOptions,
    rng: &mut R,
) -> Result<(Var, CellState)> {
    match cell {
        Cell::AagcLstm(p) => aagc_lstm_step(tape, x, state, p, opts, rng),
        Cell::GcLstm(p) => gc_lstm_step(tape, x, state, p, opts, rng),
        Cell::GgruStyle(p) => ggru_style_lstm_step(tape, x, state, p, opts, rng),
    }
}

fn hidden_size_of(cell: &Cell<Var>) -> usize {
    match cell {
        Cell::AagcLstm(c) => c.gates[0].weight.shape()[1],
        Cell::GcLstm(c) => c.gates[0].weight.shape()[1],
        Cell::GgruStyle(c) => c.gates[0].weight.shape()[1],
    }
}

/// Runs `fwd` over `t = 0..T` and `bwd` over `t = T-1..0`, both from zero
/// state, and sums their outputs per frame.
pub fn bidirectional_run<R: Rng + ?Sized>(
    tape: &Tape,
    sequence: &[Var],
    fwd: &Cell<Var>,
    bwd: &Cell<Var>,
    opts: &StepOptions,
    rng: &mut R,
) -> Result<Vec<Var>> {
    let Some(first) = sequence.first() else {
        return Err(Error::Usage(
            "bidirectional run over an empty sequence".into(),
        ));
    };
    let f_h = hidden_size_of(fwd);
    if hidden_size_of(bwd) != f_h {
        return Err(Error::Shape(
            "forward and backward cells differ in hidden size".into(),
        ));
    }
    let mut forward_out = Vec::with_capacity(sequence.len());
    let mut state = CellState::zeros(first.shape(), f_h);
    for x in sequence {
        let (o, s) = cell_step(tape, x, &state, fwd, opts, rng)?;
        forward_out.push(o);
        state = s;
    }
    let mut backward_out = vec![None; sequence.len()];
    let mut state = CellState::zeros(first.shape(), f_h);
    for (t, x) in sequence.iter().enumerate().rev() {
        let (o, s) = cell_step(tape, x, &state, bwd, opts, rng)?;
        backward_out[t] = Some(o);
        state = s;
    }
    forward_out
        .iter()
        .zip(backward_out)
        .map(|(f, b)| tape.add(f, &b.expect("filled above")))
        .collect()
}

/// Shape descriptors for exact parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerDescriptor {
    Aagc { n: usize, f_in: usize, f_out: usize },
    AagcLstmCell { n: usize, f_in: usize, f_h: usize },
    GcLstmCell { f_in: usize, f_h: usize },
    GgruStyleCell { n: usize, f_in: usize, f_h: usize },
    PlainLstmCell { f_in: usize, f_h: usize },
}

impl LayerDescriptor {
    pub fn cell(kind: CellKind, n: usize, f_in: usize, f_h: usize) -> Self {
        match kind {
            CellKind::AagcLstm => LayerDescriptor::AagcLstmCell { n, f_in, f_h },
            CellKind::GcLstm => LayerDescriptor::GcLstmCell { f_in, f_h },
            CellKind::GgruStyle => LayerDescriptor::GgruStyleCell { n, f_in, f_h },
        }
    }
}

pub fn count_parameters(d: LayerDescriptor) -> usize {
    let linear_gate = |f_in: usize, f_h: usize| (f_in + f_h) * f_h + f_h;
    match d {
        LayerDescriptor::Aagc { n, f_in, f_out } => n * n + f_in * f_out + f_out,
        LayerDescriptor::AagcLstmCell { n, f_in, f_h } => 4 * (n * n + linear_gate(f_in, f_h)),
        LayerDescriptor::GcLstmCell { f_in, f_h }
        | LayerDescriptor::PlainLstmCell { f_in, f_h } => 4 * linear_gate(f_in, f_h),
        LayerDescriptor::GgruStyleCell { n, f_in, f_h } => {
            4 * linear_gate(f_in, f_h)
                + count_parameters(LayerDescriptor::Aagc {
                    n,
                    f_in: f_h,
                    f_out: f_h,
                })
        }
    }
}
