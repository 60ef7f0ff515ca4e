//! Finite-difference gradient checks for every primitive, plus linearity and
//! determinism of the backward pass.

use aagc_core::tensor::{Primitive, Tape, Tensor, Var};
use proptest::prelude::*;

const STEP: f64 = 1e-6;
const REL_TOL: f64 = 1e-6;

/// `Σ c ⊙ prim(operands)` with fixed random `c`, so every output entry matters.
fn weighted_output(tape: &Tape, prim: Primitive, ops: &[Var], c: &[f64]) -> Var {
    let refs: Vec<&Var> = ops.iter().collect();
    let y = tape.apply(prim, &refs).unwrap();
    let c = Var::constant(y.shape().to_vec(), c[..y.data().len()].to_vec()).unwrap();
    tape.sum(&tape.mul(&y, &c).unwrap()).unwrap()
}

fn value(prim: Primitive, inputs: &[Tensor], c: &[f64]) -> f64 {
    let tape = Tape::new();
    let ops: Vec<Var> = inputs.iter().map(|t| tape.watch(t)).collect();
    weighted_output(&tape, prim, &ops, c).item()
}

fn check(prim: Primitive, inputs: Vec<Tensor>, c: &[f64]) -> Result<(), TestCaseError> {
    let tape = Tape::new();
    let ops: Vec<Var> = inputs.iter().map(|t| tape.watch(t)).collect();
    let loss = weighted_output(&tape, prim, &ops, c);
    let grads = tape.backward(&loss).unwrap();
    for (k, op) in ops.iter().enumerate() {
        let analytic = grads.wrt(op).unwrap().to_vec();
        for i in 0..inputs[k].data.len() {
            let mut plus = inputs.clone();
            plus[k].data[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data[i] -= STEP;
            let numeric = (value(prim, &plus, c) - value(prim, &minus, c)) / (2.0 * STEP);
            let scale = analytic[i].abs().max(numeric.abs()).max(1.0);
            prop_assert!(
                (analytic[i] - numeric).abs() <= REL_TOL * scale,
                "{prim}: operand {k} entry {i}: analytic {} numeric {numeric}",
                analytic[i]
            );
        }
    }
    Ok(())
}

fn leaf(shape: &[usize], data: &[f64]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), data[..n].to_vec(), true).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    // Kept away from relu's kink at zero.
    prop::collection::vec(prop_oneof![-2.0..-0.05f64, 0.05..2.0f64], n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unary_primitives(x in values(12), c in values(12)) {
        for prim in [
            Primitive::Sigmoid,
            Primitive::Tanh,
            Primitive::Relu,
            Primitive::Square,
            Primitive::Scale(-1.7),
        ] {
            check(prim, vec![leaf(&[3, 4], &x)], &c)?;
        }
        check(Primitive::ReduceSum, vec![leaf(&[3, 4], &x)], &c)?;
        check(Primitive::ReduceMean, vec![leaf(&[2, 6], &x)], &c)?;
    }

    #[test]
    fn binary_primitives(a in values(12), b in values(12), c in values(12)) {
        for prim in [Primitive::Add, Primitive::Subtract, Primitive::Multiply] {
            check(prim, vec![leaf(&[3, 4], &a), leaf(&[3, 4], &b)], &c)?;
        }
        check(Primitive::Add, vec![leaf(&[3, 4], &a), leaf(&[4], &b)], &c)?;
    }

    #[test]
    fn matmul_layouts(a in values(24), b in values(24), c in values(24)) {
        check(Primitive::MatMul, vec![leaf(&[3, 4], &a), leaf(&[4, 2], &b)], &c)?;
        check(Primitive::MatMul, vec![leaf(&[2, 3, 4], &a), leaf(&[4, 2], &b)], &c)?;
        check(Primitive::MatMul, vec![leaf(&[3, 3], &a), leaf(&[2, 3, 4], &b)], &c)?;
    }

    #[test]
    fn concat_last_dim(a in values(6), b in values(9), c in values(15)) {
        check(Primitive::ConcatLastDim, vec![leaf(&[3, 2], &a), leaf(&[3, 3], &b)], &c)?;
    }

    #[test]
    fn composite_three_layers(x in values(6), w1 in values(12), w2 in values(8), c in values(4)) {
        let f = |ts: &[Tensor]| -> (Tape, Vec<Var>, Var) {
            let tape = Tape::new();
            let vs: Vec<Var> = ts.iter().map(|t| tape.watch(t)).collect();
            let h1 = tape.tanh(&tape.matmul(&vs[0], &vs[1]).unwrap()).unwrap();
            let h2 = tape.sigmoid(&tape.matmul(&h1, &vs[2]).unwrap()).unwrap();
            let cc = Var::constant(vec![2, 2], c.clone()).unwrap();
            let loss = tape.sum(&tape.mul(&tape.square(&h2).unwrap(), &cc).unwrap()).unwrap();
            (tape, vs, loss)
        };
        let inputs = vec![leaf(&[2, 3], &x), leaf(&[3, 4], &w1), leaf(&[4, 2], &w2)];
        let (tape, vs, loss) = f(&inputs);
        let g = tape.backward(&loss).unwrap();
        for (k, v) in vs.iter().enumerate() {
            let analytic = g.wrt(v).unwrap();
            for i in 0..inputs[k].data.len() {
                let mut p = inputs.clone();
                p[k].data[i] += STEP;
                let mut m = inputs.clone();
                m[k].data[i] -= STEP;
                let numeric = (f(&p).2.item() - f(&m).2.item()) / (2.0 * STEP);
                let scale = analytic[i].abs().max(numeric.abs()).max(1.0);
                prop_assert!((analytic[i] - numeric).abs() <= REL_TOL * scale);
            }
        }
    }

    #[test]
    fn backward_is_linear(x in values(6), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let t = leaf(&[6], &x);
        let grad_of = |wa: f64, wb: f64| -> Vec<f64> {
            let tape = Tape::new();
            let v = tape.watch(&t);
            let f = tape.sum(&tape.tanh(&v).unwrap()).unwrap();
            let g = tape.sum(&tape.square(&v).unwrap()).unwrap();
            let loss = tape
                .add(&tape.scale(&f, wa).unwrap(), &tape.scale(&g, wb).unwrap())
                .unwrap();
            tape.backward(&loss).unwrap().wrt(&v).unwrap().to_vec()
        };
        let combined = grad_of(a, b);
        let (gf, gg) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0));
        for i in 0..6 {
            prop_assert!((combined[i] - (a * gf[i] + b * gg[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn deterministic(x in values(12), w in values(12)) {
        let run = || {
            let tape = Tape::new();
            let a = tape.watch(&leaf(&[3, 4], &x));
            let b = tape.watch(&leaf(&[4, 3], &w));
            let y = tape.sum(&tape.tanh(&tape.matmul(&a, &b).unwrap()).unwrap()).unwrap();
            let out = y.item();
            let g = tape.backward(&y).unwrap();
            (out, g.wrt(&a).unwrap().to_vec(), g.wrt(&b).unwrap().to_vec())
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn shape_and_usage_errors() {
    let tape = Tape::new();
    let a = Var::constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = Var::constant(vec![2, 3], vec![0.0; 6]).unwrap();
    assert!(matches!(
        tape.matmul(&a, &b),
        Err(aagc_core::Error::Shape(_))
    ));
    assert!(matches!(
        Tensor::new(vec![3], vec![1.0, 2.0], false),
        Err(aagc_core::Error::Shape(_))
    ));
    assert!(matches!(
        "transpose".parse::<Primitive>(),
        Err(aagc_core::Error::Usage(_))
    ));
    let x = Tensor::new(vec![2], vec![1.0, 2.0], true).unwrap();
    let tape = Tape::new();
    let v = tape.watch(&x);
    assert!(matches!(tape.backward(&v), Err(aagc_core::Error::Usage(_))));
}
