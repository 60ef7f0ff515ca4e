mod common;

use aagc_core::graph_layers::CellKind;

#[test]
fn every_learnable_matches_finite_differences() {
    for kind in [CellKind::AagcLstm, CellKind::GcLstm, CellKind::GgruStyle] {
        let r = common::gradcheck_model(kind, 5);
        println!(
            "{kind:?}: {} entries, max relative error {:.3e}",
            r.entries, r.max_rel_err
        );
        assert!(r.max_rel_err < 1e-5, "{kind:?}: {}", r.max_rel_err);
    }
}

#[test]
fn adjacency_gradients_are_nonzero() {
    use aagc_core::data_synth::SequenceArray;
    use aagc_core::model::{build_model, forward_frames, frames_of};
    use aagc_core::tensor::Tape;
    use rand::SeedableRng;

    let cfg = common::tiny_config(CellKind::AagcLstm);
    let params = build_model(&cfg).unwrap();
    let mut x = SequenceArray::zeros(4, 4, 3);
    x.data
        .iter_mut()
        .enumerate()
        .for_each(|(k, v)| *v = ((k * 5 % 7) as f64 - 3.0) / 3.0);
    let tape = Tape::new();
    let net = params.bind(&tape);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let out = forward_frames(&tape, &net, &cfg, &frames_of(&x), false, &mut rng).unwrap();
    let mut total = tape.sum(&out[0]).unwrap();
    for o in &out[1..] {
        total = tape
            .add(&total, &tape.sum(&tape.square(o).unwrap()).unwrap())
            .unwrap();
    }
    let g = tape.backward(&total).unwrap();
    let mut adjacencies = 0;
    for v in net.learnables() {
        if v.shape() == [4, 4] {
            adjacencies += 1;
            assert!(g.wrt(v).unwrap().iter().any(|d| d.abs() > 1e-12));
        }
    }
    // Input, output, and four gates in each of the four cells.
    assert_eq!(adjacencies, 2 + 4 * 4);
}
