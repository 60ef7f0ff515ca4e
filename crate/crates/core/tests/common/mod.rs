#![allow(dead_code)]

use aagc_core::data_synth::SequenceArray;
use aagc_core::graph_layers::CellKind;
use aagc_core::model::{build_model, forward_frames, frames_of, ModelConfig, ModelParams};
use aagc_core::tensor::Tape;
use aagc_core::training::llw_loss_frames;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct GradCheck {
    pub max_rel_err: f64,
    pub entries: usize,
    pub adjacency_entries: usize,
}

pub fn tiny_config(kind: CellKind) -> ModelConfig {
    ModelConfig {
        joints: 4,
        f_in: 3,
        hidden: 8,
        f_out: 9,
        cell_kind: kind,
        seed: 21,
        ..Default::default()
    }
}

fn loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    x: &SequenceArray,
    y: &SequenceArray,
    w: &[f64],
) -> f64 {
    let tape = Tape::new();
    let net = params.constants();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = forward_frames(&tape, &net, cfg, &frames_of(x), false, &mut rng).unwrap();
    llw_loss_frames(&tape, &out, &frames_of(y), w)
        .unwrap()
        .item()
}

/// Central differences (step 1e-6) against the tape gradient for every stored learnable.
pub fn gradcheck_model(kind: CellKind, frames: usize) -> GradCheck {
    let cfg = tiny_config(kind);
    let params = build_model(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut x = SequenceArray::zeros(frames, cfg.joints, cfg.f_in);
    x.data
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-1.0..1.0));
    let mut y = SequenceArray::zeros(frames, cfg.joints, cfg.f_out);
    y.data
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-1.0..1.0));
    let w = [1.0, 0.5, 0.25, 0.5];

    let tape = Tape::new();
    let net = params.bind(&tape);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
    let out = forward_frames(&tape, &net, &cfg, &frames_of(&x), false, &mut drop_rng).unwrap();
    let l = llw_loss_frames(&tape, &out, &frames_of(&y), &w).unwrap();
    let grads = tape.backward(&l).unwrap();
    let analytic: Vec<Vec<f64>> = net
        .learnables()
        .iter()
        .map(|v| grads.wrt(v).expect("every learnable is tracked").to_vec())
        .collect();

    let h = 1e-6;
    let mut report = GradCheck {
        max_rel_err: 0.0,
        entries: 0,
        adjacency_entries: 0,
    };
    let n_tensors = analytic.len();
    for k in 0..n_tensors {
        let is_adjacency = params.learnables()[k].shape == [cfg.joints, cfg.joints];
        for i in 0..analytic[k].len() {
            let mut plus = params.clone();
            plus.learnables_mut()[k].data[i] += h;
            let mut minus = params.clone();
            minus.learnables_mut()[k].data[i] -= h;
            let numeric =
                (loss(&plus, &cfg, &x, &y, &w) - loss(&minus, &cfg, &x, &y, &w)) / (2.0 * h);
            let a = analytic[k][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.entries += 1;
            if is_adjacency {
                report.adjacency_entries += 1;
            }
        }
    }
    report
}
