use aagc_core::data_synth::{
    dataset_from_bytes, dataset_to_bytes, generate_dataset, generate_motion, normalize_to_root,
    synthesize_imu, GeneratorConfig, SequenceArray,
};
use aagc_core::evaluation::{angular_error, angular_error_frames, jerk, DIP_JOINTS};
use aagc_core::graph_layers::{
    cell_step, count_parameters, CellKind, CellParams, CellState, LayerDescriptor, StepOptions,
};
use aagc_core::model::{build_model, checkpoint_from_bytes, checkpoint_to_bytes, ModelConfig};
use aagc_core::rotation::{axis_angle, rotation_defect, Rot3, Vec3};
use aagc_core::skeleton::{
    build_skeleton, forward_kinematics, init_adjacency, mirror_imu_sequence, mirror_pose_sequence,
    normalized_tree_adjacency, MotionSequence, Region, SkeletalGraph,
};
use aagc_core::tensor::{Tape, Tensor, Var};
use aagc_core::training::{adam_step, clip_global_norm, global_norm, llw_mse_loss, OptimizerState};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rotation() -> impl Strategy<Value = Rot3> {
    (
        prop::array::uniform3(-1.0..1.0f64),
        -std::f64::consts::PI..std::f64::consts::PI,
    )
        .prop_filter("nonzero axis", |(a, _)| Vec3::from(*a).norm() > 1e-3)
        .prop_map(|(a, angle)| axis_angle(&Vec3::from(a), angle))
}

fn short_motion(seed: u64) -> MotionSequence {
    let cfg = GeneratorConfig {
        duration: 0.5,
        seed,
        ..Default::default()
    };
    generate_motion(&cfg, &build_skeleton()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn adjacency_rows_complement_distances(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 + (seed % 6) as usize;
        let pos: Vec<Vec3> = (0..n)
            .map(|_| Vec3::new(rand::Rng::random_range(&mut rng, -1.0..1.0), rand::Rng::random_range(&mut rng, -1.0..1.0), 0.0))
            .collect();
        let parent = (0..n).map(|j| j.checked_sub(1)).collect();
        let g = SkeletalGraph::new(parent, pos.clone(), vec![Region::Torso; n], vec![], (0..n).collect()).unwrap();
        let a = init_adjacency(&g).unwrap();
        for i in 0..n {
            let total: f64 = (0..n).map(|j| (pos[i] - pos[j]).norm()).sum();
            for j in 0..n {
                let d = (pos[i] - pos[j]).norm();
                prop_assert!((a.get(i, j) + d / total - 1.0).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn mirror_keeps_rotations_and_is_involutive(seed in any::<u64>()) {
        let g = build_skeleton();
        let m = short_motion(seed);
        let once = mirror_pose_sequence(&m, &g).unwrap();
        for r in &once.rotations {
            prop_assert!(rotation_defect(r) < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(mirror_pose_sequence(&once, &g).unwrap(), m);
    }

    #[test]
    fn mirror_commutes_with_synthesis(seed in any::<u64>()) {
        let g = build_skeleton();
        let m = short_motion(seed);
        let a = synthesize_imu(&mirror_pose_sequence(&m, &g).unwrap(), &g).unwrap();
        let b = mirror_imu_sequence(&synthesize_imu(&m, &g).unwrap(), &g).unwrap();
        prop_assert_eq!(&a.sensors, &b.sensors);
        for (x, y) in a.orientations.iter().zip(&b.orientations) {
            prop_assert!((x - y).abs().max() <= 1e-9);
        }
        for (x, y) in a.accelerations.iter().zip(&b.accelerations) {
            prop_assert!((x - y).abs().max() <= 1e-9);
        }
    }

    #[test]
    fn non_sensor_rows_are_zero(seed in any::<u64>()) {
        let g = build_skeleton();
        let x = normalize_to_root(&synthesize_imu(&short_motion(seed), &g).unwrap(), 15).unwrap();
        for t in 0..x.frames {
            for j in (0..15).filter(|j| !g.sensor_nodes.contains(j)) {
                prop_assert!(x.row(t, j).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn fk_is_rigid_and_deterministic(rots in prop::collection::vec(rotation(), 30)) {
        let g = build_skeleton();
        let m = MotionSequence::new(60.0, 15, rots).unwrap();
        let p = forward_kinematics(&m, &g).unwrap();
        prop_assert_eq!(&p, &forward_kinematics(&m, &g).unwrap());
        for t in 0..2 {
            for j in 0..15 {
                if let Some(par) = g.parent[j] {
                    let len = (p.get(t, j) - p.get(t, par)).norm();
                    prop_assert!((len - g.bone_length(j)).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn angular_error_symmetric_and_triangle(a in rotation(), b in rotation(), c in rotation()) {
        let ab = angular_error(&a, &b).unwrap();
        prop_assert!((ab - angular_error(&b, &a).unwrap()).abs() <= 1e-12);
        let ac = angular_error(&a, &c).unwrap();
        let bc = angular_error(&b, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
        prop_assert!((0.0..=180.0).contains(&ab));
    }

    #[test]
    fn dip_is_subset_of_angular_error(wrong in prop::collection::vec(rotation(), 4)) {
        let truth = MotionSequence::new(60.0, 15, vec![Rot3::identity(); 15]).unwrap();
        let mut rots = truth.rotations.clone();
        for (k, &j) in DIP_JOINTS.iter().enumerate() {
            rots[j] = wrong[k];
        }
        let pred = MotionSequence::new(60.0, 15, rots).unwrap();
        let dip = angular_error_frames(&pred, &truth, &DIP_JOINTS).unwrap()[0];
        let all: Vec<usize> = (0..15).collect();
        let ang = angular_error_frames(&pred, &truth, &all).unwrap()[0];
        prop_assert!((dip * 4.0 / 15.0 - ang).abs() <= 1e-9);
    }

    #[test]
    fn cubic_jerk_is_exact(c in prop::array::uniform4(-2.0..2.0f64), dt in 0.01..1.0f64) {
        let p: Vec<Vec3> = (0..12)
            .map(|k| {
                let t = k as f64 * dt;
                Vec3::new(c[0] + c[1] * t + c[2] * t * t + c[3] * t * t * t, 0.0, 0.0)
            })
            .collect();
        let scale = p.iter().map(|v| v.x.abs()).fold(1.0, f64::max) / dt.powi(3);
        for j in jerk(&p, dt).unwrap() {
            prop_assert!((j.x - 6.0 * c[3]).abs() <= 1e-9 * scale.max(1.0));
        }
    }

    #[test]
    fn constant_track_has_zero_jerk(x in prop::array::uniform3(-5.0..5.0f64), dt in 0.001..1.0f64) {
        let p = vec![Vec3::new(x[0], x[1], x[2]); 9];
        prop_assert!(jerk(&p, dt).unwrap().iter().all(|j| *j == Vec3::zeros()));
    }

    #[test]
    fn llw_ordering(r in 0.01..3.0f64) {
        let w = build_skeleton().llw_weights();
        let zero = SequenceArray::zeros(1, 15, 9);
        let only = |j: usize| {
            let mut p = zero.clone();
            p.data[j * 9..j * 9 + 9].iter_mut().for_each(|v| *v = r);
            llw_mse_loss(&p, &zero, &w).unwrap()
        };
        prop_assert_eq!(only(0), 4.0 * only(2));
        prop_assert_eq!(only(3), 2.0 * only(11));
        let mut all = zero.clone();
        all.data.iter_mut().for_each(|v| *v = r);
        let unweighted = llw_mse_loss(&all, &zero, &[1.0; 15]).unwrap();
        prop_assert!((unweighted - 15.0 * 9.0 * r * r).abs() <= 1e-12 * unweighted);
    }

    #[test]
    fn clipped_norm_bounded(g in prop::collection::vec(prop::collection::vec(-50.0..50.0f64, 1..20), 1..6)) {
        let mut g = g;
        clip_global_norm(&mut g, 1.0);
        prop_assert!(global_norm(&g) <= 1.0 + 1e-12);
    }

    #[test]
    fn adam_first_step_opposes_gradient(g in prop_oneof![-10.0..-1e-6f64, 1e-6..10.0f64]) {
        let mut p = Tensor::new(vec![1], vec![0.5], true).unwrap();
        let mut st = OptimizerState::new(&[1]);
        adam_step(&mut [&mut p], &[vec![g]], &mut st, 0.001).unwrap();
        prop_assert_eq!((p.data[0] - 0.5).signum(), -g.signum());
    }

    #[test]
    fn gates_bounded(seed in any::<u64>(), scale in 0.1..20.0f64) {
        let g = SkeletalGraph::chain(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = CellParams::new(
            CellKind::AagcLstm,
            &init_adjacency(&g).unwrap(),
            &normalized_tree_adjacency(&g),
            3,
            5,
            &mut rng,
        );
        let tape = Tape::new();
        let bound = cell.map(&mut |t: &Tensor| tape.watch(t));
        let x = Var::constant(vec![4, 3], (0..12).map(|k| scale * ((k as f64) * 1.3).sin()).collect()).unwrap();
        let mut state = CellState::zeros(&[4, 3], 5);
        for _ in 0..5 {
            let (o, s) = cell_step(&tape, &x, &state, &bound, &StepOptions::default(), &mut rng).unwrap();
            prop_assert!(s.hidden.data().iter().all(|h| h.abs() < 1.0));
            prop_assert!(o.data().iter().all(|v| v.abs() < 1.0));
            state = s;
        }
    }

    #[test]
    fn parameter_formulas_match_storage(n in 2usize..7, f_in in 1usize..6, h in 1usize..7, f_out in 1usize..5) {
        for kind in [CellKind::AagcLstm, CellKind::GcLstm, CellKind::GgruStyle] {
            let cfg = ModelConfig { joints: n, f_in, hidden: h, f_out, cell_kind: kind, ..Default::default() };
            let p = build_model(&cfg).unwrap();
            prop_assert_eq!(p.parameter_count(), cfg.parameter_count());
            let stored: usize = p.layers[0].forward.parameter_count();
            prop_assert_eq!(stored, count_parameters(LayerDescriptor::cell(kind, n, h, h)));
        }
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), kind in prop_oneof![Just(CellKind::AagcLstm), Just(CellKind::GcLstm), Just(CellKind::GgruStyle)]) {
        let cfg = ModelConfig { joints: 4, f_in: 3, hidden: 3, f_out: 9, cell_kind: kind, seed, ..Default::default() };
        let p = build_model(&cfg).unwrap();
        let bytes = checkpoint_to_bytes(&p, &cfg);
        let (q, cfg2) = checkpoint_from_bytes(&bytes).unwrap();
        prop_assert_eq!(&q, &p);
        prop_assert_eq!(checkpoint_to_bytes(&q, &cfg2), bytes);
    }
}

#[test]
fn generated_rotations_stay_valid() {
    let g = build_skeleton();
    let cfg = GeneratorConfig {
        duration: 11.2,
        seed: 7,
        ..Default::default()
    };
    // 672 frames × 15 joints > 10⁴ rotations.
    let m = generate_motion(&cfg, &g).unwrap();
    assert!(m.rotations.len() >= 10_000);
    let worst = m.rotations.iter().map(rotation_defect).fold(0.0, f64::max);
    assert!(worst < 1e-9, "worst defect {worst}");
}

#[test]
fn dataset_bytes_round_trip() {
    let g = build_skeleton();
    let cfg = GeneratorConfig {
        duration: 0.3,
        seed: 3,
        ..Default::default()
    };
    let ds = generate_dataset(&cfg, 3, &g).unwrap();
    let bytes = dataset_to_bytes(&ds).unwrap();
    let back = dataset_from_bytes(&bytes).unwrap();
    // Generator metadata is not part of the file format.
    let mut stripped = ds.clone();
    stripped.iter_mut().for_each(|r| r.poses.metadata = None);
    assert_eq!(back, stripped);
    assert_eq!(dataset_to_bytes(&back).unwrap(), bytes);
}

/// Over-smoothing diagnostic: across-node spread of `H_t` after 200 steps on a
/// constant input, fixed versus learnable adjacency with identical weights.
#[test]
fn over_smoothing_diagnostic() {
    let g = build_skeleton();
    let learned = init_adjacency(&g).unwrap();
    let fixed = normalized_tree_adjacency(&g);
    let (f_in, f_h) = (12, 16);
    let spread = |kind: CellKind| {
        let cell = CellParams::new(
            kind,
            &learned,
            &fixed,
            f_in,
            f_h,
            &mut ChaCha8Rng::seed_from_u64(5),
        );
        let tape = Tape::new();
        let bound = cell.map(&mut |t: &Tensor| tape.watch(t));
        let x = Var::constant(
            vec![15, f_in],
            (0..15 * f_in)
                .map(|k| ((k * 7 % 11) as f64 - 5.0) / 5.0)
                .collect(),
        )
        .unwrap();
        let mut state = CellState::zeros(&[15, f_in], f_h);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            state = cell_step(&tape, &x, &state, &bound, &StepOptions::default(), &mut rng)
                .unwrap()
                .1;
        }
        let h = state.hidden.data();
        let mut total = 0.0;
        for f in 0..f_h {
            let col: Vec<f64> = (0..15).map(|n| h[n * f_h + f]).collect();
            let mean = col.iter().sum::<f64>() / 15.0;
            total += (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 15.0).sqrt();
        }
        total / f_h as f64
    };
    let (gc, aagc) = (spread(CellKind::GcLstm), spread(CellKind::AagcLstm));
    println!("across-node std of H after 200 steps: gc_lstm {gc:.6}, aagc_lstm {aagc:.6}");
    assert!(gc.is_finite() && aagc.is_finite());
}
