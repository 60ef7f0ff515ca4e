//! Pose metrics: geodesic angular error, DIP error, position error, jerk error,
//! and per-region rotation spread.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_synth::{normalize_to_root, Record, SequenceArray};
use crate::error::{Error, Result};
use crate::model::{model_forward, project_sequence, ModelConfig, ModelParams};
use crate::rotation::{from_row_major, is_rotation, rotation_angle, Rot3};
use crate::skeleton::{forward_kinematics, MotionSequence, Region, SkeletalGraph, ROTATION_TOL};
use crate::training::Window;

/// Hips and shoulders.
pub const DIP_JOINTS: [usize; 4] = [0, 1, 11, 12];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n_frames: usize,
}

impl Stat {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            n_frames: n,
        }
    }
}

pub fn angular_error(pred: &Rot3, truth: &Rot3) -> Result<f64> {
    for (name, r) in [("prediction", pred), ("truth", truth)] {
        if !is_rotation(r, ROTATION_TOL) {
            return Err(Error::Validation(format!(
                "{name} is not a rotation matrix"
            )));
        }
    }
    // atan2 of the skew and trace parts equals the clamped arccos of the trace
    // but stays accurate near 0° and 180°.
    let m = pred.transpose() * truth;
    let c = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let skew = crate::rotation::Vec3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    Ok((skew.norm() / 2.0).atan2(c).to_degrees())
}

fn check_pair(pred: &MotionSequence, truth: &MotionSequence) -> Result<()> {
    if pred.joint_count != truth.joint_count || pred.frame_count() != truth.frame_count() {
        return Err(Error::Shape(format!(
            "prediction {}×{} vs truth {}×{}",
            pred.frame_count(),
            pred.joint_count,
            truth.frame_count(),
            truth.joint_count
        )));
    }
    Ok(())
}

/// Per-frame mean angular error over `joints`.
pub fn angular_error_frames(
    pred: &MotionSequence,
    truth: &MotionSequence,
    joints: &[usize],
) -> Result<Vec<f64>> {
    check_pair(pred, truth)?;
    if let Some(&j) = joints.iter().find(|&&j| j >= pred.joint_count) {
        return Err(Error::Validation(format!("joint {j} out of range")));
    }
    (0..pred.frame_count())
        .map(|t| {
            let mut s = 0.0;
            for &j in joints {
                s += angular_error(pred.rotation(t, j), truth.rotation(t, j))?;
            }
            Ok(s / joints.len() as f64)
        })
        .collect()
}

pub fn mean_angular_error(pred: &MotionSequence, truth: &MotionSequence) -> Result<Stat> {
    let all: Vec<usize> = (0..pred.joint_count).collect();
    Ok(Stat::of(&angular_error_frames(pred, truth, &all)?))
}

pub fn dip_error(pred: &MotionSequence, truth: &MotionSequence) -> Result<Stat> {
    if pred.joint_count != 15 {
        return Err(Error::Validation(format!(
            "DIP error needs 15 joints, got {}",
            pred.joint_count
        )));
    }
    Ok(Stat::of(&angular_error_frames(pred, truth, &DIP_JOINTS)?))
}

fn position_error_frames(
    pred: &MotionSequence,
    truth: &MotionSequence,
    graph: &SkeletalGraph,
) -> Result<Vec<f64>> {
    check_pair(pred, truth)?;
    let (p, q) = (
        forward_kinematics(pred, graph)?,
        forward_kinematics(truth, graph)?,
    );
    let n = pred.joint_count;
    Ok((0..pred.frame_count())
        .map(|t| {
            (0..n)
                .map(|j| (p.get(t, j) - q.get(t, j)).norm())
                .sum::<f64>()
                / n as f64
                * 100.0
        })
        .collect())
}

/// Mean joint distance after forward kinematics, in centimetres.
pub fn position_error(
    pred: &MotionSequence,
    truth: &MotionSequence,
    graph: &SkeletalGraph,
) -> Result<Stat> {
    Ok(Stat::of(&position_error_frames(pred, truth, graph)?))
}

/// Third backward difference of positions divided by `dt³`, one value per frame from index 3.
pub fn jerk(positions: &[crate::rotation::Vec3], dt: f64) -> Result<Vec<crate::rotation::Vec3>> {
    if positions.len() < 4 {
        return Err(Error::Usage(format!(
            "jerk needs at least 4 frames, got {}",
            positions.len()
        )));
    }
    Ok(positions
        .windows(4)
        .map(|w| {
            let (d1, d2, d3) = (w[1] - w[0], w[2] - w[1], w[3] - w[2]);
            ((d3 - d2) - (d2 - d1)) / (dt * dt * dt)
        })
        .collect())
}

fn jerk_error_frames(
    pred: &MotionSequence,
    truth: &MotionSequence,
    graph: &SkeletalGraph,
) -> Result<Vec<f64>> {
    check_pair(pred, truth)?;
    let frames = pred.frame_count();
    if frames < 4 {
        return Err(Error::Usage(format!(
            "jerk needs at least 4 frames, got {frames}"
        )));
    }
    let dt = 1.0 / truth.frame_rate;
    let (p, q) = (
        forward_kinematics(pred, graph)?,
        forward_kinematics(truth, graph)?,
    );
    let n = pred.joint_count;
    let mut sums = vec![0.0; frames - 3];
    for j in 0..n {
        let track = |fk: &crate::skeleton::JointPositions| -> Vec<_> {
            (0..frames).map(|t| *fk.get(t, j)).collect()
        };
        let jp = jerk(&track(&p), dt)?;
        let jq = jerk(&track(&q), dt)?;
        for (s, (a, b)) in sums.iter_mut().zip(jp.iter().zip(&jq)) {
            *s += (a - b).norm();
        }
    }
    Ok(sums.into_iter().map(|s| s / n as f64 / 1000.0).collect())
}

/// Jerk difference in km/s³; the first three frames have no value.
pub fn jerk_error(
    pred: &MotionSequence,
    truth: &MotionSequence,
    graph: &SkeletalGraph,
) -> Result<Stat> {
    Ok(Stat::of(&jerk_error_frames(pred, truth, graph)?))
}

/// Population standard deviation of unit-range rotation angles per region.
pub fn region_stddev(poses: &MotionSequence, graph: &SkeletalGraph) -> (f64, f64, f64) {
    let sd = |region: Region| {
        let joints = graph.region_joints(region);
        let vals: Vec<f64> = (0..poses.frame_count())
            .flat_map(|t| joints.iter().map(move |&j| (t, j)))
            .map(|(t, j)| rotation_angle(poses.rotation(t, j)) / std::f64::consts::PI)
            .collect();
        Stat::of(&vals).std
    };
    (sd(Region::Legs), sd(Region::Arms), sd(Region::Torso))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionErrors {
    pub legs: Stat,
    pub arms: Stat,
    pub torso: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dip_err_deg: Stat,
    pub ang_err_deg: Stat,
    pub pos_err_cm: Stat,
    pub jerk_err_km_s3: Stat,
    pub region_ang_err_deg: RegionErrors,
    pub sequences: usize,
    pub angular_metric: String,
    pub std_over: String,
    pub config_digest: String,
    pub checkpoint: Option<String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Raw `T × N × 9` outputs projected to a rotation sequence.
pub fn predictions_to_motion(raw: &SequenceArray, frame_rate: f64) -> Result<MotionSequence> {
    if raw.features != 9 {
        return Err(Error::Shape(format!(
            "expected 9 features, got {}",
            raw.features
        )));
    }
    MotionSequence::new(frame_rate, raw.joints, project_sequence(raw))
}

/// Targets stored as exact rotation entries, read back without projection.
pub fn targets_to_motion(target: &SequenceArray, frame_rate: f64) -> Result<MotionSequence> {
    MotionSequence::new(
        frame_rate,
        target.joints,
        target.data.chunks_exact(9).map(from_row_major).collect(),
    )
}

/// Pools per-frame metrics over all sequence pairs.
pub fn evaluate_predictions(
    preds: &[MotionSequence],
    truths: &[MotionSequence],
    graph: &SkeletalGraph,
) -> Result<MetricsReport> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::Usage(format!(
            "need matching nonempty prediction/truth lists, got {} and {}",
            preds.len(),
            truths.len()
        )));
    }
    let (mut dip, mut ang, mut pos, mut jrk) = (vec![], vec![], vec![], vec![]);
    let (mut legs, mut arms, mut torso) = (vec![], vec![], vec![]);
    let all: Vec<usize> = (0..graph.joint_count()).collect();
    for (p, t) in preds.iter().zip(truths) {
        if p.joint_count == 15 {
            dip.extend(angular_error_frames(p, t, &DIP_JOINTS)?);
        }
        ang.extend(angular_error_frames(p, t, &all)?);
        legs.extend(angular_error_frames(
            p,
            t,
            &graph.region_joints(Region::Legs),
        )?);
        arms.extend(angular_error_frames(
            p,
            t,
            &graph.region_joints(Region::Arms),
        )?);
        torso.extend(angular_error_frames(
            p,
            t,
            &graph.region_joints(Region::Torso),
        )?);
        pos.extend(position_error_frames(p, t, graph)?);
        jrk.extend(jerk_error_frames(p, t, graph)?);
    }
    Ok(MetricsReport {
        dip_err_deg: Stat::of(&dip),
        ang_err_deg: Stat::of(&ang),
        pos_err_cm: Stat::of(&pos),
        jerk_err_km_s3: Stat::of(&jrk),
        region_ang_err_deg: RegionErrors {
            legs: Stat::of(&legs),
            arms: Stat::of(&arms),
            torso: Stat::of(&torso),
        },
        sequences: preds.len(),
        angular_metric: "geodesic".into(),
        std_over: "frames".into(),
        config_digest: String::new(),
        checkpoint: None,
    })
}

/// Full-sequence inference on every record, then all metrics.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    dataset: &[Record],
    graph: &SkeletalGraph,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Usage("evaluation dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut preds = Vec::with_capacity(dataset.len());
    let mut truths = Vec::with_capacity(dataset.len());
    for r in dataset {
        let x = normalize_to_root(&r.imu, config.joints)?;
        let raw = model_forward(params, config, &x, false, &mut rng)?;
        preds.push(predictions_to_motion(&raw, r.poses.frame_rate)?);
        truths.push(r.poses.clone());
    }
    let mut report = evaluate_predictions(&preds, &truths, graph)?;
    report.config_digest = config.digest();
    Ok(report)
}

/// Metrics over training windows (used for validation splits).
pub fn evaluate_windows(
    params: &ModelParams,
    config: &ModelConfig,
    windows: &[Window],
    graph: &SkeletalGraph,
    frame_rate: f64,
) -> Result<MetricsReport> {
    if windows.is_empty() {
        return Err(Error::Usage("no windows to evaluate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut preds = Vec::with_capacity(windows.len());
    let mut truths = Vec::with_capacity(windows.len());
    for w in windows {
        let raw = model_forward(params, config, &w.input, false, &mut rng)?;
        preds.push(predictions_to_motion(&raw, frame_rate)?);
        truths.push(targets_to_motion(&w.target, frame_rate)?);
    }
    let mut report = evaluate_predictions(&preds, &truths, graph)?;
    report.config_digest = config.digest();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::{axis_angle, Vec3};
    use crate::skeleton::build_skeleton;

    fn still(frames: usize) -> MotionSequence {
        MotionSequence::new(60.0, 15, vec![Rot3::identity(); frames * 15]).unwrap()
    }

    #[test]
    fn angular_cases() {
        let i = Rot3::identity();
        assert_eq!(angular_error(&i, &i).unwrap(), 0.0);
        let r = axis_angle(&Vec3::new(1.0, 2.0, -0.5), std::f64::consts::FRAC_PI_2);
        assert!((angular_error(&r, &i).unwrap() - 90.0).abs() < 1e-9);
        let r = axis_angle(&Vec3::z(), std::f64::consts::PI);
        assert!((angular_error(&r, &i).unwrap() - 180.0).abs() < 1e-9);
        assert!(matches!(
            angular_error(&(i * 2.0), &i),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn dip_subset() {
        let truth = still(3);
        let mut rots = truth.rotations.clone();
        rots[0] = axis_angle(&Vec3::x(), std::f64::consts::FRAC_PI_2);
        let pred = MotionSequence::new(60.0, 15, rots).unwrap();
        let s = dip_error(&pred, &truth).unwrap();
        let f = angular_error_frames(&pred, &truth, &DIP_JOINTS).unwrap();
        assert!((f[0] - 22.5).abs() < 1e-9);
        assert_eq!((f[1], f[2]), (0.0, 0.0));
        assert_eq!(s.n_frames, 3);
        let mut rots = truth.rotations.clone();
        rots[5] = axis_angle(&Vec3::x(), 1.0);
        let pred = MotionSequence::new(60.0, 15, rots).unwrap();
        assert_eq!(dip_error(&pred, &truth).unwrap().mean, 0.0);
    }

    #[test]
    fn jerk_cases() {
        let cubic: Vec<Vec3> = (0..8)
            .map(|t| Vec3::new((t as f64).powi(3), 0.0, 0.0))
            .collect();
        for j in jerk(&cubic, 1.0).unwrap() {
            assert_eq!(j, Vec3::new(6.0, 0.0, 0.0));
        }
        let linear: Vec<Vec3> = (0..6)
            .map(|t| Vec3::new(0.5 * t as f64, -1.0, 2.0))
            .collect();
        assert!(jerk(&linear, 1.0).unwrap().iter().all(|j| j.norm() == 0.0));
        assert!(matches!(jerk(&cubic[..3], 1.0), Err(Error::Usage(_))));
        let g = build_skeleton();
        let s = jerk_error(&still(10), &still(10), &g).unwrap();
        assert_eq!((s.mean, s.n_frames), (0.0, 7));
    }

    #[test]
    fn region_spread() {
        let g = build_skeleton();
        assert_eq!(region_stddev(&still(4), &g), (0.0, 0.0, 0.0));
        let mut rots = still(4).rotations;
        for t in (1..4).step_by(2) {
            for j in g.region_joints(Region::Legs) {
                rots[t * 15 + j] = axis_angle(&Vec3::x(), std::f64::consts::PI);
            }
        }
        let m = MotionSequence::new(60.0, 15, rots).unwrap();
        let (l, a, t) = region_stddev(&m, &g);
        assert!((l - 0.5).abs() < 1e-12);
        assert_eq!((a, t), (0.0, 0.0));
    }

    #[test]
    fn stat_is_population() {
        let s = Stat::of(&[0.0, 1.0]);
        assert_eq!((s.mean, s.std, s.n_frames), (0.5, 0.5, 2));
    }
}
