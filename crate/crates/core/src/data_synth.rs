//! Procedural ground-truth motion, virtual IMU synthesis, root normalization,
//! contralateral augmentation and the `GPD1` dataset format.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::{axis_angle, from_row_major, is_rotation, to_row_major, Rot3, Vec3};
use crate::skeleton::{
    forward_kinematics, mirror_imu_sequence, mirror_pose_sequence, MotionMetadata, MotionSequence,
    Region, SkeletalGraph, ROTATION_TOL,
};
use crate::util::{sha256_hex, split_seed};

pub const DEFAULT_FRAME_RATE: f64 = 60.0;
/// Per-node input width: 9 orientation entries plus 3 acceleration components.
pub const INPUT_FEATURES: usize = 12;
/// Per-node target width: a row-major 3×3 rotation.
pub const POSE_FEATURES: usize = 9;

pub const DATASET_MAGIC: &[u8; 4] = b"GPD1";
pub const DATASET_VERSION: u32 = 1;
const ROOT_ID: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SensorChannel {
    Joint(usize),
    /// The pelvis sensor used only for normalization.
    Root,
}

impl SensorChannel {
    fn to_id(self) -> u32 {
        match self {
            SensorChannel::Joint(j) => j as u32,
            SensorChannel::Root => ROOT_ID,
        }
    }

    fn from_id(id: u32) -> Self {
        if id == ROOT_ID {
            SensorChannel::Root
        } else {
            SensorChannel::Joint(id as usize)
        }
    }
}

/// Per-frame orientation and acceleration for each sensor channel, frame-major (`t * S + s`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImuSequence {
    pub frame_rate: f64,
    pub sensors: Vec<SensorChannel>,
    pub orientations: Vec<Rot3>,
    pub accelerations: Vec<Vec3>,
}

impl ImuSequence {
    pub fn frame_count(&self) -> usize {
        if self.sensors.is_empty() {
            0
        } else {
            self.orientations.len() / self.sensors.len()
        }
    }

    pub fn channel(&self, c: SensorChannel) -> Option<usize> {
        self.sensors.iter().position(|&s| s == c)
    }

    pub fn validate_layout(&self) -> Result<()> {
        let s = self.sensors.len();
        if s == 0
            || self.orientations.len() % s != 0
            || self.orientations.len() != self.accelerations.len()
        {
            return Err(Error::Validation("inconsistent IMU block sizes".into()));
        }
        for (k, r) in self.orientations.iter().enumerate() {
            if !is_rotation(r, ROTATION_TOL) {
                return Err(Error::Validation(format!(
                    "IMU frame {} channel {} orientation is not a rotation",
                    k / s,
                    k % s
                )));
            }
        }
        Ok(())
    }
}

/// A `T × N × F` block, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceArray {
    pub frames: usize,
    pub joints: usize,
    pub features: usize,
    pub data: Vec<f64>,
}

impl SequenceArray {
    pub fn zeros(frames: usize, joints: usize, features: usize) -> Self {
        Self {
            frames,
            joints,
            features,
            data: vec![0.0; frames * joints * features],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.joints * self.features
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.frame_len();
        &self.data[t * w..(t + 1) * w]
    }

    pub fn row(&self, t: usize, j: usize) -> &[f64] {
        let start = (t * self.joints + j) * self.features;
        &self.data[start..start + self.features]
    }

    pub fn slice(&self, start: usize, len: usize) -> SequenceArray {
        let w = self.frame_len();
        SequenceArray {
            frames: len,
            joints: self.joints,
            features: self.features,
            data: self.data[start * w..(start + len) * w].to_vec(),
        }
    }
}

/// Maximum swing per body region, radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub legs: f64,
    pub arms: f64,
    pub torso: f64,
}

impl JointLimits {
    pub fn for_region(&self, r: Region) -> f64 {
        match r {
            Region::Legs => self.legs,
            Region::Arms => self.arms,
            Region::Torso => self.torso,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Sequence length in seconds.
    pub duration: f64,
    pub frame_rate: f64,
    pub seed: u64,
    /// Sampled amplitude as a fraction of the region's joint limit.
    pub amplitude_fraction: (f64, f64),
    /// Hz.
    pub frequency_range: (f64, f64),
    pub joint_limits: JointLimits,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            duration: 10.0,
            frame_rate: DEFAULT_FRAME_RATE,
            seed: 0,
            amplitude_fraction: (0.2, 1.0),
            frequency_range: (0.2, 1.5),
            joint_limits: JointLimits {
                legs: 1.0,
                arms: 1.4,
                torso: 0.35,
            },
        }
    }
}

pub const MAX_FREQUENCY_HZ: f64 = 5.0;

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return bad(format!(
                "frame rate must be positive, got {}",
                self.frame_rate
            ));
        }
        let (f0, f1) = self.frequency_range;
        if !(0.0 <= f0 && f0 <= f1 && f1 <= MAX_FREQUENCY_HZ) {
            return bad(format!(
                "frequency range ({f0}, {f1}) must lie within [0, {MAX_FREQUENCY_HZ}] Hz"
            ));
        }
        let (a0, a1) = self.amplitude_fraction;
        if !(0.0 <= a0 && a0 <= a1 && a1 <= 1.0) {
            return bad(format!(
                "amplitude fraction ({a0}, {a1}) must lie within [0, 1]"
            ));
        }
        let l = self.joint_limits;
        if [l.legs, l.arms, l.torso]
            .iter()
            .any(|v| !(*v >= 0.0 && *v <= std::f64::consts::PI))
        {
            return bad("joint limits must lie within [0, π]".into());
        }
        if self.frame_count() == 0 {
            return bad("duration yields zero frames".into());
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.frame_rate).round() as usize
    }

    pub fn digest(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

/// Sinusoidal swing `θ(t) = A sin(2π f t + φ)` about a fixed local axis.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTrajectory {
    pub axis: Vec3,
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl JointTrajectory {
    pub fn still() -> Self {
        Self {
            axis: Vec3::x(),
            amplitude: 0.0,
            frequency: 0.0,
            phase: 0.0,
        }
    }

    pub fn angle_at(&self, seconds: f64) -> f64 {
        self.amplitude * (2.0 * std::f64::consts::PI * self.frequency * seconds + self.phase).sin()
    }
}

fn random_axis(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn sample_trajectories(
    config: &GeneratorConfig,
    graph: &SkeletalGraph,
) -> Vec<JointTrajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    graph
        .region
        .iter()
        .map(|&region| {
            let axis = random_axis(&mut rng);
            let limit = config.joint_limits.for_region(region);
            JointTrajectory {
                axis,
                amplitude: limit * sample_range(&mut rng, config.amplitude_fraction),
                frequency: sample_range(&mut rng, config.frequency_range),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect()
}

/// Composes local swings along the kinematic chain into global rotations.
pub fn motion_from_trajectories(
    graph: &SkeletalGraph,
    trajectories: &[JointTrajectory],
    frame_rate: f64,
    frames: usize,
) -> Result<MotionSequence> {
    let n = graph.joint_count();
    if trajectories.len() != n {
        return Err(Error::Config(format!(
            "{} trajectories for {n} joints",
            trajectories.len()
        )));
    }
    let mut rotations = Vec::with_capacity(frames * n);
    for t in 0..frames {
        let seconds = t as f64 / frame_rate;
        let base = rotations.len();
        for (j, traj) in trajectories.iter().enumerate() {
            let local = axis_angle(&traj.axis, traj.angle_at(seconds));
            let global = match graph.parent[j] {
                None => local,
                Some(p) => rotations[base + p] * local,
            };
            rotations.push(global);
        }
    }
    MotionSequence::new(frame_rate, n, rotations)
}

pub fn generate_motion(config: &GeneratorConfig, graph: &SkeletalGraph) -> Result<MotionSequence> {
    config.validate()?;
    let trajectories = sample_trajectories(config, graph);
    let mut motion = motion_from_trajectories(
        graph,
        &trajectories,
        config.frame_rate,
        config.frame_count(),
    )?;
    motion.metadata = Some(MotionMetadata {
        seed: config.seed,
        config_digest: config.digest(),
    });
    Ok(motion)
}

/// Virtual sensors: orientation is the joint's global rotation, acceleration the
/// central second difference of its position. Endpoint frames copy their
/// nearest interior neighbour. The root channel is identity / zero.
pub fn synthesize_imu(poses: &MotionSequence, graph: &SkeletalGraph) -> Result<ImuSequence> {
    let frames = poses.frame_count();
    if frames < 3 {
        return Err(Error::Usage(format!(
            "IMU synthesis needs at least 3 frames, got {frames}"
        )));
    }
    let positions = forward_kinematics(poses, graph)?;
    let dt2 = (1.0 / poses.frame_rate).powi(2);
    let mut sensors: Vec<SensorChannel> = graph
        .sensor_nodes
        .iter()
        .map(|&j| SensorChannel::Joint(j))
        .collect();
    sensors.push(SensorChannel::Root);

    let accel = |t: usize, j: usize| -> Vec3 {
        let t = t.clamp(1, frames - 2);
        (positions.get(t + 1, j) - 2.0 * positions.get(t, j) + positions.get(t - 1, j)) / dt2
    };
    let mut orientations = Vec::with_capacity(frames * sensors.len());
    let mut accelerations = Vec::with_capacity(frames * sensors.len());
    for t in 0..frames {
        for &j in &graph.sensor_nodes {
            orientations.push(*poses.rotation(t, j));
            accelerations.push(accel(t, j));
        }
        orientations.push(Rot3::identity());
        accelerations.push(Vec3::zeros());
    }
    Ok(ImuSequence {
        frame_rate: poses.frame_rate,
        sensors,
        orientations,
        accelerations,
    })
}

/// Expresses every sensor in the root frame and lays the result out as a
/// `T × N × 12` graph signal; nodes without a sensor stay zero.
pub fn normalize_to_root(imu: &ImuSequence, joint_count: usize) -> Result<SequenceArray> {
    let root = imu
        .channel(SensorChannel::Root)
        .ok_or_else(|| Error::Validation("IMU sequence has no root channel".into()))?;
    let s = imu.sensors.len();
    let frames = imu.frame_count();
    let mut out = SequenceArray::zeros(frames, joint_count, INPUT_FEATURES);
    for t in 0..frames {
        let r_root_t = imu.orientations[t * s + root].transpose();
        let a_root = imu.accelerations[t * s + root];
        for (k, c) in imu.sensors.iter().enumerate() {
            let SensorChannel::Joint(j) = *c else {
                continue;
            };
            if j >= joint_count {
                return Err(Error::Validation(format!(
                    "sensor joint {j} outside graph of {joint_count}"
                )));
            }
            let r = r_root_t * imu.orientations[t * s + k];
            let a = r_root_t * (imu.accelerations[t * s + k] - a_root);
            let start = (t * joint_count + j) * INPUT_FEATURES;
            let row = &mut out.data[start..start + INPUT_FEATURES];
            row[..9].copy_from_slice(&to_row_major(&r));
            row[9..].copy_from_slice(a.as_slice());
        }
    }
    Ok(out)
}

/// Ground-truth targets as a `T × N × 9` block.
pub fn pose_targets(poses: &MotionSequence) -> SequenceArray {
    let mut data = Vec::with_capacity(poses.rotations.len() * POSE_FEATURES);
    for r in &poses.rotations {
        data.extend_from_slice(&to_row_major(r));
    }
    SequenceArray {
        frames: poses.frame_count(),
        joints: poses.joint_count,
        features: POSE_FEATURES,
        data,
    }
}

/// One paired ground-truth / sensor sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub poses: MotionSequence,
    pub imu: ImuSequence,
}

impl Record {
    pub fn synthesize(poses: MotionSequence, graph: &SkeletalGraph) -> Result<Self> {
        let imu = synthesize_imu(&poses, graph)?;
        Ok(Self { poses, imu })
    }

    pub fn mirrored(&self, graph: &SkeletalGraph) -> Result<Self> {
        Ok(Self {
            poses: mirror_pose_sequence(&self.poses, graph)?,
            imu: mirror_imu_sequence(&self.imu, graph)?,
        })
    }
}

/// Generates `count` sequences whose seeds derive from `(master_seed, index)`.
pub fn generate_dataset(
    base: &GeneratorConfig,
    count: usize,
    graph: &SkeletalGraph,
) -> Result<Vec<Record>> {
    base.validate()?;
    (0..count)
        .map(|i| {
            let config = GeneratorConfig {
                seed: split_seed(base.seed, i as u64),
                ..base.clone()
            };
            Record::synthesize(generate_motion(&config, graph)?, graph)
        })
        .collect()
}

/// Originals followed by their mirrored copies.
pub fn augment_with_cda(dataset: &[Record], graph: &SkeletalGraph) -> Result<Vec<Record>> {
    let mut out = dataset.to_vec();
    for r in dataset {
        out.push(r.mirrored(graph)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// GPD1 files
// ---------------------------------------------------------------------------

pub fn dataset_to_bytes(records: &[Record]) -> Result<Vec<u8>> {
    if let Some(first) = records.first() {
        for (i, r) in records.iter().enumerate() {
            if r.poses.joint_count != first.poses.joint_count
                || r.poses.frame_rate != first.poses.frame_rate
            {
                return Err(Error::Validation(format!(
                    "record {i}: joint count / frame rate differ from record 0"
                )));
            }
            if r.imu.frame_count() != r.poses.frame_count()
                || r.imu.frame_rate != r.poses.frame_rate
            {
                return Err(Error::Validation(format!(
                    "record {i}: IMU and pose sequences are not aligned"
                )));
            }
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let p = &r.poses;
        buf.extend_from_slice(&(p.frame_count() as u32).to_le_bytes());
        buf.extend_from_slice(&(p.joint_count as u32).to_le_bytes());
        buf.extend_from_slice(&p.frame_rate.to_le_bytes());
        for rot in &p.rotations {
            for v in to_row_major(rot) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&(r.imu.sensors.len() as u32).to_le_bytes());
        for s in &r.imu.sensors {
            buf.extend_from_slice(&s.to_id().to_le_bytes());
        }
        for (rot, acc) in r.imu.orientations.iter().zip(&r.imu.accelerations) {
            for v in to_row_major(rot).iter().chain(acc.iter()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Integrity(format!(
                "{what}: needs {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Integrity(format!("{what}: size overflow")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut rd = Reader { bytes, pos: 0 };
    let magic = rd
        .take(4, "header")
        .map_err(|_| Error::Format("file too short for GPD1 header".into()))?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format("bad magic, expected GPD1".into()));
    }
    let version = rd.u32("header")?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}, expected {DATASET_VERSION}"
        )));
    }
    let count = rd.u32("header")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let ctx = format!("record {i}");
        let frames = rd.u32(&ctx)? as usize;
        let joints = rd.u32(&ctx)? as usize;
        let frame_rate = f64::from_le_bytes(rd.take(8, &ctx)?.try_into().unwrap());
        let pose_vals = rd.f64s(
            frames
                .checked_mul(joints)
                .and_then(|v| v.checked_mul(9))
                .ok_or_else(|| Error::Integrity(format!("{ctx}: size overflow")))?,
            &ctx,
        )?;
        let sensor_count = rd.u32(&ctx)? as usize;
        let mut sensors = Vec::with_capacity(sensor_count.min(1024));
        for _ in 0..sensor_count {
            sensors.push(SensorChannel::from_id(rd.u32(&ctx)?));
        }
        let imu_vals = rd.f64s(
            frames
                .checked_mul(sensor_count)
                .and_then(|v| v.checked_mul(12))
                .ok_or_else(|| Error::Integrity(format!("{ctx}: size overflow")))?,
            &ctx,
        )?;
        let poses = MotionSequence::new(
            frame_rate,
            joints,
            pose_vals.chunks_exact(9).map(from_row_major).collect(),
        )
        .and_then(|p| p.validate().map(|_| p))
        .map_err(|e| Error::Format(format!("{ctx}: {e}")))?;
        let imu = ImuSequence {
            frame_rate,
            sensors,
            orientations: imu_vals
                .chunks_exact(12)
                .map(|c| from_row_major(&c[..9]))
                .collect(),
            accelerations: imu_vals
                .chunks_exact(12)
                .map(|c| Vec3::new(c[9], c[10], c[11]))
                .collect(),
        };
        imu.validate_layout()
            .map_err(|e| Error::Format(format!("{ctx}: {e}")))?;
        if let Some(first) = records.first() {
            let first: &Record = first;
            if first.poses.joint_count != joints || first.poses.frame_rate != frame_rate {
                return Err(Error::Format(format!(
                    "{ctx}: joint count / frame rate differ from record 0"
                )));
            }
        }
        records.push(Record { poses, imu });
    }
    if rd.pos != bytes.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after record {}",
            bytes.len() - rd.pos,
            count.saturating_sub(1)
        )));
    }
    Ok(records)
}

pub fn write_dataset(path: &Path, records: &[Record]) -> Result<()> {
    let bytes = dataset_to_bytes(records)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Record>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    dataset_from_bytes(&bytes)
}
