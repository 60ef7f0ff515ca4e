//! The 15-joint body graph, its rest pose, adjacency initialization, forward
//! kinematics and left/right mirroring.
//!
//! Joint numbering (root pelvis excluded):
//!
//! | idx | joint        | idx | joint        | idx | joint        |
//! |-----|--------------|-----|--------------|-----|--------------|
//! | 0   | left hip     | 5   | spine 2      | 10  | head         |
//! | 1   | right hip    | 6   | spine 3      | 11  | left shoulder|
//! | 2   | spine 1      | 7   | neck         | 12  | right shoulder|
//! | 3   | left knee    | 8   | left collar  | 13  | left elbow   |
//! | 4   | right knee   | 9   | right collar | 14  | right elbow  |
//!
//! The lateral axis is `x` (left is `+x`), `y` points up.

use serde::{Deserialize, Serialize};

use crate::data_synth::{ImuSequence, SensorChannel};
use crate::error::{Error, Result};
use crate::rotation::{is_rotation, reflect_rotation, reflect_vector, Rot3, Vec3};

pub const JOINT_COUNT: usize = 15;

/// Tolerance used when validating stored rotation blocks.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Legs,
    Arms,
    Torso,
}

impl Region {
    /// Longitudinal loss weight λ for joints of this region.
    pub fn llw_weight(self) -> f64 {
        match self {
            Region::Legs => 1.0,
            Region::Arms => 0.5,
            Region::Torso => 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletalGraph {
    /// `None` marks a joint attached to the fixed virtual pelvis.
    pub parent: Vec<Option<usize>>,
    pub rest_position: Vec<Vec3>,
    pub region: Vec<Region>,
    pub sensor_nodes: Vec<usize>,
    pub mirror_map: Vec<usize>,
}

impl SkeletalGraph {
    /// Validates and assembles a graph. Parents must precede their children.
    pub fn new(
        parent: Vec<Option<usize>>,
        rest_position: Vec<Vec3>,
        region: Vec<Region>,
        sensor_nodes: Vec<usize>,
        mirror_map: Vec<usize>,
    ) -> Result<Self> {
        let n = parent.len();
        if n == 0 || rest_position.len() != n || region.len() != n || mirror_map.len() != n {
            return Err(Error::Validation(
                "graph fields must all have one entry per joint".into(),
            ));
        }
        for (j, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                if p >= j {
                    return Err(Error::Validation(format!(
                        "joint {j} has parent {p}; parents must precede children"
                    )));
                }
            }
        }
        for (j, &m) in mirror_map.iter().enumerate() {
            if m >= n || mirror_map[m] != j {
                return Err(Error::Validation(format!(
                    "mirror map is not an involution at {j}"
                )));
            }
            if region[m] != region[j] {
                return Err(Error::Validation(format!(
                    "mirror map pairs joints {j} and {m} from different regions"
                )));
            }
        }
        if sensor_nodes.iter().any(|&s| s >= n) {
            return Err(Error::Validation("sensor node index out of range".into()));
        }
        Ok(Self {
            parent,
            rest_position,
            region,
            sensor_nodes,
            mirror_map,
        })
    }

    /// A straight vertical chain of `n` joints, 0.1 m apart. Used for small test models.
    pub fn chain(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(
                "a chain graph needs at least 2 joints".into(),
            ));
        }
        Self::new(
            (0..n).map(|j| j.checked_sub(1)).collect(),
            (0..n)
                .map(|j| Vec3::new(0.0, 0.1 * (j + 1) as f64, 0.0))
                .collect(),
            vec![Region::Torso; n],
            vec![n - 1],
            (0..n).collect(),
        )
    }

    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    pub fn llw_weights(&self) -> Vec<f64> {
        self.region.iter().map(|r| r.llw_weight()).collect()
    }

    pub fn region_joints(&self, region: Region) -> Vec<usize> {
        (0..self.joint_count())
            .filter(|&j| self.region[j] == region)
            .collect()
    }

    /// Rest position of the parent (the origin for pelvis-attached joints).
    fn parent_rest(&self, j: usize) -> Vec3 {
        self.parent[j].map_or_else(Vec3::zeros, |p| self.rest_position[p])
    }

    /// Euclidean rest length of the bone from `j` to its parent.
    pub fn bone_length(&self, j: usize) -> f64 {
        (self.rest_position[j] - self.parent_rest(j)).norm()
    }
}

/// The canonical 15-joint skeleton in an upright T-pose, roughly 1.7 m tall.
pub fn build_skeleton() -> SkeletalGraph {
    use Region::*;
    let p = |x: f64, y: f64| Vec3::new(x, y, 0.0);
    let parent = vec![
        None,     // 0 left hip
        None,     // 1 right hip
        None,     // 2 spine 1
        Some(0),  // 3 left knee
        Some(1),  // 4 right knee
        Some(2),  // 5 spine 2
        Some(5),  // 6 spine 3
        Some(6),  // 7 neck
        Some(6),  // 8 left collar
        Some(6),  // 9 right collar
        Some(7),  // 10 head
        Some(8),  // 11 left shoulder
        Some(9),  // 12 right shoulder
        Some(11), // 13 left elbow
        Some(12), // 14 right elbow
    ];
    let rest = vec![
        p(0.09, -0.09),
        p(-0.09, -0.09),
        p(0.0, 0.11),
        p(0.10, -0.48),
        p(-0.10, -0.48),
        p(0.0, 0.24),
        p(0.0, 0.30),
        p(0.0, 0.52),
        p(0.08, 0.43),
        p(-0.08, 0.43),
        p(0.0, 0.62),
        p(0.18, 0.45),
        p(-0.18, 0.45),
        p(0.44, 0.45),
        p(-0.44, 0.45),
    ];
    let region = vec![
        Legs, Legs, Torso, Legs, Legs, Torso, Torso, Torso, Arms, Arms, Torso, Arms, Arms, Arms,
        Arms,
    ];
    let mirror = vec![1, 0, 2, 4, 3, 5, 6, 7, 9, 8, 10, 12, 11, 14, 13];
    SkeletalGraph::new(parent, rest, region, vec![3, 4, 10, 13, 14], mirror)
        .expect("canonical skeleton is valid")
}

/// Longitudinal loss weight of a joint of the canonical skeleton.
pub fn llw_weight(joint: usize) -> Result<f64> {
    if joint >= JOINT_COUNT {
        return Err(Error::Usage(format!(
            "joint index {joint} out of range 0..15"
        )));
    }
    Ok(build_skeleton().region[joint].llw_weight())
}

/// Dense row-major `N×N` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl AdjacencyMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

/// Normalized complemented distance: `Ã_ij = 1 − d_ij / Σ_j d_ij` on rest-pose
/// distances, each row normalized on its own.
pub fn init_adjacency(graph: &SkeletalGraph) -> Result<AdjacencyMatrix> {
    let n = graph.joint_count();
    if n < 2 {
        return Err(Error::DegenerateGeometry("need at least two joints".into()));
    }
    if graph
        .rest_position
        .iter()
        .any(|p| !p.iter().all(|v| v.is_finite()))
    {
        return Err(Error::DegenerateGeometry("non-finite rest position".into()));
    }
    let mut values = Vec::with_capacity(n * n);
    for i in 0..n {
        let d: Vec<f64> = (0..n)
            .map(|j| (graph.rest_position[i] - graph.rest_position[j]).norm())
            .collect();
        let total: f64 = d.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateGeometry(format!(
                "row {i}: all rest positions coincide"
            )));
        }
        values.extend(d.iter().map(|dij| 1.0 - dij / total));
    }
    Ok(AdjacencyMatrix { n, values })
}

/// Symmetric GCN normalization `D^{-1/2}(A + I)D^{-1/2}`, with `D` the degree of `A + I`.
pub fn normalize_adjacency(binary: &[f64], n: usize) -> AdjacencyMatrix {
    let mut a = binary.to_vec();
    for i in 0..n {
        a[i * n + i] += 1.0;
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / a[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    AdjacencyMatrix { n, values: a }
}

/// Binary bone adjacency of the graph (pelvis links dropped), normalized with self-loops.
pub fn normalized_tree_adjacency(graph: &SkeletalGraph) -> AdjacencyMatrix {
    let n = graph.joint_count();
    let mut a = vec![0.0; n * n];
    for (j, p) in graph.parent.iter().enumerate() {
        if let Some(p) = *p {
            a[j * n + p] = 1.0;
            a[p * n + j] = 1.0;
        }
    }
    normalize_adjacency(&a, n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionMetadata {
    pub seed: u64,
    pub config_digest: String,
}

/// Global joint rotations per frame, stored frame-major (`t * N + j`).
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub frame_rate: f64,
    pub joint_count: usize,
    pub rotations: Vec<Rot3>,
    pub metadata: Option<MotionMetadata>,
}

impl MotionSequence {
    pub fn new(frame_rate: f64, joint_count: usize, rotations: Vec<Rot3>) -> Result<Self> {
        if joint_count == 0 || rotations.len() % joint_count != 0 {
            return Err(Error::Validation(format!(
                "{} rotation blocks do not divide into {joint_count} joints",
                rotations.len()
            )));
        }
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "invalid frame rate {frame_rate}"
            )));
        }
        Ok(Self {
            frame_rate,
            joint_count,
            rotations,
            metadata: None,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.rotations.len() / self.joint_count
    }

    pub fn rotation(&self, t: usize, j: usize) -> &Rot3 {
        &self.rotations[t * self.joint_count + j]
    }

    pub fn frame(&self, t: usize) -> &[Rot3] {
        &self.rotations[t * self.joint_count..(t + 1) * self.joint_count]
    }

    /// Checks every block is a proper rotation within [`ROTATION_TOL`].
    pub fn validate(&self) -> Result<()> {
        for (k, r) in self.rotations.iter().enumerate() {
            if !is_rotation(r, ROTATION_TOL) {
                return Err(Error::Validation(format!(
                    "frame {} joint {} is not a rotation",
                    k / self.joint_count,
                    k % self.joint_count
                )));
            }
        }
        Ok(())
    }

    /// Time-slice `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> MotionSequence {
        let n = self.joint_count;
        MotionSequence {
            frame_rate: self.frame_rate,
            joint_count: n,
            rotations: self.rotations[start * n..(start + len) * n].to_vec(),
            metadata: self.metadata.clone(),
        }
    }
}

/// Joint positions per frame, frame-major, meters in the pelvis frame.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPositions {
    pub joint_count: usize,
    pub positions: Vec<Vec3>,
}

impl JointPositions {
    pub fn frame_count(&self) -> usize {
        self.positions.len() / self.joint_count
    }

    pub fn get(&self, t: usize, j: usize) -> &Vec3 {
        &self.positions[t * self.joint_count + j]
    }
}

/// Rigid-chain kinematics: `p_j = p_q + R_q (rest_j − rest_q)` with the virtual
/// pelvis fixed at the origin with identity rotation.
pub fn forward_kinematics(poses: &MotionSequence, graph: &SkeletalGraph) -> Result<JointPositions> {
    let n = graph.joint_count();
    if poses.joint_count != n {
        return Err(Error::Validation(format!(
            "pose has {} joints, graph has {n}",
            poses.joint_count
        )));
    }
    poses.validate()?;
    let mut positions = Vec::with_capacity(poses.rotations.len());
    for t in 0..poses.frame_count() {
        let frame = poses.frame(t);
        let base = positions.len();
        for j in 0..n {
            let offset = graph.rest_position[j] - graph.parent_rest(j);
            let p = match graph.parent[j] {
                None => offset,
                Some(q) => positions[base + q] + frame[q] * offset,
            };
            positions.push(p);
        }
    }
    Ok(JointPositions {
        joint_count: n,
        positions,
    })
}

/// Reflects a motion through the sagittal plane and swaps left/right joints.
pub fn mirror_pose_sequence(
    poses: &MotionSequence,
    graph: &SkeletalGraph,
) -> Result<MotionSequence> {
    let n = graph.joint_count();
    if poses.joint_count != n {
        return Err(Error::Validation(format!(
            "pose has {} joints, graph has {n}",
            poses.joint_count
        )));
    }
    poses.validate()?;
    let mut rotations = Vec::with_capacity(poses.rotations.len());
    for t in 0..poses.frame_count() {
        let frame = poses.frame(t);
        rotations.extend((0..n).map(|j| reflect_rotation(&frame[graph.mirror_map[j]])));
    }
    Ok(MotionSequence {
        frame_rate: poses.frame_rate,
        joint_count: n,
        rotations,
        metadata: poses.metadata.clone(),
    })
}

/// Mirrors virtual IMU data consistently with [`mirror_pose_sequence`].
pub fn mirror_imu_sequence(imu: &ImuSequence, graph: &SkeletalGraph) -> Result<ImuSequence> {
    imu.validate_layout()?;
    let mirrored_channel = |c: SensorChannel| -> Result<SensorChannel> {
        match c {
            SensorChannel::Root => Ok(SensorChannel::Root),
            SensorChannel::Joint(j) if graph.sensor_nodes.contains(&j) => {
                Ok(SensorChannel::Joint(graph.mirror_map[j]))
            }
            SensorChannel::Joint(j) => Err(Error::Validation(format!(
                "joint {j} is not a sensor node of the graph"
            ))),
        }
    };
    let sources: Vec<usize> =
        imu.sensors
            .iter()
            .map(|&c| {
                let m = mirrored_channel(c)?;
                imu.sensors.iter().position(|&s| s == m).ok_or_else(|| {
                    Error::Validation(format!("mirror partner {m:?} of {c:?} missing"))
                })
            })
            .collect::<Result<_>>()?;
    let s = imu.sensors.len();
    let mut orientations = Vec::with_capacity(imu.orientations.len());
    let mut accelerations = Vec::with_capacity(imu.accelerations.len());
    for t in 0..imu.frame_count() {
        for &src in &sources {
            orientations.push(reflect_rotation(&imu.orientations[t * s + src]));
            accelerations.push(reflect_vector(&imu.accelerations[t * s + src]));
        }
    }
    Ok(ImuSequence {
        frame_rate: imu.frame_rate,
        sensors: imu.sensors.clone(),
        orientations,
        accelerations,
    })
}
