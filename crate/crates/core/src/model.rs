//! The full network: input AAGC → bidirectional recurrent graph layers → output AAGC.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_synth::SequenceArray;
use crate::error::{Error, Result};
use crate::graph_layers::{
    aagc_forward, bidirectional_run, count_parameters, Aagc, AagcParams, Activation, Cell,
    CellKind, CellParams, LayerDescriptor, StepOptions,
};
use crate::rotation::{from_row_major, Rot3};
use crate::skeleton::{
    build_skeleton, init_adjacency, normalized_tree_adjacency, SkeletalGraph, JOINT_COUNT,
};
use crate::tensor::{Tape, Tensor, Var};
use crate::util::sha256_hex;

/// Starting point for every learnable adjacency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyInit {
    /// Row-normalized complemented rest-pose distances.
    #[default]
    Distance,
    /// The constant normalized bone adjacency of the fixed-graph cell.
    Skeleton,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub joints: usize,
    pub f_in: usize,
    pub hidden: usize,
    pub f_out: usize,
    pub recurrent_layers: usize,
    pub cell_kind: CellKind,
    pub input_gate_on_carry: bool,
    #[serde(default)]
    pub adjacency_init: AdjacencyInit,
    pub input_activation: Activation,
    pub output_activation: Activation,
    pub input_dropout: f64,
    pub hidden_dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            joints: JOINT_COUNT,
            f_in: 12,
            hidden: 512,
            f_out: 9,
            recurrent_layers: 2,
            cell_kind: CellKind::AagcLstm,
            input_gate_on_carry: true,
            adjacency_init: AdjacencyInit::Distance,
            input_activation: Activation::Relu,
            output_activation: Activation::Identity,
            input_dropout: 0.2,
            hidden_dropout: 0.3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.joints < 2 || self.f_in == 0 || self.hidden == 0 || self.f_out == 0 {
            return Err(Error::Config(format!(
                "sizes must be positive (joints ≥ 2): N={} F_in={} h={} F_out={}",
                self.joints, self.f_in, self.hidden, self.f_out
            )));
        }
        if self.recurrent_layers == 0 {
            return Err(Error::Config("need at least one recurrent layer".into()));
        }
        for r in [self.input_dropout, self.hidden_dropout] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// The canonical skeleton for 15 joints, otherwise a vertical chain.
    pub fn graph(&self) -> Result<SkeletalGraph> {
        if self.joints == JOINT_COUNT {
            Ok(build_skeleton())
        } else {
            SkeletalGraph::chain(self.joints)
        }
    }

    pub fn step_options(&self, training: bool) -> StepOptions {
        StepOptions {
            input_dropout: self.input_dropout,
            hidden_dropout: self.hidden_dropout,
            training,
            input_gate_on_carry: self.input_gate_on_carry,
        }
    }

    pub fn digest(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    /// Per-layer parameter counts, in network order.
    pub fn parameter_table(&self) -> Vec<(String, usize)> {
        let n = self.joints;
        let mut rows = vec![(
            "input_aagc".to_string(),
            count_parameters(LayerDescriptor::Aagc {
                n,
                f_in: self.f_in,
                f_out: self.hidden,
            }),
        )];
        for layer in 0..self.recurrent_layers {
            let cell = count_parameters(LayerDescriptor::cell(
                self.cell_kind,
                n,
                self.hidden,
                self.hidden,
            ));
            rows.push((format!("recurrent_{}_forward", layer + 1), cell));
            rows.push((format!("recurrent_{}_backward", layer + 1), cell));
        }
        rows.push((
            "output_aagc".to_string(),
            count_parameters(LayerDescriptor::Aagc {
                n,
                f_in: self.hidden,
                f_out: self.f_out,
            }),
        ));
        rows
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_table().iter().map(|(_, c)| c).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiLayer<T> {
    pub forward: Cell<T>,
    pub backward: Cell<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub input: Aagc<T>,
    pub layers: Vec<BiLayer<T>>,
    pub output: Aagc<T>,
}

pub type ModelParams = Network<Tensor>;

impl<T> Network<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Network<U> {
        Network {
            input: self.input.map(f),
            layers: self
                .layers
                .iter()
                .map(|l| BiLayer {
                    forward: l.forward.map(f),
                    backward: l.backward.map(f),
                })
                .collect(),
            output: self.output.map(f),
        }
    }

    /// Learnables in declaration order.
    pub fn visit_learnables<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        self.input.visit(f);
        for l in &self.layers {
            l.forward.visit_learnables(f);
            l.backward.visit_learnables(f);
        }
        self.output.visit(f);
    }

    pub fn visit_learnables_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        self.input.visit_mut(f);
        for l in &mut self.layers {
            l.forward.visit_learnables_mut(f);
            l.backward.visit_learnables_mut(f);
        }
        self.output.visit_mut(f);
    }

    pub fn learnables(&self) -> Vec<&T> {
        let mut v = Vec::new();
        self.visit_learnables(&mut |t| v.push(t));
        v
    }

    pub fn learnables_mut(&mut self) -> Vec<&mut T> {
        let mut v = Vec::new();
        self.visit_learnables_mut(&mut |t| v.push(t));
        v
    }
}

impl ModelParams {
    /// Number of stored learnable scalars.
    pub fn parameter_count(&self) -> usize {
        self.learnables().iter().map(|t| t.numel()).sum()
    }

    /// Registers every learnable on `tape` (tracked).
    pub fn bind(&self, tape: &Tape) -> Network<Var> {
        self.map(&mut |t| tape.watch(t))
    }

    /// Untracked view for inference.
    pub fn constants(&self) -> Network<Var> {
        self.map(&mut |t| Var::constant(t.shape.clone(), t.data.clone()).expect("valid tensor"))
    }
}

pub fn build_model_with<R: Rng + ?Sized>(
    config: &ModelConfig,
    graph: &SkeletalGraph,
    rng: &mut R,
) -> Result<ModelParams> {
    config.validate()?;
    if graph.joint_count() != config.joints {
        return Err(Error::Config(format!(
            "graph has {} joints, config expects {}",
            graph.joint_count(),
            config.joints
        )));
    }
    let fixed = normalized_tree_adjacency(graph);
    let learned = match config.adjacency_init {
        AdjacencyInit::Distance => init_adjacency(graph)?,
        AdjacencyInit::Skeleton => fixed.clone(),
    };
    let input = AagcParams::new(&learned, config.f_in, config.hidden, rng);
    let layers = (0..config.recurrent_layers)
        .map(|_| {
            let mut cell = || {
                CellParams::new(
                    config.cell_kind,
                    &learned,
                    &fixed,
                    config.hidden,
                    config.hidden,
                    rng,
                )
            };
            BiLayer {
                forward: cell(),
                backward: cell(),
            }
        })
        .collect();
    let output = AagcParams::new(&learned, config.hidden, config.f_out, rng);
    Ok(Network {
        input,
        layers,
        output,
    })
}

/// Builds a model from `config.seed` on the graph implied by `config.joints`.
pub fn build_model(config: &ModelConfig) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    build_model_with(config, &config.graph()?, &mut rng)
}

/// Runs the network on per-frame inputs shaped `[B, N, F_in]` (or `[N, F_in]`).
pub fn forward_frames<R: Rng + ?Sized>(
    tape: &Tape,
    net: &Network<Var>,
    config: &ModelConfig,
    frames: &[Var],
    training: bool,
    rng: &mut R,
) -> Result<Vec<Var>> {
    let opts = config.step_options(training);
    let mut seq = frames
        .iter()
        .map(|x| aagc_forward(tape, x, &net.input, config.input_activation))
        .collect::<Result<Vec<_>>>()?;
    for layer in &net.layers {
        seq = bidirectional_run(tape, &seq, &layer.forward, &layer.backward, &opts, rng)?;
    }
    seq.iter()
        .map(|h| aagc_forward(tape, h, &net.output, config.output_activation))
        .collect()
}

/// Splits a `T × N × F` array into per-frame `[N, F]` constants.
pub fn frames_of(input: &SequenceArray) -> Vec<Var> {
    (0..input.frames)
        .map(|t| {
            Var::constant(vec![input.joints, input.features], input.frame(t).to_vec())
                .expect("frame shape")
        })
        .collect()
}

/// Whole-sequence prediction of `T × N × F_out` raw outputs.
pub fn model_forward<R: Rng + ?Sized>(
    params: &ModelParams,
    config: &ModelConfig,
    input: &SequenceArray,
    training: bool,
    rng: &mut R,
) -> Result<SequenceArray> {
    if input.joints != config.joints || input.features != config.f_in {
        return Err(Error::Shape(format!(
            "input frames are {}×{}, model expects {}×{}",
            input.joints, input.features, config.joints, config.f_in
        )));
    }
    if input.frames == 0 {
        return Err(Error::Usage("empty input sequence".into()));
    }
    let tape = Tape::new();
    let net = params.constants();
    let out = forward_frames(&tape, &net, config, &frames_of(input), training, rng)?;
    let mut result = SequenceArray::zeros(input.frames, config.joints, config.f_out);
    let w = result.frame_len();
    for (t, o) in out.iter().enumerate() {
        result.data[t * w..(t + 1) * w].copy_from_slice(o.data());
    }
    Ok(result)
}

/// Nearest rotation (orthogonal Procrustes with determinant correction).
/// Rank-deficient input falls back to identity with a warning.
pub fn project_to_rotation(raw: &[f64]) -> Rot3 {
    let m = from_row_major(raw);
    let svd = m.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        log::warn!("SVD failed during rotation projection; using identity");
        return Rot3::identity();
    };
    let s = svd.singular_values;
    let (max, min) = (s.max(), s.min());
    if !(max.is_finite() && max > 0.0 && min > 1e-12 * max) {
        log::warn!("rank-deficient 3×3 prediction; using identity");
        return Rot3::identity();
    }
    let mut u = u;
    if (u * v_t).determinant() < 0.0 {
        let k = s.imin();
        u.column_mut(k).neg_mut();
    }
    u * v_t
}

/// Projects every `N × 9` frame of a prediction to rotations.
pub fn project_sequence(raw: &SequenceArray) -> Vec<Rot3> {
    raw.data.chunks_exact(9).map(project_to_rotation).collect()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AAGC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_to_bytes(params: &ModelParams, config: &ModelConfig) -> Vec<u8> {
    let mut payload = Vec::new();
    let cfg = serde_json::to_vec(config).expect("config serializes");
    payload.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    payload.extend_from_slice(&cfg);
    for t in params.learnables() {
        payload.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            payload.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(payload.len() + 16);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ModelParams, ModelConfig)> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an AAGC checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, reader supports {CHECKPOINT_VERSION}"
        )));
    }
    let declared = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let payload = &bytes[16..];
    if payload.len() as u64 != declared {
        return Err(Error::Integrity(format!(
            "checkpoint payload is {} bytes, header declares {declared}",
            payload.len()
        )));
    }
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if payload.len() - pos < n {
            return Err(Error::Integrity("checkpoint payload ends early".into()));
        }
        let s = &payload[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let cfg_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let config: ModelConfig = serde_json::from_slice(take(cfg_len)?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    config.validate()?;
    let graph = config.graph()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = build_model_with(&config, &graph, &mut rng)?;
    for (k, t) in params.learnables_mut().into_iter().enumerate() {
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        if shape != t.shape {
            return Err(Error::Format(format!(
                "tensor {k}: stored shape {shape:?}, config implies {:?}",
                t.shape
            )));
        }
        let raw = take(t.numel() * 8)?;
        for (dst, c) in t.data.iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(c.try_into().unwrap());
        }
    }
    if pos != payload.len() {
        return Err(Error::Integrity("trailing bytes after last tensor".into()));
    }
    Ok((params, config))
}

pub fn save_checkpoint(params: &ModelParams, config: &ModelConfig, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(params, config)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
