//! Python bindings: model construction, checkpoints, training and metrics.

use std::path::PathBuf;

use aagc_core::cli::{
    cmd_generate, cmd_mirror, cmd_train, CellArg, GenerateArgs, MirrorArgs, TrainArgs,
};
use aagc_core::data_synth::{read_dataset, SequenceArray};
use aagc_core::evaluation;
use aagc_core::graph_layers::CellKind;
use aagc_core::model::{self, ModelConfig, ModelParams};
use aagc_core::rotation::Rot3;
use aagc_core::skeleton::{self, build_skeleton};
use aagc_core::training::{lr_schedule as schedule, TrainConfig};
use aagc_core::Error;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn cell_arg(name: &str) -> PyResult<CellArg> {
    match name {
        "aagc" => Ok(CellArg::Aagc),
        "gc" => Ok(CellArg::Gc),
        "ggru" => Ok(CellArg::Ggru),
        other => Err(PyValueError::new_err(format!(
            "unknown cell {other:?}; use aagc, gc or ggru"
        ))),
    }
}

fn rot(m: &[Vec<f64>]) -> PyResult<Rot3> {
    if m.len() != 3 || m.iter().any(|r| r.len() != 3) {
        return Err(PyValueError::new_err("expected a 3×3 nested list"));
    }
    Ok(Rot3::from_fn(|i, j| m[i][j]))
}

/// A network with its configuration.
#[pyclass]
struct Model {
    params: ModelParams,
    config: ModelConfig,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (cell = "aagc", hidden = 512, seed = 0))]
    fn new(cell: &str, hidden: usize, seed: u64) -> PyResult<Self> {
        let config = ModelConfig {
            hidden,
            cell_kind: CellKind::from(cell_arg(cell)?),
            seed,
            ..Default::default()
        };
        let params = model::build_model(&config).map_err(to_py)?;
        Ok(Self { params, config })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, config) = model::load_checkpoint(&path).map_err(to_py)?;
        Ok(Self { params, config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.params, &self.config, &path).map_err(to_py)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    #[getter]
    fn cell(&self) -> &'static str {
        self.config.cell_kind.name()
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.config.hidden
    }

    /// Raw outputs `T × N × 9` for inputs `T × N × 12` (inference mode).
    fn predict(&self, frames: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let (n, f) = (self.config.joints, self.config.f_in);
        let mut x = SequenceArray::zeros(frames.len(), n, f);
        for (t, frame) in frames.iter().enumerate() {
            if frame.len() != n || frame.iter().any(|row| row.len() != f) {
                return Err(PyValueError::new_err(format!("frame {t} is not {n}×{f}")));
            }
            for (j, row) in frame.iter().enumerate() {
                let start = (t * n + j) * f;
                x.data[start..start + f].copy_from_slice(row);
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let y =
            model::model_forward(&self.params, &self.config, &x, false, &mut rng).map_err(to_py)?;
        Ok((0..y.frames)
            .map(|t| (0..y.joints).map(|j| y.row(t, j).to_vec()).collect())
            .collect())
    }

    /// Metrics JSON on a dataset file.
    fn evaluate(&self, data: PathBuf) -> PyResult<String> {
        let records = read_dataset(&data).map_err(to_py)?;
        let report = evaluation::evaluate(&self.params, &self.config, &records, &build_skeleton())
            .map_err(to_py)?;
        Ok(report.to_json())
    }
}

#[pyfunction]
#[pyo3(signature = (cell = "aagc", n = 15, f_in = 12, hidden = 512, f_out = 9))]
fn parameter_count(
    cell: &str,
    n: usize,
    f_in: usize,
    hidden: usize,
    f_out: usize,
) -> PyResult<usize> {
    let config = ModelConfig {
        joints: n,
        f_in,
        hidden,
        f_out,
        cell_kind: cell_arg(cell)?.into(),
        ..Default::default()
    };
    config.validate().map_err(to_py)?;
    Ok(config.parameter_count())
}

/// Initial learnable adjacency of the canonical skeleton.
#[pyfunction]
fn init_adjacency() -> PyResult<Vec<Vec<f64>>> {
    let a = skeleton::init_adjacency(&build_skeleton()).map_err(to_py)?;
    Ok((0..a.n).map(|i| a.row(i).to_vec()).collect())
}

#[pyfunction]
fn lr_schedule(step: u64) -> f64 {
    schedule(step, &TrainConfig::default())
}

/// Geodesic angle between two rotation matrices, in degrees.
#[pyfunction]
fn angular_error(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    evaluation::angular_error(&rot(&a)?, &rot(&b)?).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (out, sequences = 20, duration = 10.0, seed = 0, frame_rate = 60.0))]
fn generate_dataset(
    out: PathBuf,
    sequences: usize,
    duration: f64,
    seed: u64,
    frame_rate: f64,
) -> PyResult<String> {
    cmd_generate(&GenerateArgs {
        out,
        seed,
        sequences,
        duration,
        frame_rate,
    })
    .map_err(to_py)
}

#[pyfunction]
fn mirror_dataset(src: PathBuf, dst: PathBuf) -> PyResult<String> {
    cmd_mirror(&MirrorArgs {
        input: src,
        out: dst,
    })
    .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (data, checkpoint, epochs = 30, cell = "aagc", hidden = 512, window = 300,
                    batch_size = 16, seed = 0, llw = true, cda = true, adjacency_init = "distance"))]
#[allow(clippy::too_many_arguments)]
fn train(
    data: PathBuf,
    checkpoint: PathBuf,
    epochs: usize,
    cell: &str,
    hidden: usize,
    window: usize,
    batch_size: usize,
    seed: u64,
    llw: bool,
    cda: bool,
    adjacency_init: &str,
) -> PyResult<String> {
    let skeleton_adjacency_init = match adjacency_init {
        "distance" => false,
        "skeleton" => true,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown adjacency_init {other:?}; use distance or skeleton"
            )))
        }
    };
    cmd_train(&TrainArgs {
        data,
        out_checkpoint: checkpoint,
        epochs,
        cell: cell_arg(cell)?,
        no_llw: !llw,
        no_cda: !cda,
        seed,
        hidden,
        window,
        batch_size,
        lr: TrainConfig::default().initial_lr,
        standard_lstm_update: false,
        skeleton_adjacency_init,
        log: None,
    })
    .map_err(to_py)
}

#[pymodule]
fn aagc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(parameter_count, m)?)?;
    m.add_function(wrap_pyfunction!(init_adjacency, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(angular_error, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(mirror_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
