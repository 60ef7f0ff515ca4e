//! Command-line driver. Every command writes a canonical-JSON manifest next to
//! its main output.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::data_synth::{generate_dataset, read_dataset, write_dataset, GeneratorConfig, Record};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, evaluate_predictions, MetricsReport};
use crate::graph_layers::{count_parameters, CellKind, LayerDescriptor};
use crate::model::{build_model, load_checkpoint, save_checkpoint, AdjacencyInit, ModelConfig};
use crate::skeleton::{build_skeleton, SkeletalGraph, JOINT_COUNT};
use crate::training::{train, TrainConfig};
use crate::util::{fmt_sig6, sha256_hex};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "aagc",
    version,
    about = "Graph-convolutional LSTM pose estimation from sparse IMUs"
)]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic motion + IMU dataset.
    Generate(GenerateArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Print the parameter table.
    Params(ParamsArgs),
    /// Write the left/right mirrored copy of a dataset.
    Mirror(MirrorArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CellArg {
    Aagc,
    Gc,
    Ggru,
}

impl From<CellArg> for CellKind {
    fn from(c: CellArg) -> Self {
        match c {
            CellArg::Aagc => CellKind::AagcLstm,
            CellArg::Gc => CellKind::GcLstm,
            CellArg::Ggru => CellKind::GgruStyle,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub sequences: usize,
    /// Seconds per sequence.
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 60.0)]
    pub frame_rate: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, value_enum, default_value_t = CellArg::Aagc)]
    pub cell: CellArg,
    /// Weight every joint equally.
    #[arg(long)]
    pub no_llw: bool,
    /// Skip mirrored augmentation.
    #[arg(long)]
    pub no_cda: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 512)]
    pub hidden: usize,
    #[arg(long, default_value_t = 300)]
    pub window: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    /// Use the conventional `C_t = f⊙C_{t-1} + i⊙c` gate placement.
    #[arg(long)]
    pub standard_lstm_update: bool,
    /// Start learnable adjacencies from the normalized bone adjacency.
    #[arg(long)]
    pub skeleton_adjacency_init: bool,
    /// Training log path (default: checkpoint path + `.log.tsv`).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out_report: PathBuf,
    /// Score the ground truth against itself.
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long, value_enum, default_value_t = CellArg::Aagc)]
    pub cell: CellArg,
    #[arg(long, default_value_t = 15)]
    pub n: usize,
    #[arg(long, default_value_t = 12)]
    pub f_in: usize,
    #[arg(long, default_value_t = 512)]
    pub hidden: usize,
    #[arg(long, default_value_t = 9)]
    pub f_out: usize,
}

#[derive(Debug, Args)]
pub struct MirrorArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Serializes with sorted keys and no whitespace.
pub fn canonical_json(v: &Value) -> String {
    // serde_json's default map is ordered by key.
    serde_json::to_string(v).expect("json value serializes")
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn file_entry(path: &Path) -> Result<Value> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(json!({ "path": path.display().to_string(), "sha256": sha256_hex(&bytes) }))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_manifest(
    output: &Path,
    command: &str,
    config: Value,
    seeds: Value,
    inputs: &[&Path],
    outputs: &[&Path],
    extra: Value,
) -> Result<PathBuf> {
    let manifest = json!({
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": inputs.iter().map(|p| file_entry(p)).collect::<Result<Vec<_>>>()?,
        "outputs": outputs.iter().map(|p| file_entry(p)).collect::<Result<Vec<_>>>()?,
        "tool_version": TOOL_VERSION,
        "extra": extra,
    });
    let path = manifest_path(output);
    write_text(&path, &canonical_json(&manifest))?;
    Ok(path)
}

/// Inserts `,` between digit groups.
pub fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (k, c) in s.chars().enumerate() {
        if k > 0 && (s.len() - k) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamsSummary {
    pub table: Vec<(String, usize)>,
    pub total: usize,
    pub aagc_total: usize,
    pub ggru_total: usize,
    /// G-GRU-style minus AAGC-LSTM per direction layer, without the extra bias.
    pub layer_delta: i64,
    pub reduction_percent: f64,
}

pub fn params_summary(args: &ParamsArgs) -> Result<ParamsSummary> {
    let cfg = |kind: CellKind| ModelConfig {
        joints: args.n,
        f_in: args.f_in,
        hidden: args.hidden,
        f_out: args.f_out,
        cell_kind: kind,
        ..Default::default()
    };
    let main = cfg(args.cell.into());
    main.validate()?;
    let aagc_total = cfg(CellKind::AagcLstm).parameter_count();
    let ggru_total = cfg(CellKind::GgruStyle).parameter_count();
    let cell = |kind| {
        count_parameters(LayerDescriptor::cell(
            kind,
            args.n,
            args.hidden,
            args.hidden,
        )) as i64
    };
    let layer_delta = cell(CellKind::GgruStyle) - cell(CellKind::AagcLstm) - args.hidden as i64;
    Ok(ParamsSummary {
        table: main.parameter_table(),
        total: main.parameter_count(),
        aagc_total,
        ggru_total,
        layer_delta,
        reduction_percent: 100.0 * (ggru_total as f64 - aagc_total as f64) / ggru_total as f64,
    })
}

pub fn format_params(args: &ParamsArgs, s: &ParamsSummary) -> String {
    let mut out = format!(
        "cell {} (N={}, F_in={}, hidden={}, F_out={})\n",
        CellKind::from(args.cell).name(),
        args.n,
        args.f_in,
        args.hidden,
        args.f_out
    );
    for (name, count) in &s.table {
        out.push_str(&format!("{name:<24}{:>14}\n", group_thousands(*count)));
    }
    out.push_str(&format!(
        "{:<24}{:>14}\n",
        "total",
        group_thousands(s.total)
    ));
    out.push_str(&format!(
        "{:<24}{:>14}\n",
        "aagc_lstm_network",
        group_thousands(s.aagc_total)
    ));
    out.push_str(&format!(
        "{:<24}{:>14}\n",
        "ggru_style_network",
        group_thousands(s.ggru_total)
    ));
    let sign = if s.layer_delta < 0 { "-" } else { "" };
    out.push_str(&format!(
        "{:<24}{:>14}\n",
        "layer_delta_no_bias",
        format!(
            "{sign}{}",
            group_thousands(s.layer_delta.unsigned_abs() as usize)
        )
    ));
    out.push_str(&format!(
        "{:<24}{:>13}% ({})\n",
        "reduction",
        s.reduction_percent.round(),
        fmt_sig6(s.reduction_percent)
    ));
    out
}

fn canonical_graph(records: &[Record]) -> Result<SkeletalGraph> {
    match records.first() {
        Some(r) if r.poses.joint_count != JOINT_COUNT => Err(Error::Config(format!(
            "dataset has {} joints; only the {JOINT_COUNT}-joint skeleton is supported",
            r.poses.joint_count
        ))),
        _ => Ok(build_skeleton()),
    }
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<String> {
    let config = GeneratorConfig {
        duration: a.duration,
        frame_rate: a.frame_rate,
        seed: a.seed,
        ..Default::default()
    };
    config.validate()?;
    if a.sequences == 0 {
        return Err(Error::Config("need at least one sequence".into()));
    }
    let graph = build_skeleton();
    let records = generate_dataset(&config, a.sequences, &graph)?;
    write_dataset(&a.out, &records)?;
    write_manifest(
        &a.out,
        "generate",
        serde_json::to_value(&config).expect("config serializes"),
        json!({ "master": a.seed }),
        &[],
        &[&a.out],
        json!({ "sequences": a.sequences, "frames_per_sequence": config.frame_count() }),
    )?;
    Ok(format!(
        "wrote {} sequences × {} frames to {}\n",
        a.sequences,
        config.frame_count(),
        a.out.display()
    ))
}

pub fn cmd_train(a: &TrainArgs) -> Result<String> {
    let records = read_dataset(&a.data)?;
    let graph = canonical_graph(&records)?;
    let model = ModelConfig {
        hidden: a.hidden,
        cell_kind: a.cell.into(),
        input_gate_on_carry: !a.standard_lstm_update,
        adjacency_init: if a.skeleton_adjacency_init {
            AdjacencyInit::Skeleton
        } else {
            AdjacencyInit::Distance
        },
        seed: a.seed,
        ..Default::default()
    };
    let tc = TrainConfig {
        initial_lr: a.lr,
        window_length: a.window,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        llw_enabled: !a.no_llw,
        cda_enabled: !a.no_cda,
        ..Default::default()
    };
    tc.validate()?;
    let params = build_model(&model)?;
    let outcome = train(params, &model, &graph, &records, &tc)?;
    save_checkpoint(&outcome.params, &outcome.config, &a.out_checkpoint)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out_checkpoint.as_os_str().to_owned();
        s.push(".log.tsv");
        PathBuf::from(s)
    });
    write_text(&log_path, &outcome.log_tsv(&tc))?;
    let last = outcome.epochs.last();
    write_manifest(
        &a.out_checkpoint,
        "train",
        json!({ "model": outcome.config, "training": tc }),
        json!({ "model": model.seed, "training": tc.seed }),
        &[&a.data],
        &[&a.out_checkpoint, &log_path],
        json!({
            "parameter_count": outcome.config.parameter_count(),
            "training_windows": outcome.train_windows,
            "validation_windows": outcome.validation_windows,
            "steps": outcome.steps.len(),
            "max_clipped_grad_norm": outcome.max_clipped_norm(),
            "final_train_loss": last.map(|e| e.train_loss),
            "final_val_loss": last.and_then(|e| e.val_loss),
        }),
    )?;
    Ok(format!(
        "trained {} ({} parameters) for {} steps on {} windows; checkpoint {}\n",
        outcome.config.cell_kind.name(),
        group_thousands(outcome.config.parameter_count()),
        outcome.steps.len(),
        outcome.train_windows,
        a.out_checkpoint.display()
    ))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<MetricsReport> {
    let records = read_dataset(&a.data)?;
    let graph = canonical_graph(&records)?;
    if records.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    let mut inputs: Vec<&Path> = vec![&a.data];
    let mut report = if a.oracle {
        let truths: Vec<_> = records.iter().map(|r| r.poses.clone()).collect();
        let mut r = evaluate_predictions(&truths, &truths, &graph)?;
        r.config_digest = sha256_hex(b"oracle");
        r
    } else {
        let path = a.checkpoint.as_ref().expect("clap enforces --checkpoint");
        let (params, config) = load_checkpoint(path)?;
        if config.joints != graph.joint_count() || config.f_in != crate::data_synth::INPUT_FEATURES
        {
            return Err(Error::Config(format!(
                "checkpoint expects N={} F_in={}, dataset provides N={} F_in={}",
                config.joints,
                config.f_in,
                graph.joint_count(),
                crate::data_synth::INPUT_FEATURES
            )));
        }
        inputs.push(path);
        evaluate(&params, &config, &records, &graph)?
    };
    report.checkpoint = a.checkpoint.as_ref().map(|p| p.display().to_string());
    write_text(&a.out_report, &report.to_json())?;
    write_manifest(
        &a.out_report,
        "eval",
        json!({ "oracle": a.oracle }),
        json!({ "inference": 0 }),
        &inputs,
        &[&a.out_report],
        json!({ "sequences": records.len() }),
    )?;
    Ok(report)
}

pub fn format_report(r: &MetricsReport) -> String {
    let mut s = String::new();
    for (name, st) in [
        ("dip_err_deg", r.dip_err_deg),
        ("ang_err_deg", r.ang_err_deg),
        ("pos_err_cm", r.pos_err_cm),
        ("jerk_err_km_s3", r.jerk_err_km_s3),
    ] {
        s.push_str(&format!(
            "{name:<16}{:>14} ± {:<14} ({} frames)\n",
            fmt_sig6(st.mean),
            fmt_sig6(st.std),
            st.n_frames
        ));
    }
    s
}

pub fn cmd_mirror(a: &MirrorArgs) -> Result<String> {
    let records = read_dataset(&a.input)?;
    let graph = canonical_graph(&records)?;
    let mirrored = records
        .iter()
        .map(|r| r.mirrored(&graph))
        .collect::<Result<Vec<_>>>()?;
    write_dataset(&a.out, &mirrored)?;
    write_manifest(
        &a.out,
        "mirror",
        json!({}),
        json!({}),
        &[&a.input],
        &[&a.out],
        json!({ "sequences": mirrored.len() }),
    )?;
    Ok(format!(
        "mirrored {} sequences to {}\n",
        mirrored.len(),
        a.out.display()
    ))
}

/// Runs a parsed command and returns its stdout text.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a).map(|r| format_report(&r)),
        Command::Params(a) => params_summary(a).map(|s| format_params(a, &s)),
        Command::Mirror(a) => cmd_mirror(a),
    }
}
