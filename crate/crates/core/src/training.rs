//! Weighted loss, Adam with exponential decay and global-norm clipping, and the
//! windowed training loop.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_synth::{augment_with_cda, normalize_to_root, pose_targets, Record, SequenceArray};
use crate::error::{Error, Result};
use crate::model::{forward_frames, ModelConfig, ModelParams};
use crate::skeleton::SkeletalGraph;
use crate::tensor::{Tape, Tensor, Var};
use crate::util::split_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub decay_rate: f64,
    pub decay_steps: u64,
    pub clip_norm: f64,
    pub input_dropout: f64,
    pub hidden_dropout: f64,
    pub window_length: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub llw_enabled: bool,
    pub cda_enabled: bool,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.001,
            decay_rate: 0.96,
            decay_steps: 2000,
            clip_norm: 1.0,
            input_dropout: 0.2,
            hidden_dropout: 0.3,
            window_length: 300,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            llw_enabled: true,
            cda_enabled: true,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.initial_lr > 0.0) || !(self.decay_rate > 0.0) || self.decay_steps == 0 {
            return bad("learning-rate schedule must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip norm {} must be positive", self.clip_norm));
        }
        for r in [self.input_dropout, self.hidden_dropout] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("dropout rate {r} outside [0, 1)"));
            }
        }
        if self.window_length == 0 || self.batch_size == 0 {
            return bad("window length and batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!(
                "validation fraction {} outside [0, 1)",
                self.validation_fraction
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_params(params: &[&Tensor]) -> Self {
        Self::new(&params.iter().map(|t| t.numel()).collect::<Vec<_>>())
    }
}

/// Weighted squared error: sums over joints and features, mean over frames.
pub fn llw_mse_loss(pred: &SequenceArray, truth: &SequenceArray, weights: &[f64]) -> Result<f64> {
    if (pred.frames, pred.joints, pred.features) != (truth.frames, truth.joints, truth.features) {
        return Err(Error::Shape(format!(
            "prediction {}×{}×{} vs truth {}×{}×{}",
            pred.frames, pred.joints, pred.features, truth.frames, truth.joints, truth.features
        )));
    }
    if weights.len() != pred.joints {
        return Err(Error::Shape(format!(
            "{} weights for {} joints",
            weights.len(),
            pred.joints
        )));
    }
    if pred.frames == 0 {
        return Err(Error::Shape("empty sequence".into()));
    }
    let mut total = 0.0;
    for t in 0..pred.frames {
        for (n, w) in weights.iter().enumerate() {
            let se: f64 = pred
                .row(t, n)
                .iter()
                .zip(truth.row(t, n))
                .map(|(p, y)| (y - p) * (y - p))
                .sum();
            total += w * se;
        }
    }
    Ok(total / pred.frames as f64)
}

/// Differentiable batch loss over per-frame `[B, N, F]` outputs, averaged over the batch.
pub fn llw_loss_frames(tape: &Tape, preds: &[Var], truths: &[Var], weights: &[f64]) -> Result<Var> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "{} prediction frames vs {} truth frames",
            preds.len(),
            truths.len()
        )));
    }
    let shape = preds[0].shape().to_vec();
    let (n, f) = match shape.as_slice() {
        [.., n, f] => (*n, *f),
        _ => return Err(Error::Shape(format!("frame shape {shape:?} lacks N×F")))?,
    };
    if weights.len() != n {
        return Err(Error::Shape(format!(
            "{} weights for {n} joints",
            weights.len()
        )));
    }
    let batch: usize = shape[..shape.len() - 2].iter().product();
    let w: Vec<f64> = (0..batch)
        .flat_map(|_| weights.iter().flat_map(|&l| std::iter::repeat_n(l, f)))
        .collect();
    let w = Var::constant(shape.clone(), w)?;
    let mut total: Option<Var> = None;
    for (p, y) in preds.iter().zip(truths) {
        let d = tape.sub(p, y)?;
        let sq = tape.square(&d)?;
        let s = tape.sum(&tape.mul(&sq, &w)?)?;
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(&acc, &s)?,
        });
    }
    tape.scale(&total.unwrap(), 1.0 / (preds.len() * batch) as f64)
}

/// Continuous exponential decay.
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    config.initial_lr
        * config
            .decay_rate
            .powf(step as f64 / config.decay_steps as f64)
}

/// Scales all gradients jointly so their global norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], clip_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip_norm {
        let s = clip_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        if p.data.len() != g.len() || m.len() != g.len() {
            return Err(Error::Shape(format!("parameter {k}: size mismatch")));
        }
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub input: SequenceArray,
    pub target: SequenceArray,
    pub record: usize,
    pub start: usize,
    pub mirrored: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSplit {
    pub train: Vec<Window>,
    pub validation: Vec<Window>,
}

fn windows_of(
    record: &Record,
    index: usize,
    mirrored: bool,
    len: usize,
    joints: usize,
) -> Result<Vec<Window>> {
    let input = normalize_to_root(&record.imu, joints)?;
    let target = pose_targets(&record.poses);
    Ok((0..input.frames / len)
        .map(|k| Window {
            input: input.slice(k * len, len),
            target: target.slice(k * len, len),
            record: index,
            start: k * len,
            mirrored,
        })
        .collect())
}

/// Chops the dataset into non-overlapping windows and splits off validation.
///
/// Validation holds original windows only; their mirrored copies are kept out
/// of training so augmentation cannot leak validation motion.
pub fn prepare_windows(
    dataset: &[Record],
    graph: &SkeletalGraph,
    config: &TrainConfig,
) -> Result<WindowSplit> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let shortest = dataset.iter().map(|r| r.poses.frame_count()).min().unwrap();
    if config.window_length > shortest {
        return Err(Error::Config(format!(
            "window length {} exceeds shortest sequence ({shortest} frames)",
            config.window_length
        )));
    }
    let joints = graph.joint_count();
    let mut originals = Vec::new();
    for (i, r) in dataset.iter().enumerate() {
        originals.extend(windows_of(r, i, false, config.window_length, joints)?);
    }
    let mut order: Vec<usize> = (0..originals.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed(config.seed, 0)));
    let n_val = if originals.len() < 2 {
        0
    } else {
        ((originals.len() as f64 * config.validation_fraction).round() as usize).clamp(
            usize::from(config.validation_fraction > 0.0),
            originals.len() - 1,
        )
    };
    let held: HashSet<(usize, usize)> = order[..n_val]
        .iter()
        .map(|&k| (originals[k].record, originals[k].start))
        .collect();
    let mut validation: Vec<Window> = order[..n_val]
        .iter()
        .map(|&k| originals[k].clone())
        .collect();
    validation.sort_by_key(|w| (w.record, w.start));
    let mut train: Vec<Window> = originals
        .into_iter()
        .filter(|w| !held.contains(&(w.record, w.start)))
        .collect();
    if config.cda_enabled {
        let mirrored = augment_with_cda(dataset, graph)?;
        for (i, r) in mirrored[dataset.len()..].iter().enumerate() {
            train.extend(
                windows_of(r, i, true, config.window_length, joints)?
                    .into_iter()
                    .filter(|w| !held.contains(&(w.record, w.start))),
            );
        }
    }
    Ok(WindowSplit { train, validation })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub config: ModelConfig,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub train_windows: usize,
    pub validation_windows: usize,
    pub validation: Vec<Window>,
}

impl TrainOutcome {
    pub fn max_clipped_norm(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.clipped_norm)
            .fold(0.0, f64::max)
    }

    /// Tab-separated log with a commented header.
    pub fn log_tsv(&self, train: &TrainConfig) -> String {
        use crate::util::fmt_sig6;
        let mut s = format!(
            "# adam beta1=0.9 beta2=0.999 eps=1e-8 decay={} every {} steps (continuous)\n",
            train.decay_rate, train.decay_steps
        );
        s.push_str("step\tepoch\tlr\ttrain_loss\tval_loss\tgrad_norm\tclipped_norm\n");
        for r in &self.steps {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.step,
                r.epoch,
                fmt_sig6(r.lr),
                fmt_sig6(r.train_loss),
                r.val_loss.map(fmt_sig6).unwrap_or_else(|| "-".into()),
                fmt_sig6(r.grad_norm),
                fmt_sig6(r.clipped_norm),
            ));
        }
        s
    }
}

fn stack(windows: &[&Window], t: usize, input: bool) -> Result<Var> {
    let first = if input {
        &windows[0].input
    } else {
        &windows[0].target
    };
    let (n, f) = (first.joints, first.features);
    let mut data = Vec::with_capacity(windows.len() * n * f);
    for w in windows {
        let a = if input { &w.input } else { &w.target };
        data.extend_from_slice(a.frame(t));
    }
    Var::constant(vec![windows.len(), n, f], data)
}

fn batch_frames(windows: &[&Window], input: bool) -> Result<Vec<Var>> {
    (0..windows[0].input.frames)
        .map(|t| stack(windows, t, input))
        .collect()
}

/// Mean weighted loss over windows in inference mode.
pub fn mean_loss(
    params: &ModelParams,
    config: &ModelConfig,
    windows: &[Window],
    weights: &[f64],
    batch_size: usize,
) -> Result<Option<f64>> {
    if windows.is_empty() {
        return Ok(None);
    }
    let net = params.constants();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&Window> = chunk.iter().collect();
        let tape = Tape::new();
        let preds = forward_frames(
            &tape,
            &net,
            config,
            &batch_frames(&refs, true)?,
            false,
            &mut rng,
        )?;
        let loss = llw_loss_frames(&tape, &preds, &batch_frames(&refs, false)?, weights)?;
        total += loss.item() * chunk.len() as f64;
    }
    Ok(Some(total / windows.len() as f64))
}

/// Trains `params` in place on `dataset` and returns the log.
pub fn train(
    mut params: ModelParams,
    model_config: &ModelConfig,
    graph: &SkeletalGraph,
    dataset: &[Record],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut mc = model_config.clone();
    mc.input_dropout = config.input_dropout;
    mc.hidden_dropout = config.hidden_dropout;
    mc.validate()?;
    if graph.joint_count() != mc.joints {
        return Err(Error::Config(format!(
            "graph has {} joints, model expects {}",
            graph.joint_count(),
            mc.joints
        )));
    }
    let split = prepare_windows(dataset, graph, config)?;
    if split.train.is_empty() {
        return Err(Error::Config("no training windows".into()));
    }
    if let Some(w) = split.train.first() {
        if w.input.features != mc.f_in || w.target.features != mc.f_out {
            return Err(Error::Config(format!(
                "data has {} input / {} output features, model expects {} / {}",
                w.input.features, w.target.features, mc.f_in, mc.f_out
            )));
        }
    }
    let weights = if config.llw_enabled {
        graph.llw_weights()
    } else {
        vec![1.0; mc.joints]
    };
    let mut state = OptimizerState::for_params(&params.learnables());
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(config.seed, 1));
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut step: u64 = 0;
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = lr_schedule(step, config);
        for chunk in order.chunks(config.batch_size) {
            lr = lr_schedule(step, config);
            let refs: Vec<&Window> = chunk.iter().map(|&k| &split.train[k]).collect();
            let tape = Tape::new();
            let net = params.bind(&tape);
            let preds = forward_frames(
                &tape,
                &net,
                &mc,
                &batch_frames(&refs, true)?,
                true,
                &mut rng,
            )?;
            let loss = llw_loss_frames(&tape, &preds, &batch_frames(&refs, false)?, &weights)?;
            let loss_value = loss.item();
            let g = tape.backward(&loss)?;
            let mut grads: Vec<Vec<f64>> = net
                .learnables()
                .iter()
                .zip(params.learnables())
                .map(|(v, t)| {
                    g.wrt(v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; t.numel()])
                })
                .collect();
            drop(net);
            let grad_norm = clip_global_norm(&mut grads, config.clip_norm);
            let clipped_norm = global_norm(&grads);
            adam_step(&mut params.learnables_mut(), &grads, &mut state, lr)?;
            epoch_loss += loss_value * chunk.len() as f64;
            steps.push(StepRecord {
                step,
                epoch,
                lr,
                train_loss: loss_value,
                val_loss: None,
                grad_norm,
                clipped_norm,
            });
            step += 1;
        }
        let val = mean_loss(&params, &mc, &split.validation, &weights, config.batch_size)?;
        if let Some(last) = steps.last_mut() {
            last.val_loss = val;
        }
        let train_loss = epoch_loss / split.train.len() as f64;
        log::info!(
            "epoch {epoch}: train {train_loss:.6} val {} lr {lr:.6}",
            val.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
        );
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: val,
            lr,
        });
    }
    Ok(TrainOutcome {
        params,
        config: mc,
        steps,
        epochs,
        train_windows: split.train.len(),
        validation_windows: split.validation.len(),
        validation: split.validation,
    })
}
