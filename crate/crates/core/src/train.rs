//! Losses, the Adam optimizer with decoupled weight decay, the plateau
//! learning-rate schedule with early stopping, and the fit loop.
//!
//! Training protocol per epoch: resample a fixed-size frame set per training
//! clip, run batches of `batch_size` clips, and evaluate on full-frame
//! validation clips. The learning rate drops by `plateau_factor` after every
//! `plateau_patience` consecutive epochs without validation improvement, and
//! training stops after `early_stop_patience` consecutive epochs without
//! improvement. The improvement counter is shared: a rate cut does not reset
//! it, only a strictly lower validation loss does. Checkpoints are saved on
//! every improvement.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_with, Gradients, LossBuilder, ParamSet, Tape, Var};
use crate::dataio::{collate, sample_frames, BatchItem, LoadedClip, TaskKind};
use crate::error::{Error, Result};
use crate::metrics::{r_squared, roc_auc};
use crate::model::{
    head_scalar, model_forward, resample_to_fixed, save_checkpoint, temporal_clip_forward,
    usvn_clip_forward, HeadKind, Mode, ModelConfig, ModelSpec, Prediction, TemporalModelConfig,
};
use crate::pooling::AttentionRecord;
use crate::rng::{self, derive_seed};
use crate::tensor::{Scalar, Tensor};

const STREAM_ORDER: u64 = 0x0bde5;
const STREAM_SAMPLE: u64 = 0x5a317e;
const STREAM_DROPOUT: u64 = 0xd20b;

/// Optimizer and schedule hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub frames_per_clip: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::classification()
    }
}

impl TrainConfig {
    /// Defaults for the binary tasks.
    pub fn classification() -> Self {
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.001,
            batch_size: 20,
            frames_per_clip: 32,
            plateau_patience: 3,
            plateau_factor: 0.1,
            early_stop_patience: 10,
            max_epochs: 100,
            seed: 0,
        }
    }

    /// Defaults for the regression task.
    pub fn regression() -> Self {
        Self { lr: 1e-3, ..Self::classification() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.plateau_factor <= 0.0 || self.plateau_factor >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "lr {} and plateau_factor {} must be positive (factor < 1)",
                self.lr, self.plateau_factor
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("betas must lie in (0,1)".into()));
        }
        if self.epsilon <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("epsilon must be positive, weight_decay >= 0".into()));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::InvalidConfig("patience values must be >= 1".into()));
        }
        if self.batch_size == 0 || self.frames_per_clip == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, frames_per_clip and max_epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy with logits, evaluated in 64-bit with the
/// stable max(z,0) - z y + ln(1 + e^-|z|) form.
pub fn bce_with_logits(logits: &[f32], labels: &[f32]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::EmptyInput("bce_with_logits"));
    }
    let mut acc = 0.0f64;
    for (z, y) in logits.iter().zip(labels) {
        let y = *y as f64;
        if y != 0.0 && y != 1.0 {
            return Err(Error::InvalidLabel(y));
        }
        let z = *z as f64;
        acc += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    }
    Ok(acc / logits.len() as f64)
}

/// Mean squared error in 64-bit.
pub fn mse(preds: &[f32], targets: &[f32]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::EmptyInput("mse"));
    }
    let acc: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (*p as f64 - *t as f64).powi(2))
        .sum();
    Ok(acc / preds.len() as f64)
}

/// On-tape mean squared error against constant targets.
pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, preds: Var, targets: &[f32]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::EmptyInput("mse_loss"));
    }
    let t = Tensor::from_vec(
        vec![targets.len()],
        targets.iter().map(|v| T::from_f64(*v as f64)).collect(),
    )?;
    let tgt = tape.leaf(t);
    let diff = tape.sub(preds, tgt)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// On-tape loss for a head kind over a batch of scalar predictions.
pub fn loss_for_head<T: Scalar>(
    tape: &mut Tape<T>,
    head: HeadKind,
    preds: Var,
    labels: &[f32],
) -> Result<Var> {
    match head {
        HeadKind::BinaryLogit => {
            let cast: Vec<T> = labels.iter().map(|v| T::from_f64(*v as f64)).collect();
            tape.bce_with_logits(preds, &cast)
        }
        HeadKind::EfVolumes | HeadKind::ScalarRegression => mse_loss(tape, preds, labels),
    }
}

/// Optimizer moments, step count, current learning rate, plateau counters,
/// and the epoch history.
#[derive(Clone, Debug)]
pub struct TrainState {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    pub step: u64,
    pub lr: f64,
    pub epochs_since_improvement: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub metric: f64,
    pub lr: f64,
}

impl TrainState {
    pub fn new(params: &ParamSet<f32>, lr: f64) -> Self {
        let zeros = |p: &ParamSet<f32>| {
            p.iter()
                .map(|(name, t)| (name.clone(), vec![0.0f32; t.numel()]))
                .collect::<BTreeMap<_, _>>()
        };
        Self {
            m: zeros(params),
            v: zeros(params),
            step: 0,
            lr,
            epochs_since_improvement: 0,
            best_val_loss: f64::INFINITY,
            history: Vec::new(),
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay: both the Adam
/// term and the decay lr·wd·w are applied to the incoming parameter value.
pub fn adamw_step(
    params: &mut ParamSet<f32>,
    grads: &Gradients<f32>,
    state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let lr = state.lr as f32;
    let eps = cfg.epsilon as f32;
    let wd = cfg.weight_decay as f32;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = grads.get(&name)?;
        if !g.is_all_finite() {
            return Err(Error::NanGradient(name.clone()));
        }
        let w = params.get(&name)?;
        if g.shape() != w.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                detail: format!("{name}: grad {:?} vs param {:?}", g.shape(), w.shape()),
            });
        }
        let m = state.m.get_mut(&name).expect("state tracks all params");
        let v = state.v.get_mut(&name).expect("state tracks all params");
        let mut out = Vec::with_capacity(w.numel());
        for i in 0..w.numel() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / bc1 as f32;
            let v_hat = v[i] / bc2 as f32;
            let wi = w.data()[i];
            out.push(wi - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * wi);
        }
        params.set(&name, Tensor::from_vec(w.shape().to_vec(), out)?)?;
    }
    Ok(())
}

/// Outcome of one validation epoch under the plateau policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauDecision {
    pub improved: bool,
    pub lr: f64,
    pub stop: bool,
}

/// Strictly-lower validation loss resets the shared counter and records the
/// best; every `plateau_patience` consecutive non-improving epochs cuts the
/// rate by `plateau_factor`; `early_stop_patience` consecutive non-improving
/// epochs raise the stop flag.
pub fn plateau_schedule_update(
    state: &mut TrainState,
    val_loss: f64,
    cfg: &TrainConfig,
) -> PlateauDecision {
    if val_loss < state.best_val_loss {
        state.best_val_loss = val_loss;
        state.epochs_since_improvement = 0;
        return PlateauDecision { improved: true, lr: state.lr, stop: false };
    }
    state.epochs_since_improvement += 1;
    if state.epochs_since_improvement % cfg.plateau_patience == 0 {
        state.lr *= cfg.plateau_factor;
    }
    PlateauDecision {
        improved: false,
        lr: state.lr,
        stop: state.epochs_since_improvement >= cfg.early_stop_patience,
    }
}

/// Whole-batch USVN loss usable at f32 and f64, for gradient verification.
pub struct UsvnBatchLoss {
    pub cfg: ModelConfig,
    /// (frames, mask) per clip
    pub clips: Vec<(Tensor<f32>, Vec<bool>)>,
    pub labels: Vec<f32>,
}

impl LossBuilder for UsvnBatchLoss {
    fn build<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &crate::autodiff::BoundParams,
    ) -> Result<Var> {
        let mut preds = Vec::with_capacity(self.clips.len());
        for (frames, mask) in &self.clips {
            let f = tape.leaf(frames.cast::<T>());
            let (out, _) = usvn_clip_forward(tape, params, &self.cfg, f, mask, Mode::Eval)?;
            preds.push(head_scalar(tape, self.cfg.head, out)?);
        }
        let stacked = tape.stack_scalars(&preds)?;
        loss_for_head(tape, self.cfg.head, stacked, &self.labels)
    }
}

/// Whole-batch loss for the factorized baseline, for gradient verification.
pub struct TemporalBatchLoss {
    pub cfg: TemporalModelConfig,
    pub clips: Vec<Tensor<f32>>,
    pub labels: Vec<f32>,
}

impl LossBuilder for TemporalBatchLoss {
    fn build<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &crate::autodiff::BoundParams,
    ) -> Result<Var> {
        let mut preds = Vec::with_capacity(self.clips.len());
        for frames in &self.clips {
            let f = tape.leaf(frames.cast::<T>());
            let out = temporal_clip_forward(tape, params, &self.cfg, f, Mode::Eval)?;
            preds.push(head_scalar(tape, self.cfg.head, out)?);
        }
        let stacked = tape.stack_scalars(&preds)?;
        loss_for_head(tape, self.cfg.head, stacked, &self.labels)
    }
}

/// Training and validation clips for one task.
#[derive(Clone, Debug)]
pub struct FitData {
    pub task: TaskKind,
    pub train: Vec<LoadedClip>,
    pub val: Vec<LoadedClip>,
}

/// Result of a fit run. `best_params` is the checkpoint from the last epoch
/// that improved validation loss.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    pub best_params: ParamSet<f32>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub diverged: bool,
}

/// Evaluate a model over clips (full frames; the temporal baseline resamples
/// to its fixed length). Returns per-clip scores, attention records, and the
/// task loss.
pub fn evaluate_model(
    spec: &ModelSpec,
    params: &ParamSet<f32>,
    clips: &[LoadedClip],
    batch_size: usize,
) -> Result<(Vec<f32>, Vec<Option<AttentionRecord>>, f64)> {
    if clips.is_empty() {
        return Err(Error::EmptyInput("evaluate_model"));
    }
    let mut scores = Vec::with_capacity(clips.len());
    let mut records = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch_size.max(1)) {
        let items: Vec<BatchItem> = chunk
            .iter()
            .map(|c| -> Result<BatchItem> {
                let frames = match spec {
                    ModelSpec::Temporal(cfg) => resample_to_fixed(&c.frames, cfg.t_fix)?,
                    ModelSpec::Usvn(_) => c.frames.clone(),
                };
                Ok(BatchItem::full(c.id.clone(), frames, c.label))
            })
            .collect::<Result<_>>()?;
        let batch = collate(&items)?;
        let (preds, recs) = model_forward(spec, &batch, params, Mode::Eval)?;
        scores.extend(preds.iter().map(Prediction::score));
        records.extend(recs);
    }
    let labels: Vec<f32> = clips.iter().map(|c| c.label).collect();
    let loss = match spec.head() {
        HeadKind::BinaryLogit => bce_with_logits(&scores, &labels)?,
        _ => mse(&scores, &labels)?,
    };
    Ok((scores, records, loss))
}

fn epoch_metric(head: HeadKind, scores: &[f32], labels: &[f32]) -> Result<f64> {
    match head {
        HeadKind::BinaryLogit => roc_auc(scores, labels),
        _ => r_squared(scores, labels),
    }
}

/// Per-clip training loss and gradients.
fn clip_grad(
    spec: &ModelSpec,
    params: &ParamSet<f32>,
    cfg: &TrainConfig,
    clip: &LoadedClip,
    epoch: usize,
    clip_index: usize,
) -> Result<(f64, Gradients<f32>)> {
    let label = [clip.label];
    let epoch_seed = derive_seed(cfg.seed, STREAM_SAMPLE, epoch as u64);
    let dropout_seed = derive_seed(
        derive_seed(cfg.seed, STREAM_DROPOUT, epoch as u64),
        0,
        clip_index as u64,
    );
    let mode = Mode::Train { dropout_seed };
    match spec {
        ModelSpec::Usvn(model_cfg) => {
            let mut sample_rng = rng::stream_rng(epoch_seed, 0, clip_index as u64);
            let sampled = sample_frames(&clip.frames, cfg.frames_per_clip, &mut sample_rng)?;
            let (loss, grads) = grad_with(params, |tape, bound| {
                let frames = tape.leaf(sampled.frames.clone());
                let (out, _) =
                    usvn_clip_forward(tape, bound, model_cfg, frames, &sampled.mask, mode)?;
                let pred = head_scalar(tape, model_cfg.head, out)?;
                let stacked = tape.stack_scalars(&[pred])?;
                loss_for_head(tape, model_cfg.head, stacked, &label)
            })?;
            Ok((loss as f64, grads))
        }
        ModelSpec::Temporal(model_cfg) => {
            let frames = resample_to_fixed(&clip.frames, model_cfg.t_fix)?;
            let (loss, grads) = grad_with(params, |tape, bound| {
                let f = tape.leaf(frames.clone());
                let out = temporal_clip_forward(tape, bound, model_cfg, f, mode)?;
                let pred = head_scalar(tape, model_cfg.head, out)?;
                let stacked = tape.stack_scalars(&[pred])?;
                loss_for_head(tape, model_cfg.head, stacked, &label)
            })?;
            Ok((loss as f64, grads))
        }
    }
}

/// Train a model. Deterministic given the config seed. Checkpoints are
/// written to `out_dir/checkpoint.bin` on every improvement and
/// `out_dir/history.csv` at the end when `out_dir` is given; on divergence
/// (non-finite loss) the last good checkpoint is retained and the outcome is
/// flagged.
pub fn fit(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    data: &FitData,
    out_dir: Option<&Path>,
) -> Result<FitOutcome> {
    spec.validate()?;
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::EmptyInput("fit needs non-empty train and val splits"));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut params = spec.init_params(cfg.seed)?;
    let mut state = TrainState::new(&params, cfg.lr);
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut stopped_early = false;
    let mut diverged = false;
    let val_labels: Vec<f32> = data.val.iter().map(|c| c.label).collect();

    for epoch in 1..=cfg.max_epochs {
        // shuffled clip order for this epoch
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut order_rng = rng::stream_rng(cfg.seed, STREAM_ORDER, epoch as u64);
        rng::shuffle(&mut order_rng, &mut order);

        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, Gradients<f32>)>> = chunk
                .par_iter()
                .map(|&ci| clip_grad(spec, &params, cfg, &data.train[ci], epoch, ci))
                .collect();
            let mut total: Option<Gradients<f32>> = None;
            let mut batch_loss = 0.0f64;
            for r in results {
                let (loss, grads) = r?;
                batch_loss += loss;
                match &mut total {
                    Some(t) => t.add_assign(&grads),
                    None => total = Some(grads),
                }
            }
            let mut grads = total.expect("non-empty chunk");
            grads.scale(1.0 / chunk.len() as f64);
            epoch_loss += batch_loss;
            seen += chunk.len();
            if !batch_loss.is_finite() {
                diverged = true;
                break;
            }
            adamw_step(&mut params, &grads, &mut state, cfg)?;
        }
        if diverged {
            break;
        }
        let train_loss = epoch_loss / seen as f64;

        let (scores, _, val_loss) = evaluate_model(spec, &params, &data.val, cfg.batch_size)?;
        if !val_loss.is_finite() || !train_loss.is_finite() {
            diverged = true;
            break;
        }
        let metric = epoch_metric(spec.head(), &scores, &val_labels)?;
        let decision = plateau_schedule_update(&mut state, val_loss, cfg);
        state.history.push(EpochRecord { epoch, train_loss, val_loss, metric, lr: decision.lr });
        if std::env::var_os("USVID_TRACE").is_some() {
            eprintln!(
                "epoch {epoch:3}: train {train_loss:.4} val {val_loss:.4} metric {metric:.3} lr {:.2e}",
                decision.lr
            );
        }
        if decision.improved {
            best_params = params.clone();
            best_epoch = epoch;
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join("checkpoint.bin"), spec, &best_params)?;
            }
        }
        if decision.stop {
            stopped_early = true;
            break;
        }
    }

    if state.history.is_empty() {
        return Err(Error::Diverged { epoch: 1 });
    }
    if let Some(dir) = out_dir {
        write_history(&dir.join("history.csv"), &state.history)?;
    }
    Ok(FitOutcome {
        history: state.history,
        best_params,
        best_val_loss: state.best_val_loss,
        best_epoch,
        stopped_early,
        diverged,
    })
}

/// History CSV: `epoch,train_loss,val_loss,metric,lr`.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss,metric,lr\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.metric, r.lr
        ));
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Cap the global worker pool from the `USVID_THREADS` environment variable.
/// Returns the effective thread count.
pub fn init_thread_pool_from_env() -> usize {
    if let Ok(v) = std::env::var("USVID_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
    rayon::current_num_threads()
}
