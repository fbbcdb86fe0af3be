//! Model assembly: the attention-pooled video network (USVN), its
//! fixed-pooling variants, the volume-decomposition regression head, and the
//! factorized spatiotemporal baseline.
//!
//! USVN is permutation- and padding-invariant by construction: frames pass
//! through the per-frame encoder, a mask-aware pooling collapses them into a
//! single D-vector, and a dropout + single linear layer head produces the
//! output. The temporal baseline instead consumes ordered, fixed-length
//! clips and interleaves 2-D spatial with 1-D temporal convolutions, so its
//! output may depend on frame order — that contrast is the point.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, ParamSet, Tape, Var};
use crate::dataio::ClipBatch;
use crate::encoder::{encoder_forward, EncoderConfig};
use crate::error::{Error, Result};
use crate::pooling::{self, AttentionRecord};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub use crate::encoder::Mode;

const CKPT_MAGIC: &[u8; 4] = b"USVK";
const CKPT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Attention,
    Average,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    BinaryLogit,
    EfVolumes,
    ScalarRegression,
}

impl HeadKind {
    pub fn output_width(self) -> usize {
        match self {
            HeadKind::EfVolumes => 2,
            _ => 1,
        }
    }

    pub fn is_binary(self) -> bool {
        matches!(self, HeadKind::BinaryLogit)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub n_heads: usize,
    pub pool: PoolKind,
    pub head: HeadKind,
    pub dropout: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            n_heads: 16,
            pool: PoolKind::Attention,
            head: HeadKind::BinaryLogit,
            dropout: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.n_heads == 0 || self.encoder.embed_dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_heads {} does not divide embed_dim {}",
                self.n_heads, self.encoder.embed_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.head.output_width()
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet<f32>> {
        self.validate()?;
        let mut params = ParamSet::new();
        self.encoder.init_params(&mut params, rng::derive_seed(seed, 1, 0));
        if self.pool == PoolKind::Attention {
            let d_a = self.encoder.embed_dim / self.n_heads;
            pooling::init_query_bank(&mut params, self.n_heads, d_a, rng::derive_seed(seed, 2, 0));
        }
        init_linear_head(&mut params, self.encoder.embed_dim, self.head, seed);
        Ok(params)
    }
}

fn init_linear_head(params: &mut ParamSet<f32>, in_dim: usize, head: HeadKind, seed: u64) {
    let out_dim = head.output_width();
    let bound = 1.0 / (in_dim as f32).sqrt();
    let mut r = rng::stream_rng(seed, 0x4ead, 0);
    params.insert("head.w", Tensor::from_fn(vec![in_dim, out_dim], |_| rng::uniform_in(&mut r, bound)));
    // the volume head starts with edv above esv so the ratio begins in the
    // physical regime and both volume gradients stay live
    let bias = match head {
        HeadKind::EfVolumes => Tensor::from_vec(vec![2], vec![0.0, 1.0]).expect("static shape"),
        _ => Tensor::zeros(vec![out_dim]),
    };
    params.insert("head.b", bias);
}

/// Factorized spatiotemporal baseline: each block is a 2-D spatial
/// convolution followed by a 1-D temporal convolution. Temporal stride is 2
/// in every block after the first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalModelConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub spatial_widths: Vec<usize>,
    pub temporal_kernel: usize,
    pub t_fix: usize,
    pub head: HeadKind,
    pub dropout: f32,
}

impl Default for TemporalModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            spatial_widths: vec![16, 32, 64],
            temporal_kernel: 3,
            t_fix: 32,
            head: HeadKind::BinaryLogit,
            dropout: 0.5,
        }
    }
}

impl TemporalModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_widths.is_empty() || self.spatial_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("spatial_widths must be non-empty and positive".into()));
        }
        let down = 1usize << self.spatial_widths.len();
        if self.image_size == 0 || self.image_size % down != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size,
                self.spatial_widths.len()
            )));
        }
        if self.temporal_kernel % 2 == 0 || self.temporal_kernel == 0 {
            return Err(Error::InvalidConfig("temporal_kernel must be odd".into()));
        }
        let t_down = 1usize << (self.spatial_widths.len().saturating_sub(1));
        if self.t_fix == 0 || self.t_fix % t_down != 0 {
            return Err(Error::InvalidConfig(format!(
                "t_fix {} not divisible by 2^{}",
                self.t_fix,
                self.spatial_widths.len().saturating_sub(1)
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet<f32>> {
        self.validate()?;
        let mut params = ParamSet::new();
        let mut c_in = self.in_channels;
        for (i, &c_out) in self.spatial_widths.iter().enumerate() {
            let sw_fan = c_in * 9;
            let sw_bound = (6.0 / sw_fan as f32).sqrt();
            let mut r = rng::stream_rng(seed, 0x7b, (2 * i) as u64);
            params.insert(
                format!("tb.block{i}.sw"),
                Tensor::from_fn(vec![c_out, c_in, 3, 3], |_| rng::uniform_in(&mut r, sw_bound)),
            );
            params.insert(format!("tb.block{i}.sb"), Tensor::zeros(vec![c_out]));
            let tw_fan = c_out * self.temporal_kernel;
            let tw_bound = (6.0 / tw_fan as f32).sqrt();
            let mut r = rng::stream_rng(seed, 0x7b, (2 * i + 1) as u64);
            params.insert(
                format!("tb.block{i}.tw"),
                Tensor::from_fn(vec![c_out, c_out, self.temporal_kernel], |_| {
                    rng::uniform_in(&mut r, tw_bound)
                }),
            );
            params.insert(format!("tb.block{i}.tb"), Tensor::zeros(vec![c_out]));
            c_in = c_out;
        }
        init_linear_head(&mut params, c_in, self.head, seed);
        Ok(params)
    }
}

/// Which model a checkpoint holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Usvn(ModelConfig),
    Temporal(TemporalModelConfig),
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Usvn(c) => c.validate(),
            ModelSpec::Temporal(c) => c.validate(),
        }
    }

    pub fn head(&self) -> HeadKind {
        match self {
            ModelSpec::Usvn(c) => c.head,
            ModelSpec::Temporal(c) => c.head,
        }
    }

    pub fn is_attention(&self) -> bool {
        matches!(self, ModelSpec::Usvn(c) if c.pool == PoolKind::Attention)
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet<f32>> {
        match self {
            ModelSpec::Usvn(c) => c.init_params(seed),
            ModelSpec::Temporal(c) => c.init_params(seed),
        }
    }
}

/// Per-clip model output.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Binary { logit: f32 },
    Volumes { raw: (f32, f32), esv: f32, edv: f32, ef: f32 },
    Scalar { value: f32 },
}

impl Prediction {
    /// The scalar used for losses and metrics: log-odds, ef, or raw value.
    pub fn score(&self) -> f32 {
        match self {
            Prediction::Binary { logit } => *logit,
            Prediction::Volumes { ef, .. } => *ef,
            Prediction::Scalar { value } => *value,
        }
    }
}

/// softplus(y) + 0.1: maps an unconstrained head output to a positive
/// volume, floored away from zero so the ratio in the ef computation stays
/// finite.
pub fn volume_head_map(y1: f64, y2: f64) -> (f64, f64) {
    let sp = |y: f64| y.max(0.0) + (-y.abs()).exp().ln_1p();
    (sp(y1) + 0.1, sp(y2) + 0.1)
}

/// ef = 1 - esv/edv, exactly.
pub fn ef_from_volumes(esv: f64, edv: f64) -> Result<f64> {
    if esv <= 0.0 || edv <= 0.0 {
        return Err(Error::InvalidConfig(format!("volumes must be positive, got ({esv}, {edv})")));
    }
    Ok(1.0 - esv / edv)
}

/// Tape-level head: a dropout + single linear layer over the pooled vector,
/// then the head-specific mapping to a scalar prediction.
fn linear_head<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    pooled: Var,
    dropout: f32,
    mode: Mode,
) -> Result<Var> {
    let d = tape.shape(pooled)[0];
    let dropped = match mode {
        Mode::Train { dropout_seed } => tape.dropout(pooled, dropout as f64, dropout_seed)?,
        Mode::Eval => pooled,
    };
    let row = tape.reshape(dropped, vec![1, d])?;
    let w = bound.var("head.w")?;
    let b = bound.var("head.b")?;
    let out = tape.matmul(row, w)?;
    let out = tape.add_bias(out, b)?;
    let width = tape.shape(out)[1];
    tape.reshape(out, vec![width])
}

/// Head outputs to the training scalar (logit / ef / value), on-tape.
pub fn head_scalar<T: Scalar>(tape: &mut Tape<T>, head: HeadKind, out_vec: Var) -> Result<Var> {
    match head {
        HeadKind::BinaryLogit | HeadKind::ScalarRegression => tape.element(out_vec, 0),
        HeadKind::EfVolumes => {
            let y1 = tape.element(out_vec, 0)?;
            let y2 = tape.element(out_vec, 1)?;
            let esv = volume_var(tape, y1)?;
            let edv = volume_var(tape, y2)?;
            let ratio = tape.div(esv, edv)?;
            let neg = tape.mul_scalar(ratio, -1.0)?;
            tape.add_scalar(neg, 1.0)
        }
    }
}

fn volume_var<T: Scalar>(tape: &mut Tape<T>, y: Var) -> Result<Var> {
    let sp = tape.softplus(y)?;
    tape.add_scalar(sp, 0.1)
}

fn prediction_from_outputs(head: HeadKind, outputs: &[f32]) -> Prediction {
    match head {
        HeadKind::BinaryLogit => Prediction::Binary { logit: outputs[0] },
        HeadKind::ScalarRegression => Prediction::Scalar { value: outputs[0] },
        HeadKind::EfVolumes => {
            let (y1, y2) = (outputs[0], outputs[1]);
            let (esv64, edv64) = volume_head_map(y1 as f64, y2 as f64);
            let (esv, edv) = (esv64 as f32, edv64 as f32);
            Prediction::Volumes { raw: (y1, y2), esv, edv, ef: 1.0 - esv / edv }
        }
    }
}

/// Full per-clip USVN forward on an existing tape. `frames` is T×C×H×W with
/// a mask of length T. Returns the raw head output vector and, for attention
/// pooling, the attention record.
pub fn usvn_clip_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    frames: Var,
    mask: &[bool],
    mode: Mode,
) -> Result<(Var, Option<AttentionRecord>)> {
    let emb = encoder_forward(tape, bound, &cfg.encoder, frames)?;
    let (pooled, record) = match cfg.pool {
        PoolKind::Attention => {
            let q = bound.var("pool.q")?;
            let (h, record) = pooling::attention_pool(tape, emb, q, mask)?;
            (h, Some(record))
        }
        PoolKind::Average => (pooling::average_pool(tape, emb, mask)?, None),
        PoolKind::Max => (pooling::max_pool(tape, emb, mask)?, None),
    };
    let out = linear_head(tape, bound, pooled, cfg.dropout, mode)?;
    Ok((out, record))
}

/// Batch-level USVN forward. Each clip is processed independently on its own
/// tape over its valid (leading) frames, so zero padding cannot influence
/// the result. Attention records are returned only for attention pooling.
pub fn usvn_forward(
    batch: &ClipBatch,
    params: &ParamSet<f32>,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<(Vec<Prediction>, Vec<Option<AttentionRecord>>)> {
    cfg.validate()?;
    if batch.batch_size() == 0 {
        return Err(Error::EmptyInput("usvn_forward"));
    }
    let results: Vec<Result<(Prediction, Option<AttentionRecord>)>> = (0..batch.batch_size())
        .into_par_iter()
        .map(|b| {
            let frames = batch.valid_frames(b);
            let t_valid = frames.shape()[0];
            if t_valid == 0 {
                return Err(Error::AllMasked);
            }
            let clip_mode = match mode {
                Mode::Train { dropout_seed } => Mode::Train {
                    dropout_seed: rng::derive_seed(dropout_seed, 0xd0, b as u64),
                },
                Mode::Eval => Mode::Eval,
            };
            let mut tape = Tape::<f32>::new();
            let bound = BoundParams::bind(&mut tape, params);
            let frames_var = tape.leaf(frames);
            let (out, record) =
                usvn_clip_forward(&mut tape, &bound, cfg, frames_var, &vec![true; t_valid], clip_mode)?;
            let outputs = tape.value(out).data().to_vec();
            Ok((prediction_from_outputs(cfg.head, &outputs), record))
        })
        .collect();
    let mut preds = Vec::with_capacity(results.len());
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        let (p, rec) = r?;
        preds.push(p);
        records.push(rec);
    }
    Ok((preds, records))
}

/// Frame indices for uniform temporal resampling of a T-frame clip to
/// `t_fix` frames: index j maps to round(j*(T-1)/(t_fix-1)).
pub fn uniform_resample_indices(t: usize, t_fix: usize) -> Vec<usize> {
    if t_fix == 1 {
        return vec![0];
    }
    (0..t_fix)
        .map(|j| ((j as f64) * (t as f64 - 1.0) / (t_fix as f64 - 1.0)).round() as usize)
        .collect()
}

/// Resample a clip tensor to exactly `t_fix` frames.
pub fn resample_to_fixed(frames: &Tensor<f32>, t_fix: usize) -> Result<Tensor<f32>> {
    let shape = frames.shape();
    if shape.len() != 4 || shape[0] == 0 {
        return Err(Error::ShapeMismatch {
            op: "resample_to_fixed",
            detail: format!("{:?}", shape),
        });
    }
    let stride: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(t_fix * stride);
    for src in uniform_resample_indices(shape[0], t_fix) {
        data.extend_from_slice(&frames.data()[src * stride..(src + 1) * stride]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[0] = t_fix;
    Tensor::from_vec(out_shape, data)
}

/// Per-clip forward of the factorized baseline on an existing tape.
/// `frames` must be exactly t_fix ordered frames.
pub fn temporal_clip_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &TemporalModelConfig,
    frames: Var,
    mode: Mode,
) -> Result<Var> {
    let shape = tape.shape(frames).to_vec();
    if shape.len() != 4
        || shape[0] != cfg.t_fix
        || shape[1] != cfg.in_channels
        || shape[2] != cfg.image_size
        || shape[3] != cfg.image_size
    {
        return Err(Error::ShapeMismatch {
            op: "temporal_clip_forward",
            detail: format!(
                "frames {:?}, config wants [{}, {}, {}, {}]",
                shape, cfg.t_fix, cfg.in_channels, cfg.image_size, cfg.image_size
            ),
        });
    }
    let mut x = frames;
    let pad_t = cfg.temporal_kernel / 2;
    for i in 0..cfg.spatial_widths.len() {
        // spatial: frames as a batch
        let sw = bound.var(&format!("tb.block{i}.sw"))?;
        let sb = bound.var(&format!("tb.block{i}.sb"))?;
        x = tape.conv2d(x, sw, Some(sb), 2, 1)?;
        x = tape.relu(x)?;
        // temporal: convolve across T at every spatial position
        let s = tape.shape(x).to_vec(); // T×C×H×W
        let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw_c_t = tape.permute(x, &[2, 3, 1, 0])?; // H×W×C×T
        let ncl = tape.reshape(hw_c_t, vec![h * w, c, t])?;
        let tw = bound.var(&format!("tb.block{i}.tw"))?;
        let tb = bound.var(&format!("tb.block{i}.tb"))?;
        let t_stride = if i == 0 { 1 } else { 2 };
        let conv = tape.conv1d(ncl, tw, Some(tb), t_stride, pad_t)?;
        let out_s = tape.shape(conv).to_vec(); // (H*W)×C'×T'
        let (c_out, t_out) = (out_s[1], out_s[2]);
        let unflat = tape.reshape(conv, vec![h, w, c_out, t_out])?;
        x = tape.permute(unflat, &[3, 2, 0, 1])?; // T'×C'×H×W
        x = tape.relu(x)?;
    }
    // global space-time average pool
    let per_frame = tape.global_avg_pool2d(x)?; // T_f×C
    let t_final = tape.shape(per_frame)[0];
    let pooled = tape.masked_mean_rows(per_frame, &vec![true; t_final])?; // C
    linear_head(tape, bound, pooled, cfg.dropout, mode)
}

/// Batch-level forward of the factorized baseline. Every clip in the batch
/// must already hold exactly t_fix valid frames (use `resample_to_fixed`).
pub fn temporal_forward(
    batch: &ClipBatch,
    params: &ParamSet<f32>,
    cfg: &TemporalModelConfig,
    mode: Mode,
) -> Result<Vec<Prediction>> {
    cfg.validate()?;
    if batch.batch_size() == 0 {
        return Err(Error::EmptyInput("temporal_forward"));
    }
    for b in 0..batch.batch_size() {
        if batch.num_valid(b) != cfg.t_fix || batch.max_frames() != cfg.t_fix {
            return Err(Error::ShapeMismatch {
                op: "temporal_forward",
                detail: format!(
                    "clip {} has {} valid frames of {}; expected exactly t_fix={}",
                    batch.clip_ids[b],
                    batch.num_valid(b),
                    batch.max_frames(),
                    cfg.t_fix
                ),
            });
        }
    }
    let results: Vec<Result<Prediction>> = (0..batch.batch_size())
        .into_par_iter()
        .map(|b| {
            let clip_mode = match mode {
                Mode::Train { dropout_seed } => Mode::Train {
                    dropout_seed: rng::derive_seed(dropout_seed, 0xd0, b as u64),
                },
                Mode::Eval => Mode::Eval,
            };
            let mut tape = Tape::<f32>::new();
            let bound = BoundParams::bind(&mut tape, params);
            let frames_var = tape.leaf(batch.valid_frames(b));
            let out = temporal_clip_forward(&mut tape, &bound, cfg, frames_var, clip_mode)?;
            let outputs = tape.value(out).data().to_vec();
            Ok(prediction_from_outputs(cfg.head, &outputs))
        })
        .collect();
    results.into_iter().collect()
}

/// Dispatch on the model kind. For the temporal baseline the batch must hold
/// t_fix-frame clips.
pub fn model_forward(
    spec: &ModelSpec,
    batch: &ClipBatch,
    params: &ParamSet<f32>,
    mode: Mode,
) -> Result<(Vec<Prediction>, Vec<Option<AttentionRecord>>)> {
    match spec {
        ModelSpec::Usvn(cfg) => usvn_forward(batch, params, cfg, mode),
        ModelSpec::Temporal(cfg) => {
            let preds = temporal_forward(batch, params, cfg, mode)?;
            let n = preds.len();
            Ok((preds, vec![None; n]))
        }
    }
}

/// Write a checkpoint: config echo (JSON) plus every named parameter tensor
/// in 32-bit little-endian. Roundtrips are bitwise exact.
pub fn save_checkpoint(path: &Path, spec: &ModelSpec, params: &ParamSet<f32>) -> Result<()> {
    let config = serde_json::to_vec(spec)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for d in tensor.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read a checkpoint back.
pub fn load_checkpoint(path: &Path) -> Result<(ModelSpec, ParamSet<f32>)> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Truncated {
                path: path.display().to_string(),
                expected: *pos + n,
                got: bytes.len(),
            });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CKPT_MAGIC {
        return Err(Error::BadMagic { path: path.display().to_string(), expected: "USVK" });
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.display().to_string(),
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    let config_len = read_u32(&mut pos)? as usize;
    let spec: ModelSpec = serde_json::from_slice(take(&mut pos, config_len)?)?;
    let count = read_u32(&mut pos)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| Error::InvalidConfig(format!("bad parameter name: {e}")))?;
        let ndim = read_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = take(&mut pos, numel * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.insert(name, Tensor::from_vec(shape, data)?);
    }
    Ok((spec, params))
}
