//! Per-frame CNN encoder: each frame becomes a D-dimensional embedding,
//! independent of every other frame.
//!
//! Architecture: a stack of 3×3 stride-2 conv+relu blocks, global average
//! pooling, and a linear projection to the embedding width. The projection is
//! the layer that adapts the embedding to the downstream partition structure;
//! there are no per-head projections.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, ParamSet, Tape, Var};
use crate::dataio::ClipBatch;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Forward mode. Train mode carries the seed that makes dropout (in models
/// downstream of the encoder) deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub embed_dim: usize,
    pub block_widths: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            embed_dim: 256,
            block_widths: vec![16, 32, 64, 128],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_widths.is_empty() || self.block_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("block_widths must be non-empty and positive".into()));
        }
        if self.in_channels == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig("in_channels and embed_dim must be positive".into()));
        }
        let down = 1usize << self.block_widths.len();
        if self.image_size == 0 || self.image_size % down != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} not divisible by 2^{} (one stride-2 block each)",
                self.image_size,
                self.block_widths.len()
            )));
        }
        Ok(())
    }

    fn param_names(&self) -> Vec<(String, Vec<usize>)> {
        let mut names = Vec::new();
        let mut c_in = self.in_channels;
        for (i, &c_out) in self.block_widths.iter().enumerate() {
            names.push((format!("enc.block{i}.w"), vec![c_out, c_in, 3, 3]));
            names.push((format!("enc.block{i}.b"), vec![c_out]));
            c_in = c_out;
        }
        names.push(("enc.proj.w".into(), vec![c_in, self.embed_dim]));
        names.push(("enc.proj.b".into(), vec![self.embed_dim]));
        names
    }

    /// Fan-in-scaled uniform init: conv blocks feed relus and use the
    /// variance-preserving sqrt(6/fan_in) bound; the linear projection uses
    /// 1/sqrt(fan_in). Biases start at zero.
    pub fn init_params(&self, params: &mut ParamSet<f32>, seed: u64) {
        for (idx, (name, shape)) in self.param_names().into_iter().enumerate() {
            let tensor = if name.ends_with(".b") {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                let bound = if name.contains("block") {
                    (6.0 / fan_in as f32).sqrt()
                } else {
                    1.0 / (fan_in as f32).sqrt()
                };
                let mut r = rng::stream_rng(seed, 0xe2c0de, idx as u64);
                Tensor::from_fn(shape, |_| rng::uniform_in(&mut r, bound))
            };
            params.insert(name, tensor);
        }
    }
}

/// Tape-level forward: frames N×C×H×W to embeddings N×D.
pub fn encoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &EncoderConfig,
    frames: Var,
) -> Result<Var> {
    let shape = tape.shape(frames).to_vec();
    if shape.len() != 4
        || shape[1] != cfg.in_channels
        || shape[2] != cfg.image_size
        || shape[3] != cfg.image_size
    {
        return Err(Error::ShapeMismatch {
            op: "encoder_forward",
            detail: format!(
                "frames {:?}, config wants [N, {}, {}, {}]",
                shape, cfg.in_channels, cfg.image_size, cfg.image_size
            ),
        });
    }
    let mut x = frames;
    for i in 0..cfg.block_widths.len() {
        let w = bound.var(&format!("enc.block{i}.w"))?;
        let b = bound.var(&format!("enc.block{i}.b"))?;
        x = tape.conv2d(x, w, Some(b), 2, 1)?;
        x = tape.relu(x)?;
    }
    let pooled = tape.global_avg_pool2d(x)?;
    let w = bound.var("enc.proj.w")?;
    let b = bound.var("enc.proj.b")?;
    let projected = tape.matmul(pooled, w)?;
    tape.add_bias(projected, b)
}

/// Per-frame embeddings for a whole batch, with the batch mask carried
/// through unchanged.
#[derive(Clone, Debug)]
pub struct FrameEmbeddings {
    /// B×T×D
    pub values: Tensor<f32>,
    pub mask: Vec<bool>,
}

/// Embed every frame of a batch (padded frames included; downstream pooling
/// is what excludes them). Each frame's embedding depends only on that
/// frame's pixels, and eval mode is deterministic.
pub fn encode_frames(
    batch: &ClipBatch,
    params: &ParamSet<f32>,
    cfg: &EncoderConfig,
    _mode: Mode,
) -> Result<FrameEmbeddings> {
    cfg.validate()?;
    let (b, t) = (batch.batch_size(), batch.max_frames());
    if b == 0 || t == 0 {
        return Err(Error::EmptyInput("encode_frames"));
    }
    let (c, h, w) = batch.geometry();
    let mut tape = Tape::<f32>::new();
    let bound = BoundParams::bind(&mut tape, params);
    let flat = batch.frames.reshaped(vec![b * t, c, h, w])?;
    let frames = tape.leaf(flat);
    let emb = encoder_forward(&mut tape, &bound, cfg, frames)?;
    let values = tape.value(emb).reshaped(vec![b, t, cfg.embed_dim])?;
    Ok(FrameEmbeddings { values, mask: batch.mask.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{collate, BatchItem};

    fn cfg_small() -> EncoderConfig {
        EncoderConfig {
            in_channels: 3,
            image_size: 32,
            embed_dim: 256,
            block_widths: vec![8, 16],
        }
    }

    fn params_for(cfg: &EncoderConfig, seed: u64) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        cfg.init_params(&mut p, seed);
        p
    }

    fn random_frames(t: usize, seed: u64) -> Tensor<f32> {
        let mut r = rng::stream_rng(seed, 7, 0);
        Tensor::from_fn(vec![t, 3, 32, 32], |_| rng::uniform_in(&mut r, 0.5) + 0.5)
    }

    #[test]
    fn output_shape_contract() {
        let cfg = cfg_small();
        let params = params_for(&cfg, 0);
        let batch = collate(&[
            BatchItem::full("a", random_frames(5, 1), 0.0),
            BatchItem::full("b", random_frames(5, 2), 1.0),
        ])
        .unwrap();
        let emb = encode_frames(&batch, &params, &cfg, Mode::Eval).unwrap();
        assert_eq!(emb.values.shape(), &[2, 5, 256]);
    }

    #[test]
    fn identical_frames_get_identical_embeddings() {
        let cfg = cfg_small();
        let params = params_for(&cfg, 0);
        let one = random_frames(1, 3);
        let mut frames = one.data().to_vec();
        frames.extend_from_slice(one.data());
        let clip = Tensor::from_vec(vec![2, 3, 32, 32], frames).unwrap();
        let batch = collate(&[BatchItem::full("a", clip, 0.0)]).unwrap();
        let emb = encode_frames(&batch, &params, &cfg, Mode::Eval).unwrap();
        let d = cfg.embed_dim;
        assert_eq!(emb.values.data()[..d], emb.values.data()[d..2 * d]);
    }

    #[test]
    fn frame_permutation_permutes_rows() {
        let cfg = cfg_small();
        let params = params_for(&cfg, 0);
        let clip = random_frames(4, 5);
        let stride = 3 * 32 * 32;
        let perm = [2usize, 0, 3, 1];
        let mut permuted = vec![0.0; clip.numel()];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * stride..(dst + 1) * stride]
                .copy_from_slice(&clip.data()[src * stride..(src + 1) * stride]);
        }
        let permuted = Tensor::from_vec(vec![4, 3, 32, 32], permuted).unwrap();

        let b1 = collate(&[BatchItem::full("a", clip.clone(), 0.0)]).unwrap();
        let b2 = collate(&[BatchItem::full("a", permuted, 0.0)]).unwrap();
        let e1 = encode_frames(&b1, &params, &cfg, Mode::Eval).unwrap();
        let e2 = encode_frames(&b2, &params, &cfg, Mode::Eval).unwrap();
        let d = cfg.embed_dim;
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(
                e2.values.data()[dst * d..(dst + 1) * d],
                e1.values.data()[src * d..(src + 1) * d]
            );
        }
    }

    #[test]
    fn frame_locality_zeroing_one_frame_changes_one_row() {
        let cfg = cfg_small();
        let params = params_for(&cfg, 0);
        let clip = random_frames(3, 9);
        let stride = 3 * 32 * 32;
        let mut zeroed = clip.data().to_vec();
        for v in &mut zeroed[stride..2 * stride] {
            *v = 0.0;
        }
        let zeroed = Tensor::from_vec(vec![3, 3, 32, 32], zeroed).unwrap();
        let b1 = collate(&[BatchItem::full("a", clip, 0.0)]).unwrap();
        let b2 = collate(&[BatchItem::full("a", zeroed, 0.0)]).unwrap();
        let e1 = encode_frames(&b1, &params, &cfg, Mode::Eval).unwrap();
        let e2 = encode_frames(&b2, &params, &cfg, Mode::Eval).unwrap();
        let d = cfg.embed_dim;
        assert_eq!(e1.values.data()[..d], e2.values.data()[..d]);
        assert_ne!(e1.values.data()[d..2 * d], e2.values.data()[d..2 * d]);
        assert_eq!(e1.values.data()[2 * d..], e2.values.data()[2 * d..]);
    }

    #[test]
    fn eval_is_bitwise_deterministic() {
        let cfg = cfg_small();
        let params = params_for(&cfg, 0);
        let batch = collate(&[BatchItem::full("a", random_frames(4, 11), 0.0)]).unwrap();
        let e1 = encode_frames(&batch, &params, &cfg, Mode::Eval).unwrap();
        let e2 = encode_frames(&batch, &params, &cfg, Mode::Eval).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&e1.values), bits(&e2.values));
    }

    #[test]
    fn config_rejects_bad_image_size() {
        let mut cfg = cfg_small();
        cfg.image_size = 30;
        assert!(cfg.validate().is_err());
    }
}
