//! Pooling over unordered frames: multi-head attention pooling with global
//! query vectors, plus mask-aware average and max pooling baselines.
//!
//! Attention pooling partitions each frame embedding into N_a contiguous
//! slices h_i. Head i scores every frame by the raw dot product with its
//! trained query vector, λ_i^t = h_i^t · q_i (no temperature, no 1/sqrt(d_a)
//! scaling), normalizes the scores over valid frames with a masked softmax,
//! and pools H_i = Σ_t a_i^t h_i^t. The video representation is the
//! concatenation of the head outputs, so H_i occupies the same index range
//! as partition i.
//!
//! With all-zero queries every head weighs frames uniformly and the output
//! reduces to average pooling; with one-element partitions and strongly
//! positive queries the weights concentrate on the per-channel argmax frame,
//! approximating (but never exactly reaching) max pooling.

use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Raw scores and normalized weights for one clip, kept for diagnostics and
/// interpretability.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    /// N_a×T raw dot products λ.
    pub scores: Tensor<f32>,
    /// N_a×T weights; exactly zero at masked positions, each row summing to
    /// one over valid positions.
    pub weights: Tensor<f32>,
    pub mask: Vec<bool>,
}

impl AttentionRecord {
    pub fn n_heads(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights_row(&self, head: usize) -> &[f32] {
        let t = self.num_frames();
        &self.weights.data()[head * t..(head + 1) * t]
    }

    pub fn scores_row(&self, head: usize) -> &[f32] {
        let t = self.num_frames();
        &self.scores.data()[head * t..(head + 1) * t]
    }
}

/// Gaussian query-bank init with std 1/sqrt(d_a): logits start small, so
/// training begins near the uniform-weight (average pooling) regime.
pub fn init_query_bank(params: &mut ParamSet<f32>, n_heads: usize, d_a: usize, seed: u64) {
    let std = 1.0 / (d_a as f32).sqrt();
    let mut r = rng::stream_rng(seed, 0x9ba7, 0);
    params.insert(
        "pool.q",
        Tensor::from_fn(vec![n_heads, d_a], |_| rng::standard_normal(&mut r) * std),
    );
}

/// Split T×D embeddings into N_a column slices of width d_a = D / N_a.
/// Partition i of frame t is the embedding slice [i*d_a, (i+1)*d_a).
pub fn partition<T: Scalar>(tape: &mut Tape<T>, embeddings: Var, n_heads: usize) -> Result<Vec<Var>> {
    let shape = tape.shape(embeddings);
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "partition",
            detail: format!("expected T×D, got {:?}", shape),
        });
    }
    let d = shape[1];
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "number of heads {n_heads} does not divide embedding width {d}"
        )));
    }
    let d_a = d / n_heads;
    (0..n_heads)
        .map(|i| tape.slice_cols(embeddings, i * d_a, d_a))
        .collect()
}

/// Masked softmax over frame scores (delegates to the tape op: masked
/// positions get weight exactly zero, valid scores are max-stabilized).
pub fn masked_softmax<T: Scalar>(tape: &mut Tape<T>, scores: Var, mask: &[bool]) -> Result<Var> {
    tape.masked_softmax(scores, mask)
}

/// Multi-head attention pooling: T×D embeddings and an N_a×d_a query bank to
/// a D-vector plus the attention record.
pub fn attention_pool<T: Scalar>(
    tape: &mut Tape<T>,
    embeddings: Var,
    queries: Var,
    mask: &[bool],
) -> Result<(Var, AttentionRecord)> {
    let emb_shape = tape.shape(embeddings).to_vec();
    let q_shape = tape.shape(queries).to_vec();
    if emb_shape.len() != 2 || q_shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "attention_pool",
            detail: format!("embeddings {:?}, queries {:?}", emb_shape, q_shape),
        });
    }
    let (t, d) = (emb_shape[0], emb_shape[1]);
    let (n_heads, d_a) = (q_shape[0], q_shape[1]);
    if n_heads * d_a != d {
        return Err(Error::ShapeMismatch {
            op: "attention_pool",
            detail: format!("{n_heads} heads × width {d_a} != embedding width {d}"),
        });
    }
    if mask.len() != t {
        return Err(Error::ShapeMismatch {
            op: "attention_pool",
            detail: format!("mask length {} for {t} frames", mask.len()),
        });
    }
    let parts = partition(tape, embeddings, n_heads)?;
    let mut heads = Vec::with_capacity(n_heads);
    let mut all_scores = Vec::with_capacity(n_heads * t);
    let mut all_weights = Vec::with_capacity(n_heads * t);
    for (i, &part) in parts.iter().enumerate() {
        let q_row = tape.slice_rows(queries, i, 1)?;
        let q_col = tape.permute(q_row, &[1, 0])?;
        let scores_col = tape.matmul(part, q_col)?;
        let scores = tape.reshape(scores_col, vec![t])?;
        let weights = tape.masked_softmax(scores, mask)?;
        all_scores.extend(tape.value(scores).data().iter().map(|v| v.to_f64() as f32));
        all_weights.extend(tape.value(weights).data().iter().map(|v| v.to_f64() as f32));
        let w_row = tape.reshape(weights, vec![1, t])?;
        let pooled = tape.matmul(w_row, part)?;
        heads.push(tape.reshape(pooled, vec![d_a])?);
    }
    let video = tape.concat1d(&heads)?;
    let record = AttentionRecord {
        scores: Tensor::from_vec(vec![n_heads, t], all_scores)?,
        weights: Tensor::from_vec(vec![n_heads, t], all_weights)?,
        mask: mask.to_vec(),
    };
    Ok((video, record))
}

/// Arithmetic mean over valid frames, per channel.
pub fn average_pool<T: Scalar>(tape: &mut Tape<T>, embeddings: Var, mask: &[bool]) -> Result<Var> {
    tape.masked_mean_rows(embeddings, mask)
}

/// Elementwise max over valid frames; masked frames are excluded as if -inf,
/// ties break toward the lowest frame index.
pub fn max_pool<T: Scalar>(tape: &mut Tape<T>, embeddings: Var, mask: &[bool]) -> Result<Var> {
    tape.masked_max_rows(embeddings, mask)
}

/// Eval-only attention pooling on plain tensors.
pub fn attention_pool_eval(
    embeddings: &Tensor<f32>,
    queries: &Tensor<f32>,
    mask: &[bool],
) -> Result<(Tensor<f32>, AttentionRecord)> {
    let mut tape = Tape::<f32>::new();
    let emb = tape.leaf(embeddings.clone());
    let q = tape.leaf(queries.clone());
    let (out, record) = attention_pool(&mut tape, emb, q, mask)?;
    Ok((tape.value(out).clone(), record))
}

/// Eval-only average pooling on plain tensors.
pub fn average_pool_eval(embeddings: &Tensor<f32>, mask: &[bool]) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let emb = tape.leaf(embeddings.clone());
    let out = average_pool(&mut tape, emb, mask)?;
    Ok(tape.value(out).clone())
}

/// Eval-only max pooling on plain tensors.
pub fn max_pool_eval(embeddings: &Tensor<f32>, mask: &[bool]) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let emb = tape.leaf(embeddings.clone());
    let out = max_pool(&mut tape, emb, mask)?;
    Ok(tape.value(out).clone())
}
