//! Attention interpretability: rank heads by how concentrated their
//! temporal attention is, then pull the frames each head cares most about.
//!
//! Heads are ranked by mean attention entropy across clips, ascending — a
//! low-entropy head focuses on few frames per clip. Prototype frames rank by
//! the raw score λ rather than the softmax weight: within-clip weights are
//! normalized per clip, so they are not comparable across clips, while λ is
//! the alignment of the frame's partition with the head's query vector.
//! Both values are reported.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::dataio::{write_clip, LoadedClip, VideoClip};
use crate::error::{Error, Result};
use crate::metrics::attention_entropy;
use crate::pooling::AttentionRecord;
use crate::tensor::Tensor;

/// One head's mean temporal entropy over a set of clips.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadEntropy {
    pub head: usize,
    pub mean_entropy: f64,
}

/// Mean per-clip attention entropy per head, ascending (most concentrated
/// heads first); ties break by head index.
pub fn rank_heads_by_entropy(records: &[AttentionRecord]) -> Result<Vec<HeadEntropy>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("rank_heads_by_entropy"));
    }
    let n_heads = records[0].n_heads();
    let mut acc = vec![0.0f64; n_heads];
    for rec in records {
        if rec.n_heads() != n_heads {
            return Err(Error::ShapeMismatch {
                op: "rank_heads_by_entropy",
                detail: format!("records with {} and {} heads", n_heads, rec.n_heads()),
            });
        }
        for (a, h) in acc.iter_mut().zip(attention_entropy(rec)?) {
            *a += h;
        }
    }
    let mut out: Vec<HeadEntropy> = acc
        .into_iter()
        .enumerate()
        .map(|(head, total)| HeadEntropy { head, mean_entropy: total / records.len() as f64 })
        .collect();
    out.sort_by(|a, b| a.mean_entropy.total_cmp(&b.mean_entropy).then(a.head.cmp(&b.head)));
    Ok(out)
}

/// One prototype frame: where it came from and how strongly the head
/// attends to it.
#[derive(Clone, Debug)]
pub struct PrototypeFrame {
    pub clip_id: String,
    pub frame_index: usize,
    /// Raw alignment score λ = h_i^t · q_i.
    pub score: f32,
    /// Within-clip attention weight (not comparable across clips).
    pub weight: f32,
}

/// Frames from the whole batch ranked by raw score for one head,
/// descending; ties break by (clip_id, frame_index). Only valid frames
/// participate. Requests beyond the number of available frames return all of
/// them.
pub fn top_attention_frames(
    records: &[AttentionRecord],
    clip_ids: &[String],
    head: usize,
    k: usize,
) -> Result<Vec<PrototypeFrame>> {
    if records.is_empty() || records.len() != clip_ids.len() {
        return Err(Error::EmptyInput("top_attention_frames"));
    }
    let mut rows = Vec::new();
    for (rec, id) in records.iter().zip(clip_ids) {
        if head >= rec.n_heads() {
            return Err(Error::InvalidConfig(format!(
                "head {head} out of range for {} heads",
                rec.n_heads()
            )));
        }
        let scores = rec.scores_row(head);
        let weights = rec.weights_row(head);
        for t in 0..rec.num_frames() {
            if rec.mask[t] {
                rows.push(PrototypeFrame {
                    clip_id: id.clone(),
                    frame_index: t,
                    score: scores[t],
                    weight: weights[t],
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.clip_id.cmp(&b.clip_id))
            .then(a.frame_index.cmp(&b.frame_index))
    });
    rows.truncate(k);
    Ok(rows)
}

/// Prototype report for a set of selected heads.
#[derive(Clone, Debug)]
pub struct PrototypeReport {
    pub heads: Vec<PrototypeHead>,
}

#[derive(Clone, Debug)]
pub struct PrototypeHead {
    pub head: usize,
    pub mean_entropy: f64,
    pub frames: Vec<PrototypeFrame>,
}

/// Full interpretability pass: rank heads by mean entropy, keep the
/// `n_heads` most concentrated, and list each one's top-k frames.
pub fn prototype_report(
    records: &[AttentionRecord],
    clip_ids: &[String],
    n_heads: usize,
    top_k: usize,
) -> Result<PrototypeReport> {
    let ranked = rank_heads_by_entropy(records)?;
    let mut heads = Vec::new();
    for he in ranked.into_iter().take(n_heads) {
        heads.push(PrototypeHead {
            head: he.head,
            mean_entropy: he.mean_entropy,
            frames: top_attention_frames(records, clip_ids, he.head, top_k)?,
        });
    }
    Ok(PrototypeReport { heads })
}

/// Write the report as CSV plus one single-frame clip file per prototype.
/// CSV columns: `head,rank,clip_id,frame_index,score,weight,entropy`.
pub fn export_prototypes(
    report: &PrototypeReport,
    clips: &[LoadedClip],
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut csv = String::from("head,rank,clip_id,frame_index,score,weight,entropy\n");
    for head in &report.heads {
        for (rank, frame) in head.frames.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                head.head,
                rank + 1,
                frame.clip_id,
                frame.frame_index,
                frame.score,
                frame.weight,
                head.mean_entropy
            ));
            let clip = clips
                .iter()
                .find(|c| c.id == frame.clip_id)
                .ok_or_else(|| Error::Manifest(format!("clip `{}` not loaded", frame.clip_id)))?;
            let s = clip.frames.shape();
            let stride: usize = s[1..].iter().product();
            let data =
                clip.frames.data()[frame.frame_index * stride..(frame.frame_index + 1) * stride].to_vec();
            let frame_tensor = Tensor::from_vec(vec![1, s[1], s[2], s[3]], data)?;
            let name = format!("head{}_rank{:02}_{}_f{}.usvc", head.head, rank + 1, frame.clip_id, frame.frame_index);
            write_clip(&VideoClip::new(frame.clip_id.clone(), frame_tensor)?, &out_dir.join(name))?;
        }
    }
    let mut file = fs::File::create(out_dir.join("prototypes.csv"))?;
    file.write_all(csv.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(scores: Vec<Vec<f32>>, mask: Vec<bool>) -> AttentionRecord {
        // normalize valid positions per head to produce consistent weights
        let n_heads = scores.len();
        let t = mask.len();
        let mut weights = Vec::new();
        for row in &scores {
            let m = row
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = row
                .iter()
                .zip(&mask)
                .map(|(v, &ok)| if ok { (v - m).exp() } else { 0.0 })
                .collect();
            let z: f32 = exps.iter().sum();
            weights.extend(exps.into_iter().map(|e| e / z));
        }
        AttentionRecord {
            scores: Tensor::from_vec(vec![n_heads, t], scores.into_iter().flatten().collect())
                .unwrap(),
            weights: Tensor::from_vec(vec![n_heads, t], weights).unwrap(),
            mask,
        }
    }

    #[test]
    fn one_hot_head_ranks_first_with_zero_entropy() {
        // head 0 uniform, head 1 sharply concentrated
        let rec = record(
            vec![vec![0.0, 0.0, 0.0], vec![0.0, 80.0, 0.0]],
            vec![true; 3],
        );
        let ranked = rank_heads_by_entropy(&[rec]).unwrap();
        assert_eq!(ranked[0].head, 1);
        assert!(ranked[0].mean_entropy < 1e-6);
        assert!((ranked[1].mean_entropy - 3.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn identical_heads_keep_index_order() {
        let rec = record(vec![vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, 1.0]], vec![true; 2]);
        let ranked = rank_heads_by_entropy(&[rec]).unwrap();
        assert_eq!(ranked.iter().map(|h| h.head).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn mean_entropy_matches_direct_recomputation() {
        let recs = vec![
            record(vec![vec![0.3, -0.2, 1.4]], vec![true; 3]),
            record(vec![vec![2.0, 0.0, 0.0]], vec![true; 3]),
        ];
        let ranked = rank_heads_by_entropy(&recs).unwrap();
        let direct = (attention_entropy(&recs[0]).unwrap()[0]
            + attention_entropy(&recs[1]).unwrap()[0])
            / 2.0;
        assert!((ranked[0].mean_entropy - direct).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_head_counts_error() {
        let a = record(vec![vec![0.0, 0.0]], vec![true; 2]);
        let b = record(vec![vec![0.0, 0.0], vec![0.0, 0.0]], vec![true; 2]);
        assert!(rank_heads_by_entropy(&[a, b]).is_err());
    }

    #[test]
    fn single_frame_batch_returns_that_frame() {
        let rec = record(vec![vec![0.7]], vec![true]);
        let ids = vec!["c0".to_string()];
        let top = top_attention_frames(&[rec], &ids, 0, 10).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].clip_id, "c0");
        assert_eq!(top[0].frame_index, 0);
        assert_eq!(top[0].weight, 1.0);
    }

    #[test]
    fn highest_score_ranks_first_across_clips() {
        let recs = vec![
            record(vec![vec![0.1, 0.5, 0.2]], vec![true; 3]),
            record(vec![vec![3.0, -1.0, 0.0]], vec![true; 3]),
        ];
        let ids = vec!["a".to_string(), "b".to_string()];
        let top = top_attention_frames(&recs, &ids, 0, 4).unwrap();
        assert_eq!((top[0].clip_id.as_str(), top[0].frame_index), ("b", 0));
        assert_eq!(top[0].score, 3.0);
        // scores are non-increasing
        assert!(top.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn masked_frames_never_appear() {
        let rec = record(vec![vec![9.0, 0.1, 0.2]], vec![false, true, true]);
        let ids = vec!["a".to_string()];
        let top = top_attention_frames(&[rec], &ids, 0, 10).unwrap();
        assert_eq!(top.len(), 2);
        assert!(top.iter().all(|f| f.frame_index != 0));
    }

    #[test]
    fn ranking_is_invariant_to_within_clip_permutation() {
        let scores = vec![0.3f32, 1.7, -0.4, 0.9];
        let rec = record(vec![scores.clone()], vec![true; 4]);
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<f32> = perm.iter().map(|&i| scores[i]).collect();
        let rec_p = record(vec![permuted], vec![true; 4]);
        let ids = vec!["a".to_string()];
        let top = top_attention_frames(&[rec], &ids, 0, 4).unwrap();
        let top_p = top_attention_frames(&[rec_p], &ids, 0, 4).unwrap();
        // same scores in the same order; frame indices map through the permutation
        for (f, fp) in top.iter().zip(&top_p) {
            assert_eq!(f.score, fp.score);
            assert_eq!(perm[fp.frame_index], f.frame_index);
        }
    }

    #[test]
    fn cross_clip_ranking_agrees_with_within_clip_weights() {
        // softmax is monotone in the raw score, so within one clip the
        // score ranking and the weight ranking coincide
        let rec = record(vec![vec![0.2, 1.1, -0.7, 0.4]], vec![true; 4]);
        let ids = vec!["a".to_string()];
        let top = top_attention_frames(&[rec.clone()], &ids, 0, 4).unwrap();
        let mut by_weight: Vec<usize> = (0..4).collect();
        let w = rec.weights_row(0).to_vec();
        by_weight.sort_by(|&a, &b| w[b].total_cmp(&w[a]));
        let by_score: Vec<usize> = top.iter().map(|f| f.frame_index).collect();
        assert_eq!(by_score, by_weight);
    }
}
