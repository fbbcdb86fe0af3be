//! Evaluation metrics: ROC AUC by rank summation, variance explained, and
//! attention-entropy diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pooling::AttentionRecord;

/// ROC AUC via the rank-sum (Mann-Whitney) statistic with average ranks for
/// ties: P(score_pos > score_neg) + 0.5 P(tie).
pub fn roc_auc(scores: &[f32], labels: &[f32]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "roc_auc",
            detail: format!("{} scores vs {} labels", scores.len(), labels.len()),
        });
    }
    let mut pos = 0usize;
    let mut neg = 0usize;
    for y in labels {
        match *y {
            y if y == 0.0 => neg += 1,
            y if y == 1.0 => pos += 1,
            other => return Err(Error::InvalidLabel(other as f64)),
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks across tie runs (1-based ranks)
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = avg;
        }
        i = j;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(y, _)| **y == 1.0)
        .map(|(_, r)| *r)
        .sum();
    let p = pos as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * neg as f64))
}

/// Fraction of target variance explained: 1 - SS_res/SS_tot about the target
/// mean.
pub fn r_squared(preds: &[f32], targets: &[f32]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "r_squared",
            detail: format!("{} preds vs {} targets", preds.len(), targets.len()),
        });
    }
    if targets.len() < 2 {
        return Err(Error::EmptyInput("r_squared needs at least 2 targets"));
    }
    let n = targets.len() as f64;
    let mean: f64 = targets.iter().map(|v| *v as f64).sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|v| (*v as f64 - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let ss_res: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (*p as f64 - *t as f64).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Shannon entropy of each head's attention weights over valid frames,
/// natural log, with 0·log 0 = 0. Rows must sum to 1 within 1e-4.
pub fn attention_entropy(record: &AttentionRecord) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(record.n_heads());
    for head in 0..record.n_heads() {
        let row = record.weights_row(head);
        let sum: f64 = row
            .iter()
            .zip(&record.mask)
            .filter(|(_, &m)| m)
            .map(|(w, _)| *w as f64)
            .sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::UnnormalizedWeights(sum));
        }
        let h: f64 = row
            .iter()
            .zip(&record.mask)
            .filter(|(w, &m)| m && **w > 0.0)
            .map(|(w, _)| {
                let a = *w as f64;
                -a * a.ln()
            })
            .sum();
        out.push(h);
    }
    Ok(out)
}

/// One evaluated clip.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipPrediction {
    pub clip_id: String,
    pub label: f32,
    pub prediction: f32,
}

/// Evaluation summary, serialized as JSON with this fixed key order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub split: String,
    pub metric_name: String,
    pub metric_value: f64,
    pub n_clips: usize,
    /// Entropy diagnostics use the natural logarithm.
    pub entropy_log: String,
    pub head_mean_entropy: Option<Vec<f64>>,
    pub per_clip: Vec<ClipPrediction>,
}

/// Build a report from per-clip scores. `binary` selects ROC AUC; otherwise
/// r². Mean per-head entropy is included when attention records are present.
pub fn evaluate_predictions(
    task: &str,
    split: &str,
    binary: bool,
    clip_ids: &[String],
    labels: &[f32],
    scores: &[f32],
    records: &[Option<AttentionRecord>],
) -> Result<EvalReport> {
    let (metric_name, metric_value) = if binary {
        ("roc_auc", roc_auc(scores, labels)?)
    } else {
        ("r_squared", r_squared(scores, labels)?)
    };
    let with_records: Vec<&AttentionRecord> = records.iter().flatten().collect();
    let head_mean_entropy = if with_records.is_empty() {
        None
    } else {
        let n_heads = with_records[0].n_heads();
        let mut acc = vec![0.0f64; n_heads];
        for rec in &with_records {
            if rec.n_heads() != n_heads {
                return Err(Error::ShapeMismatch {
                    op: "evaluate_predictions",
                    detail: format!("records with {} and {} heads", n_heads, rec.n_heads()),
                });
            }
            for (a, h) in acc.iter_mut().zip(attention_entropy(rec)?) {
                *a += h;
            }
        }
        for a in acc.iter_mut() {
            *a /= with_records.len() as f64;
        }
        Some(acc)
    };
    Ok(EvalReport {
        task: task.to_string(),
        split: split.to_string(),
        metric_name: metric_name.to_string(),
        metric_value,
        n_clips: clip_ids.len(),
        entropy_log: "natural".to_string(),
        head_mean_entropy,
        per_clip: clip_ids
            .iter()
            .zip(labels.iter().zip(scores))
            .map(|(id, (l, s))| ClipPrediction {
                clip_id: id.clone(),
                label: *l,
                prediction: *s,
            })
            .collect(),
    })
}

/// O(n²) pairwise AUC, the independent oracle for `roc_auc`.
pub fn roc_auc_pairwise(scores: &[f32], labels: &[f32]) -> Result<f64> {
    let mut pairs = 0.0f64;
    let mut credit = 0.0f64;
    for (sp, yp) in scores.iter().zip(labels) {
        if *yp != 1.0 {
            continue;
        }
        for (sn, yn) in scores.iter().zip(labels) {
            if *yn != 0.0 {
                continue;
            }
            pairs += 1.0;
            if sp > sn {
                credit += 1.0;
            } else if sp == sn {
                credit += 0.5;
            }
        }
    }
    if pairs == 0.0 {
        return Err(Error::SingleClass);
    }
    let pos = labels.iter().filter(|y| **y == 1.0).count() as f64;
    let neg = labels.iter().filter(|y| **y == 0.0).count() as f64;
    Ok(credit / (pos * neg))
}
