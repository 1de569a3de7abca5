//! Frame-level ROC analysis and prediction-error heatmaps.

use std::io::Write;

use crate::error::{Error, Result};
use crate::scoring::{pixel_errors, ScoreSeries};
use crate::tensor::Tensor;

/// ROC points ordered by decreasing threshold, starting at `(0, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `thresholds[0]` is `+∞`; a frame is flagged when its score is `>=` the threshold.
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
}

impl RocCurve {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "threshold,fpr,tpr")?;
        for i in 0..self.fpr.len() {
            writeln!(out, "{},{},{}", self.thresholds[i], self.fpr[i], self.tpr[i])?;
        }
        Ok(())
    }
}

/// ROC over every distinct score; label 1 is the positive (anomalous) class.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "roc_auc",
            detail: format!("{} scores vs {} labels", scores.len(), labels.len()),
        });
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass { positives, negatives });
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Config(format!("score {bad} is not a number")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut thresholds = vec![f64::INFINITY];
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let thr = scores[order[i]];
        while i < order.len() && scores[order[i]] == thr {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let x = fp as f64 / negatives as f64;
        let y = tp as f64 / positives as f64;
        auc += (x - fpr[fpr.len() - 1]) * (y + tpr[tpr.len() - 1]) / 2.0;
        thresholds.push(thr);
        fpr.push(x);
        tpr.push(y);
    }
    Ok(RocCurve {
        thresholds,
        fpr,
        tpr,
        auc,
    })
}

/// Dataset-level ROC over the concatenation of every labeled video's anomaly scores.
pub fn dataset_roc(series: &[ScoreSeries]) -> Result<RocCurve> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in series {
        let Some(l) = s.labels() else {
            return Err(Error::Config(format!("video `{}` has no labels", s.video_id)));
        };
        scores.extend(s.anomaly_scores());
        labels.extend(l);
    }
    roc_auc(&scores, &labels)
}

/// Per-pixel channel-wise error scaled to `[0, 1]` as `[H, W]`; constant maps become zeros.
pub fn error_map(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let err = pixel_errors(pred, target)?;
    let s = pred.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let lo = err.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = err.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if hi > lo {
        err.iter().map(|e| (e - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; err.len()]
    };
    Ok(Tensor::from_vec(&[h, w], data))
}
