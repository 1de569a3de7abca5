//! Per-frame anomaly scores.

use std::io::Write;

use crate::error::{shape_err, Error, Result};
use crate::memory::{MatchResult, MemoryPool, QueryGrid};
use crate::tensor::Tensor;

const MSE_FLOOR: f64 = 1e-10;
const PEAK_FLOOR: f64 = 1e-10;

/// PSNR with the peak term un-squared. Inputs should already be in `[0, 1]`.
pub fn psnr(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return shape_err("psnr", format!("{:?} vs {:?}", pred.shape(), target.shape()));
    }
    let n = pred.len() as f64;
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let peak = pred.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(10.0 * (peak.max(PEAK_FLOOR) / mse.max(MSE_FLOOR)).log10())
}

/// Mean distance from each query to its nearest prototype.
pub fn feature_distance(queries: &QueryGrid, pool: &MemoryPool, m: &MatchResult) -> f64 {
    let k = queries.len();
    let total: f64 = (0..k)
        .map(|i| {
            queries
                .query(i)
                .iter()
                .zip(pool.prototype(m.nearest[i]))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / k as f64
}

/// Channel-wise L2 error at each pixel of a `[.., C, H, W]` pair, as an `H·W` vector.
pub fn pixel_errors(pred: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    if pred.shape() != target.shape() || pred.shape().len() < 3 {
        return shape_err("pixel_errors", format!("{:?} vs {:?}", pred.shape(), target.shape()));
    }
    let s = pred.shape();
    let (c, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
    let plane = h * w;
    let mut err = vec![0.0; plane];
    for ch in 0..c {
        let off = ch * plane;
        for (e, (a, b)) in err
            .iter_mut()
            .zip(pred.data()[off..off + plane].iter().zip(&target.data()[off..off + plane]))
        {
            *e += (a - b) * (a - b);
        }
    }
    err.iter_mut().for_each(|e| *e = e.sqrt());
    Ok(err)
}

/// Error-weighted prediction error: large per-pixel errors get larger weights.
pub fn regular_score(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let err = pixel_errors(pred, target)?;
    let weights: Vec<f64> = err.iter().map(|e| 1.0 - (-e).exp()).collect();
    let denom: f64 = weights.iter().sum();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(weights.iter().zip(&err).map(|(w, e)| w / denom * e).sum())
}

/// Min-max map onto `[0, 1]`; a constant series maps to 0.5.
pub fn normalize_series(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// `N_t = λ·norm(P) + (1 − λ)·(1 − norm(D))`; higher means more normal.
pub fn normality_score(psnr: &[f64], dist: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if psnr.len() != dist.len() {
        return shape_err("normality_score", format!("{} PSNR values vs {} distances", psnr.len(), dist.len()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} is outside [0, 1]")));
    }
    let p = normalize_series(psnr);
    let d = normalize_series(dist);
    Ok(p.iter()
        .zip(&d)
        .map(|(p, d)| lambda * p + (1.0 - lambda) * (1.0 - d))
        .collect())
}

/// Mean normality of normal frames minus that of abnormal frames.
/// `None` when either class is absent.
pub fn gap_score(normality: &[f64], labels: &[u8]) -> Option<f64> {
    let (mut sn, mut nn, mut sa, mut na) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &l) in normality.iter().zip(labels) {
        if l == 0 {
            sn += v;
            nn += 1;
        } else {
            sa += v;
            na += 1;
        }
    }
    (nn > 0 && na > 0).then(|| sn / nn as f64 - sa / na as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub frame_index: usize,
    pub psnr: f64,
    pub dist: f64,
    pub regular: f64,
    pub normality: f64,
    pub label: Option<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSeries {
    pub video_id: String,
    pub records: Vec<ScoreRecord>,
}

pub const CSV_HEADER: &str = "frame_index,psnr,dist,regular,normality,label";

impl ScoreSeries {
    /// Recompute `normality` from the stored PSNR and distance columns.
    pub fn renormalize(&mut self, lambda: f64) -> Result<()> {
        let p: Vec<f64> = self.records.iter().map(|r| r.psnr).collect();
        let d: Vec<f64> = self.records.iter().map(|r| r.dist).collect();
        for (r, n) in self.records.iter_mut().zip(normality_score(&p, &d, lambda)?) {
            r.normality = n;
        }
        Ok(())
    }

    pub fn normality(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.normality).collect()
    }

    pub fn anomaly_scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| 1.0 - r.normality).collect()
    }

    /// Labels, if every record carries one.
    pub fn labels(&self) -> Option<Vec<u8>> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn gap(&self) -> Option<f64> {
        gap_score(&self.normality(), &self.labels()?)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for r in &self.records {
            let label = r.label.map(|l| l.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.frame_index, r.psnr, r.dist, r.regular, r.normality, label
            )?;
        }
        Ok(())
    }

    pub fn read_csv(video_id: &str, text: &str) -> Result<Self> {
        let bad = |line: usize, reason: String| Error::ConfigParse {
            path: video_id.to_string(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => return Err(bad(1, format!("expected header `{CSV_HEADER}`"))),
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(bad(i + 1, format!("expected 6 columns, found {}", cols.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(i + 1, format!("`{s}`: {e}")));
            records.push(ScoreRecord {
                frame_index: cols[0].trim().parse().map_err(|e| bad(i + 1, format!("`{}`: {e}", cols[0])))?,
                psnr: num(cols[1])?,
                dist: num(cols[2])?,
                regular: num(cols[3])?,
                normality: num(cols[4])?,
                label: match cols[5].trim() {
                    "" => None,
                    "0" => Some(0),
                    "1" => Some(1),
                    other => return Err(bad(i + 1, format!("label `{other}` is not 0 or 1"))),
                },
            });
        }
        Ok(Self {
            video_id: video_id.to_string(),
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[1, 1, 1, v.len()], v.to_vec())
    }

    #[test]
    fn psnr_examples() {
        let a = t(&[1.0, 0.5, 0.0, 0.25]);
        assert!((psnr(&a, &a).unwrap() - 100.0).abs() < 1e-9);
        // peak 1, squared error 0.02 over two pixels
        let pred = t(&[1.0, 0.0]);
        let target = t(&[1.0, (0.02f64).sqrt()]);
        assert!((psnr(&pred, &target).unwrap() - 20.0).abs() < 1e-9);
        let far = t(&[1.0, 1.0]);
        let zero = t(&[0.0, 0.0]);
        assert!(psnr(&far, &zero).unwrap().abs() < 1e-12);
        let dark = t(&[0.0, 0.0]);
        assert!(psnr(&dark, &far).unwrap().is_finite());
    }

    #[test]
    fn feature_distance_examples() {
        let pool = MemoryPool::from_tensor(Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 0.0, 0.0])).unwrap();
        let q = QueryGrid::from_rows(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]), 1, 1, 1).unwrap();
        let m = MatchResult {
            weights: Tensor::zeros(&[1, 2]),
            nearest: vec![0],
            second: vec![1],
        };
        assert_eq!(feature_distance(&q, &pool, &m), 5.0);

        let pool = MemoryPool::from_tensor(Tensor::from_vec(&[2, 1], vec![0.0, 10.0])).unwrap();
        let q = QueryGrid::from_rows(Tensor::from_vec(&[2, 1], vec![1.0, 3.0]), 1, 1, 2).unwrap();
        let m = MatchResult {
            weights: Tensor::zeros(&[2, 2]),
            nearest: vec![0, 0],
            second: vec![1, 1],
        };
        assert_eq!(feature_distance(&q, &pool, &m), 2.0);
    }

    #[test]
    fn regular_score_examples() {
        let a = t(&[0.3, 0.7]);
        assert_eq!(regular_score(&a, &a).unwrap(), 0.0);
        let b = t(&[1.3, 0.7]);
        assert!((regular_score(&b, &a).unwrap() - 1.0).abs() < 1e-12);
        let c = t(&[0.55, 0.95]);
        assert!((regular_score(&c, &a).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn regular_score_uses_channel_norm_per_pixel() {
        let pred = Tensor::from_vec(&[1, 2, 1, 1], vec![0.3, 0.4]);
        let target = Tensor::zeros(&[1, 2, 1, 1]);
        assert!((regular_score(&pred, &target).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_series(&[10.0, 20.0, 30.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_series(&[7.0, 7.0, 7.0]), vec![0.5; 3]);
        assert_eq!(normalize_series(&[4.0]), vec![0.5]);
    }

    #[test]
    fn normality_endpoints() {
        let p = [10.0, 30.0, 20.0];
        let d = [0.2, 0.1, 0.4];
        assert_eq!(normality_score(&p, &d, 1.0).unwrap(), normalize_series(&p));
        let inv: Vec<f64> = normalize_series(&d).iter().map(|v| 1.0 - v).collect();
        assert_eq!(normality_score(&p, &d, 0.0).unwrap(), inv);
        // frame 1 has the highest PSNR and the lowest distance
        assert!((normality_score(&p, &d, 0.6).unwrap()[1] - 1.0).abs() < 1e-12);
        assert!(normality_score(&p, &d[..2], 0.5).is_err());
        assert!(normality_score(&p, &d, 1.5).is_err());
    }

    #[test]
    fn gap_examples() {
        assert_eq!(gap_score(&[1.0, 1.0, 0.0, 0.0], &[0, 0, 1, 1]), Some(1.0));
        assert_eq!(gap_score(&[0.5, 0.5], &[0, 1]), Some(0.0));
        assert!((gap_score(&[0.8, 0.6, 0.5, 0.1], &[0, 0, 1, 1]).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(gap_score(&[0.8, 0.6], &[0, 0]), None);
    }

    #[test]
    fn csv_round_trip() {
        let s = ScoreSeries {
            video_id: "v".into(),
            records: vec![
                ScoreRecord {
                    frame_index: 4,
                    psnr: 21.123456789012345,
                    dist: 0.1,
                    regular: 0.01,
                    normality: 1.0 / 3.0,
                    label: Some(1),
                },
                ScoreRecord {
                    frame_index: 5,
                    psnr: 100.0,
                    dist: 0.0,
                    regular: 0.0,
                    normality: 0.5,
                    label: None,
                },
            ],
        };
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = ScoreSeries::read_csv("v", std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, s);
        assert!(matches!(
            ScoreSeries::read_csv("v", "frame_index,psnr\n"),
            Err(Error::ConfigParse { line: 1, .. })
        ));
    }
}
