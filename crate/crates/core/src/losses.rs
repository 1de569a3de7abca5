//! Training losses: intensity, compactness, separateness and their weighted sum.
//!
//! Per-window losses follow the equations (norms and sums over queries); the
//! graph versions average those per-window values over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::memory::{MatchResult, MemoryPool, QueryGrid};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_s: f64,
    /// Separateness margin.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 10.0,
            lambda_s: 5.0,
            alpha: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub intensity: f64,
    pub compactness: f64,
    pub separateness: f64,
    pub total: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.intensity.is_finite()
            && self.compactness.is_finite()
            && self.separateness.is_finite()
            && self.total.is_finite()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `‖pred − target‖₂` over every pixel and channel.
pub fn intensity_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return shape_err("intensity_loss", format!("{:?} vs {:?}", pred.shape(), target.shape()));
    }
    Ok(dist(pred.data(), target.data()))
}

/// `Σ_k ‖q_k − p_nearest(k)‖₂`.
pub fn compactness_loss(queries: &QueryGrid, pool: &MemoryPool, m: &MatchResult) -> f64 {
    (0..queries.len())
        .map(|k| dist(queries.query(k), pool.prototype(m.nearest[k])))
        .sum()
}

/// `Σ_k max(0, ‖q_k − p_nearest‖₂ − ‖q_k − p_second‖₂ + α)`.
pub fn separateness_loss(queries: &QueryGrid, pool: &MemoryPool, m: &MatchResult, alpha: f64) -> Result<f64> {
    if pool.size() < 2 {
        return Err(Error::Config("separateness loss needs at least 2 prototypes".into()));
    }
    Ok((0..queries.len())
        .map(|k| {
            let q = queries.query(k);
            let near = dist(q, pool.prototype(m.nearest[k]));
            let far = dist(q, pool.prototype(m.second[k]));
            (near - far + alpha).max(0.0)
        })
        .sum())
}

pub fn total_loss(intensity: f64, compactness: f64, separateness: f64, w: &LossWeights) -> f64 {
    intensity + w.lambda_c * compactness + w.lambda_s * separateness
}

/// Batch mean of per-window intensity losses.
pub fn intensity_in_graph(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let norms = g.sample_norms(diff);
    Ok(g.mean(norms))
}

/// Batch means of the per-window compactness and separateness sums.
///
/// `queries` are the `[B·K, C]` graph rows; `nearest`/`second` come from the
/// matching weights.
pub fn memory_losses_in_graph(
    g: &mut Graph,
    queries: Var,
    pool: Var,
    nearest: &[usize],
    second: &[usize],
    samples: usize,
    alpha: f64,
) -> Result<(Var, Var)> {
    if g.value(pool).dim(0) < 2 {
        return Err(Error::Config("separateness loss needs at least 2 prototypes".into()));
    }
    let pc = g.gather_rows(pool, nearest)?;
    let ps = g.gather_rows(pool, second)?;
    let dc = g.sub(queries, pc)?;
    let dn = g.row_norms(dc)?;
    let ds = g.sub(queries, ps)?;
    let dsn = g.row_norms(ds)?;

    let com = g.segment_sum(dn, samples)?;
    let com = g.mean(com);

    let gap = g.sub(dn, dsn)?;
    let gap = g.add_scalar(gap, alpha);
    let hinge = g.relu(gap);
    let sep = g.segment_sum(hinge, samples)?;
    let sep = g.mean(sep);
    Ok((com, sep))
}

pub fn total_in_graph(g: &mut Graph, intensity: Var, memory: Option<(Var, Var)>, w: &LossWeights) -> Result<Var> {
    match memory {
        None => Ok(intensity),
        Some((com, sep)) => {
            let c = g.scale(com, w.lambda_c);
            let s = g.scale(sep, w.lambda_s);
            let t = g.add(intensity, c)?;
            g.add(t, s)
        }
    }
}
