//! Optimization loop and the gated test-time evaluation session.

use std::collections::BTreeMap;
use std::io::Write;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_windows, stack_windows, FrameWindow, LabeledVideo};
use crate::error::{Error, Result};
use crate::eval::{roc_auc, RocCurve};
use crate::graph::Graph;
use crate::losses::{intensity_in_graph, memory_losses_in_graph, total_in_graph, LossParts, LossWeights};
use crate::memory::{self, MemoryPool, QueryGrid};
use crate::model::{Model, ModelDims, ModelVariant};
use crate::params::ParamStore;
use crate::scoring::{feature_distance, gap_score, psnr, regular_score, ScoreRecord, ScoreSeries};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 8,
            epochs: 60,
            seed: 0,
            loss: LossWeights::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer state keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl Adam {
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().for_each(|g| g.scale_assign(s));
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub pool: MemoryPool,
    pub adam: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(variant: ModelVariant, dims: ModelDims, memory_size: usize, seed: u64) -> Result<Self> {
        let feature_dim = dims.feature_dim;
        Ok(Self {
            model: Model::new(variant, dims, seed)?,
            pool: MemoryPool::init(memory_size, feature_dim, seed.wrapping_add(1))?,
            adam: Adam::default(),
            step: 0,
        })
    }
}

/// Loss parts, parameter gradients and the batch's queries for one forward pass.
pub struct LossEvaluation {
    pub parts: LossParts,
    pub grads: BTreeMap<String, Tensor>,
    pub queries: Option<QueryGrid>,
}

/// Forward and backward pass of the total loss with the pool held constant.
pub fn compute_loss(
    model: &Model,
    pool: &MemoryPool,
    inputs: &Tensor,
    targets: &Tensor,
    weights: &LossWeights,
) -> Result<LossEvaluation> {
    let mut g = Graph::new();
    let pool_var = model.variant.has_memory().then(|| g.constant(pool.as_tensor().clone()));
    let pass = model.forward(&mut g, inputs, pool_var, None)?;
    let target = g.constant(targets.clone());
    let intensity = intensity_in_graph(&mut g, pass.predicted, target)?;
    let mem_losses = match (pass.memory, pool_var) {
        (Some(m), Some(pool)) => {
            let (nearest, second) = memory::rank_rows(g.value(m.weights));
            Some(memory_losses_in_graph(
                &mut g,
                m.queries,
                pool,
                &nearest,
                &second,
                inputs.dim(0),
                weights.alpha,
            )?)
        }
        _ => None,
    };
    let total = total_in_graph(&mut g, intensity, mem_losses, weights)?;
    let scalar = |v| g.value(v).data()[0];
    let parts = LossParts {
        intensity: scalar(intensity),
        compactness: mem_losses.map_or(0.0, |(c, _)| scalar(c)),
        separateness: mem_losses.map_or(0.0, |(_, s)| scalar(s)),
        total: scalar(total),
    };
    let queries = match (pass.memory, pass.f_lat) {
        (Some(m), Some(f_lat)) => {
            let lat = g.value(f_lat);
            Some(QueryGrid::from_rows(g.value(m.queries).clone(), lat.dim(0), lat.dim(2), lat.dim(3))?)
        }
        _ => None,
    };
    let grads = if parts.is_finite() {
        g.backward(total).params(&g)
    } else {
        BTreeMap::new()
    };
    Ok(LossEvaluation { parts, grads, queries })
}

/// One optimization step on a stacked batch, followed by the memory update
/// with the batch's queries.
pub fn train_step(state: &mut TrainState, inputs: &Tensor, targets: &Tensor, cfg: &TrainConfig) -> Result<LossParts> {
    let LossEvaluation {
        parts,
        mut grads,
        queries,
    } = compute_loss(&state.model, &state.pool, inputs, targets, &cfg.loss)?;
    state.step += 1;
    if !parts.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            intensity: parts.intensity,
            compactness: parts.compactness,
            separateness: parts.separateness,
            total: parts.total,
        });
    }
    if let Some(max) = cfg.clip_norm {
        let norm = clip_global_norm(&mut grads, max);
        if norm > max {
            debug!("step {}: clipped gradient norm {norm:.3}", state.step);
        }
    }
    state.adam.step(&mut state.model.params, &grads, cfg);
    if let Some(q) = queries {
        state.pool = memory::update(&q, &state.pool)?;
    }
    Ok(parts)
}

pub const TRAIN_LOG_HEADER: &str = "step,intensity,compactness,separateness,total";

/// Train over every window of `videos` for `cfg.epochs` shuffled epochs.
/// Each step's losses are appended to `log` as CSV when given.
pub fn train(
    state: &mut TrainState,
    videos: &[LabeledVideo],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<LossParts>> {
    cfg.validate()?;
    let n = state.model.dims.n_inputs;
    let windows: Vec<FrameWindow<'_>> = videos.iter().flat_map(|v| make_windows(v, n)).collect();
    if windows.is_empty() {
        return Err(Error::Config(format!("no training windows: every video is shorter than {} frames", n + 1)));
    }
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{TRAIN_LOG_HEADER}")?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<FrameWindow<'_>> = chunk.iter().map(|&i| windows[i]).collect();
            let (x, y) = stack_windows(&batch);
            let parts = train_step(state, &x, &y, cfg)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    state.step, parts.intensity, parts.compactness, parts.separateness, parts.total
                )?;
            }
            epoch_total += parts.total;
            batches += 1;
            history.push(parts);
        }
        info!(
            "epoch {}/{}: mean loss {:.5} over {batches} batches",
            epoch + 1,
            cfg.epochs,
            epoch_total / batches as f64
        );
    }
    Ok(history)
}

/// Scores of a whole evaluation session.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub series: Vec<ScoreSeries>,
    /// Present when the concatenated labels contain both classes.
    pub roc: Option<RocCurve>,
    pub gap: Option<f64>,
    /// Number of frames that passed the gate and updated the pool.
    pub pool_updates: usize,
    /// Normality weight actually used (forced to 1 without a memory branch).
    pub lambda: f64,
}

impl Evaluation {
    fn summarize(series: Vec<ScoreSeries>, pool_updates: usize, lambda: f64) -> Result<Self> {
        let normality: Vec<f64> = series.iter().flat_map(|s| s.normality()).collect();
        let labels: Option<Vec<u8>> = series.iter().map(|s| s.labels()).collect::<Option<Vec<_>>>().map(|v| v.concat());
        let (roc, gap) = match labels {
            Some(l) if l.contains(&0) && l.contains(&1) => {
                let scores: Vec<f64> = normality.iter().map(|n| 1.0 - n).collect();
                (Some(roc_auc(&scores, &l)?), gap_score(&normality, &l))
            }
            _ => (None, None),
        };
        Ok(Self {
            series,
            roc,
            gap,
            pool_updates,
            lambda,
        })
    }

    pub fn auc(&self) -> Option<f64> {
        self.roc.as_ref().map(|r| r.auc)
    }

    /// Re-blend the stored PSNR and distance columns with another `lambda`.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        let mut series = self.series.clone();
        for s in &mut series {
            s.renormalize(lambda)?;
        }
        Self::summarize(series, self.pool_updates, lambda)
    }

    /// The grid value of `lambda` (step 0.05) with the highest AUC.
    pub fn best_lambda(&self) -> Result<Option<(f64, f64)>> {
        let mut best: Option<(f64, f64)> = None;
        for i in 0..=20 {
            let lambda = i as f64 / 20.0;
            if let Some(auc) = self.with_lambda(lambda)?.auc() {
                if best.is_none_or(|(_, b)| auc > b) {
                    best = Some((lambda, auc));
                }
            }
        }
        Ok(best)
    }
}

fn to_unit(t: &Tensor) -> Tensor {
    t.map(|v| (v + 1.0) / 2.0)
}

/// Score every window of `videos` in order with batch size 1.
///
/// After a frame is scored, its queries update a session copy of `pool` when
/// its regular score passes the `gamma` gate. The caller's pool is untouched.
pub fn evaluate(model: &Model, pool: &MemoryPool, videos: &[LabeledVideo], gamma: f64, lambda: f64) -> Result<Evaluation> {
    evaluate_with(model, pool, videos, gamma, lambda, |_| Ok(()))
}

/// A scored frame as seen by an [`evaluate_with`] observer. Frames are in `[0, 1]`.
pub struct ScoredFrame<'a> {
    pub video_id: &'a str,
    pub frame_index: usize,
    pub predicted: &'a Tensor,
    pub target: &'a Tensor,
}

/// [`evaluate`] with a callback invoked on every scored frame.
pub fn evaluate_with<F>(
    model: &Model,
    pool: &MemoryPool,
    videos: &[LabeledVideo],
    gamma: f64,
    lambda: f64,
    mut observe: F,
) -> Result<Evaluation>
where
    F: FnMut(ScoredFrame<'_>) -> Result<()>,
{
    let lambda = if model.variant.has_memory() { lambda } else { 1.0 };
    let mut session = pool.clone();
    let mut updates = 0usize;
    let mut all = Vec::with_capacity(videos.len());
    for video in videos {
        let mut records = Vec::new();
        for w in make_windows(video, model.dims.n_inputs) {
            let (x, y) = stack_windows(&[w]);
            let out = model.predict_next_frame(&x, &session)?;
            let pred = to_unit(&out.predicted);
            let target = to_unit(&y);
            observe(ScoredFrame {
                video_id: &video.id,
                frame_index: w.target_index,
                predicted: &pred,
                target: &target,
            })?;
            let r = regular_score(&pred, &target)?;
            let dist = match (&out.queries, &out.matching) {
                (Some(q), Some(m)) => feature_distance(q, &session, m),
                _ => 0.0,
            };
            records.push(ScoreRecord {
                frame_index: w.target_index,
                psnr: psnr(&pred, &target)?,
                dist,
                regular: r,
                normality: 0.0,
                label: video.labels.as_ref().map(|l| l[w.target_index]),
            });
            if let Some(q) = &out.queries {
                if memory::gate_allows(r, gamma) {
                    session = memory::update(q, &session)?;
                    updates += 1;
                }
            }
        }
        let mut series = ScoreSeries {
            video_id: video.id.clone(),
            records,
        };
        if !series.records.is_empty() {
            series.renormalize(lambda)?;
        }
        all.push(series);
    }
    Evaluation::summarize(all, updates, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // f(w) = Σ (w − 3)², gradient 2(w − 3)
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(&[2], vec![-1.0, 8.0]));
        let cfg = TrainConfig {
            learning_rate: 0.1,
            clip_norm: None,
            ..TrainConfig::default()
        };
        let f = |p: &ParamStore| p.get("w").unwrap().data().iter().map(|w| (w - 3.0) * (w - 3.0)).sum::<f64>();
        let start = f(&p);
        let mut adam = Adam::default();
        for _ in 0..300 {
            let g = p.get("w").unwrap().map(|w| 2.0 * (w - 3.0));
            adam.step(&mut p, &BTreeMap::from([("w".to_string(), g)]), &cfg);
        }
        assert!(f(&p) < start * 1e-3, "{} -> {}", start, f(&p));
    }

    #[test]
    fn first_adam_step_moves_by_the_learning_rate() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(&[2], vec![0.0, 0.0]));
        let g = Tensor::from_vec(&[2], vec![5.0, -0.01]);
        let cfg = TrainConfig {
            learning_rate: 0.5,
            ..TrainConfig::default()
        };
        Adam::default().step(&mut p, &BTreeMap::from([("w".to_string(), g)]), &cfg);
        let w = p.get("w").unwrap().data();
        assert!((w[0] + 0.5).abs() < 1e-6 && (w[1] - 0.5).abs() < 1e-4, "{w:?}");
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = BTreeMap::from([
            ("a".to_string(), Tensor::from_vec(&[1], vec![30.0])),
            ("b".to_string(), Tensor::from_vec(&[1], vec![40.0])),
        ]);
        assert_eq!(clip_global_norm(&mut g, 10.0), 50.0);
        assert!((g["a"].data()[0] - 6.0).abs() < 1e-12);
        assert!((g["b"].data()[0] - 8.0).abs() < 1e-12);
        let mut small = BTreeMap::from([("a".to_string(), Tensor::from_vec(&[1], vec![3.0]))]);
        clip_global_norm(&mut small, 10.0);
        assert_eq!(small["a"].data()[0], 3.0);
    }

    #[test]
    fn zero_learning_rate_only_moves_the_pool() {
        let dims = ModelDims::toy();
        let mut state = TrainState::new(ModelVariant::LgnNet, dims, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[2, 12, 16, 16], 1.0, &mut rng);
        let y = Tensor::uniform(&[2, 3, 16, 16], 1.0, &mut rng);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let before = state.clone();
        train_step(&mut state, &x, &y, &cfg).unwrap();
        assert_eq!(state.model.params, before.model.params);
        assert_ne!(state.pool, before.pool);
        for n in state.pool.norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            learning_rate: f64::NAN,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
