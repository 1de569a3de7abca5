//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use lgn_core::graph::{Graph, Var};
use lgn_core::losses::{intensity_in_graph, memory_losses_in_graph, total_in_graph, LossWeights};
use lgn_core::memory::{self, MemoryPool};
use lgn_core::model::{Model, ModelDims, ModelVariant};
use lgn_core::params::ParamStore;
use lgn_core::stlstm::{CellKind, CellParams, StpNet};
use lgn_core::tensor::Tensor;
use lgn_core::trainer::compute_loss;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
/// The toy model's total loss is O(100) while deep-layer gradients are O(1e-6),
/// so a tiny step drowns in cancellation. A wider step keeps the truncation
/// error far below the tolerance for these smooth losses.
pub const E2E_STEP: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], bound: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, bound, r)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vectors vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

fn entries(len: usize, max: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut idx = sample(r, len, max).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Central-difference check of every leaf.
///
/// `build` places the leaves on a fresh graph and returns the scalar loss plus
/// the graph handle of each leaf (in the same order). At most `max_entries`
/// sampled coordinates per leaf are perturbed. Returns the worst per-leaf
/// relative error.
pub fn check_leaves<F>(leaves: &[Tensor], build: F, max_entries: usize, seed: u64) -> f64
where
    F: Fn(&mut Graph, &[Tensor]) -> (Var, Vec<Var>),
{
    let mut g = Graph::new();
    let (loss, vars) = build(&mut g, leaves);
    let grads = g.backward(loss);
    let eval = |ls: &[Tensor]| {
        let mut g = Graph::new();
        let (loss, _) = build(&mut g, ls);
        g.value(loss).data()[0]
    };
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic_full = grads
            .get(vars[li])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(leaf.shape()));
        let idx = entries(leaf.len(), max_entries, &mut r);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &e in &idx {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[e] += FD_STEP;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[e] -= FD_STEP;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * FD_STEP));
            analytic.push(analytic_full.data()[e]);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Contract a tensor with fixed random weights so every output entry matters.
pub fn probe(g: &mut Graph, v: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let w = random(g.value(v).shape(), 1.0, &mut r);
    let w = g.constant(w);
    let prod = g.mul(v, w).unwrap();
    g.sum(prod)
}

fn st_net(layers: usize) -> StpNet {
    StpNet {
        kind: CellKind::StLstm,
        layers,
        in_channels: 3,
        hidden: 4,
        kernel: 3,
    }
}

/// One ST-LSTM cell: inputs, states and all six kernels are checked.
pub fn gradcheck_st_cell() -> f64 {
    let net = st_net(1);
    let mut store = ParamStore::new();
    net.init(&mut store, &mut rng(1));
    let mut r = rng(2);
    let names = ["stp.0.wx", "stp.0.bx", "stp.0.wh", "stp.0.wm", "stp.0.wo", "stp.0.w11"];
    let mut leaves: Vec<Tensor> = names
        .iter()
        .map(|n| {
            // re-randomize biases too so no gradient is trivially structured
            let t = store.get(n).unwrap();
            random(t.shape(), 0.5, &mut r)
        })
        .collect();
    leaves.push(random(&[2, 3, 5, 5], 1.0, &mut r)); // x
    leaves.push(random(&[2, 4, 5, 5], 1.0, &mut r)); // h
    leaves.push(random(&[2, 4, 5, 5], 1.0, &mut r)); // c
    leaves.push(random(&[2, 4, 5, 5], 1.0, &mut r)); // m
    check_leaves(
        &leaves,
        |g, ls| {
            let vars: Vec<Var> = ls.iter().map(|t| g.variable(t.clone())).collect();
            let p = CellParams {
                wx: vars[0],
                bx: vars[1],
                wh: vars[2],
                wm: Some(vars[3]),
                wo: Some(vars[4]),
                w11: Some(vars[5]),
            };
            let out = net.st_cell_step(g, &p, vars[6], vars[7], vars[8], vars[9]).unwrap();
            let a = probe(g, out.h, 10);
            let b = probe(g, out.c, 11);
            let c = probe(g, out.m.unwrap(), 12);
            let s = g.add(a, b).unwrap();
            (g.add(s, c).unwrap(), vars)
        },
        40,
        3,
    )
}

fn store_leaves(store: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    store.iter().map(|(n, t)| (n.clone(), t.clone())).unzip()
}

/// A two-step, two-layer spatiotemporal stack, through every kernel and input.
pub fn gradcheck_stp_net() -> f64 {
    let net = st_net(2);
    let mut store = ParamStore::new();
    net.init(&mut store, &mut rng(4));
    let (names, mut leaves) = store_leaves(&store);
    let np = leaves.len();
    let mut r = rng(5);
    leaves.push(random(&[1, 3, 4, 4], 1.0, &mut r));
    leaves.push(random(&[1, 3, 4, 4], 1.0, &mut r));
    check_leaves(
        &leaves,
        |g, ls| {
            let mut s = ParamStore::new();
            for (n, t) in names.iter().zip(ls) {
                s.insert(n.clone(), t.clone());
            }
            let xs = vec![g.variable(ls[np].clone()), g.variable(ls[np + 1].clone())];
            let out = net.forward(g, &s, &xs, None).unwrap();
            let loss = probe(g, out, 13);
            let mut vars: Vec<Var> = names.iter().map(|n| g.bound_params()[n]).collect();
            vars.extend(xs);
            (loss, vars)
        },
        40,
        6,
    )
}

/// Differentiable memory read with respect to both the feature map and the pool.
pub fn gradcheck_memory_read() -> f64 {
    let mut r = rng(7);
    let leaves = vec![random(&[2, 5, 2, 3], 1.0, &mut r), random(&[4, 5], 1.0, &mut r)];
    check_leaves(
        &leaves,
        |g, ls| {
            let f = g.variable(ls[0].clone());
            let p = g.variable(ls[1].clone());
            let m = memory::read_in_graph(g, f, p).unwrap();
            let a = probe(g, m.read, 14);
            let b = probe(g, m.weights, 15);
            let c = probe(g, m.queries, 16);
            let s = g.add(a, b).unwrap();
            (g.add(s, c).unwrap(), vec![f, p])
        },
        60,
        8,
    )
}

/// Intensity, compactness and separateness in isolation, and their total.
pub fn gradcheck_losses() -> [f64; 4] {
    let mut r = rng(9);
    let pred = random(&[2, 3, 4, 4], 1.0, &mut r);
    let target = random(&[2, 3, 4, 4], 1.0, &mut r);
    let queries = random(&[6, 4], 1.0, &mut r);
    let pool = random(&[3, 4], 1.0, &mut r);
    // fix the ranking from the unperturbed inner products
    let weights = {
        let mut g = Graph::new();
        let q = g.constant(queries.clone());
        let p = g.constant(pool.clone());
        let l = g.matmul_nt(q, p).unwrap();
        let w = g.softmax_rows(l).unwrap();
        g.value(w).clone()
    };
    let (nearest, second) = memory::rank_rows(&weights);
    let w = LossWeights {
        lambda_c: 10.0,
        lambda_s: 5.0,
        // a wide margin keeps every hinge active and away from its kink
        alpha: 3.0,
    };

    let intensity = check_leaves(
        &[pred.clone(), target.clone()],
        |g, ls| {
            let a = g.variable(ls[0].clone());
            let b = g.variable(ls[1].clone());
            (intensity_in_graph(g, a, b).unwrap(), vec![a, b])
        },
        96,
        10,
    );
    let mem = |pick: usize| {
        check_leaves(
            &[queries.clone(), pool.clone()],
            |g, ls| {
                let q = g.variable(ls[0].clone());
                let p = g.variable(ls[1].clone());
                let (com, sep) = memory_losses_in_graph(g, q, p, &nearest, &second, 2, w.alpha).unwrap();
                (if pick == 0 { com } else { sep }, vec![q, p])
            },
            40,
            11,
        )
    };
    let total = check_leaves(
        &[pred, target, queries.clone(), pool.clone()],
        |g, ls| {
            let vars: Vec<Var> = ls.iter().map(|t| g.variable(t.clone())).collect();
            let int = intensity_in_graph(g, vars[0], vars[1]).unwrap();
            let mem = memory_losses_in_graph(g, vars[2], vars[3], &nearest, &second, 2, w.alpha).unwrap();
            (total_in_graph(g, int, Some(mem), &w).unwrap(), vars)
        },
        40,
        12,
    );
    [intensity, mem(0), mem(1), total]
}

/// Per-parameter relative errors of the full toy model's total loss.
pub fn gradcheck_end_to_end(variant: ModelVariant, max_entries: usize) -> BTreeMap<String, f64> {
    let dims = ModelDims::toy();
    let model = Model::new(variant, dims.clone(), 21).unwrap();
    let pool = MemoryPool::init(4, dims.feature_dim, 22).unwrap();
    let mut r = rng(23);
    let x = random(&[2, dims.n_inputs * dims.channels, 16, 16], 1.0, &mut r);
    let y = random(&[2, dims.channels, 16, 16], 1.0, &mut r);
    let w = LossWeights::default();
    let base = compute_loss(&model, &pool, &x, &y, &w).unwrap();
    let loss_at = |m: &Model| compute_loss(m, &pool, &x, &y, &w).unwrap().parts.total;
    let mut out = BTreeMap::new();
    for (name, tensor) in model.params.iter() {
        let idx = entries(tensor.len(), max_entries, &mut r);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for e in idx {
            let mut plus = model.clone();
            plus.params.get_mut(name).unwrap().data_mut()[e] += E2E_STEP;
            let mut minus = model.clone();
            minus.params.get_mut(name).unwrap().data_mut()[e] -= E2E_STEP;
            numeric.push((loss_at(&plus) - loss_at(&minus)) / (2.0 * E2E_STEP));
            analytic.push(base.grads[name].data()[e]);
        }
        out.insert(name.clone(), rel_error(&analytic, &numeric));
    }
    out
}

/// Softmax matching and read computed with plain loops.
pub fn brute_force_read(queries: &[Vec<f64>], protos: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut weights = Vec::new();
    let mut reads = Vec::new();
    for q in queries {
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let qn: Vec<f64> = q.iter().map(|v| v / norm).collect();
        let logits: Vec<f64> = protos.iter().map(|p| p.iter().zip(&qn).map(|(a, b)| a * b).sum()).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let w: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let mut read = vec![0.0; qn.len()];
        for (wi, p) in w.iter().zip(protos) {
            for (r, v) in read.iter_mut().zip(p) {
                *r += wi * v;
            }
        }
        weights.push(w);
        reads.push(read);
    }
    (weights, reads)
}

/// Mann-Whitney statistic by comparing every positive with every negative.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Random labeled scores with both classes and deliberate ties.
pub fn random_scored_instance(r: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<u8>) {
    let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let scores = (0..n).map(|_| (r.random_range(0..20) as f64) / 20.0).collect();
    (scores, labels)
}
