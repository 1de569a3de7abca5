//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod support;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use lgn_core::checkpoint::{decode, encode, load_checkpoint, save_checkpoint, Checkpoint};
use lgn_core::config::{Preset, RunConfig};
use lgn_core::data::{make_windows, stack_windows, LabeledVideo};
use lgn_core::eval::roc_auc;
use lgn_core::graph::Graph;
use lgn_core::memory::{match_queries, read, update, MemoryPool, QueryGrid};
use lgn_core::model::{Model, ModelDims, ModelVariant};
use lgn_core::scoring::{normality_score, normalize_series, regular_score, ScoreSeries};
use lgn_core::stlstm::ZigzagTrace;
use lgn_core::synth::{synth_generate, SynthConfig};
use lgn_core::tensor::Tensor;
use lgn_core::trainer::{evaluate, train, train_step, Evaluation, TrainConfig, TrainState};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst_unit: Vec<(&str, f64)> = vec![
        ("st_cell", support::gradcheck_st_cell()),
        ("stp_net", support::gradcheck_stp_net()),
        ("memory_read", support::gradcheck_memory_read()),
    ];
    let names = ["intensity", "compactness", "separateness", "total"];
    for (n, e) in names.iter().zip(support::gradcheck_losses()) {
        worst_unit.push((n, e));
    }
    for (name, err) in &worst_unit {
        ensure(*err < 1e-4, || format!("{name} relative error {err:.3e}"))?;
    }
    let mut worst_e2e = 0.0f64;
    for variant in ModelVariant::ALL {
        for (name, err) in support::gradcheck_end_to_end(variant, 4) {
            ensure(err < 1e-3, || format!("{variant} {name} relative error {err:.3e}"))?;
            worst_e2e = worst_e2e.max(err);
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    let worst = worst_unit.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(format!("max unit err {worst:.2e}, max end-to-end err {worst_e2e:.2e}"))
}

fn memory_invariants() -> Outcome {
    let mut r = support::rng(21);
    for trial in 0..50 {
        let (c, size) = (r.random_range(2..6), r.random_range(2..8));
        let map = Tensor::uniform(&[2, c, 3, 4], 1.0, &mut r);
        let grid = QueryGrid::from_feature_map(&map).map_err(fail)?;
        let pool = MemoryPool::init(size, c, trial).map_err(fail)?;
        for n in pool.norms() {
            ensure((n - 1.0).abs() < 1e-12, || format!("initial norm {n}"))?;
        }
        let m = match_queries(&grid, &pool).map_err(fail)?;
        for row in m.weights.data().chunks(size) {
            let s: f64 = row.iter().sum();
            ensure(row.iter().all(|&w| w >= 0.0) && (s - 1.0).abs() < 1e-12, || format!("row sums to {s}"))?;
        }
        let out = read(&grid, &pool).map_err(fail)?;
        let plane = 12;
        for b in 0..2 {
            for k in 0..plane {
                let v: Vec<f64> = (0..c).map(|ch| out.data()[(b * c + ch) * plane + k]).collect();
                for (ch, &x) in v.iter().enumerate() {
                    let lo = (0..size).map(|i| pool.prototype(i)[ch]).fold(f64::INFINITY, f64::min);
                    let hi = (0..size).map(|i| pool.prototype(i)[ch]).fold(f64::NEG_INFINITY, f64::max);
                    ensure(x >= lo - 1e-12 && x <= hi + 1e-12, || "read leaves the prototype hull".into())?;
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                ensure(norm <= 1.0 + 1e-12, || format!("read norm {norm}"))?;
            }
        }
    }

    let mut pool = MemoryPool::init(5, 4, 3).map_err(fail)?;
    for _ in 0..1000 {
        let grid = QueryGrid::from_feature_map(&Tensor::uniform(&[1, 4, 1, 3], 1.0, &mut r)).map_err(fail)?;
        pool = update(&grid, &pool).map_err(fail)?;
    }
    let drift = pool.norms().iter().map(|n| (n - 1.0).abs()).fold(0.0, f64::max);
    ensure(drift < 1e-9, || format!("norm drift {drift:.2e} after 1000 updates"))?;

    let copy = pool.prototype(0).to_vec();
    let rows = Tensor::from_vec(&[2, 4], [copy.clone(), copy].concat());
    let next = update(&QueryGrid::from_rows(rows, 1, 1, 2).map_err(fail)?, &pool).map_err(fail)?;
    for i in 1..5 {
        ensure(next.prototype(i) == pool.prototype(i), || format!("unclaimed prototype {i} moved"))?;
    }

    let mut max_dev = 0.0f64;
    for _ in 0..20 {
        let queries: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let protos: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                let a: f64 = r.random_range(0.0..std::f64::consts::TAU);
                vec![a.cos(), a.sin()]
            })
            .collect();
        let pool = MemoryPool::from_tensor(Tensor::from_vec(&[2, 2], protos.concat())).map_err(fail)?;
        let flat: Vec<f64> = (0..2).flat_map(|c| queries.iter().map(move |q| q[c])).collect();
        let grid = QueryGrid::from_feature_map(&Tensor::from_vec(&[1, 2, 1, 3], flat)).map_err(fail)?;
        let (w_ref, r_ref) = support::brute_force_read(&queries, &protos);
        let m = match_queries(&grid, &pool).map_err(fail)?;
        let out = read(&grid, &pool).map_err(fail)?;
        for k in 0..3 {
            for i in 0..2 {
                max_dev = max_dev.max((m.weights.data()[k * 2 + i] - w_ref[k][i]).abs());
            }
            for c in 0..2 {
                max_dev = max_dev.max((out.data()[c * 3 + k] - r_ref[k][c]).abs());
            }
        }
    }
    ensure(max_dev < 1e-9, || format!("oracle deviation {max_dev:.2e}"))?;
    Ok(format!("oracle deviation {max_dev:.1e}, norm drift {drift:.1e}"))
}

fn zigzag_routing() -> Outcome {
    let model = Model::new(ModelVariant::LgnNet, ModelDims::toy(), 4).map_err(fail)?;
    let dims = &model.dims;
    let mut r = support::rng(8);
    let window = Tensor::uniform(&[1, dims.n_inputs * dims.channels, dims.image_size, dims.image_size], 1.0, &mut r);
    let pool = MemoryPool::init(4, dims.feature_dim, 1).map_err(fail)?;
    let mut g = Graph::new();
    let pool_var = g.constant(pool.as_tensor().clone());
    let mut trace = ZigzagTrace::default();
    model.forward(&mut g, &window, Some(pool_var), Some(&mut trace)).map_err(fail)?;
    let steps = trace.bottom_inputs.len();
    ensure(steps == dims.n_inputs, || format!("{steps} traced steps"))?;
    ensure(trace.bottom_inputs[0].max_abs() == 0.0, || "first bottom memory is not zero".into())?;
    for t in 1..steps {
        ensure(trace.bottom_inputs[t] == trace.top_outputs[t - 1], || format!("step {t} breaks the zigzag"))?;
        ensure(trace.top_outputs[t - 1].max_abs() > 0.0, || format!("step {t} carries no memory"))?;
    }
    Ok(format!("{} steps routed bit-exactly through {} layers", steps, dims.layers))
}

fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx
}

fn scoring_identities() -> Outcome {
    let mut r = support::rng(4);
    for _ in 0..20 {
        let e: f64 = r.random_range(0.01..1.0);
        let pred = Tensor::uniform(&[1, 3, 4, 4], 0.5, &mut r);
        // a constant per-channel offset of e/√3 gives a channel-L2 error of e at every pixel
        let shift = e / 3f64.sqrt();
        let target = Tensor::from_vec(pred.shape(), pred.data().iter().map(|v| v + shift).collect());
        let got = regular_score(&pred, &target).map_err(fail)?;
        ensure((got - e).abs() < 1e-9, || format!("uniform error {e} scored {got}"))?;
    }
    for _ in 0..20 {
        let v: Vec<f64> = (0..30).map(|_| r.random_range(-10.0..10.0)).collect();
        let n = normalize_series(&v);
        let (lo, hi) = (argsort(&v)[0], argsort(&v)[29]);
        ensure(n[lo] == 0.0 && n[hi] == 1.0, || "normalized endpoints are not 0 and 1".into())?;
        let p: Vec<f64> = (0..30).map(|i| i as f64 * 0.37 + r.random_range(0.0..0.3)).collect();
        let d: Vec<f64> = (0..30).map(|_| r.random_range(0.0..2.0)).collect();
        let nn = normality_score(&p, &d, 1.0).map_err(fail)?;
        ensure(argsort(&nn) == argsort(&p), || "λ=1 ordering differs from PSNR".into())?;
    }
    let mut max_dev = 0.0f64;
    for _ in 0..20 {
        let n = r.random_range(4..80);
        let (scores, labels) = support::random_scored_instance(&mut r, n);
        let auc = roc_auc(&scores, &labels).map_err(fail)?.auc;
        max_dev = max_dev.max((auc - support::pairwise_auc(&scores, &labels)).abs());
    }
    ensure(max_dev < 1e-9, || format!("trapezoid vs pairwise deviation {max_dev:.2e}"))?;
    Ok(format!("trapezoid vs pairwise max deviation {max_dev:.1e}"))
}

fn overfit_one_batch() -> Outcome {
    let start = Instant::now();
    let ds = synth_generate(&SynthConfig {
        size: 16,
        num_train: 2,
        num_test: 0,
        train_len: 10,
        ..SynthConfig::default()
    })
    .map_err(fail)?;
    let ws: Vec<_> = ds.train.iter().flat_map(|v| make_windows(v, 4).into_iter().take(2)).collect();
    let (x, y) = stack_windows(&ws);
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let run = || -> Result<Vec<f64>, String> {
        let mut s = TrainState::new(ModelVariant::LgnNet, ModelDims::toy(), 4, 5).map_err(fail)?;
        (0..200).map(|_| train_step(&mut s, &x, &y, &cfg).map(|p| p.total).map_err(fail)).collect()
    };
    let a = run()?;
    let elapsed = start.elapsed();
    let b = run()?;
    ensure(a == b, || "loss trace differs between identical seeds".into())?;
    let ratio = a[199] / a[0];
    ensure(ratio <= 0.1, || format!("loss {:.4} -> {:.4} (ratio {ratio:.3})", a[0], a[199]))?;
    ensure(elapsed < Duration::from_secs(180), || format!("took {elapsed:?}"))?;
    Ok(format!("loss {:.3} -> {:.3} (ratio {ratio:.3}) in {elapsed:.1?}", a[0], a[199]))
}

struct Trained {
    state: TrainState,
    config: TrainConfig,
    eval: Evaluation,
    train_time: Duration,
}

fn train_variant(variant: ModelVariant, rc: &RunConfig, ds: &SynthDatasetRef) -> Result<Trained, String> {
    let start = Instant::now();
    let mut state = TrainState::new(variant, rc.dims(), rc.memory_size, rc.seed).map_err(fail)?;
    let config = rc.train_config();
    train(&mut state, ds.train, &config, None).map_err(fail)?;
    let train_time = start.elapsed();
    let eval = evaluate(&state.model, &state.pool, ds.test, rc.gamma, rc.lambda).map_err(fail)?;
    Ok(Trained {
        state,
        config,
        eval,
        train_time,
    })
}

struct SynthDatasetRef<'a> {
    train: &'a [LabeledVideo],
    test: &'a [LabeledVideo],
}

fn synthetic_end_to_end(run: &Result<Trained, String>, elapsed: Duration) -> Outcome {
    let t = run.as_ref().map_err(Clone::clone)?;
    let auc = t.eval.auc().ok_or("no AUC")?;
    let gap = t.eval.gap.ok_or("no gap score")?;
    ensure(auc >= 0.85, || format!("AUC {auc:.4} < 0.85"))?;
    ensure(gap > 0.1, || format!("gap {gap:.4} <= 0.1"))?;
    ensure(elapsed < Duration::from_secs(900), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "AUC {auc:.4}, gap {gap:.4}, {} test-time updates, trained in {:.1?}",
        t.eval.pool_updates, t.train_time
    ))
}

fn ablation(lgn: &Result<Trained, String>, others: &[(ModelVariant, Result<f64, String>)]) -> Outcome {
    let base = lgn.as_ref().map_err(Clone::clone)?.eval.auc().ok_or("no AUC")?;
    let mut parts = vec![format!("lgn_net {base:.4}")];
    for (v, auc) in others {
        let auc = auc.as_ref().map_err(|e| format!("{v}: {e}"))?;
        ensure(base >= auc - 0.02, || format!("lgn_net {base:.4} < {v} {auc:.4} - 0.02"))?;
        parts.push(format!("{v} {auc:.4}"));
    }
    Ok(parts.join(", "))
}

fn hyperparameters(lgn: &Result<Trained, String>, rc: &RunConfig, test: &[LabeledVideo]) -> Outcome {
    let expected = [
        (Preset::Ped2, 10, 10.0, 5.0, 0.6, 0.009),
        (Preset::Avenue, 10, 10.0, 2.0, 0.5, 0.006),
        (Preset::Shanghaitech, 200, 1.0, 1.0, 0.8, 0.0135),
    ];
    for (p, i, lc, ls, l, g) in expected {
        let v = p.values();
        let got = (v.memory_size, v.lambda_c, v.lambda_s, v.lambda, v.gamma);
        ensure(got == (i, lc, ls, l, g), || format!("{p:?} preset holds {got:?}"))?;
        let rc = RunConfig::from_preset(p);
        ensure(
            (rc.memory_size, rc.lambda_c, rc.lambda_s, rc.lambda, rc.gamma) == (i, lc, ls, l, g),
            || format!("{p:?} run config disagrees with its preset"),
        )?;
    }

    let t = lgn.as_ref().map_err(Clone::clone)?;
    let closed = evaluate(&t.state.model, &t.state.pool, test, 0.0, rc.lambda).map_err(fail)?;
    ensure(closed.pool_updates == 0, || format!("γ=0 still made {} updates", closed.pool_updates))?;

    for s in &t.eval.series {
        let p: Vec<f64> = s.records.iter().map(|r| r.psnr).collect();
        let d: Vec<f64> = s.records.iter().map(|r| r.dist).collect();
        let psnr_only = normality_score(&p, &d, 1.0).map_err(fail)?;
        let dist_only = normality_score(&p, &d, 0.0).map_err(fail)?;
        let np = normalize_series(&p);
        let nd = normalize_series(&d);
        for k in 0..p.len() {
            ensure((psnr_only[k] - np[k]).abs() < 1e-12, || "λ=1 is not the PSNR term".into())?;
            ensure((dist_only[k] - (1.0 - nd[k])).abs() < 1e-12, || "λ=0 is not the distance term".into())?;
        }
    }
    let at = |l: f64| t.eval.with_lambda(l).ok().and_then(|e| e.auc());
    let best = t.eval.best_lambda().map_err(fail)?.ok_or("no AUC for best λ")?;
    Ok(format!(
        "presets exact, γ=0 gives 0 updates (γ={} gave {}); AUC at λ=0 {:.4}, λ*={:.2} {:.4}, λ=1 {:.4}",
        rc.gamma,
        t.eval.pool_updates,
        at(0.0).unwrap_or(f64::NAN),
        best.0,
        best.1,
        at(1.0).unwrap_or(f64::NAN)
    ))
}

fn csv_bytes(series: &[ScoreSeries]) -> Result<Vec<Vec<u8>>, String> {
    series
        .iter()
        .map(|s| {
            let mut buf = Vec::new();
            s.write_csv(&mut buf).map(|_| buf).map_err(fail)
        })
        .collect()
}

fn checkpoint_round_trip(lgn: &Result<Trained, String>, rc: &RunConfig, test: &[LabeledVideo]) -> Outcome {
    let t = lgn.as_ref().map_err(Clone::clone)?;
    let ckpt = Checkpoint::from_state(&t.state, &t.config);
    let dir = tempfile::tempdir().map_err(fail)?;
    let path = dir.path().join("lgn_net.ckpt");
    save_checkpoint(&ckpt, &path).map_err(fail)?;
    let loaded = load_checkpoint(&path).map_err(fail)?;
    ensure(loaded == ckpt, || "reloaded checkpoint differs".into())?;
    let bytes = encode(&ckpt).map_err(fail)?;
    ensure(encode(&decode(&bytes).map_err(fail)?).map_err(fail)? == bytes, || "re-encoding changes bytes".into())?;
    let again = evaluate(&loaded.model, &loaded.pool, test, rc.gamma, rc.lambda).map_err(fail)?;
    let (a, b) = (csv_bytes(&t.eval.series)?, csv_bytes(&again.series)?);
    ensure(a == b, || "score CSVs differ after reload".into())?;
    Ok(format!("{} bytes, {} score CSVs identical", bytes.len(), a.len()))
}

fn report(id: u32, name: &str, outcome: Outcome, elapsed: Duration) -> bool {
    match outcome {
        Ok(detail) => {
            println!("PASS {id} {name} [{elapsed:.1?}] {detail}");
            true
        }
        Err(why) => {
            println!("FAIL {id} {name} [{elapsed:.1?}] {why}");
            false
        }
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn main() -> ExitCode {
    let mut ok = true;
    let (o, d) = timed(gradient_suite);
    ok &= report(1, "gradient suite", o, d);
    let (o, d) = timed(memory_invariants);
    ok &= report(2, "memory invariants", o, d);
    let (o, d) = timed(zigzag_routing);
    ok &= report(3, "zigzag routing", o, d);
    let (o, d) = timed(scoring_identities);
    ok &= report(4, "scoring identities", o, d);
    let (o, d) = timed(overfit_one_batch);
    ok &= report(5, "overfit one batch", o, d);

    let rc = RunConfig::from_preset(Preset::Synthetic);
    let ds = match synth_generate(&SynthConfig::default()) {
        Ok(ds) => ds,
        Err(e) => {
            println!("FAIL 6-9 synthetic dataset could not be generated: {e}");
            return ExitCode::FAILURE;
        }
    };
    let data = SynthDatasetRef {
        train: &ds.train,
        test: &ds.test,
    };
    let (lgn, d6) = timed(|| train_variant(ModelVariant::LgnNet, &rc, &data));
    ok &= report(6, "synthetic end-to-end", synthetic_end_to_end(&lgn, d6), d6);

    let (others, d) = timed(|| {
        [ModelVariant::LocNet, ModelVariant::GloNet, ModelVariant::LgnSt]
            .into_iter()
            .map(|v| {
                let auc = train_variant(v, &rc, &data).and_then(|t| t.eval.auc().ok_or_else(|| "no AUC".into()));
                (v, auc)
            })
            .collect::<Vec<_>>()
    });
    ok &= report(7, "ablation direction", ablation(&lgn, &others), d);

    let (o, d) = timed(|| hyperparameters(&lgn, &rc, &ds.test));
    ok &= report(8, "hyperparameter plumbing", o, d);
    let (o, d) = timed(|| checkpoint_round_trip(&lgn, &rc, &ds.test));
    ok &= report(9, "checkpoint round-trip", o, d);

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
