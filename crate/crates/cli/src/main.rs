mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use lgn_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use lgn_core::config::{ConfigFile, Preset, RunConfig};
use lgn_core::data::{load_video_dir, load_video_frames, Split};
use lgn_core::eval::{dataset_roc, error_map};
use lgn_core::scoring::ScoreSeries;
use lgn_core::synth::{synth_generate, AnomalyKind, SynthConfig};
use lgn_core::trainer::{evaluate_with, train, Evaluation, TrainState};

/// Environment variable naming the default output directory.
const OUTPUT_ENV: &str = "LGN_OUTPUT_DIR";
const DEFAULT_OUTPUT: &str = "lgn_out";

#[derive(Parser)]
#[command(name = "lgn", version, about = "Video anomaly detection with local and global normality")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of moving squares.
    Synth(SynthArgs),
    /// Train a model on the training split.
    Train(Settings),
    /// Score the test split and report frame-level AUC.
    Eval(EvalArgs),
    /// Score a single video directory.
    Score(ScoreArgs),
    /// Draw normality curves, ROC curves and error heatmaps.
    Plot(PlotArgs),
}

/// Settings shared by every model command. Flags override the config file,
/// which overrides the preset.
#[derive(Args, Clone, Default)]
struct Settings {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    memory_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    lambda_s: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n_inputs: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Print the resolved settings as JSON and exit without running.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset root to create (defaults to the output directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    train: usize,
    #[arg(long, default_value_t = 4)]
    test: usize,
    /// Comma-separated subset of fast_motion, shape_swap, reverse_path.
    #[arg(long, value_delimiter = ',', default_value = "fast_motion,shape_swap,reverse_path")]
    kinds: Vec<String>,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 40)]
    train_len: usize,
    #[arg(long, default_value_t = 100)]
    test_len: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    settings: Settings,
    /// Also write per-frame error maps as 16-bit PNGs.
    #[arg(long)]
    save_error_maps: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    settings: Settings,
    /// Directory of frames of one video.
    #[arg(long)]
    video: PathBuf,
    /// Optional per-frame 0/1 label file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// CSV destination; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Directory of score CSVs (searched recursively).
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Directory of 16-bit error maps written by `eval --save-error-maps`.
    #[arg(long)]
    error_maps: Option<PathBuf>,
    /// Where figures go (defaults to `<output dir>/plots`).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Problems caused by the invocation rather than by the program.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl Settings {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("preset", self.preset.clone());
        push("variant", self.variant.clone());
        push("memory_size", self.memory_size.map(|v| v.to_string()));
        push("lambda", self.lambda.map(|v| v.to_string()));
        push("gamma", self.gamma.map(|v| v.to_string()));
        push("lambda_c", self.lambda_c.map(|v| v.to_string()));
        push("lambda_s", self.lambda_s.map(|v| v.to_string()));
        push("alpha", self.alpha.map(|v| v.to_string()));
        push("n_inputs", self.n_inputs.map(|v| v.to_string()));
        push("image_size", self.image_size.map(|v| v.to_string()));
        push("learning_rate", self.learning_rate.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string()));
        push("output_dir", self.output_dir.as_ref().map(|p| p.display().to_string()));
        push("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string()));
        out
    }

    fn resolve(&self) -> Result<RunConfig> {
        let file = self.config.as_deref().map(ConfigFile::load).transpose()?;
        let mut cfg = RunConfig::resolve(Preset::Synthetic, file.as_ref(), &self.overrides())?;
        if cfg.output_dir.is_none() {
            cfg.output_dir = Some(default_output_dir());
        }
        Ok(cfg)
    }

    /// Resolve, or print the result and return `None` under `--print-config`.
    fn resolve_or_print(&self) -> Result<Option<RunConfig>> {
        let cfg = self.resolve()?;
        if self.print_config {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            return Ok(None);
        }
        Ok(Some(cfg))
    }
}

fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
}

fn output_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(default_output_dir)
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| output_dir(cfg).join(format!("{}.ckpt", cfg.variant)))
}

fn data_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.data_dir
        .as_deref()
        .ok_or_else(|| usage("no dataset given: pass --data-dir or set data_dir in the config file"))
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let kinds = args
        .kinds
        .iter()
        .filter(|k| !k.is_empty())
        .map(|k| k.parse::<AnomalyKind>())
        .collect::<lgn_core::Result<Vec<_>>>()?;
    let cfg = SynthConfig {
        seed: args.seed,
        num_train: args.train,
        num_test: args.test,
        kinds,
        size: args.size,
        train_len: args.train_len,
        test_len: args.test_len,
    };
    let root = args.out.unwrap_or_else(default_output_dir);
    let ds = synth_generate(&cfg)?;
    ds.write(&root)?;
    info!(
        "wrote {} training and {} test videos to {}",
        ds.train.len(),
        ds.test.len(),
        root.display()
    );
    Ok(())
}

fn run_train(settings: Settings) -> Result<()> {
    let Some(cfg) = settings.resolve_or_print()? else {
        return Ok(());
    };
    let videos = load_video_frames(data_dir(&cfg)?, Split::Train, cfg.image_size)?;
    info!("training {} on {} videos ({} preset)", cfg.variant, videos.len(), cfg.preset);
    let mut state = TrainState::new(cfg.variant, cfg.dims(), cfg.memory_size, cfg.seed)?;
    let out = output_dir(&cfg);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let log_path = out.join(format!("{}_train_log.csv", cfg.variant));
    let mut log = Vec::new();
    let train_cfg = cfg.train_config();
    let history = train(&mut state, &videos, &train_cfg, Some(&mut log))?;
    fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;
    let ckpt_path = checkpoint_path(&cfg);
    if let Some(parent) = ckpt_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_checkpoint(&Checkpoint::from_state(&state, &train_cfg), &ckpt_path)?;
    if let Some(last) = history.last() {
        println!(
            "variant={} steps={} final_loss={:.6} checkpoint={}",
            cfg.variant,
            history.len(),
            last.total,
            ckpt_path.display()
        );
    }
    Ok(())
}

fn load_for_eval(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = checkpoint_path(cfg);
    let ckpt = load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if ckpt.model.variant != cfg.variant && cfg.checkpoint.is_none() {
        warn!("checkpoint holds {}, not {}", ckpt.model.variant, cfg.variant);
    }
    Ok(ckpt)
}

fn write_series(dir: &Path, series: &[ScoreSeries]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in series {
        let mut buf = Vec::new();
        s.write_csv(&mut buf)?;
        fs::write(dir.join(format!("{}.csv", s.video_id)), buf)?;
    }
    Ok(())
}

fn summary(cfg: &RunConfig, ckpt: &Checkpoint, ev: &Evaluation) -> Result<serde_json::Value> {
    let at = |l: f64| -> Result<Option<f64>> { Ok(ev.with_lambda(l)?.auc()) };
    let best = ev.best_lambda()?;
    Ok(json!({
        "variant": ckpt.model.variant.as_str(),
        "preset": cfg.preset.as_str(),
        "auc": ev.auc(),
        "gap": ev.gap,
        "lambda": ev.lambda,
        "gamma": cfg.gamma,
        "pool_updates": ev.pool_updates,
        "memory_size": ckpt.pool.size(),
        "videos": ev.series.len(),
        "frames": ev.series.iter().map(|s| s.records.len()).sum::<usize>(),
        "auc_lambda_0": at(0.0)?,
        "auc_lambda_1": at(1.0)?,
        "best_lambda": best.map(|b| b.0),
        "best_lambda_auc": best.map(|b| b.1),
    }))
}

fn fmt_opt(v: &serde_json::Value) -> String {
    v.as_f64().map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let Some(cfg) = args.settings.resolve_or_print()? else {
        return Ok(());
    };
    let ckpt = load_for_eval(&cfg)?;
    let videos = load_video_frames(data_dir(&cfg)?, Split::Test, ckpt.model.dims.image_size)?;
    let out = output_dir(&cfg);
    let variant = ckpt.model.variant;
    let maps_dir = out.join("error_maps").join(variant.as_str());
    let save_maps = args.save_error_maps;
    let ev = evaluate_with(&ckpt.model, &ckpt.pool, &videos, cfg.gamma, cfg.lambda, |f| {
        if save_maps {
            let map = error_map(f.predicted, f.target)?;
            let dir = maps_dir.join(f.video_id);
            fs::create_dir_all(&dir)?;
            let (h, w) = (map.dim(0) as u32, map.dim(1) as u32);
            let path = dir.join(format!("{:04}.png", f.frame_index));
            plot::encode_error_map(map.data(), w, h)
                .save(&path)
                .map_err(|e| lgn_core::Error::Decode { path, reason: e.to_string() })?;
        }
        Ok(())
    })?;
    write_series(&out.join("scores").join(variant.as_str()), &ev.series)?;
    if let Some(roc) = &ev.roc {
        let mut buf = Vec::new();
        roc.write_csv(&mut buf)?;
        fs::write(out.join(format!("{variant}_roc.csv")), buf)?;
    }
    let s = summary(&cfg, &ckpt, &ev)?;
    let text = format!(
        "variant: {}\npreset: {}\nauc: {}\ngap: {}\nlambda: {}\ngamma: {}\npool_updates: {}\nauc_lambda_0: {}\nauc_lambda_1: {}\nbest_lambda: {} (auc {})\n",
        variant,
        cfg.preset,
        fmt_opt(&s["auc"]),
        fmt_opt(&s["gap"]),
        ev.lambda,
        cfg.gamma,
        ev.pool_updates,
        fmt_opt(&s["auc_lambda_0"]),
        fmt_opt(&s["auc_lambda_1"]),
        fmt_opt(&s["best_lambda"]),
        fmt_opt(&s["best_lambda_auc"]),
    );
    fs::write(out.join(format!("{variant}_summary.txt")), &text)?;
    fs::write(
        out.join(format!("{variant}_summary.json")),
        serde_json::to_string_pretty(&s)? + "\n",
    )?;
    print!("{text}");
    Ok(())
}

fn run_score(args: ScoreArgs) -> Result<()> {
    let Some(cfg) = args.settings.resolve_or_print()? else {
        return Ok(());
    };
    let ckpt = load_for_eval(&cfg)?;
    let video = load_video_dir(&args.video, ckpt.model.dims.image_size, args.labels.as_deref())?;
    if video.frames.len() <= ckpt.model.dims.n_inputs {
        bail!(usage(format!(
            "video {} has {} frames; at least {} are needed",
            args.video.display(),
            video.frames.len(),
            ckpt.model.dims.n_inputs + 1
        )));
    }
    let ev = evaluate_with(&ckpt.model, &ckpt.pool, std::slice::from_ref(&video), cfg.gamma, cfg.lambda, |_| {
        Ok(())
    })?;
    let mut buf = Vec::new();
    ev.series[0].write_csv(&mut buf)?;
    match args.out {
        Some(path) => fs::write(&path, buf).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{}", String::from_utf8(buf)?),
    }
    Ok(())
}

fn collect_files(dir: &Path, ext: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, ext, out)?;
        } else if p.extension().is_some_and(|e| e == ext) {
            out.push(p);
        }
    }
    Ok(())
}

fn run_plot(args: PlotArgs) -> Result<()> {
    if args.scores.is_none() && args.error_maps.is_none() {
        bail!(usage("nothing to plot: pass --scores and/or --error-maps"));
    }
    let out = args.out.unwrap_or_else(|| default_output_dir().join("plots"));
    fs::create_dir_all(&out)?;
    if let Some(dir) = &args.scores {
        let mut csvs = Vec::new();
        collect_files(dir, "csv", &mut csvs)?;
        let mut all = Vec::new();
        for path in &csvs {
            let text = fs::read_to_string(path)?;
            if !text.starts_with(lgn_core::scoring::CSV_HEADER) {
                continue;
            }
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let series = ScoreSeries::read_csv(&path.display().to_string(), &text)?;
            plot::normality_curve(&series, &out.join(format!("{id}_normality.png")))?;
            all.push(series);
        }
        if all.is_empty() {
            bail!(usage(format!("no score CSVs found under {}", dir.display())));
        }
        match dataset_roc(&all) {
            Ok(roc) => {
                plot::roc_curve(&roc, &out.join("roc.png"))?;
                println!("auc={:.4}", roc.auc);
            }
            Err(e) => warn!("no ROC curve drawn: {e}"),
        }
        info!("plotted {} score series into {}", all.len(), out.display());
    }
    if let Some(dir) = &args.error_maps {
        let mut pngs = Vec::new();
        collect_files(dir, "png", &mut pngs)?;
        for src in &pngs {
            let rel = src.strip_prefix(dir).unwrap_or(src);
            let dst = out.join("heatmaps").join(rel);
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent)?;
            }
            plot::heatmap(src, &dst)?;
        }
        info!("coloured {} error maps", pngs.len());
    }
    Ok(())
}

/// 1 for mistakes in the invocation or its inputs, 2 for internal failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<lgn_core::Error>() {
            return match e {
                lgn_core::Error::Shape { .. } | lgn_core::Error::NonFiniteLoss { .. } => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(s) => run_train(s),
        Command::Eval(a) => run_eval(a),
        Command::Score(a) => run_score(a),
        Command::Plot(a) => run_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
