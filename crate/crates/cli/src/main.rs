mod config;
mod render;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use catf_bench::{bench_attention, render_report, Variant};
use catf_core::metrics::MetricsTable;
use catf_core::model::AttentionKind;
use catf_core::scene::{
    generate_dataset, load_dataset, rasterize, save_dataset, AgentId, RasterConfig, RoadTemplate, Scene,
};
use catf_core::training::{
    load_checkpoint, prepare_samples, prepare_scene, save_checkpoint, split_scenes, train, CheckpointMeta, Predictor,
    PredictorKind,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{echo, gen_config, layer, RunConfig};
use render::{credibility_labels, overlay_image, raster_image, Overlay};

/// Bad input from the user: flags, missing files, malformed configs. Exits with 1.
#[derive(Debug)]
pub struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "catf", version, about = "Context-aware transformer trajectory prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    GenData(GenDataArgs),
    /// Train a model (or write a baseline checkpoint) and report test metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Render one prediction over the agent's raster.
    Predict(PredictArgs),
    /// Time full and projected attention over sequence lengths.
    Bench(BenchArgs),
    /// Write the raster of one scene agent as PNG.
    Rasterize(RasterizeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Road templates, cycled over the scenes.
    #[arg(long, value_delimiter = ',', required = true)]
    template: Vec<RoadTemplate>,
    #[arg(long)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Generator settings (TOML) layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Lateral drift standard deviation in meters.
    #[arg(long)]
    noise: Option<f64>,
    /// Predicted agents per scene.
    #[arg(long)]
    agents: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    Catf,
    ConstantVelocity,
    Oracle,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Run settings (TOML with [train] and [model] tables) layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// Number of predicted modes.
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long)]
    attention: Option<AttentionKind>,
    /// Ablation: drop the map context from the encoder.
    #[arg(long)]
    no_context: bool,
    /// Ablation: train on the mixture likelihood alone.
    #[arg(long)]
    no_offroad: bool,
    /// Use the off-road fraction instead of the exponential count.
    #[arg(long)]
    offroad_normalized: bool,
    /// Write a checkpoint for a non-learned predictor instead of training.
    #[arg(long, value_enum, default_value = "catf")]
    predictor: PredictorArg,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    /// Every scene in the file.
    All,
    /// The held-out scenes of the checkpoint's training split.
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Where to write the metrics as JSON.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    scene_id: String,
    /// Target agent; defaults to the first predicted agent of the scene.
    #[arg(long)]
    agent: Option<AgentId>,
    #[arg(long)]
    overlay_out: PathBuf,
    /// Output pixels per raster pixel.
    #[arg(long, default_value_t = 8)]
    scale: u32,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "full,linear")]
    variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
    seq_lens: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    p: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report_dir: PathBuf,
}

#[derive(Args)]
struct RasterizeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    scene_id: String,
    #[arg(long)]
    agent: Option<AgentId>,
    #[arg(long)]
    out: PathBuf,
    /// Raster geometry preset.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long, default_value_t = 4)]
    scale: u32,
}

fn load_data(path: &Path) -> Result<Vec<Scene>> {
    if !path.is_file() {
        return Err(usage(format!("--data: no such file {}", path.display())));
    }
    load_dataset(path).map_err(|e| usage(format!("--data: {}: {e}", path.display())))
}

fn load_ckpt(path: &Path) -> Result<(Predictor, CheckpointMeta)> {
    if !path.is_file() {
        return Err(usage(format!("--checkpoint: no such file {}", path.display())));
    }
    load_checkpoint(path).map_err(|e| usage(format!("--checkpoint: {}: {e}", path.display())))
}

fn find_scene<'a>(scenes: &'a [Scene], id: &str) -> Result<&'a Scene> {
    scenes
        .iter()
        .find(|s| s.scene_id == id)
        .ok_or_else(|| usage(format!("--scene-id: no scene {id:?} in the dataset")))
}

fn pick_agent(scene: &Scene, agent: Option<AgentId>) -> Result<AgentId> {
    let targets = scene.targets();
    match agent {
        Some(a) if targets.contains(&a) => Ok(a),
        Some(a) => Err(usage(format!(
            "--agent: {a} is not a predicted agent of {}",
            scene.scene_id
        ))),
        None => targets
            .first()
            .copied()
            .ok_or_else(|| usage(format!("--scene-id: scene {} has no predicted agents", scene.scene_id))),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = gen_config(a.config.as_deref())?;
    if let Some(noise) = a.noise {
        cfg.noise = noise;
    }
    if let Some(agents) = a.agents {
        cfg.agents = agents;
    }
    echo("generator", &cfg)?;
    let names: Vec<&str> = a.template.iter().map(|t| t.name()).collect();
    eprintln!("templates = {names:?}\nscenes = {}\nseed = {}\n", a.scenes, a.seed);
    cfg.validate().map_err(|e| usage(format!("generator config: {e}")))?;
    let scenes = generate_dataset(&cfg, &a.template, a.scenes, a.seed)?;
    save_dataset(&scenes, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = layer(&RunConfig::preset(&a.preset)?, a.config.as_deref(), "--config")?;
    let t = &mut cfg.train;
    t.preset = a.preset.clone();
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.base_lr = v;
    }
    if let Some(v) = a.patience {
        t.patience = v;
    }
    if let Some(v) = a.attention {
        t.attention = v;
    }
    t.use_context &= !a.no_context;
    t.use_offroad_loss &= !a.no_offroad;
    t.offroad_normalized |= a.offroad_normalized;
    if let Some(k) = a.modes {
        cfg.model.modes = k;
    }

    let scenes = load_data(&a.data)?;
    // the data fixes the history and horizon lengths
    if let Some(s) = scenes.first() {
        cfg.model.history = s.history_len;
        cfg.model.horizon = s.horizon;
    }
    cfg.model = cfg.train.model_config(&cfg.model);
    echo("run", &cfg)?;
    cfg.train.validate().map_err(|e| usage(format!("train config: {e}")))?;
    cfg.model.validate().map_err(|e| usage(format!("model config: {e}")))?;

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    fs::write(a.out_dir.join("config.toml"), toml::to_string(&cfg)?)?;
    let ckpt = a.out_dir.join("model.ckpt");
    let (predictor, test) = match a.predictor {
        PredictorArg::Catf => {
            let (out, test) = train(&scenes, &cfg.model, &cfg.train, Some(&a.out_dir))?;
            println!("best epoch {}", out.best_epoch);
            let predictor = Predictor::Catf {
                model: out.model,
                use_context: cfg.train.use_context,
            };
            (predictor, test)
        }
        PredictorArg::ConstantVelocity | PredictorArg::Oracle => {
            let (predictor, kind) = match a.predictor {
                PredictorArg::Oracle => (Predictor::Oracle, PredictorKind::Oracle),
                _ => (Predictor::ConstantVelocity, PredictorKind::ConstantVelocity),
            };
            let meta = CheckpointMeta::new(kind, cfg.model.clone(), Some(cfg.train.clone()), Default::default(), 0);
            save_checkpoint(&ckpt, &predictor, &meta)?;
            let split = split_scenes(scenes.len(), cfg.train.seed)?;
            let test: Vec<Scene> = split.test.iter().map(|&i| scenes[i].clone()).collect();
            let test = prepare_samples(&test, &cfg.model, cfg.train.grid_cell)?;
            (predictor, test)
        }
    };
    if test.is_empty() {
        println!("test split is empty; no metrics");
    } else {
        let table = predictor.evaluate(&test)?;
        fs::write(a.out_dir.join("test_metrics.json"), table.to_json())?;
        println!("test split\n{table}");
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (predictor, meta) = load_ckpt(&a.checkpoint)?;
    echo("checkpoint", &meta)?;
    let mut scenes = load_data(&a.data)?;
    if a.split == SplitArg::Test {
        let train = meta
            .train
            .as_ref()
            .ok_or_else(|| usage("--split: checkpoint has no training split"))?;
        let split = split_scenes(scenes.len(), train.seed)?;
        scenes = split.test.iter().map(|&i| scenes[i].clone()).collect();
    }
    let samples = prepare_samples(&scenes, &meta.model, meta.grid_cell).map_err(|e| usage(format!("--data: {e}")))?;
    let table = predictor.evaluate(&samples)?;
    let json = table.to_json();
    // the report must read back as the same table
    debug_assert_eq!(MetricsTable::from_json(&json).ok().as_ref(), Some(&table));
    fs::write(&a.report, &json).with_context(|| format!("writing {}", a.report.display()))?;
    println!("{table}");
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let (predictor, meta) = load_ckpt(&a.checkpoint)?;
    echo("checkpoint", &meta)?;
    let scenes = load_data(&a.data)?;
    let scene = find_scene(&scenes, &a.scene_id)?;
    let agent = pick_agent(scene, a.agent)?;
    let sample = prepare_scene(scene, &meta.model, meta.grid_cell)
        .map_err(|e| usage(format!("--data: {e}")))?
        .into_iter()
        .find(|s| s.agent_id == agent)
        .expect("target agent has a sample");
    let pred = predictor.predict(std::slice::from_ref(&sample))?.remove(0);
    let order = pred.ranked();
    let modes: Vec<_> = order.iter().map(|&i| pred.trajectories[i].clone()).collect();
    let cred: Vec<f64> = order.iter().map(|&i| pred.credibility[i]).collect();
    let labels = credibility_labels(&cred);
    let raster = rasterize(scene, agent, &meta.model.raster)?;
    let img = overlay_image(
        &Overlay {
            raster: &raster,
            history: &sample.input.target_history,
            truth: &sample.truth,
            modes: &modes,
            labels: &labels,
        },
        a.scale.max(1),
    );
    img.save(&a.overlay_out)
        .with_context(|| format!("writing {}", a.overlay_out.display()))?;
    for (rank, (label, c)) in labels.iter().zip(&cred).enumerate() {
        println!("mode {} credibility {label} ({c:.6})", rank + 1);
    }
    println!("overlay {}", a.overlay_out.display());
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let names: Vec<&str> = a.variants.iter().map(|v| v.name()).collect();
    eprintln!(
        "# resolved bench config\nvariants = {names:?}\nseq_lens = {:?}\np = {}\nheads = {}\nrepetitions = {}\nseed = {}\n",
        a.seq_lens, a.p, a.heads, a.repetitions, a.seed
    );
    let report =
        bench_attention(&a.variants, &a.seq_lens, a.p, a.heads, a.repetitions, a.seed).map_err(|e| match e {
            catf_bench::BenchError::Invalid(m) => usage(m),
            other => other.into(),
        })?;
    let out = render_report(&report, &a.report_dir)?;
    println!(
        "{:<14} {:>6} {:>5} {:>12} {:>10} {:>18}",
        "variant", "n", "p", "median_us", "iqr_us", "peak_buffer_bytes"
    );
    for r in &report.rows {
        println!(
            "{:<14} {:>6} {:>5} {:>12.1} {:>10.1} {:>18}",
            r.variant.name(),
            r.n,
            r.p,
            r.median_us,
            r.iqr_us,
            r.peak_buffer_bytes
        );
    }
    for (v, s) in &out.slopes {
        println!("{v} log-log slope {s:.3}");
    }
    println!(
        "threads {} pinned {} heap retained {}",
        report.threads, report.pinned, report.heap_retained
    );
    println!("table {}\nplot {}", out.table.display(), out.plot.display());
    Ok(())
}

fn rasterize_cmd(a: RasterizeArgs) -> Result<()> {
    let cfg = match a.preset.as_str() {
        "desk" => RasterConfig::desk(),
        "large" => RasterConfig::large(),
        other => return Err(usage(format!("--preset: unknown preset {other:?}"))),
    };
    echo("raster", &cfg)?;
    let scenes = load_data(&a.data)?;
    let scene = find_scene(&scenes, &a.scene_id)?;
    let agent = pick_agent(scene, a.agent)?;
    let raster = rasterize(scene, agent, &cfg)?;
    raster_image(&raster, a.scale.max(1), 1.0)
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("raster {}", a.out.display());
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("CATF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("CATF_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Rasterize(a) => rasterize_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
