mod config;

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aia_core::bench::count_resources;
use aia_core::checkpoint::{load_checkpoint, save_checkpoint};
use aia_core::memory::MemoryPool;
use aia_core::metrics::MapReport;
use aia_core::model::Model;
use aia_core::train::{evaluate_map, infer_clip, inference_pool, LogRow, StepCost, TrainMode, Trainer};
use aia_core::world::{generate_dataset, Dataset, CLASS_NAMES};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "aia", version, about = "Interaction aggregation with asynchronous memory on a synthetic action world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Inputs {
    /// Checkpoint to read; defaults to model.ckpt in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset file to read; by default the dataset is regenerated from the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the dataset and its manifest.
    Generate(Common),
    /// Train and write checkpoint, pool, metrics and summary.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint and pool in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Per-class AP and mAP on the held-out videos.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Resource counts per iteration over the configured windows.
    Bench(Common),
    /// Attention maps of every block for one clip.
    Attn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Video id; defaults to the first held-out video.
        #[arg(long)]
        video: Option<u64>,
        /// 1-based clip index; defaults to the middle clip.
        #[arg(long)]
        clip: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<ConfigError>().is_some()
                || matches!(e.downcast_ref::<aia_core::Error>(), Some(aia_core::Error::Config(_)));
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}

fn load(common: &Common) -> Result<RunConfig> {
    let config = RunConfig::load(&common.config, common.seed, common.output_dir.clone())?;
    fs::create_dir_all(&config.output_dir).with_context(|| format!("creating {}", config.output_dir.display()))?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => generate(&load(&common)?),
        Command::Train { common, resume } => train(&load(&common)?, resume),
        Command::Eval { common, inputs } => eval(&load(&common)?, &inputs),
        Command::Bench(common) => bench(&load(&common)?),
        Command::Attn {
            common,
            inputs,
            video,
            clip,
        } => attn(&load(&common)?, &inputs, video, clip),
    }
}

#[derive(Serialize)]
struct DatasetManifest<'a> {
    seed: u64,
    file: &'a str,
    videos: usize,
    eval_videos: usize,
    clips: usize,
    world: &'a aia_core::world::WorldConfig,
}

fn generate(config: &RunConfig) -> Result<()> {
    let data = generate_dataset::<f64>(&config.world)?;
    let path = config.output_dir.join("dataset.bin");
    data.save(&path)?;
    let manifest = DatasetManifest {
        seed: config.seed,
        file: "dataset.bin",
        videos: data.videos.len(),
        eval_videos: data.eval_videos().len(),
        clips: data.clip_count(),
        world: &data.config,
    };
    write_json(&config.output_dir.join("dataset.json"), &manifest)?;
    println!("wrote {} clips to {}", data.clip_count(), path.display());
    Ok(())
}

fn dataset(config: &RunConfig, file: Option<&Path>) -> Result<Dataset<f64>> {
    match file {
        Some(path) => Ok(Dataset::load(path)?),
        None => Ok(generate_dataset(&config.world)?),
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    seed: u64,
    mode: TrainMode,
    iterations: u64,
    final_loss: Option<f64>,
    parameters: usize,
    last_iteration_cost: StepCost,
    eval: Option<EvalReport<'a>>,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    classes: &'a [&'a str],
    per_class_ap: &'a [Option<f64>],
    map: f64,
    prevalence: &'a [f64],
    examples: usize,
}

impl<'a> From<&'a MapReport> for EvalReport<'a> {
    fn from(r: &'a MapReport) -> Self {
        Self {
            classes: &CLASS_NAMES,
            per_class_ap: &r.per_class_ap,
            map: r.map,
            prevalence: &r.prevalence,
            examples: r.examples,
        }
    }
}

fn train(config: &RunConfig, resume: bool) -> Result<()> {
    let data = dataset(config, None)?;
    let dir = &config.output_dir;
    let (ckpt_path, pool_path, metrics_path) = (dir.join("model.ckpt"), dir.join("pool.bin"), dir.join("metrics.csv"));

    let mut trainer = if resume {
        let ckpt = load_checkpoint::<f64>(&ckpt_path)?;
        if ckpt.model.config != config.model {
            return Err(ConfigError(format!("{} was trained with a different model config", ckpt_path.display())).into());
        }
        let pool = MemoryPool::load(&pool_path)?;
        Trainer::resume(config.trainer.clone(), ckpt.model, pool, ckpt.optimizer, ckpt.state)?
    } else {
        Trainer::new(config.trainer.clone(), Model::new(config.model.clone(), config.seed)?)?
    };

    let append = resume && metrics_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if !append {
        csv.write_record(["iteration", "loss", "err"])?;
    }
    while trainer.state.iteration < trainer.config.iters {
        let row = trainer.step(data.train_videos())?;
        write_log_row(&mut csv, &row)?;
    }
    csv.flush()?;

    save_checkpoint(&ckpt_path, &trainer.model, &trainer.optimizer, &trainer.state)?;
    trainer.pool.save(&pool_path)?;

    let report = if data.eval_videos().is_empty() {
        None
    } else {
        Some(evaluate_map(&trainer.model, data.eval_videos(), config.trainer.window)?)
    };
    let summary = TrainSummary {
        seed: config.seed,
        mode: config.trainer.mode,
        iterations: trainer.state.iteration,
        final_loss: trainer.log.last().map(|r| r.loss),
        parameters: trainer.model.parameter_count(),
        last_iteration_cost: trainer.last_cost,
        eval: report.as_ref().map(EvalReport::from),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!("trained to iteration {}", trainer.state.iteration);
    Ok(())
}

fn write_log_row<W: std::io::Write>(csv: &mut csv::Writer<W>, row: &LogRow) -> Result<()> {
    let err = row.err.map_or_else(|| "inf".to_string(), |e| format!("{e:?}"));
    csv.write_record([row.iteration.to_string(), format!("{:?}", row.loss), err])?;
    Ok(())
}

fn trained_model(config: &RunConfig, inputs: &Inputs) -> Result<Model<f64>> {
    let path = inputs.checkpoint.clone().unwrap_or_else(|| config.output_dir.join("model.ckpt"));
    let ckpt = load_checkpoint::<f64>(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ckpt.model)
}

fn eval(config: &RunConfig, inputs: &Inputs) -> Result<()> {
    let model = trained_model(config, inputs)?;
    let data = dataset(config, inputs.dataset.as_deref())?;
    let report = evaluate_map(&model, data.eval_videos(), config.trainer.window)?;
    write_json(&config.output_dir.join("eval.json"), &EvalReport::from(&report))?;
    println!("mAP {:.4}", report.map);
    Ok(())
}

fn bench(config: &RunConfig) -> Result<()> {
    let path = config.output_dir.join("bench.csv");
    let mut csv = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    let runs = config
        .bench
        .amu_windows
        .iter()
        .map(|&l| (TrainMode::Amu, l))
        .chain(config.bench.joint_windows.iter().map(|&l| (TrainMode::Joint, l)));
    for (mode, window) in runs {
        if mode == TrainMode::Joint && window > config.trainer.joint_max_window {
            bail!(ConfigError(format!(
                "joint window {window} exceeds the resource guard of {}",
                config.trainer.joint_max_window
            )));
        }
        let mut world = config.world.clone();
        world.clips_per_video = world.clips_per_video.max(2 * window + 1);
        csv.serialize(count_resources(mode, window, &world, &config.model, config.seed)?)?;
    }
    csv.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn attn(config: &RunConfig, inputs: &Inputs, video: Option<u64>, clip: Option<u64>) -> Result<()> {
    let model = trained_model(config, inputs)?;
    let data = dataset(config, inputs.dataset.as_deref())?;
    let video = match video {
        Some(id) => data.video(id).ok_or_else(|| anyhow!("no video {id} in the dataset"))?,
        None => data
            .eval_videos()
            .first()
            .or(data.videos.first())
            .ok_or_else(|| anyhow!("the dataset has no videos"))?,
    };
    let t = clip.unwrap_or(video.len().div_ceil(2));
    let sample = video
        .clips
        .iter()
        .find(|c| c.clip == t)
        .ok_or_else(|| anyhow!("video {} has no clip {t}", video.id))?;
    let pool = inference_pool(&model, std::slice::from_ref(video), config.trainer.window)?;
    let inference = infer_clip(&model, &pool, video, sample)?;

    let dir = config.output_dir.join("attention");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for block in &inference.attention {
        let path = dir.join(format!("attn_block{:02}_{}.csv", block.index, block.kind.letter()));
        let mut csv = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        let keys: Vec<usize> = (0..block.key_mask.len()).filter(|&j| block.key_mask[j]).collect();
        let header = std::iter::once("query".to_string()).chain(keys.iter().map(|j| format!("key_{j}")));
        csv.write_record(header)?;
        for i in (0..block.query_mask.len()).filter(|&i| block.query_mask[i]) {
            let row = std::iter::once(i.to_string()).chain(keys.iter().map(|&j| format!("{:?}", block.weights.at(i, j))));
            csv.write_record(row)?;
        }
        csv.flush()?;
    }
    println!(
        "wrote {} attention maps for video {} clip {t} to {}",
        inference.attention.len(),
        video.id,
        dir.display()
    );
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
