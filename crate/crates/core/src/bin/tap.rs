use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tap_core::evalkit::evaluate;
use tap_core::harness::pipeline::{
    load_checkpoint, run_infer, run_train_captioner, run_train_localizer, save_checkpoint, Decode, FullModel,
};
use tap_core::harness::{generate_dataset, Dataset, PipelineConfig, Predictions};
use tap_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tap", version, about = "Synthetic dense video captioning pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration JSON; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for generation, training and decoding. Overrides the config.
    #[arg(long, global = true, env = "TAP_SEED")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_videos: Option<usize>,
        /// Index of the first video, for held-out splits of the same world.
        #[arg(long)]
        first_index: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Stage A: train the event localizer.
    TrainLocalizer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace JSON; defaults to `<out>.trace.json`.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Stage B: train the captioner on top of a stage-A checkpoint.
    TrainCaptioner {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        localizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace JSON; defaults to `<out>.trace.json`.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Localize and caption every video.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ecs", value_parser = ["ecs", "random", "first-k"])]
        decode: String,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Score predictions against a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Plain-text table; defaults to `<out>` with a `.txt` extension.
        #[arg(long)]
        table: Option<PathBuf>,
    },
}

/// Fails with a `NotFound` error naming the path.
fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        return Ok(path);
    }
    let msg = format!("{}: no such file", path.display());
    Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, msg)))
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let cfg = match &common.config {
        Some(path) => PipelineConfig::load(require(path)?)?,
        None => PipelineConfig::default(),
    };
    Ok(match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn trace_path(out: &Path, trace: Option<PathBuf>) -> PathBuf {
    trace.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".trace.json");
        PathBuf::from(s)
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Gen {
            out,
            num_videos,
            first_index,
            noise,
        } => {
            cfg.gen.num_videos = num_videos.unwrap_or(cfg.gen.num_videos);
            cfg.gen.first_index = first_index.unwrap_or(cfg.gen.first_index);
            cfg.gen.noise = noise.unwrap_or(cfg.gen.noise);
            generate_dataset(&cfg.gen)?.save(out)?;
        }
        Command::TrainLocalizer {
            data,
            out,
            trace,
            epochs,
        } => {
            cfg.stage_a.epochs = epochs.unwrap_or(cfg.stage_a.epochs);
            let dataset = Dataset::load(require(&data)?)?;
            let (params, tr) = run_train_localizer(&dataset, &cfg)?;
            save_checkpoint(&out, &params)?;
            tr.save(trace_path(&out, trace))?;
        }
        Command::TrainCaptioner {
            data,
            localizer,
            out,
            trace,
            epochs,
        } => {
            cfg.stage_b.epochs = epochs.unwrap_or(cfg.stage_b.epochs);
            let dataset = Dataset::load(require(&data)?)?;
            let loc = load_checkpoint(require(&localizer)?)?;
            let (params, tr) = run_train_captioner(&dataset, &loc, &cfg)?;
            save_checkpoint(&out, &params)?;
            tr.save(trace_path(&out, trace))?;
        }
        Command::Infer {
            data,
            model,
            out,
            decode,
            alpha,
        } => {
            cfg.ecs.alpha = alpha.unwrap_or(cfg.ecs.alpha);
            cfg.validate()?;
            let decode: Decode = decode.parse()?;
            let dataset = Dataset::load(require(&data)?)?;
            let model = FullModel::from_checkpoint(&load_checkpoint(require(&model)?)?)?;
            run_infer(&dataset, &model, decode, &cfg)?.save(out)?;
        }
        Command::Eval {
            data,
            predictions,
            out,
            table,
        } => {
            let dataset = Dataset::load(require(&data)?)?;
            let preds = Predictions::load(require(&predictions)?)?;
            let report = evaluate(&dataset, &preds)?;
            std::fs::write(&out, report.to_json()?)?;
            let table = table.unwrap_or_else(|| out.with_extension("txt"));
            std::fs::write(table, report.to_table())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tap: error: {}", one_line(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn one_line(e: &Error) -> String {
    e.to_string().lines().next().unwrap_or_default().to_string()
}
