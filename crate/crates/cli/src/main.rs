//! `greenseg`: synthetic data, preparation, training, hard example mining,
//! inference, evaluation and vectorization from the command line.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use commands::EvalSource;
use config::ConfigError;
use greenseg::ErrorKind;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "greenseg", version, about = "Greenhouse segmentation pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run seed; falls back to the config, then GREENSEG_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic scenes with GeoJSON labels.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes; overrides `synth.count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Condition, tile and filter labelled scenes into tile stores.
    Prepare {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on prepared tiles.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue a checkpoint with hard example mining rounds.
    Hem {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a probability map and polygons for one scene.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        raster: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Pixel metrics of a checkpoint or a probability raster against labels.
    Eval {
        #[arg(long, requires = "raster", conflicts_with = "prob")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        raster: Option<PathBuf>,
        /// Single-band probability raster from `infer`.
        #[arg(long, required_unless_present = "checkpoint")]
        prob: Option<PathBuf>,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Threshold a probability raster and emit rectangle polygons.
    Vectorize {
        #[arg(long)]
        prob: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f32>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<greenseg::Error>() {
            return match e.kind() {
                ErrorKind::Numeric => 4,
                ErrorKind::Contract | ErrorKind::Data => 3,
            };
        }
    }
    3
}

/// The cause chain, skipping causes their parent already spells out.
fn render(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !prev.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        prev = text;
    }
    out
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    if let Some(n) = g.workers {
        if n == 0 {
            return Err(ConfigError("--workers must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ConfigError(e.to_string()))?;
    }
    let mut overrides = g.overrides.clone();
    if let Command::Synth { count: Some(n), .. } = &cli.command {
        overrides.push(format!("synth.count={n}"));
    }
    let cfg = config::load(g.config.as_deref(), &overrides, g.seed)?;
    match cli.command {
        Command::Synth { out, .. } => commands::synth(&cfg, &out)?,
        Command::Prepare { train, val, out } => {
            let m = commands::prepare(&cfg, &train, &val, &out)?;
            println!("{} training tiles, {} validation tiles", m.train.summary.kept, m.val.summary.kept);
        }
        Command::Train { data, out } => {
            let r = commands::train(&cfg, &data, &out)?;
            match r.best {
                Some(b) => println!("best val F1 {:.4} at epoch {} (threshold {:.3})", b.val_f1, b.epoch, b.threshold),
                None => println!("no epoch completed"),
            }
        }
        Command::Hem { data, checkpoint, out } => {
            let r = commands::hem(&cfg, &data, &checkpoint, &out)?;
            println!("val F1 {:.4} -> {:.4}", r.start.val_f1, r.best.val_f1);
        }
        Command::Infer {
            checkpoint,
            raster,
            out,
            threshold,
        } => {
            let r = commands::infer(&cfg, &checkpoint, &raster, threshold, &out)?;
            println!("{} polygon(s), {:.1} tiles/s", r.polygons, r.timing.tiles_per_second);
        }
        Command::Eval {
            checkpoint,
            raster,
            prob,
            labels,
            out,
            threshold,
        } => {
            let source = match (&checkpoint, &raster, &prob) {
                (Some(c), Some(r), _) => EvalSource::Checkpoint { checkpoint: c, raster: r },
                (_, _, Some(p)) => EvalSource::Prob(p),
                _ => return Err(ConfigError("eval needs --checkpoint with --raster, or --prob".into()).into()),
            };
            let m = commands::eval(&cfg, source, &labels, threshold, &out)?;
            println!("F1 {:.4} IoU {:.4} kappa {:.4}", m.f1, m.iou, m.kappa);
        }
        Command::Vectorize { prob, out, threshold } => {
            let n = commands::vectorize_cmd(&cfg, &prob, threshold, &out)?;
            println!("{n} polygon(s)");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
