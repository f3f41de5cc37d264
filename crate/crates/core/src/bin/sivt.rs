use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sivt::data::{generate_synthetic, index_mvtec, Categories, Split, SyntheticSpec};
use sivt::pipeline::{flops_report, Detector, Sweep};
use sivt::train::{train, TrainState};
use sivt::{ModelConfig, Result, SivtError};

#[derive(Parser)]
#[command(name = "sivt", version, about = "Self-induction transformer anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the train split of a dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Comma-separated category subset.
        #[arg(long, value_delimiter = ',')]
        categories: Vec<String>,
    },
    /// Score images and write anomaly maps.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ensemble: Option<usize>,
    },
    /// Evaluate on the test split and print a CSV table.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Score with the plain encoder instead of self-induction.
        #[arg(long)]
        vanilla: bool,
        #[arg(long, value_delimiter = ',')]
        categories: Vec<String>,
    },
    /// Print parameter and multiply-accumulate counts.
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Sweep the subset count (N) or the patch size (P).
        #[arg(long)]
        sweep: Option<Sweep>,
    },
    /// Generate a synthetic texture dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn categories(list: Vec<String>) -> Categories {
    if list.is_empty() {
        Categories::All
    } else {
        Categories::Only(list)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            epochs,
            seed,
            resume,
            categories: cats,
        } => {
            let mut cfg = ModelConfig::load(&config)?;
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let index = index_mvtec(&data, &categories(cats))?;
            let resume = resume.map(|p| TrainState::load(&p)).transpose()?;
            let (state, manifest) = train(&cfg, &index.split(Split::Train), &out, resume)?;
            let last = state.history.last().map_or(f64::NAN, |h| h.total);
            println!("checkpoint={} epochs={} loss={last}", manifest.checkpoint.display(), state.epochs_done);
        }
        Command::Infer {
            ckpt,
            input,
            out,
            ensemble,
        } => {
            let det = Detector::from_checkpoint(&ckpt)?;
            det.infer(&input, &out, ensemble)?;
            print!("{}", std::fs::read_to_string(out.join("scores.csv")).map_err(|e| SivtError::Io {
                path: out.join("scores.csv"),
                source: e,
            })?);
        }
        Command::Eval {
            ckpt,
            data,
            vanilla,
            categories: cats,
        } => {
            let det = Detector::from_checkpoint(&ckpt)?;
            let index = index_mvtec(&data, &categories(cats))?;
            let result = det.evaluate(&index, vanilla.then_some(true))?;
            print!("{}", result.to_csv());
        }
        Command::Flops { config, sweep } => {
            print!("{}", flops_report(&ModelConfig::load(&config)?, sweep)?);
        }
        Command::Synth { spec, out } => {
            let index = generate_synthetic(&SyntheticSpec::load(&spec)?, &out)?;
            println!("images={} out={}", index.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
            eprintln!("error kind={} message=\"{message}\"", e.kind());
            ExitCode::FAILURE
        }
    }
}
