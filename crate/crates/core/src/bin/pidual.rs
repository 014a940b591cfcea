use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pidual::commands;
use pidual::config::{ExperimentConfig, LoadedConfig};
use pidual::detection::Method;
use pidual::Error;

/// Noisy-label learning with privileged information.
#[derive(Parser)]
#[command(name = "pidual", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply to every missing field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the top-level `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (data.csv + data.json).
    Gen(Common),
    /// Train one configuration or a grid.
    Train {
        #[command(flatten)]
        common: Common,
        /// Parallel trials; defaults to the number of cores.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Score a dataset with a saved model and report detection AUCs.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset CSV with a clean_label column.
        #[arg(long)]
        data: PathBuf,
        /// Repeatable; defaults to the config's methods.
        #[arg(long = "method")]
        methods: Vec<Method>,
    },
    /// Closed-form and simulated risks of the linear estimators.
    Risk(Common),
    /// Train every variant under one seed and rank them.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn load(common: &Common) -> Result<LoadedConfig, Error> {
    let mut loaded = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => LoadedConfig {
            config: ExperimentConfig::default(),
            base_dir: PathBuf::new(),
        },
    };
    if let Some(seed) = common.seed {
        loaded.config.seed = seed;
    }
    Ok(loaded)
}

fn out_dir(loaded: &LoadedConfig, common: &Common) -> PathBuf {
    commands::output_dir(loaded, common.out.as_deref())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen(common) => {
            let cfg = load(&common)?;
            let out = out_dir(&cfg, &common);
            let meta = commands::gen(&cfg, &out)?;
            println!(
                "wrote {} samples to {} (noise rate {})",
                meta.n,
                out.join(commands::DATASET_FILE).display(),
                meta.realized_noise_rate.map_or("n/a".into(), |r| format!("{r:.4}"))
            );
        }
        Command::Train { common, workers } => {
            let cfg = load(&common)?;
            let out = out_dir(&cfg, &common);
            let summary = commands::train(&cfg, &out, workers)?;
            if let Some(best) = summary.trials.first() {
                println!(
                    "selected trial {} ({}): epoch {}, clean test accuracy {}",
                    best.point.index,
                    best.point.variant.name(),
                    summary.selected_epoch.unwrap_or(0),
                    best.best_clean_test_acc.map_or("n/a".into(), |a| format!("{a:.4}"))
                );
            }
            for d in &summary.detection {
                println!("{} AUC {:.4}", d.method.name(), d.auc);
            }
            println!("artifacts in {}", out.display());
        }
        Command::Detect {
            common,
            checkpoint,
            data,
            methods,
        } => {
            let cfg = load(&common)?;
            let out = out_dir(&cfg, &common);
            let methods = if methods.is_empty() {
                cfg.config.detection.methods.clone()
            } else {
                methods
            };
            let reports = commands::detect(&checkpoint, &data, &methods, &out, cfg.config.output.plots)?;
            for r in &reports {
                println!("{} AUC {:.4}", r.method.name(), r.auc);
            }
        }
        Command::Risk(common) => {
            let cfg = load(&common)?;
            let out = out_dir(&cfg, &common);
            let rows = commands::risk(&cfg, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.join(commands::RISK_FILE).display());
        }
        Command::Ablate { common, workers } => {
            let cfg = load(&common)?;
            let out = out_dir(&cfg, &common);
            let summary = commands::ablate(&cfg, &out, workers)?;
            for row in &summary.rows {
                println!(
                    "{:>2}  {:<16} {}",
                    row.rank,
                    row.variant.name(),
                    row.clean_test_acc.map_or("failed".into(), |a| format!("{a:.4}"))
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
