use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(name = "mp3d", version, about = "Pseudo-3D lesion detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitMode {
    Full,
    Backbone,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic CT dataset.
    SynthGen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Weight file to start from; any training slice count is accepted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        init_mode: InitMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict on the key slices of a dataset and score the predictions.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `config.json` beside the weights.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Score this prediction CSV instead of running the model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and FLOP table per variant and slice count.
    Profile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        slices: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train a three-slice detector on synthetic colour images.
    PretrainSim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge the loss curves of two training runs.
    Compare {
        /// Two run directories, `A,B`.
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per dataset fraction.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.6,0.2")]
        fractions: Vec<f64>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = commands::configure_threads();
    let result = match cli.command {
        Command::SynthGen { config, out } => commands::synth_gen(&config, &out),
        Command::Train { config, data, init, init_mode, out } => {
            let mode = match init_mode {
                InitMode::Full => mp3d::pretrain::TransferMode::Full,
                InitMode::Backbone => mp3d::pretrain::TransferMode::Backbone,
            };
            commands::train(&config, &data, init.as_deref(), mode, &out, threads)
        }
        Command::Eval { weights, data, config, predictions, out } => {
            commands::eval(&weights, &data, config.as_deref(), predictions.as_deref(), &out)
        }
        Command::Profile { config, slices, out } => commands::profile(&config, slices, &out),
        Command::PretrainSim { config, out } => commands::pretrain_sim(&config, &out, threads),
        Command::Compare { runs, out } => match runs.as_slice() {
            [a, b] => commands::compare(a, b, &out),
            _ => Err(anyhow::anyhow!("--runs takes exactly two directories, got {}", runs.len())),
        },
        Command::Sweep { config, data, fractions, init, out } => {
            commands::sweep(&config, &data, &fractions, init.as_deref(), &out, threads)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
