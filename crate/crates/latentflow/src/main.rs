use clap::{Parser, Subcommand};
use latentflow::cli::{self, CliError, InferArgs};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "latentflow", version, about = "Optical flow with latent cost tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic data and write a checkpoint.
    Train {
        /// key=value config file with model and training settings.
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate flow between two PPM images and write a .flo file.
    Infer {
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source image (PPM, P6).
        src: PathBuf,
        /// Target image (PPM, P6), same size as the source.
        tgt: PathBuf,
        /// Output flow path (.flo).
        #[arg(long)]
        out: PathBuf,
        /// Config describing the architecture; defaults to the toy preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Refinement iterations; defaults to the config's eval setting.
        #[arg(long)]
        iters: Option<usize>,
        /// Tile size HxW for images larger than the training resolution.
        #[arg(long, value_parser = parse_tile_arg)]
        tile: Option<(usize, usize)>,
        /// Also write a color-coded flow visualization (PPM).
        #[arg(long)]
        viz: Option<PathBuf>,
    },
    /// Compare directories of predicted and ground-truth .flo files.
    Eval {
        /// Directory of predicted .flo files.
        pred: PathBuf,
        /// Directory of ground-truth .flo files with matching names.
        gt: PathBuf,
    },
    /// Verify analytic gradients against central differences at f64.
    Gradcheck {
        /// Config to check; defaults to the toy preset.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Time the pipeline stages on one synthetic pair.
    Bench {
        /// Config to benchmark; defaults to the toy preset.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_tile_arg(s: &str) -> Result<(usize, usize), String> {
    cli::parse_tile(s).map_err(|e| e.to_string())
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train { config, out } => cli::cmd_train(&config, &out),
        Command::Infer { checkpoint, src, tgt, out, config, iters, tile, viz } => {
            cli::cmd_infer(&InferArgs { checkpoint, src, tgt, out, config, iters, tile, viz })
        }
        Command::Eval { pred, gt } => cli::cmd_eval(&pred, &gt),
        Command::Gradcheck { config } => cli::cmd_gradcheck(config.as_deref()),
        Command::Bench { config } => cli::cmd_bench(config.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
