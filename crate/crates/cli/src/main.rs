use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unireid::cli::{self, CliError};
use unireid::eval::Protocol;

#[derive(Parser)]
#[command(name = "unireid", version, about = "Self-supervised image/video person re-identification")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        identities: u32,
        #[arg(long, default_value_t = 8)]
        clips_per_id: u32,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        /// First clip index per identity; use a disjoint range for held-out sets.
        #[arg(long, default_value_t = 0)]
        clip_offset: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pre-training.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss CSV (default: <out>.steps.csv).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fine-tune the teacher with identity labels.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval metrics for one protocol.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["image", "video", "mix"])]
        protocol: String,
        #[arg(long, default_value_t = 0.01)]
        far: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-head attention maps of one still image.
    VizAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData { seed, identities, clips_per_id, frames, clip_offset, out } => {
            cli::gen_data(&cli::GenDataArgs { seed, identities, clips_per_id, frames, clip_offset, out })
        }
        Command::Pretrain { config, data, steps, seed, out, log } => {
            cli::pretrain(&cli::PretrainArgs { config, data, steps, seed, out, log })
        }
        Command::Finetune { ckpt, config, data, steps, out } => {
            cli::finetune(&cli::FinetuneArgs { ckpt, config, data, steps, out })
        }
        Command::Eval { ckpt, data, protocol, far, out } => {
            let protocol = Protocol::parse(&protocol).expect("validated by clap");
            cli::evaluate(&cli::EvalArgs { ckpt, data, protocol, far, out })
        }
        Command::VizAttn { ckpt, data, index, layer, out } => {
            cli::viz_attn(&cli::VizArgs { ckpt, data, index, layer, out })
        }
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(cli::EXIT_CONFIG as u8);
        }
    };
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
