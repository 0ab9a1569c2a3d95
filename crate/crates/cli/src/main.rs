use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use codegan_core::data::PairingMode;
use codegan_core::Error;

mod commands;
mod run_dir;

#[derive(Parser)]
#[command(
    name = "codegan",
    version,
    about = "Compositional image generation on toy sprite scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that reads a run configuration.
#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// TOML config file; unknown keys are rejected. Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides both the config seed and CODEGAN_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    Paired,
    Unpaired,
}

impl From<Mode> for PairingMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Paired => PairingMode::Paired,
            Mode::Unpaired => PairingMode::Unpaired,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Domain {
    X,
    Y,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Extractor {
    /// Pooled activations of the trained decomposition encoder.
    Encoder,
    /// Raw pixels.
    Pixels,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy sprite dataset directory.
    MakeData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value = "paired")]
        mode: Mode,
    },
    /// Train the view network on rendered sprite pairs.
    TrainRafn {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Number of generated training pairs.
        #[arg(long, default_value_t = 2000)]
        samples: usize,
    },
    /// Train the inpainting network of one object domain.
    TrainInpaint {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        domain: Domain,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the transformer and composition/decomposition networks.
    TrainCode {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// View network checkpoint, required when use_rafn is set.
        #[arg(long)]
        rafn: Option<PathBuf>,
        /// Inpainting checkpoints, required for unpaired data.
        #[arg(long)]
        inpaint_x: Option<PathBuf>,
        #[arg(long)]
        inpaint_y: Option<PathBuf>,
        /// Paired dataset evaluated after every epoch.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Compose one pair, optionally refining the model on it first.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: PathBuf,
        /// Mask of the second object; derived from the background when omitted.
        #[arg(long)]
        mask_y: Option<PathBuf>,
        /// Refinement steps; the checkpoint's config value when omitted.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Retrieve nearest training composites for held-out pairs.
    EvalNn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum, default_value = "encoder")]
        extractor: Extractor,
        #[arg(long, default_value_t = 8)]
        limit: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write a PNG grid of inputs, placements, composites and masks.
    EmitGrid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// 2 for configuration problems, 3 for bad data or checkpoints, 4 for
/// numerical divergence, 1 for anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 2,
                Error::Divergence { .. } | Error::NonFinite(_) => 4,
                _ => 3,
            };
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    use commands::*;
    match cli.command {
        Command::MakeData { cfg, out, n, mode } => make_data(&cfg, &out, n, mode.into()),
        Command::TrainRafn { cfg, out, samples } => train_rafn(&cfg, &out, samples),
        Command::TrainInpaint {
            cfg,
            data,
            domain,
            out,
        } => train_inpaint(&cfg, &data, domain, &out),
        Command::TrainCode {
            cfg,
            data,
            out,
            rafn,
            inpaint_x,
            inpaint_y,
            eval_data,
        } => train_code(
            &cfg,
            &data,
            &out,
            rafn.as_deref(),
            inpaint_x.as_deref().zip(inpaint_y.as_deref()),
            eval_data.as_deref(),
        ),
        Command::Infer {
            checkpoint,
            x,
            y,
            mask_y,
            steps,
            out_dir,
        } => infer(&checkpoint, &x, &y, mask_y.as_deref(), steps, &out_dir),
        Command::EvalNn {
            checkpoint,
            train,
            test,
            extractor,
            limit,
            out_dir,
        } => eval_nn(&checkpoint, &train, &test, extractor, limit, &out_dir),
        Command::EmitGrid {
            checkpoint,
            data,
            n,
            out,
        } => emit_grid(&checkpoint, &data, n, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
