use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowct_cli::{
    cmd_evaluate, cmd_gen_data, cmd_infer, cmd_train, exit_code, RunConfig, EXIT_CONFIG,
};

#[derive(Parser)]
#[command(
    name = "flowct",
    version,
    about = "Flow-matching CT synthesis on MetaImage volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides the data, training and inference seeds.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> flowct::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.data.seed = seed;
            cfg.train.seed = seed;
            cfg.infer.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset and its manifest.
    GenData {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the velocity network on the configured dataset.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Overrides train.total_steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Checkpoint to resume from (default: output_dir/final.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from the checkpoint instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Synthesize CT volumes; without inputs, runs on the validation split.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to load (default: output_dir/final.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory (default: output_dir/sct).
        #[arg(short, long)]
        out: Option<PathBuf>,
        inputs: Vec<PathBuf>,
    },
    /// Score `{case}_sct.mha` predictions against targets inside body masks.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Directory with `{case}_mask.mha` (default: the target directory).
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Per-case CSV (default: pred/metrics.csv).
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Exit 0 even if some cases were unpaired or failed.
        #[arg(long)]
        allow_partial: bool,
    },
}

fn run(cli: Cli) -> flowct::Result<()> {
    match cli.command {
        Command::GenData { run } => {
            cmd_gen_data(&run.load()?)?;
        }
        Command::Train {
            run,
            steps,
            checkpoint,
            resume,
        } => {
            let mut cfg = run.load()?;
            if let Some(steps) = steps {
                cfg.train.total_steps = steps;
            }
            if checkpoint.is_some() {
                cfg.paths.checkpoint = checkpoint;
            }
            cfg.validate()?;
            cmd_train(&cfg, resume)?;
        }
        Command::Infer {
            run,
            checkpoint,
            out,
            inputs,
        } => {
            let mut cfg = run.load()?;
            if checkpoint.is_some() {
                cfg.paths.checkpoint = checkpoint;
            }
            let out = out.unwrap_or_else(|| cfg.paths.output_dir.join("sct"));
            cmd_infer(&cfg, &inputs, &out)?;
        }
        Command::Evaluate {
            pred,
            target,
            mask,
            csv,
            allow_partial,
        } => {
            let mask = mask.unwrap_or_else(|| target.clone());
            let csv = csv.unwrap_or_else(|| pred.join("metrics.csv"));
            cmd_evaluate(&pred, &target, &mask, &csv, allow_partial)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stdout)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()) as u8)
        }
    }
}
