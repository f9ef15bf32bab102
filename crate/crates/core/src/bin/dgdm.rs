use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dgdm::commands::{self, SweepAxis};
use dgdm::config::RunConfig;
use dgdm::Result;

#[derive(Parser)]
#[command(
    name = "dgdm",
    version,
    about = "Train and evaluate DGDM weakly supervised localizers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `section.key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable and applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Parent directory of the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(out) = &self.out {
            overrides.push(format!("out={}", out.display()));
        }
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train one model per setting of a sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// block_size, beta, stage or table1.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. `1,2,3` or `stage1,stage1+2,full`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Write input, heatmap and overlay PNGs.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG files; test samples are used when omitted.
        #[arg(long, num_args = 1..)]
        images: Vec<PathBuf>,
        /// Number of test samples when no images are given.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let out = commands::cmd_train(&common.resolve()?)?;
            println!("{}", out.run_dir.root.display());
            print!("{}", out.trained.report.to_csv());
        }
        Command::Eval { common, checkpoint } => {
            let out = commands::cmd_eval(&common.resolve()?, &checkpoint)?;
            println!("{}", out.run_dir.root.display());
            print!("{}", out.report.to_csv());
        }
        Command::Ablate {
            common,
            axis,
            values,
        } => {
            let axis: SweepAxis = axis.parse()?;
            let out = commands::cmd_ablate(&common.resolve()?, axis, &values)?;
            println!("{}", out.run_dir.root.display());
            print!("{}", commands::ablation_csv(&out.rows));
        }
        Command::Visualize {
            common,
            checkpoint,
            images,
            count,
        } => {
            let out = commands::cmd_visualize(&common.resolve()?, &checkpoint, &images, count)?;
            println!("{}", out.run_dir.root.display());
            println!(
                "wrote {} files, skipped {} images",
                out.written.len(),
                out.skipped
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
