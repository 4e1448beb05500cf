//! `scenefill`: generate scenes, complete them view by view, evaluate,
//! train planners and check projection gradients.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 failed check.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use scenefill::inpaint::InpainterKind;
use scenefill::mdp::Mode;

use commands::{CompleteArgs, Learner, TrainArgs};
use error::{CliError, Result, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "scenefill", version, about = "Progressive point cloud scene completion")]
struct Cli {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Train,
    Inference,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LearnerArg {
    A3c,
    Dqn,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the default configuration as TOML.
    Defaults,
    /// Generate synthetic scenes and their input views.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `data.scenes`.
        #[arg(long)]
        scenes: Option<usize>,
        /// Defaults to `data.first_seed`.
        #[arg(long)]
        first_seed: Option<u64>,
    },
    /// Complete one generated scene.
    Complete {
        #[arg(long)]
        scene: PathBuf,
        /// uniform5, uniform10, uniform20, greedy, random, policy:PATH or q:PATH.
        #[arg(long, default_value = "uniform20")]
        planner: String,
        /// oracle, diffusion or volume-guided; defaults to `episode.inpainter`.
        #[arg(long)]
        inpainter: Option<String>,
        /// Train when the scene has ground truth, inference otherwise.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a cloud against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a view planner.
    Train {
        #[arg(long, value_enum, default_value = "a3c")]
        learner: LearnerArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Finite-difference check of the projection gradients.
    Gradcheck {
        /// Writes the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Scales the analytic gradients by 1 + CORRUPT (negative control).
        #[arg(long, default_value_t = 0.0, hide = true)]
        corrupt: f64,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = commands::load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Defaults => print!("{}", commands::default_config_toml()),
        Command::Gen { out, scenes, first_seed } => {
            let (manifest, digest) =
                commands::gen(&cfg, &out, scenes.unwrap_or(cfg.data.scenes), first_seed.unwrap_or(cfg.data.first_seed))?;
            println!("wrote {} scenes to {}", manifest.scenes.len(), out.display());
            println!("manifest sha256 {digest}");
        }
        Command::Complete {
            scene,
            planner,
            inpainter,
            mode,
            out,
        } => {
            let inpainter = match inpainter {
                Some(s) => s.parse::<InpainterKind>().map_err(|e| CliError::Usage(e.to_string()))?,
                None => cfg.episode.inpainter,
            };
            let args = CompleteArgs {
                scene: &scene,
                planner: &planner,
                inpainter,
                mode: mode.map(|m| match m {
                    ModeArg::Train => Mode::Train,
                    ModeArg::Inference => Mode::Inference,
                }),
                out: &out,
            };
            let s = commands::complete(&cfg, &args)?;
            println!(
                "steps {} terminal {} hole ratio {:.4} return {:.4} actions {:?}",
                s.steps, s.terminal, s.final_ratio, s.episode_return, s.actions
            );
        }
        Command::Eval { pred, gt, out } => print!("{}", commands::eval(&cfg, &pred, &gt, &out)?),
        Command::Train {
            learner,
            out,
            episodes,
            workers,
        } => {
            let args = TrainArgs {
                learner: match learner {
                    LearnerArg::A3c => Learner::A3c,
                    LearnerArg::Dqn => Learner::Dqn,
                },
                out: &out,
                episodes,
                workers,
            };
            let path = commands::train(&cfg, &args)?;
            println!("wrote {}", path.display());
        }
        Command::Gradcheck { out, corrupt } => print!("{}", commands::run_gradcheck(&cfg, corrupt, out.as_deref())?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE as u8) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Check(report)) => {
            print!("{report}");
            ExitCode::from(error::EXIT_CHECK as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
