use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use sbrush::commands::{self, DistillOpts, InterpArgs, InterpMode, SampleArgs, SampleMode};
use sbrush::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "sbrush", version, about = "Distill a diffusion teacher into a one-step generator")]
struct Cli {
    /// Run config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory for train-teacher/distill/ablate; output file for sample/interpolate.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config seed; for sample/interpolate, seeds the noise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite an existing run directory.
    #[arg(long, global = true)]
    force: bool,
    /// Overrides eval.every.
    #[arg(long, global = true)]
    eval_every: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train the network teacher on samples from the configured GMM.
    TrainTeacher,
    /// Distill the teacher into a one-step student.
    Distill {
        /// Continue an interrupted run from its last evaluation.
        #[arg(long)]
        resume: bool,
        /// Stop after the first evaluation at or past this iteration.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Draw samples from a student (onestep) or teacher (ddim:<steps>) checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Class for every sample; cycles over all classes when omitted.
        #[arg(long)]
        y: Option<usize>,
        #[arg(long, default_value = "onestep")]
        mode: SampleMode,
        /// Guidance scale for ddim sampling.
        #[arg(long, default_value_t = 4.5)]
        guidance: f64,
    },
    /// Run the four-arm ablation (Full, NoParam, SmallRank, SDS).
    Ablate,
    /// Interpolate between classes (lerp) or noise draws (slerp).
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "lerp")]
        mode: Interp,
        #[arg(long, default_value_t = 0)]
        from: usize,
        #[arg(long, default_value_t = 1)]
        to: usize,
        #[arg(long, default_value_t = 9)]
        steps: usize,
    },
    /// Print a checkpoint's metadata and tensor table.
    InspectCheckpoint { path: PathBuf },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Interp {
    Lerp,
    Slerp,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().context("this command needs --config PATH")?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(every) = cli.eval_every {
        cfg.eval.every = every;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SBRUSH_THREADS") {
        let n: usize = v.parse().with_context(|| format!("SBRUSH_THREADS must be an integer, got '{v}'"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn out_file(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match &cli.cmd {
        Cmd::TrainTeacher => {
            commands::train_teacher_cmd(&load_config(&cli)?, cli.force)?;
        }
        Cmd::Distill { resume, stop_after } => {
            let opts = DistillOpts {
                resume: *resume,
                stop_after: *stop_after,
            };
            commands::distill_cmd(&load_config(&cli)?, cli.force, &opts)?;
        }
        Cmd::Sample {
            checkpoint,
            n,
            y,
            mode,
            guidance,
        } => {
            commands::sample_cmd(&SampleArgs {
                checkpoint: checkpoint.clone(),
                n: *n,
                y: *y,
                mode: *mode,
                out: out_file(&cli, "samples.csv"),
                seed: cli.seed.unwrap_or(0),
                guidance: *guidance,
            })?;
        }
        Cmd::Ablate => {
            commands::ablate_cmd(&load_config(&cli)?, cli.force)?;
        }
        Cmd::Interpolate {
            checkpoint,
            mode,
            from,
            to,
            steps,
        } => {
            commands::interpolate_cmd(&InterpArgs {
                checkpoint: checkpoint.clone(),
                mode: match mode {
                    Interp::Lerp => InterpMode::Lerp,
                    Interp::Slerp => InterpMode::Slerp,
                },
                from: *from,
                to: *to,
                steps: *steps,
                seed: cli.seed.unwrap_or(0),
                out: out_file(&cli, "interp.csv"),
            })?;
        }
        Cmd::InspectCheckpoint { path } => {
            print!("{}", commands::inspect_checkpoint_cmd(path)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
