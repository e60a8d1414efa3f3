use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prefalign::align::{LossKind, ScalingVariant};
use prefalign::checks::Fault;

mod commands;

use commands::CliError;

#[derive(Parser)]
#[command(name = "prefalign", version, about = "Multi-objective preference alignment for order-agnostic sequence design models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; every file the command writes goes here.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Mo,
    Dpo,
    WeightedScore,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScalingArg {
    MainText,
    Appendix,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    GradientScale,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long, value_enum)]
    scaling: Option<ScalingArg>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic task and train the base model with cross-entropy.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Semi-online preference alignment starting from a base checkpoint.
    Align {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        /// Base checkpoint written by `pretrain`.
        #[arg(long)]
        base: PathBuf,
        /// Continue from `<out>/ckpt_<T>` instead of starting over.
        #[arg(long)]
        resume: Option<usize>,
    },
    /// Evaluate a checkpoint on the held-out backbones.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the invariant battery and print a pass/fail table.
    Check {
        /// Optional config; validated when given.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optional directory for a JSON copy of the report.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Random instances per check.
        #[arg(long, default_value_t = 5)]
        instances: usize,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("PREFALIGN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Core(prefalign::Error::Validation(vec![format!(
            "PREFALIGN_THREADS: expected a positive integer, got '{raw}'"
        )]))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Core(prefalign::Error::contract(e.to_string())))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Pretrain { common } => commands::cmd_pretrain(&common.config, common.seed, &common.out),
        Command::Align {
            common,
            overrides,
            base,
            resume,
        } => {
            let o = commands::Overrides {
                loss: overrides.loss.map(|l| match l {
                    LossArg::Mo => LossKind::Mo,
                    LossArg::Dpo => LossKind::Dpo,
                    LossArg::WeightedScore => LossKind::WeightedScore,
                }),
                scaling: overrides.scaling.map(|s| match s {
                    ScalingArg::MainText => ScalingVariant::MainText,
                    ScalingArg::Appendix => ScalingVariant::Appendix,
                }),
                lambda: overrides.lambda,
                beta: overrides.beta,
                seed: common.seed,
            };
            commands::cmd_align(&common.config, &o, &base, &common.out, resume)
        }
        Command::Eval { common, checkpoint } => {
            commands::cmd_eval(&common.config, common.seed, &checkpoint, &common.out)
        }
        Command::Check {
            config,
            out,
            instances,
            inject_fault,
        } => commands::cmd_check(
            config.as_deref(),
            out.as_deref(),
            instances,
            inject_fault.map(|FaultArg::GradientScale| Fault::GradientScale),
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
