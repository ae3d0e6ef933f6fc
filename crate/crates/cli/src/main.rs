use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ddm_cli::{commands, threads_from_env, CliResult, Command, RunConfig};

#[derive(Parser)]
#[command(name = "ddm", version, about = "Train and use deep density models")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

/// Options every subcommand accepts.
#[derive(Args)]
struct Common {
    /// key=value configuration file ('#' starts a comment)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable; applied last
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Preprocess, initialize, pretrain, fine-tune and save a model
    Train {
        #[command(flatten)]
        common: Common,
        /// Training data (CSV or IDX images)
        #[arg(long)]
        data: Option<String>,
        /// Model file to write
        #[arg(long)]
        out: Option<String>,
        /// Write the epoch log here instead of standard output
        #[arg(long)]
        log: Option<String>,
        /// Per-dimension marginal-fit CSV (default: next to the model)
        #[arg(long)]
        report: Option<String>,
    },
    /// Write one log-density per input row
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: Option<String>,
        /// Zero this fraction of each row's elements before evaluating
        #[arg(long)]
        corrupt_fraction: Option<String>,
        #[arg(long)]
        seed: Option<String>,
    },
    /// Draw ancestral samples in original coordinates
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        count: Option<String>,
        #[arg(long)]
        seed: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Print the entropy decomposition of a model on data
    Entropy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        data: Option<String>,
    },
    /// Class-conditional models with rejection
    Classify {
        #[command(subcommand)]
        action: ClassifyCmd,
    },
}

#[derive(Subcommand)]
enum ClassifyCmd {
    /// Train one model per class on labelled data
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: Option<String>,
        /// Rejection threshold ln λ
        #[arg(long, allow_hyphen_values = true)]
        log_lambda: Option<String>,
        /// Weight of the foreign-example penalty
        #[arg(long)]
        foreign_weight: Option<String>,
    },
    /// Label (or REJECT) every row and write all class scores
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        log_lambda: Option<String>,
    },
}

/// Builds the configuration: file first, then explicit flags, then `--set`.
fn build(
    command: Command,
    common: &Common,
    flags: &[(&str, &Option<String>)],
) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::new(command);
    if let Some(path) = &common.config {
        cfg.merge_file(path)?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    for assignment in &common.set {
        cfg.set_assignment(assignment)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let threads = threads_from_env()?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut err = io::stderr();
    match cli.command {
        Cmd::Train {
            common,
            data,
            out: model,
            log,
            report,
        } => {
            let cfg = build(
                Command::Train,
                &common,
                &[
                    ("data", &data),
                    ("out", &model),
                    ("log", &log),
                    ("report", &report),
                ],
            )?;
            commands::train(&cfg, threads, &mut out, &mut err)
        }
        Cmd::Eval {
            common,
            model,
            data,
            out: csv,
            corrupt_fraction,
            seed,
        } => {
            let cfg = build(
                Command::Eval,
                &common,
                &[
                    ("model", &model),
                    ("data", &data),
                    ("out", &csv),
                    ("corrupt_fraction", &corrupt_fraction),
                    ("seed", &seed),
                ],
            )?;
            commands::eval(&cfg, threads, &mut err)
        }
        Cmd::Sample {
            common,
            model,
            count,
            seed,
            out: csv,
        } => {
            let cfg = build(
                Command::Sample,
                &common,
                &[
                    ("model", &model),
                    ("count", &count),
                    ("seed", &seed),
                    ("out", &csv),
                ],
            )?;
            commands::sample(&cfg)
        }
        Cmd::Entropy {
            common,
            model,
            data,
        } => {
            let cfg = build(
                Command::Entropy,
                &common,
                &[("model", &model), ("data", &data)],
            )?;
            commands::entropy(&cfg, &mut out)
        }
        Cmd::Classify { action } => match action {
            ClassifyCmd::Train {
                common,
                data,
                out: model,
                log_lambda,
                foreign_weight,
            } => {
                let cfg = build(
                    Command::ClassifyTrain,
                    &common,
                    &[
                        ("data", &data),
                        ("out", &model),
                        ("log_lambda", &log_lambda),
                        ("foreign_weight", &foreign_weight),
                    ],
                )?;
                commands::classify_train(&cfg, threads, &mut err)
            }
            ClassifyCmd::Predict {
                common,
                model,
                data,
                out: csv,
                log_lambda,
            } => {
                let cfg = build(
                    Command::ClassifyPredict,
                    &common,
                    &[
                        ("model", &model),
                        ("data", &data),
                        ("out", &csv),
                        ("log_lambda", &log_lambda),
                    ],
                )?;
                commands::classify_predict(&cfg, threads, &mut err)
            }
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(io::stderr(), "ddm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
