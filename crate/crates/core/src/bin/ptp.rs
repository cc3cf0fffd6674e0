//! Command-line driver: training runs, evaluation sweeps, the two-token
//! compatibility demo, corpus generation, and table export.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ptp_core::runcfg::{
    cmd_demo_pairs, cmd_distill, cmd_eval, cmd_export, cmd_gen_data, cmd_train_iat,
    cmd_train_teacher, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "ptp",
    about = "Parallel token prediction: train, distill, evaluate, and export",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML). Defaults apply for missing sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of training steps.
    #[arg(long)]
    steps: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.training.seed = seed;
        }
        if let Some(steps) = self.steps {
            cfg.training.steps = steps;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the autoregressive teacher on the configured corpus.
    TrainTeacher {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a PTP student from a reference model checkpoint.
    Distill {
        #[command(flatten)]
        config: ConfigArgs,
        /// Teacher checkpoint (binary) or tabular table (text).
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a categorical PTP directly on data, no teacher.
    TrainIat {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the conditionally-independent baseline (mask embedding).
    TrainMtp {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a student against a verifier: acceptance report plus
    /// restricted-window and best-of-M sweeps.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        verifier: PathBuf,
        /// Window sizes, e.g. 1,2,4,8,16.
        #[arg(long, value_delimiter = ',')]
        n_list: Option<Vec<usize>>,
        /// Candidate counts for best-of-M, e.g. 1,4,16.
        #[arg(long, value_delimiter = ',')]
        m_list: Option<Vec<usize>>,
        /// Evaluation windows per sweep point.
        #[arg(long)]
        trials: Option<usize>,
        /// Context mode: empty, random, or both.
        #[arg(long)]
        contexts: Option<String>,
        #[arg(long)]
        eval_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-token compatibility map over the (u1, u2) unit square.
    DemoPairs {
        #[arg(long)]
        student: PathBuf,
        /// Independent baseline checkpoint to map alongside.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        verifier: PathBuf,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collate run summaries into per-table CSVs.
    Export {
        /// Run directories to collate.
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the configured synthetic corpus to a token file.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainTeacher { config, out } => {
            let cfg = config.load()?;
            cmd_train_teacher(&cfg, &out)?;
            println!("teacher run written to {}", out.display());
        }
        Command::Distill {
            config,
            teacher,
            out,
        } => {
            let cfg = config.load()?;
            cmd_distill(&cfg, &teacher, &out)?;
            println!("distillation run written to {}", out.display());
        }
        Command::TrainIat { config, out } => {
            let mut cfg = config.load()?;
            cfg.student.variant = "categorical".into();
            cmd_train_iat(&cfg, &out)?;
            println!("inverse autoregressive run written to {}", out.display());
        }
        Command::TrainMtp {
            config,
            teacher,
            out,
        } => {
            let mut cfg = config.load()?;
            cfg.student.variant = "independent".into();
            cfg.student.embed_kind = "mask".into();
            cmd_distill(&cfg, &teacher, &out)?;
            println!("independent-baseline run written to {}", out.display());
        }
        Command::Eval {
            config,
            student,
            verifier,
            n_list,
            m_list,
            trials,
            contexts,
            eval_seed,
            out,
        } => {
            let mut cfg = config.load()?;
            if let Some(n) = n_list {
                cfg.eval.n_list = n;
            }
            if let Some(m) = m_list {
                cfg.eval.m_list = m;
            }
            if let Some(t) = trials {
                cfg.eval.trials = t;
            }
            if let Some(c) = contexts {
                cfg.eval.contexts = c;
            }
            if let Some(s) = eval_seed {
                cfg.eval.seed = s;
            }
            cmd_eval(&cfg, &student, &verifier, &out)?;
            println!("evaluation written to {}", out.display());
        }
        Command::DemoPairs {
            student,
            baseline,
            verifier,
            resolution,
            out,
        } => {
            cmd_demo_pairs(&student, baseline.as_deref(), &verifier, resolution, &out)?;
            println!("pair maps written to {}", out.display());
        }
        Command::Export { runs, out } => {
            cmd_export(&runs, &out)?;
            println!("tables written to {}", out.display());
        }
        Command::GenData { config, out } => {
            let cfg = config.load()?;
            cmd_gen_data(&cfg, &out)?;
            println!("corpus written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
