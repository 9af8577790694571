//! Command-line front end: `simulate`, `dataset`, `train` and `evaluate`.
//!
//! Exit codes: 0 on success, 1 on bad arguments or invalid input, 2 on I/O failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{SchedulerKind, SimConfig};
use crate::dataset;
use crate::error::{Error, Result};
use crate::policy::train::{self, TrainMode};
use crate::policy::Policy;
use crate::sim::{compare, run_episode};

#[derive(Debug, Parser)]
#[command(name = "risvr", version, about = "RIS-assisted THz VR network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Optimal,
    Policy,
    Random,
    Nearest,
}

impl From<Kind> for SchedulerKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Optimal => SchedulerKind::Optimal,
            Kind::Policy => SchedulerKind::Policy,
            Kind::Random => SchedulerKind::Random,
            Kind::Nearest => SchedulerKind::Nearest,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Clone,
    Reinforce,
    CloneThenReinforce,
}

impl From<Mode> for TrainMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Clone => TrainMode::Clone,
            Mode::Reinforce => TrainMode::Reinforce,
            Mode::CloneThenReinforce => TrainMode::CloneThenReinforce,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    PerRisAccuracy,
    ExactMatch,
    QueueGap,
    RateGap,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one episode and write trace.csv and summary.json.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        scheduler: Option<Kind>,
        /// Policy checkpoint, needed by the policy scheduler.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label episodes with the optimal scheduler and write JSON lines.
    Dataset {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy and write report.csv and policy.ckpt.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a policy against held-out labels or the optimal scheduler.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        metric: Metric,
        /// Episodes per scheduler for the gap metrics.
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
}

fn load_config(path: Option<&Path>) -> Result<SimConfig> {
    match path {
        Some(p) => SimConfig::load(p),
        None => Ok(SimConfig::default()),
    }
}

fn execute(cmd: Command, stdout: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Simulate {
            config,
            seed,
            scheduler,
            model,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(k) = scheduler {
                cfg.scheduler = k.into();
            }
            let policy = model.as_deref().map(Policy::load).transpose()?;
            let result = run_episode(&cfg, policy.as_ref())?;
            result.trace.write(&out)?;
            let _ = writeln!(stdout, "{}", out.join("summary.json").display());
        }
        Command::Dataset { config, episodes, out } => {
            let cfg = load_config(config.as_deref())?;
            let records = dataset::generate(&cfg, episodes)?;
            dataset::write_jsonl(&records, &out)?;
            let _ = writeln!(stdout, "{} records -> {}", records.len(), out.display());
        }
        Command::Train { config, data, mode, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(m) = mode {
                cfg.train.mode = m.into();
            }
            let splits = data.as_deref().map(dataset::load).transpose()?;
            let (policy, report) = train::train(&cfg, splits.as_ref())?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            report.write(&out.join("report.csv"))?;
            policy.save(&out.join("policy.ckpt"))?;
            if let Some(a) = report.best_val_accuracy {
                let _ = writeln!(stdout, "best validation accuracy {a}");
            }
        }
        Command::Evaluate {
            config,
            model,
            data,
            metric,
            episodes,
        } => {
            let cfg = load_config(config.as_deref())?;
            let policy = Policy::load(&model)?;
            let value = match metric {
                Metric::PerRisAccuracy | Metric::ExactMatch => {
                    let path = data.ok_or_else(|| Error::invalid("--data is required for accuracy metrics"))?;
                    let splits = dataset::load(&path)?;
                    let held_out = if splits.test.is_empty() { &splits.val } else { &splits.test };
                    let acc = train::accuracy(&policy, held_out)?;
                    if metric == Metric::PerRisAccuracy {
                        acc.per_ris
                    } else {
                        acc.exact_match
                    }
                }
                Metric::QueueGap | Metric::RateGap => {
                    let report = compare(&[cfg], &[SchedulerKind::Policy], Some(&policy), episodes)?;
                    let row = report.get(0, SchedulerKind::Policy).expect("policy row present");
                    if metric == Metric::QueueGap {
                        row.queue_gap
                    } else {
                        row.rate_gap
                    }
                }
            };
            let _ = writeln!(stdout, "{value}");
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}
