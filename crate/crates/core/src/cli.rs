//! Command-line driver. Every command is a pure function of `(config, seed)`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{self, report_to_csv, write_atomic, ExperimentConfig, RunReport, TaskSuite};
use crate::error::{Error, Result};
use crate::oracle;
use crate::training::{load_checkpoints, save_checkpoints};

#[derive(Debug, Parser)]
#[command(name = "tandem-kd", version, about = "Budgeted teacher-call distillation on tabular language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (JSON); the reference task when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[arg(long, value_name = "INT", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the task suite document.
    GenTask {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Run both training phases and write the checkpoint directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory to create.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Score one checkpoint at every budget.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        checkpoints: PathBuf,
        /// Manifest position to score; validation selection when omitted.
        #[arg(long, value_name = "INT")]
        index: Option<usize>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Also write per-prompt decode traces next to the report.
        #[arg(long)]
        verbose_traces: bool,
    },
    /// Tandem budgets and speculative leniences on shared prompts.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        checkpoints: Option<PathBuf>,
        /// Train into the checkpoint directory first.
        #[arg(long)]
        train: bool,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Run the brute-force verifier suite.
    OracleCheck {
        #[command(flatten)]
        common: Common,
    },
}

/// Process exit status for a finished command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Failed = 1,
    Usage = 2,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::reference()),
    }
}

fn suite_for(cfg: &ExperimentConfig, seed: u64) -> Result<TaskSuite> {
    TaskSuite::generate(&cfg.suite, seed)
}

fn trace_path(out: &Path, label: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.trace-{label}.csv"))
}

/// Concatenate per-prompt trace documents under one header with a prompt column.
fn join_traces(results: &[bench::PromptResult]) -> String {
    let mut out = String::new();
    for (i, r) in results.iter().enumerate() {
        let Some(csv) = &r.trace_csv else { continue };
        let mut lines = csv.lines();
        let header = lines.next().unwrap_or_default();
        if out.is_empty() {
            out.push_str(&format!("prompt,{header}\n"));
        }
        for line in lines {
            out.push_str(&format!("{i},{line}\n"));
        }
    }
    out
}

fn train_into(cfg: &ExperimentConfig, suite: &TaskSuite, seed: u64, dir: &Path) -> Result<()> {
    let outcome = bench::train(cfg, suite, seed)?;
    save_checkpoints(dir, &outcome, &cfg.layout())?;
    write_atomic(&dir.join("suite.json"), &suite.to_json()?)
}

fn execute(command: &Command) -> Result<Status> {
    match command {
        Command::GenTask { common, out } => {
            let cfg = load_config(common)?;
            write_atomic(out, &suite_for(&cfg, common.seed)?.to_json()?)?;
        }
        Command::Train { common, out } => {
            let cfg = load_config(common)?;
            train_into(&cfg, &suite_for(&cfg, common.seed)?, common.seed, out)?;
        }
        Command::Eval {
            common,
            checkpoints,
            index,
            out,
            verbose_traces,
        } => {
            let cfg = load_config(common)?;
            let suite = suite_for(&cfg, common.seed)?;
            let (_, ckpts) = load_checkpoints(checkpoints)?;
            let i = match index {
                Some(i) if *i < ckpts.len() => *i,
                Some(i) => return Err(Error::Config(format!("checkpoint index {i} out of range, {} listed", ckpts.len()))),
                None => bench::choose(&cfg, &suite, &ckpts, common.seed)?.index,
            };
            let (rows, evals) = bench::tandem_rows(&cfg, &suite, &ckpts[i].model, common.seed, *verbose_traces)?;
            if *verbose_traces {
                for (spec, e) in cfg.budgets.iter().zip(&evals) {
                    write_atomic(&trace_path(out, &format!("b{}", spec.b)), &join_traces(&e.results))?;
                }
            }
            write_atomic(out, &report_to_csv(&rows))?;
        }
        Command::Sweep {
            common,
            checkpoints,
            train,
            out,
        } => {
            let cfg = load_config(common)?;
            let suite = suite_for(&cfg, common.seed)?;
            let Some(dir) = checkpoints else {
                return Err(Error::Config("sweep needs --checkpoints DIR".into()));
            };
            if *train {
                train_into(&cfg, &suite, common.seed, dir)?;
            }
            let (_, ckpts) = load_checkpoints(dir)?;
            let result = bench::run_sweep(&cfg, &suite, &ckpts, common.seed)?;
            if result.selection.flagged {
                eprintln!("warning: no checkpoint met every budget within {}", cfg.selector.delta);
            }
            let rows: Vec<RunReport> = result.rows;
            write_atomic(out, &report_to_csv(&rows))?;
        }
        Command::OracleCheck { common } => {
            let _ = load_config(common)?;
            let reports = oracle::run_all(common.seed)?;
            print!("{}", oracle::render(&reports));
            if !reports.iter().all(|r| r.ok()) {
                return Ok(Status::Failed);
            }
        }
    }
    Ok(Status::Ok)
}

/// Parse `args` (including the program name) and run the command.
pub fn run<I, T>(args: I) -> Status
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Status::Usage } else { Status::Ok };
        }
    };
    match execute(&cli.command) {
        Ok(s) => s,
        Err(e @ (Error::Malformed { .. } | Error::Config(_))) => {
            eprintln!("usage error: {e}");
            Status::Usage
        }
        Err(e) => {
            eprintln!("error: {e}");
            Status::Failed
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_subcommand() {
        for args in [
            vec!["tandem-kd", "gen-task", "--out", "s.json", "--seed", "3"],
            vec!["tandem-kd", "train", "--config", "c.json", "--out", "d"],
            vec!["tandem-kd", "eval", "--checkpoints", "d", "--out", "r.csv", "--verbose-traces"],
            vec!["tandem-kd", "sweep", "--checkpoints", "d", "--out", "r.csv"],
            vec!["tandem-kd", "oracle-check"],
        ] {
            Cli::try_parse_from(args.clone()).unwrap_or_else(|e| panic!("{args:?}: {e}"));
        }
    }

    #[test]
    fn unknown_subcommand_is_usage() {
        assert_eq!(run(["tandem-kd", "distill"]), Status::Usage);
    }

    #[test]
    fn trace_files_sit_beside_the_report() {
        assert_eq!(trace_path(Path::new("out/r.csv"), "b0.1"), PathBuf::from("out/r.trace-b0.1.csv"));
    }
}
