//! The `modevote` command line: run modes over a question set, fuse their
//! predictions, evaluate and report.
//!
//! Exit codes: 0 success, 2 usage, 3 config, 4 I/O, 5 backend, 6 validation.

pub mod ensemble;
pub mod error;
pub mod run;

use std::path::Path;

use clap::{Parser, Subcommand};

pub use ensemble::{cmd_ensemble, cmd_eval, cmd_report, EnsembleArgs, EnsembleSummary, EvalArgs, Inputs, ReportArgs};
pub use error::CliError;
pub use run::{cmd_run, RunArgs, RunSummary};

#[derive(Debug, Parser)]
#[command(name = "modevote", version, about = "Answer multiple-choice video questions with an ensemble of model modes")]
pub struct Cli {
    /// Log level: `error`, `warn`, `info`, `debug` or `trace`.
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run modes over a question set.
    Run(RunArgs),
    /// Fuse prediction files into one submission.
    Ensemble(EnsembleArgs),
    /// Print per-mode accuracy.
    Eval(EvalArgs),
    /// Write similarity, accuracy and sweep tables.
    Report(ReportArgs),
}

/// Creates parent directories, then writes `text` to `path`.
pub(crate) fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Runs one command and returns what it prints on success.
pub fn execute(command: &Command) -> Result<String, CliError> {
    let text = match command {
        Command::Run(args) => {
            let summary = cmd_run(args)?;
            let mut out = String::new();
            for m in &summary.modes {
                out.push_str(&format!(
                    "{}: {} answered, {} abstained{}\n",
                    m.mode_id,
                    m.answered,
                    m.abstained,
                    if m.resumed > 0 { format!(", {} resumed", m.resumed) } else { String::new() }
                ));
            }
            out.push_str(&format!(
                "backend calls: {}, cache hits: {}\noutputs in {}\n",
                summary.backend_calls,
                summary.cache_hits,
                summary.out.display()
            ));
            out
        }
        Command::Ensemble(args) => {
            let s = cmd_ensemble(args)?;
            let mut out = format!(
                "activation {} ({})\n{} decisions, {} ties broken\n",
                s.activation,
                s.active_modes.join(", "),
                s.decisions,
                s.ties
            );
            if let Some(acc) = s.accuracy {
                out.push_str(&format!("ensemble accuracy on labels: {}\n", modevote_core::evalkit::format_percent(acc)));
            }
            out.push_str(&format!("submission written to {}\n", s.submission.display()));
            out
        }
        Command::Eval(args) => cmd_eval(args)?.iter().map(|r| r.line() + "\n").collect(),
        Command::Report(args) => cmd_report(args)?
            .iter()
            .map(|p| format!("wrote {}\n", p.display()))
            .collect(),
    };
    Ok(text)
}
