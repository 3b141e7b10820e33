//! `repscope` command line: each subcommand runs one pipeline stage and
//! writes its artifacts plus a `run_manifest.json` into `--out`.

mod commands;
pub mod run;
pub mod settings;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use settings::Settings;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] repscope::error::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "repscope", version, about = "Behavioral model comparison over representation matrices")]
struct Cli {
    /// Recompute and check the run manifest and artifact hashes in DIR.
    #[arg(long, value_name = "DIR")]
    verify: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a category or reward task from an embedding feature.
    GenTask(Settings),
    /// Simulate learner-driven agents and write their choice logs.
    Simulate(Settings),
    /// Roll one representation's learner over the logs and score it.
    Fit(Settings),
    /// Rank every representation in a manifest by held-out NLL.
    Compare(Settings),
    /// Pairwise linear CKA, and anchor-vs-reference differences.
    Rsa(Settings),
    /// Accuracy curves, learning onset and behavioral mixed models.
    Stats(Settings),
    /// Simulate from one representation and check it ranks first.
    Recover(Settings),
    /// Run the session server.
    Serve(Settings),
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(dir) = cli.verify {
        if cli.command.is_some() {
            return Err(CliError::Usage("--verify takes no subcommand".into()));
        }
        let problems = run::verify(&dir)?;
        if problems.is_empty() {
            println!("{}: ok", dir.display());
            return Ok(());
        }
        for p in &problems {
            eprintln!("{p}");
        }
        return Err(CliError::Verify(format!("{} problem(s) in {}", problems.len(), dir.display())));
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("a subcommand or --verify is required (see --help)".into()));
    };
    match command {
        Command::GenTask(s) => commands::gen_task(s.resolve()?),
        Command::Simulate(s) => commands::simulate(s.resolve()?),
        Command::Fit(s) => commands::fit(s.resolve()?),
        Command::Compare(s) => commands::compare(s.resolve()?),
        Command::Rsa(s) => commands::rsa(s.resolve()?),
        Command::Stats(s) => commands::stats(s.resolve()?),
        Command::Recover(s) => commands::recover(s.resolve()?),
        Command::Serve(s) => commands::serve(s.resolve()?),
    }
}
