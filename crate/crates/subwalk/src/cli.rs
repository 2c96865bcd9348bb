//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::experiment::{self, Experiment, ExperimentError, Outcome};

#[derive(Debug, Parser)]
#[command(name = "subwalk", version, about = "Subunit random walks on the torus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to the config's `output` or `out/<name>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides walk.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Ball-box constants and half-width exponents around a point.
    Ballbox,
    /// Universal blocks of every chart.
    Reduce,
    /// Monte Carlo walk against the matrix stationary law.
    Walk,
    /// Spectrum, gap scaling, counting and eigenfunction bounds.
    Spectrum,
    /// Kernel lower bound, TV decay and frequency split.
    Converge,
    /// Generator and Dirichlet-form limits.
    Generator,
    /// Every suite.
    VerifyAll,
}

impl Command {
    pub fn label(self) -> &'static str {
        match self {
            Command::Ballbox => "ballbox",
            Command::Reduce => "reduce",
            Command::Walk => "walk",
            Command::Spectrum => "spectrum",
            Command::Converge => "converge",
            Command::Generator => "generator",
            Command::VerifyAll => "verify-all",
        }
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CONSTRUCTION: i32 = 3;

pub fn execute(command: Command, cfg: &ExperimentConfig) -> Result<Outcome, ExperimentError> {
    if command == Command::Ballbox {
        return experiment::run_ballbox(cfg);
    }
    let exp = Experiment::build(cfg.clone())?;
    match command {
        Command::Ballbox => unreachable!(),
        Command::Reduce => Ok(experiment::run_reduce(&exp)),
        Command::Walk => experiment::run_walk(&exp, cfg.geometry.grid),
        Command::Spectrum => experiment::run_spectrum(&exp),
        Command::Converge => experiment::run_converge(&exp),
        Command::Generator => experiment::run_generator(&exp),
        Command::VerifyAll => {
            let mut out = experiment::run_ballbox(cfg)?;
            out.extend(experiment::run_verify_all(&exp)?);
            Ok(out)
        }
    }
}

pub fn render_summary(command: Command, name: &str, outcome: &Outcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "subwalk {} {name}", command.label());
    for line in &outcome.summary {
        let _ = writeln!(s, "  {line}");
    }
    for c in &outcome.checks {
        let _ = writeln!(s, "{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let passed = outcome.checks.iter().filter(|c| c.pass).count();
    let _ = writeln!(
        s,
        "result: {} ({passed}/{} checks)",
        if outcome.pass() { "PASS" } else { "FAIL" },
        outcome.checks.len()
    );
    s
}

pub fn write_outputs(dir: &Path, summary: &str, outcome: &Outcome) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in &outcome.tables {
        let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", t.name)))?;
        w.write_record(&t.header)?;
        for r in &t.rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    std::fs::write(dir.join("summary.txt"), summary)
}

/// Runs the CLI and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let Some(path) = cli.config.as_deref() else {
        eprintln!("error: --config is required");
        return EXIT_CONFIG;
    };
    let mut cfg = match ExperimentConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Some(seed) = cli.seed {
        cfg.walk.seed = seed;
    }
    let outcome = match execute(cli.command, &cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let summary = render_summary(cli.command, &cfg.name, &outcome);
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| Path::new("out").join(&cfg.name))
        .join(cli.command.label());
    if let Err(e) = write_outputs(&dir, &summary, &outcome) {
        eprintln!("cannot write outputs to {}: {e}", dir.display());
        return EXIT_CONSTRUCTION;
    }
    if !cli.quiet {
        print!("{summary}");
    }
    if outcome.pass() {
        EXIT_OK
    } else {
        EXIT_CHECK
    }
}
