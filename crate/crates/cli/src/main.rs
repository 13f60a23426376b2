//! `svydid`: estimation on user data, scenario simulation, and report
//! merging for design-based difference-in-differences inference.
//!
//! Exit codes: 0 success (a result file was fully written when one was
//! requested), 2 invalid usage, 3 input parse error, 4 missing column,
//! 5 invalid survey design, 6 model fitting failure (separation /
//! no overlap / no convergence), 7 other estimation error, 8 I/O error.

mod commands;
mod dataset;
mod errors;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "svydid", version, about)]
struct Cli {
    /// Worker threads for simulation (default: available cores; the
    /// SVYDID_THREADS environment variable overrides the default).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run Monte Carlo cells for scenario presets and write replication
    /// records plus a summary report.
    Simulate(SimulateArgs),
    /// Estimate an overall ATT from a CSV dataset.
    Estimate(EstimateArgs),
    /// Merge replication record files into one summary table.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario presets, comma separated (s1,s2,s3,s4).
    #[arg(long, default_value = "s1")]
    scenario: String,
    /// Estimators, comma separated (cs_reg,cs_dr,sun_abraham,twfe).
    #[arg(long, default_value = "cs_reg")]
    estimator: String,
    /// Sample sizes, comma separated.
    #[arg(long, default_value = "2000")]
    n: String,
    /// Replications per cell.
    #[arg(long, default_value_t = 500)]
    reps: usize,
    /// Master seed; required so every run is reproducible.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the line-delimited record files (one per cell).
    #[arg(long)]
    out: PathBuf,
    /// Also dump the first generated dataset of each cell as CSV here.
    #[arg(long)]
    dump_data: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    input: PathBuf,
    /// Column names.
    #[arg(long)]
    outcome: String,
    #[arg(long)]
    unit: String,
    #[arg(long)]
    time: String,
    /// Column with the first treated period (0 or empty = never treated).
    #[arg(long)]
    first_treat: String,
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    strata: Option<String>,
    #[arg(long)]
    psu: Option<String>,
    /// Per-stratum FPC column: values in (0, 1] are sampling fractions,
    /// values > 1 are population PSU counts.
    #[arg(long)]
    fpc: Option<String>,
    /// Covariate columns, comma separated (enables the doubly robust
    /// method and the covariate row of the ladder).
    #[arg(long)]
    covariates: Option<String>,
    /// Replicate-weight column prefix (e.g. "repw" matches repw1, repw2, ...).
    #[arg(long)]
    rep_prefix: Option<String>,
    /// Replicate scheme for --rep-prefix columns
    /// (brr | fay=RHO | jk1 | sdr).
    #[arg(long, default_value = "brr")]
    rep_method: String,
    /// Generate stratified delete-one-PSU jackknife replicates from the
    /// design instead of reading replicate columns.
    #[arg(long, default_value_t = false)]
    jkn: bool,
    /// Repeated cross sections instead of a balanced panel.
    #[arg(long, default_value_t = false)]
    rcs: bool,
    /// Estimation method (reg | dr).
    #[arg(long, default_value = "reg")]
    method: String,
    /// Inference mode (hc1 | cluster | design | replicate).
    #[arg(long, default_value = "design")]
    mode: String,
    /// Confidence level.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Emit the four-specification ladder (naive, weights only, full
    /// design, full design + covariates) instead of a single fit.
    #[arg(long, default_value_t = false)]
    ladder: bool,
    /// Output path for the structured result (JSON); written atomically.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Record files produced by `simulate`.
    #[arg(required = true)]
    records: Vec<PathBuf>,
    /// Optional path for the rendered table; defaults to stdout only.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var("SVYDID_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(t) = threads {
        // A failure here means a pool already exists; that is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let result = match cli.cmd {
        Cmd::Simulate(a) => commands::simulate(&a),
        Cmd::Estimate(a) => commands::estimate(&a),
        Cmd::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("svydid: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
