//! `mums-lab`: experiment runner and analysis front end.
//!
//! Subcommands:
//! - `run <config>`: run a configured experiment and write CSV reports.
//! - `cost-model`: print the closed-form peering cost next to its
//!   Monte-Carlo oracle for a given load point.
//! - `selftest`: run the oracle-equivalence suites.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime/check failure.

use clap::{Args, Parser, Subcommand};
use mums_core::costsel::{analytic_cost, mg_infinity_oracle, CostModelParams};
use mums_core::domain::{Rate, RngStream};
use mums_core::harness::{
    emit_csv, parse_config, parse_scheduler, run_experiment, ExperimentConfig,
};
use mums_core::oracle::selftest;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mums-lab", about = "Multipath multi-server video delivery lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a key = value config file.
    Run(RunArgs),
    /// Evaluate the analytic peering-cost model against its oracle.
    CostModel(CostModelArgs),
    /// Run the oracle-equivalence self-test suites.
    Selftest {
        /// Run at full acceptance size instead of the quick battery.
        #[arg(long)]
        full: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Path to the experiment config.
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for qoe.csv / cost.csv / ledgers.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config's scheduler
    /// (sunstar | min-rtt | single-server | aggressive).
    #[arg(long)]
    scheduler: Option<String>,
    /// Dump the per-run event logs next to the CSV files.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct CostModelArgs {
    /// Client arrival rate, per second.
    #[arg(long)]
    lambda: f64,
    /// Video size in chunks.
    #[arg(long)]
    size: f64,
    /// Aggregate download rate, chunks per second.
    #[arg(long)]
    rate: f64,
    /// Number of servers the download spreads over.
    #[arg(long)]
    servers: u32,
    /// Billing percentile in (0, 1).
    #[arg(long, default_value_t = 0.95)]
    q: f64,
    /// Monte-Carlo horizon in seconds.
    #[arg(long, default_value_t = 1.2e6)]
    horizon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_run(args: &RunArgs) -> ExitCode {
    let text = match fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: reading {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let mut cfg: ExperimentConfig = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(s) = &args.scheduler {
        match parse_scheduler(s) {
            Some(k) => cfg.scheduler = k,
            None => {
                eprintln!("error: unknown scheduler `{s}`");
                return ExitCode::from(2);
            }
        }
    }
    cfg.trace_events = args.trace;
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }

    let report = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    if let Err(e) = emit_csv(&report, &args.out) {
        eprintln!("error: {e}");
        return ExitCode::from(3);
    }
    if args.trace {
        for run in &report.runs {
            if let Some(log) = &run.trace.event_log {
                let path = args.out.join(format!("run{}_events.log", run.run_id));
                if let Err(e) = fs::write(&path, log.join("\n") + "\n") {
                    eprintln!("error: writing {}: {e}", path.display());
                    return ExitCode::from(3);
                }
            }
        }
    }

    println!(
        "{} runs, {} clients total",
        report.runs.len(),
        report.runs.iter().map(|r| r.trace.qoe.len()).sum::<usize>()
    );
    println!(
        "stall_fraction median {:.6} (q1 {:.6}, q3 {:.6})",
        report.stall_fraction.median, report.stall_fraction.q1, report.stall_fraction.q3
    );
    println!(
        "total p95 cost median {:.6} (min {:.6}, max {:.6})",
        report.total_p95_cost.median, report.total_p95_cost.min, report.total_p95_cost.max
    );
    for s in &report.summaries {
        println!(
            "run {}: cost {:.6}, median stall {:.6}, zero-stall clients {:.1}%",
            s.run_id,
            s.total_p95_cost,
            s.median_stall_fraction,
            100.0 * s.zero_stall_fraction
        );
    }
    println!("wrote {}", args.out.display());
    ExitCode::SUCCESS
}

fn cmd_cost_model(args: &CostModelArgs) -> ExitCode {
    let p = CostModelParams {
        arrival_rate: args.lambda,
        video_size: args.size,
        download_rate: Rate::per_sec(args.rate),
        servers: args.servers,
        percentile: args.q,
    };
    let analytic = match analytic_cost(&p) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let oracle = mg_infinity_oracle(&p, args.horizon, RngStream::new(args.seed, 0));
    println!("rho (offered load)      {:.3}", p.rho());
    if !p.normal_approx_reliable() {
        println!("note: rho < 25, the closed form's normal approximation is unreliable");
    }
    println!("analytic per-link cost  {analytic:.3}");
    println!("oracle per-link cost    {oracle:.3}");
    println!(
        "relative gap            {:.4}",
        (analytic - oracle).abs() / oracle.max(f64::MIN_POSITIVE)
    );
    ExitCode::SUCCESS
}

fn cmd_selftest(full: bool) -> ExitCode {
    let results = selftest(full);
    let mut ok = true;
    for r in &results {
        println!(
            "{} {} - {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        ok &= r.passed;
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::CostModel(args) => cmd_cost_model(args),
        Command::Selftest { full } => cmd_selftest(*full),
    }
}
