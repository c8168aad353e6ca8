use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use ries_cli::config::validate_config;
use ries_cli::experiments::run_experiment;
use ries_cli::report::{write_outputs, RunReport};
use ries_cli::CliError;

#[derive(Parser)]
#[command(name = "ries", version, about = "Repeated interaction experiments driven by JSON configurations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a configuration file.
    Run {
        config: PathBuf,
        /// Added to every seed in the configuration.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        /// Output directory, overriding `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for trajectory fan-out (0 picks the number of cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Check a configuration and print it with defaults filled in.
    Validate { config: PathBuf },
}

fn run(config: PathBuf, seed_offset: u64, out: Option<PathBuf>, jobs: usize) -> Result<bool, CliError> {
    let config = validate_config(&config)?.with_seed_offset(seed_offset);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| CliError::Pool(e.to_string()))?;
    let start = Instant::now();
    let outcome = run_experiment(&config, &pool)?;
    let report = RunReport::new(config.clone(), &outcome, start.elapsed().as_secs_f64());
    let dir = out.unwrap_or_else(|| config.output.dir.clone());
    let (summary, series) = write_outputs(&dir, &config, &report, &outcome.series)?;
    for (name, ok) in &report.checks {
        println!("{name}: {}", if *ok { "pass" } else { "FAIL" });
    }
    println!(
        "{} run {}: {} ({:.2}s), summary {}, series {}",
        report.experiment,
        report.run_id,
        if report.passed { "passed" } else { "failed" },
        report.wall_time_s,
        summary.display(),
        series.display()
    );
    Ok(report.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed_offset, out, jobs } => run(config, seed_offset, out, jobs),
        Command::Validate { config } => validate_config(&config).and_then(|c| {
            println!("{}", serde_json::to_string_pretty(&c).map_err(|e| CliError::Output(e.into()))?);
            Ok(true)
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("ries: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
