use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use disagg_store::bench::{self, BenchEndpoints, OutputFormat, BENCHMARK_TABLE, DEFAULT_REPETITIONS};
use disagg_store::config::DaemonConfig;
use disagg_store::daemon;

#[derive(Parser)]
#[command(name = "disagg-store", version, about = "Disaggregated immutable object store")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a store daemon until SIGINT/SIGTERM.
    Daemon {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the local-vs-remote microbenchmark against running daemons.
    Bench {
        /// Client socket of the producer's store.
        #[arg(long)]
        producer: PathBuf,
        /// Client socket used by the LOCAL consumer (normally the producer's store).
        #[arg(long)]
        consumer_local: PathBuf,
        /// Client socket of the other store, used by the REMOTE consumer.
        #[arg(long)]
        consumer_remote: PathBuf,
        /// Bench id 1..6, or `all`.
        #[arg(long, default_value = "all")]
        bench: String,
        #[arg(long, default_value_t = DEFAULT_REPETITIONS)]
        reps: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
        format: OutputFormat,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_logging(default: &str) {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

fn parse_bench_ids(raw: &str) -> Result<Vec<u32>, String> {
    if raw.eq_ignore_ascii_case("all") {
        return Ok(BENCHMARK_TABLE.iter().map(|row| row.0).collect());
    }
    raw.split(',')
        .map(|s| {
            let id: u32 = s.trim().parse().map_err(|_| format!("bad bench id `{s}`"))?;
            if BENCHMARK_TABLE.iter().any(|row| row.0 == id) {
                Ok(id)
            } else {
                Err(format!("no bench with id {id}"))
            }
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Daemon { config } => {
            let config = match DaemonConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            init_logging(&config.log_level);
            match daemon::run(&config) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Bench {
            producer,
            consumer_local,
            consumer_remote,
            bench: which,
            reps,
            seed,
            format,
            out,
        } => {
            init_logging("warn");
            let ids = match parse_bench_ids(&which) {
                Ok(ids) => ids,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let endpoints = BenchEndpoints {
                producer,
                consumer_local,
                consumer_remote,
            };
            let outcome = match bench::run_selection(&ids, &endpoints, reps, seed, &mut |_| {}) {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::FAILURE;
                }
            };
            if let Err(e) = bench::emit(&outcome.records, format, &out) {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
            match bench::summarize(&outcome.records) {
                Ok(s) => print!("{}", bench::render_summary(&s)),
                Err(e) => eprintln!("error: {e}"),
            }
            for a in &outcome.aborted {
                eprintln!(
                    "aborted: bench {} {} repetition {}: {}",
                    a.bench_id, a.scenario, a.repetition, a.error
                );
            }
            if outcome.aborted.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_id_selection() {
        assert_eq!(parse_bench_ids("all").unwrap(), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(parse_bench_ids("2,5").unwrap(), vec![2, 5]);
        assert!(parse_bench_ids("7").is_err());
        assert!(parse_bench_ids("x").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
