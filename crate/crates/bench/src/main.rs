//! `bench` — sweep the word-count workload across transports, summarize
//! results, and generate corpora.

use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mpklink::mpk::RightsPolicy;
use mpklink::protection::BackendChoice;
use mpklink::transport::TransportKind;
use mpklink_bench::{export_csv, import_csv, render_plot_data, run_sweep, summarize, SweepPlan};

#[derive(Parser)]
#[command(name = "bench", about = "Word-count IPC latency benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time the word-count request across transports and word counts.
    Sweep {
        /// Comma-separated transports: fifo,uds,shm,mpk
        #[arg(long, value_delimiter = ',', default_value = "fifo,uds,shm,mpk")]
        transports: Vec<TransportKind>,
        /// Comma-separated word counts, strictly increasing
        #[arg(long, value_delimiter = ',', default_value = "100,1000,10000,100000,1000000,10000000,100000000")]
        counts: Vec<u64>,
        /// Recorded trials per cell (one extra warm-up runs first)
        #[arg(long, default_value_t = 5)]
        trials: u32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Sign requests and verify them at the server: on|off
        #[arg(long, default_value = "off", value_parser = parse_on_off)]
        signed: bool,
        /// Rights policy for the mpk transport
        #[arg(long, default_value = "strict")]
        policy: RightsPolicy,
        /// Protection backend: auto|hardware|emulated
        #[arg(long, default_value = "auto")]
        backend: BackendChoice,
        /// Output CSV path
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
        /// Also write per-transport median series for plotting
        #[arg(long)]
        plot_out: Option<PathBuf>,
        /// Run the 10^7 and 10^8 cells too
        #[arg(long, default_value_t = false)]
        full: bool,
        /// Shared-memory transport buffer size in bytes
        #[arg(long, default_value_t = 1 << 20)]
        buffer_capacity: usize,
        /// Protection-key channel chunk size in bytes
        #[arg(long, default_value_t = 256 << 10)]
        chunk_capacity: usize,
        /// Polling sleep in microseconds for shm and mpk
        #[arg(long, default_value_t = 50)]
        poll_interval_us: u64,
        /// Per-trial deadline in seconds
        #[arg(long, default_value_t = 60)]
        deadline_s: u64,
        /// Scratch directory for corpora and channel endpoints
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
    /// Render the median table for a results CSV.
    Summarize {
        /// CSV produced by `bench sweep`
        results: PathBuf,
    },
    /// Generate a deterministic word corpus.
    Gen {
        #[arg(long)]
        words: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(format!("expected on|off, got '{other}'")),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Sweep {
            transports,
            counts,
            trials,
            seed,
            signed,
            policy,
            backend,
            out,
            plot_out,
            full,
            buffer_capacity,
            chunk_capacity,
            poll_interval_us,
            deadline_s,
            workdir,
        } => {
            let workdir = workdir.unwrap_or_else(|| {
                std::env::temp_dir().join(format!("mpklink-bench-{}", std::process::id()))
            });
            let mut plan = SweepPlan::new(&workdir);
            plan.transports = transports;
            plan.counts = counts;
            plan.trials = trials;
            plan.seed = seed;
            plan.signed = signed;
            plan.policy = policy;
            plan.backend = backend;
            plan.buffer_capacity = buffer_capacity;
            plan.chunk_capacity = chunk_capacity;
            plan.poll_interval = Duration::from_micros(poll_interval_us);
            plan.trial_deadline = Duration::from_secs(deadline_s);
            plan.full = full;

            let (run, skipped) = plan.effective_counts();
            if !skipped.is_empty() {
                eprintln!(
                    "skipping counts {:?} (pass --full to include them)",
                    skipped
                );
            }
            if run.is_empty() {
                bail!("no counts left to run");
            }
            eprintln!(
                "sweep: transports {:?}, counts {:?}, {} trials/cell, signed={}, policy={}, workdir {}",
                plan.transports.iter().map(|t| t.as_str()).collect::<Vec<_>>(),
                run,
                plan.trials,
                if signed { "on" } else { "off" },
                plan.policy,
                workdir.display()
            );

            let records = run_sweep(&plan).context("sweep failed")?;
            let failures = records.iter().filter(|r| !r.outcome.is_ok()).count();
            export_csv(&records, &out).context("writing results csv")?;
            eprintln!(
                "wrote {} records ({} with errors) to {}",
                records.len(),
                failures,
                out.display()
            );
            if let Some(plot) = plot_out {
                render_plot_data(&records, &plot).context("writing plot data")?;
                eprintln!("wrote plot series to {}", plot.display());
            }
            print!("{}", summarize(&records).render());
            Ok(())
        }
        Command::Summarize { results } => {
            let records = import_csv(&results)
                .with_context(|| format!("reading {}", results.display()))?;
            print!("{}", summarize(&records).render());
            Ok(())
        }
        Command::Gen { words, seed, out } => {
            mpklink::wordcount::generate_corpus(words, seed, &out)
                .with_context(|| format!("generating {} words", words))?;
            eprintln!("wrote {} words (seed {}) to {}", words, seed, out.display());
            Ok(())
        }
    }
}
