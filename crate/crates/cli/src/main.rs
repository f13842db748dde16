use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use rama::ctrl::ConsistencyMode;
use rama::harness::{bench, check_trace, failover_timing, run_scenario, BenchConfig, FailoverConfig, ScenarioConfig, Transport};
use rama::trace::read_jsonl;

#[derive(Parser)]
#[command(name = "rama", version, about = "Fault-tolerant SDN controller replicas: scenarios, benchmarks and trace checking")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and check its trace.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the JSONL trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Closed-loop throughput on the deterministic transport.
    Bench {
        #[arg(long, default_value_t = 16)]
        switches: usize,
        #[arg(long, default_value_t = 1000)]
        batch_size: usize,
        /// Batch timeout in milliseconds.
        #[arg(long, default_value_t = 50)]
        batch_time: u64,
        #[arg(long, default_value = "both")]
        mode: ConsistencyMode,
        #[arg(long, default_value_t = 500)]
        measure_ms: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Measure the forwarding gap when the master is killed.
    Failover {
        /// Session timeout in milliseconds.
        #[arg(long, default_value_t = 500)]
        session_timeout: u64,
        #[arg(long, value_enum, default_value = "deterministic")]
        transport: TransportArg,
        #[arg(long, default_value_t = 1)]
        trials: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Measure baseline jitter without killing anything.
        #[arg(long)]
        no_kill: bool,
    },
    /// Check a JSONL trace file.
    Check {
        #[arg(long)]
        trace: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TransportArg {
    Deterministic,
    Sockets,
}

impl From<TransportArg> for Transport {
    fn from(t: TransportArg) -> Self {
        match t {
            TransportArg::Deterministic => Transport::Deterministic,
            TransportArg::Sockets => Transport::Sockets,
        }
    }
}

fn verdict(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::Run { config, seed, trace } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut cfg = ScenarioConfig::from_toml(&text)?;
            if seed.is_some() {
                cfg.seed = seed;
            }
            let out = run_scenario(&cfg)?;
            if let Some(path) = trace {
                out.write_trace(&path).with_context(|| format!("writing {}", path.display()))?;
            }
            if let Some(e) = &out.hook_event {
                println!("fault hook targets {e}");
            }
            if let Some(err) = &out.error {
                println!("run stopped early: {err}");
            }
            println!("{}", out.report);
            Ok(verdict(out.passed()))
        }
        Cmd::Bench { switches, batch_size, batch_time, mode, measure_ms, seed } => {
            if switches == 0 || batch_size == 0 {
                bail!("--switches and --batch-size must be positive");
            }
            let cfg = BenchConfig { switches, batch_size, batch_time_ms: batch_time, mode, measure_ms, seed, ..Default::default() };
            let r = bench(&cfg)?;
            println!("{:.0} responses/s ({} responses in {} ms simulated)", r.throughput, r.responses, r.window / 1_000_000);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Failover { session_timeout, transport, trials, seed, no_kill } => {
            let cfg = FailoverConfig { session_timeout_ms: session_timeout, transport: transport.into(), trials, seed, kill: !no_kill, ..Default::default() };
            let r = failover_timing(&cfg)?;
            for (i, g) in r.gaps_ms.iter().enumerate() {
                println!("trial {}: gap {g:.1} ms", i + 1);
            }
            println!("median gap {:.1} ms, max jitter {:.2} ms, checks {}", r.median_ms, r.max_jitter_ms, if r.checks_passed { "passed" } else { "FAILED" });
            Ok(verdict(r.checks_passed))
        }
        Cmd::Check { trace } => {
            let f = fs::File::open(&trace).with_context(|| format!("opening {}", trace.display()))?;
            let records = read_jsonl(BufReader::new(f))?;
            let report = check_trace(&records);
            println!("{report}");
            Ok(verdict(report.passed()))
        }
    }
}
