//! Experiment CLI: runs a configured workload against a simulated or
//! socket-backed deployment and emits CSV reports.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use shardstore::config::{HarnessConfig, KvConfig};
use shardstore::harness::{self, workload};

#[derive(Parser)]
#[command(name = "harness", about = "shardstore experiment harness", version)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// One experiment; writes report.csv and report_hourly.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// One run per k over the same corpus; writes sweep.csv.
    SweepK {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated k values, e.g. 2,5,8,10.
        #[arg(long, value_delimiter = ',')]
        k: Vec<u8>,
    },
    /// Writes the workload trace a seed expands to, without running it.
    GenWorkload {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("harness: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(args: Args) -> Result<(), String> {
    match args.cmd {
        Cmd::Run { config } => {
            let cfg = HarnessConfig::from_file(&config)
                .map_err(|e| format!("{}: {e}", config.display()))?;
            let outcome = harness::run(&cfg).map_err(|e| e.to_string())?;
            let m = &outcome.metrics;
            println!(
                "files {}  retrievals {}  failures {}",
                m.files, m.retrievals, m.failures
            );
            println!(
                "dedup ratio {:.4}  avg retrieval {:.3} ms",
                m.dedup_ratio().unwrap_or(0.0),
                m.avg_retrieval_ms
            );
            println!("reports under {}", cfg.out_dir.display());
            Ok(())
        }
        Cmd::SweepK { config, k } => {
            if k.is_empty() {
                return Err("need at least one k".into());
            }
            let cfg = HarnessConfig::from_file(&config)
                .map_err(|e| format!("{}: {e}", config.display()))?;
            let rows = harness::sweep_k(&cfg, &k).map_err(|e| e.to_string())?;
            println!("k,dedup_ratio,avg_retrieval_ms");
            for r in &rows {
                println!("{},{:.6},{:.3}", r.k, r.dedup_ratio, r.avg_retrieval_ms);
            }
            println!("sweep.csv under {}", cfg.out_dir.display());
            Ok(())
        }
        Cmd::GenWorkload { seed, out } => {
            let mut params = workload::WorkloadParams::from_config(
                &HarnessConfig::from_kv(&KvConfig::parse("").unwrap()).unwrap(),
            );
            params.seed = seed;
            let wl = workload::generate(&params);
            let file = fs::File::create(&out).map_err(|e| format!("{}: {e}", out.display()))?;
            let mut w = std::io::BufWriter::new(file);
            workload::write_trace(&mut w, &wl).map_err(|e| format!("{}: {e}", out.display()))?;
            w.flush().map_err(|e| e.to_string())?;
            println!(
                "{}: {} files, {} events, {} original bytes",
                out.display(),
                wl.files.len(),
                wl.events.len(),
                wl.total_original_bytes()
            );
            Ok(())
        }
    }
}
