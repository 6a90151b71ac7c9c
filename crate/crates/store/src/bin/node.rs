//! Storage daemon: binds the configured listen address and serves the
//! wire protocol until killed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use shardstore::config::NodeConfig;
use shardstore::sockets::NodeRuntime;

#[derive(Parser)]
#[command(name = "node", about = "shardstore storage daemon", version)]
struct Args {
    /// Node configuration file (listen, topology, cluster_id,
    /// position, n, k, mode, capacity, store_dir).
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match NodeConfig::from_file(&args.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("node: {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    match NodeRuntime::start(&cfg) {
        Ok(rt) => {
            println!("listening on {}", rt.local_addr());
            rt.wait();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("node: {e}");
            ExitCode::from(2)
        }
    }
}
