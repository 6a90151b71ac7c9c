//! End-device CLI: uploads, retrieves, removes, and syncs files
//! against a running cluster.
//!
//! The switching node's address is the only required coordinate; the
//! full topology is fetched from it at startup. A cache directory, if
//! given, carries the device identity and the file metadata between
//! invocations.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use shardstore::endpoint::{Command, OpReport};
use shardstore::node::{load_metas, save_metas};
use shardstore::sockets::{self, ClientRuntime};
use shardstore_core::chunking::ChunkParams;
use shardstore_core::{ErrorCode, Message, Topology};

const OP_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Parser)]
#[command(name = "client", about = "shardstore end-device client", version)]
struct Args {
    /// User the files belong to.
    #[arg(long, default_value = "default")]
    user: String,

    /// Switching node address, e.g. 127.0.0.1:7400.
    #[arg(long)]
    switch: String,

    /// Directory for the device identity, metadata, and chunk cache
    /// state. Without it every invocation is a fresh device.
    #[arg(long)]
    cache_dir: Option<PathBuf>,

    #[command(subcommand)]
    op: Op,
}

#[derive(Subcommand)]
enum Op {
    /// Upload a file; its basename becomes the stored name.
    Put { path: PathBuf },
    /// Retrieve a file by name, to stdout unless -o is given.
    Get {
        name: String,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Remove a file by name.
    Rm { name: String },
    /// Exchange metadata with the switching node.
    Sync,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("client: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(args: Args) -> Result<ExitCode, String> {
    let device = device_name(args.cache_dir.as_deref())?;
    let topology = fetch_topology(&args.switch, &device)?;
    let mut rt = ClientRuntime::new(
        &device,
        &args.user,
        &args.switch,
        topology,
        ChunkParams::default(),
        4,
        256 * 1024 * 1024,
        OP_TIMEOUT,
    );

    let metas_path = args.cache_dir.as_ref().map(|d| d.join("metas.bin"));
    if let Some(path) = &metas_path {
        if path.exists() {
            let table = load_metas(path).map_err(|e| format!("{}: {e}", path.display()))?;
            for meta in table.iter() {
                rt.state_mut().restore_meta(meta.clone());
            }
        }
    }

    let report = match &args.op {
        Op::Put { path } => {
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| format!("{}: not a usable file name", path.display()))?
                .to_string();
            let data = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let timestamp_ms = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_err(|e| e.to_string())?
                .as_millis() as u64;
            rt.run(Command::Put { name, data, timestamp_ms })
        }
        Op::Get { name, .. } => rt.run(Command::Get { name: name.clone() }),
        Op::Rm { name } => rt.run(Command::Delete { name: name.clone() }),
        Op::Sync => rt.run(Command::Sync),
    };

    if let Some(path) = &metas_path {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        }
        save_metas(path, rt.state().metas()).map_err(|e| format!("{}: {e}", path.display()))?;
    }

    if !report.ok {
        return Ok(fail(&report));
    }
    match &args.op {
        Op::Put { .. } => {
            eprintln!(
                "stored {}: {} bytes, {}/{} chunks uploaded",
                report.file_name, report.bytes, report.chunks_sent, report.chunks_total
            );
        }
        Op::Get { out, .. } => {
            let (_, payload) = rt
                .state_mut()
                .take_payload()
                .ok_or("retrieval reported success without a payload")?;
            match out {
                Some(path) => {
                    fs::write(path, &payload).map_err(|e| format!("{}: {e}", path.display()))?;
                    eprintln!("wrote {} bytes to {}", payload.len(), path.display());
                }
                None => {
                    let mut stdout = std::io::stdout().lock();
                    stdout.write_all(&payload).map_err(|e| e.to_string())?;
                    stdout.flush().map_err(|e| e.to_string())?;
                }
            }
        }
        Op::Rm { name } => eprintln!("removed {name}"),
        Op::Sync => eprintln!("synced; {} files known locally", rt.state().metas().len()),
    }
    Ok(ExitCode::SUCCESS)
}

fn fail(report: &OpReport) -> ExitCode {
    let what = report.error.map_or("failed".to_string(), |e| e.to_string());
    eprintln!("client: {} {}: {what}: {}", report.kind.as_str(), report.file_name, report.detail);
    match report.error {
        Some(ErrorCode::NotFound) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

/// Stable per cache directory, ephemeral otherwise.
fn device_name(cache_dir: Option<&std::path::Path>) -> Result<String, String> {
    let Some(dir) = cache_dir else {
        return Ok(format!("cli-{}", std::process::id()));
    };
    let path = dir.join("device");
    if let Ok(name) = fs::read_to_string(&path) {
        let name = name.trim().to_string();
        if !name.is_empty() {
            return Ok(name);
        }
    }
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let name = format!("dev-{:016x}", rand::random::<u64>());
    fs::write(&path, &name).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(name)
}

fn fetch_topology(switch: &str, device: &str) -> Result<Topology, String> {
    let env = sockets::request_once(switch, device, Message::GetTopology, OP_TIMEOUT)
        .map_err(|e| format!("switch {switch}: {e}"))?;
    match env.message {
        Message::TopologyReply { topology } => Ok(topology),
        other => Err(format!("switch {switch}: unexpected {}", other.type_name())),
    }
}
