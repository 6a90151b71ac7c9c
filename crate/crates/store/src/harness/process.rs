//! Socket-mode experiment runner: one OS process per storage node,
//! client runtimes over real TCP, stats scraped back off the daemons
//! when the replay finishes.
//!
//! Socket runs replay the trace in order but without trace pacing;
//! retrieval times are genuine network round trips, while the hourly
//! histogram compresses into the wall-clock of the run.

use std::collections::BTreeMap;
use std::env;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Child, Command as ProcCommand, Stdio};
use std::thread;
use std::time::Duration;

use shardstore_core::wire::NodeStats;
use shardstore_core::{FileMeta, Message, Topology};

use crate::config::HarnessConfig;
use crate::endpoint::Command;
use crate::harness::workload::{EventKind, Workload};
use crate::harness::{
    metrics, reader_addr, topology_with, user_name, writer_addr, HarnessError, RunOutcome,
};
use crate::sockets::{self, ClientRuntime};

const OP_TIMEOUT: Duration = Duration::from_secs(30);
const STARTUP: Duration = Duration::from_secs(15);

/// Loopback addresses with one port per node, dense from `port_base`.
pub fn socket_topology(cfg: &HarnessConfig) -> Result<Topology, HarnessError> {
    let n = cfg.params.n() as u16;
    let base = cfg.port_base;
    topology_with(cfg, |c, p| format!("127.0.0.1:{}", base + c * n + p as u16))
}

/// A spawned storage daemon, killed on drop so an aborted run never
/// leaves orphan processes behind.
pub struct NodeProc {
    pub addr: String,
    child: Child,
}

impl Drop for NodeProc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Resolves the node binary: `SHARDSTORE_NODE_BIN` when set, else a
/// `node` executable next to (or one directory above) this one.
fn node_binary() -> io::Result<PathBuf> {
    if let Ok(p) = env::var("SHARDSTORE_NODE_BIN") {
        return Ok(PathBuf::from(p));
    }
    let me = env::current_exe()?;
    let dir = me
        .parent()
        .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "executable has no directory"))?;
    for cand in [dir.join("node"), dir.parent().map(|d| d.join("node")).unwrap_or_default()] {
        if cand.is_file() {
            return Ok(cand);
        }
    }
    Err(io::Error::new(
        io::ErrorKind::NotFound,
        "node binary not found; set SHARDSTORE_NODE_BIN",
    ))
}

/// Writes the member file plus one config per node under `dir` and
/// spawns every daemon, waiting until each answers a health probe.
pub fn spawn_cluster(
    cfg: &HarnessConfig,
    topology: &Topology,
    dir: &Path,
) -> Result<Vec<NodeProc>, HarnessError> {
    fs::create_dir_all(dir)?;
    let mut members = String::new();
    for spec in &topology.clusters {
        writeln!(members, "cluster.{} = {}", spec.id.0, spec.members.join(",")).unwrap();
    }
    let members_path = dir.join("members.cfg");
    fs::write(&members_path, members)?;

    let bin = node_binary()?;
    let mut procs = Vec::new();
    for spec in &topology.clusters {
        for (p, addr) in spec.members.iter().enumerate() {
            let tag = format!("n{:03}_{p}", spec.id.0);
            let cfg_path = dir.join(format!("{tag}.cfg"));
            let store_dir = dir.join(&tag);
            let mut text = String::new();
            writeln!(text, "listen = {addr}").unwrap();
            writeln!(text, "topology = members.cfg").unwrap();
            writeln!(text, "cluster_id = {}", spec.id.0).unwrap();
            writeln!(text, "position = {p}").unwrap();
            writeln!(text, "n = {}", cfg.params.n()).unwrap();
            writeln!(text, "k = {}", cfg.params.k()).unwrap();
            writeln!(text, "mode = {}", cfg.mode).unwrap();
            writeln!(text, "capacity = {}", cfg.capacity).unwrap();
            writeln!(text, "store_dir = {}", store_dir.display()).unwrap();
            fs::write(&cfg_path, text)?;

            let child = ProcCommand::new(&bin)
                .arg("--config")
                .arg(&cfg_path)
                .stdout(Stdio::null())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(|e| {
                    HarnessError::Invalid(format!("spawning node {addr} ({}): {e}", bin.display()))
                })?;
            procs.push(NodeProc { addr: addr.clone(), child });
        }
    }
    for proc in &procs {
        sockets::wait_until_up(&proc.addr, STARTUP)
            .map_err(|e| HarnessError::Invalid(e.to_string()))?;
    }
    Ok(procs)
}

fn open_client(cfg: &HarnessConfig, topology: &Topology, device: String, user: u32) -> ClientRuntime {
    let budget = if device.ends_with(".r") { 0 } else { cfg.cache_budget };
    ClientRuntime::new(
        &device,
        &user_name(user),
        topology.directory_addr(),
        topology.clone(),
        cfg.chunking,
        cfg.fetch_window,
        budget,
        OP_TIMEOUT,
    )
}

/// Replays `wl` against live daemons. Puts run first (one thread per
/// user's writer device), then the get/delete tail runs per user in
/// trace order, gets on the cold reader device.
pub fn run_sockets(cfg: &HarnessConfig, wl: &Workload) -> Result<RunOutcome, HarnessError> {
    if wl.files.is_empty() {
        return Err(HarnessError::Invalid("empty workload".into()));
    }
    let topology = socket_topology(cfg)?;
    let procs = spawn_cluster(cfg, &topology, &cfg.out_dir.join("cluster"))?;
    let switch = topology.directory_addr().to_string();

    let writers: BTreeMap<u32, (ClientRuntime, Vec<_>)> = thread::scope(|s| {
        let mut handles = Vec::new();
        for u in 0..cfg.users {
            let topology = &topology;
            handles.push(s.spawn(move || {
                let mut rt = open_client(cfg, topology, writer_addr(u), u);
                let mut reports = Vec::new();
                for e in wl.events.iter().filter(|e| e.kind == EventKind::Put && e.user == u) {
                    let spec = wl.file(u, &e.name).expect("workload names its own files");
                    reports.push(rt.run(Command::Put {
                        name: e.name.clone(),
                        data: spec.content(wl.seed),
                        timestamp_ms: e.at_ms,
                    }));
                }
                (u, (rt, reports))
            }));
        }
        handles.into_iter().map(|h| h.join().expect("writer thread")).collect()
    });

    let done: Vec<(ClientRuntime, ClientRuntime, Vec<_>)> = thread::scope(|s| {
        let mut handles = Vec::new();
        for (u, (mut writer, mut reports)) in writers {
            let topology = &topology;
            handles.push(s.spawn(move || {
                let mut reader = open_client(cfg, topology, reader_addr(u), u);
                for e in wl.events.iter().filter(|e| e.kind != EventKind::Put && e.user == u) {
                    match e.kind {
                        EventKind::Get => {
                            reports.push(reader.run(Command::Get { name: e.name.clone() }));
                            // Bounds resident payloads to one per thread.
                            let _ = reader.state_mut().take_payload();
                        }
                        EventKind::Delete => {
                            reports.push(writer.run(Command::Delete { name: e.name.clone() }));
                        }
                        EventKind::Put => unreachable!(),
                    }
                }
                (writer, reader, reports)
            }));
        }
        handles.into_iter().map(|h| h.join().expect("reader thread")).collect()
    });

    let mut reports = Vec::new();
    let mut wire_bytes = 0u64;
    for (mut w, mut r, reps) in done {
        wire_bytes += w.wire_bytes() + r.wire_bytes();
        reports.extend(reps);
        w.shutdown();
        r.shutdown();
    }

    let mut stats = Vec::new();
    for proc in &procs {
        let env = sockets::request_once(&proc.addr, "harness", Message::GetStats, OP_TIMEOUT)
            .map_err(|e| HarnessError::Invalid(format!("stats from {}: {e}", proc.addr)))?;
        match env.message {
            Message::StatsReply { stats: s } => stats.push(s),
            other => {
                return Err(HarnessError::Invalid(format!(
                    "stats from {}: unexpected {}",
                    proc.addr,
                    other.type_name()
                )))
            }
        }
    }
    let live = live_metas(&switch, cfg.users)?;
    drop(procs);

    let m = metrics::aggregate(cfg.mode, cfg.params, cfg.users, live.iter(), &stats, wire_bytes, &reports);
    if m.dedup_ratio().is_none() {
        return Err(HarnessError::Invalid(
            "nothing was stored; the deduplication ratio is undefined".into(),
        ));
    }
    // Per-message-type tallies exist only on the simulated transport;
    // socket runs report client-observed bytes in the metrics instead.
    Ok(RunOutcome { metrics: m, reports, counters: BTreeMap::new() })
}

/// The switch's live metadata per user, via an empty sync offer.
fn live_metas(switch: &str, users: u32) -> Result<Vec<FileMeta>, HarnessError> {
    let mut live = Vec::new();
    for u in 0..users {
        let msg = Message::SyncMeta { user_id: user_name(u), metas: Vec::new() };
        let env = sockets::request_once(switch, "harness", msg, OP_TIMEOUT)
            .map_err(|e| HarnessError::Invalid(format!("meta sync with {switch}: {e}")))?;
        match env.message {
            Message::SyncReply { metas } => live.extend(metas),
            other => {
                return Err(HarnessError::Invalid(format!(
                    "meta sync with {switch}: unexpected {}",
                    other.type_name()
                )))
            }
        }
    }
    Ok(live)
}

/// Shared by run_sockets and external checks that want raw counters.
pub fn node_stats(addrs: &[String]) -> Result<Vec<NodeStats>, HarnessError> {
    let mut stats = Vec::new();
    for addr in addrs {
        let env = sockets::request_once(addr, "stats", Message::GetStats, OP_TIMEOUT)
            .map_err(|e| HarnessError::Invalid(format!("stats from {addr}: {e}")))?;
        match env.message {
            Message::StatsReply { stats: s } => stats.push(s),
            other => {
                return Err(HarnessError::Invalid(format!(
                    "stats from {addr}: unexpected {}",
                    other.type_name()
                )))
            }
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::KvConfig;

    #[test]
    fn socket_topology_lays_out_dense_ports() {
        let cfg = HarnessConfig::from_kv(
            &KvConfig::parse("clusters = 2\nn = 3\nk = 2\nport_base = 9000\n").unwrap(),
        )
        .unwrap();
        let topo = socket_topology(&cfg).unwrap();
        assert_eq!(topo.clusters[0].members[0], "127.0.0.1:9000");
        assert_eq!(topo.clusters[0].members[2], "127.0.0.1:9002");
        assert_eq!(topo.clusters[1].members[0], "127.0.0.1:9003");
        assert_eq!(topo.directory_addr(), "127.0.0.1:9000");
    }

    #[test]
    fn missing_node_binary_is_a_named_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = HarnessConfig::from_kv(
            &KvConfig::parse(&format!(
                "clusters = 1\nn = 1\nk = 1\nout_dir = {}\n",
                dir.path().display()
            ))
            .unwrap(),
        )
        .unwrap();
        let topo = socket_topology(&cfg).unwrap();
        // Point resolution at a nonexistent path so spawning fails fast.
        std::env::set_var("SHARDSTORE_NODE_BIN", dir.path().join("no-such-bin"));
        let err = spawn_cluster(&cfg, &topo, dir.path()).err().expect("must fail");
        std::env::remove_var("SHARDSTORE_NODE_BIN");
        assert!(err.to_string().contains("127.0.0.1"), "{err}");
    }
}
