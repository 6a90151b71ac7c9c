//! Experiment driver: builds a simulated deployment, replays a
//! synthetic workload through real client and node state machines, and
//! reports deduplication and retrieval metrics as CSV.
//!
//! Every user runs two devices: a writer that uploads and a reader
//! with a cold chunk cache that performs the gets, so retrieval times
//! always measure network fetches rather than local cache hits.

pub mod metrics;
pub mod process;
pub mod workload;

use std::collections::BTreeMap;
use std::fmt;
use std::io;

use shardstore_core::erasure::CodingParams;
use shardstore_core::{ClusterId, ClusterSpec, Topology};

use crate::client::ClientState;
use crate::config::{ConfigError, HarnessConfig, Transport};
use crate::endpoint::{Command, OpReport};
use crate::node::NodeState;
use crate::piecestore::MemoryStore;
use crate::sim::{Counter, LatencyModel, Sim};

use metrics::{RunMetrics, SweepRow};
use workload::{EventKind, Workload, WorkloadParams};

/// Payload bytes queued into the simulator per wave of puts; bounds
/// transient memory, not behavior.
const PUT_WAVE: usize = 32;

#[derive(Debug)]
pub enum HarnessError {
    Io(io::Error),
    Invalid(String),
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Io(e) => write!(f, "{e}"),
            HarnessError::Invalid(why) => write!(f, "{why}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<io::Error> for HarnessError {
    fn from(e: io::Error) -> Self {
        HarnessError::Io(e)
    }
}

impl From<ConfigError> for HarnessError {
    fn from(e: ConfigError) -> Self {
        HarnessError::Invalid(e.to_string())
    }
}

pub fn sim_node_addr(cluster: u16, position: usize) -> String {
    format!("n{cluster:03}.{position}")
}

pub fn user_name(user: u32) -> String {
    format!("u{user:03}")
}

pub fn writer_addr(user: u32) -> String {
    format!("u{user:03}.w")
}

pub fn reader_addr(user: u32) -> String {
    format!("u{user:03}.r")
}

/// Builds the E-clusters-of-n topology with caller-chosen addresses.
pub fn topology_with(
    cfg: &HarnessConfig,
    addr: impl Fn(u16, usize) -> String,
) -> Result<Topology, HarnessError> {
    if cfg.clusters == 0 {
        return Err(HarnessError::Invalid("need at least one cluster".into()));
    }
    let n = cfg.params.n() as usize;
    let clusters = (0..cfg.clusters)
        .map(|c| ClusterSpec {
            id: ClusterId(c),
            members: (0..n).map(|p| addr(c, p)).collect(),
        })
        .collect();
    let topology = Topology {
        mode: cfg.mode,
        params: cfg.params,
        cluster_capacity: cfg.capacity,
        clusters,
    };
    topology.validate().map_err(|e| HarnessError::Invalid(e.to_string()))?;
    Ok(topology)
}

pub fn sim_topology(cfg: &HarnessConfig) -> Result<Topology, HarnessError> {
    topology_with(cfg, sim_node_addr)
}

/// Registers E x n nodes plus a writer and a cold-cache reader device
/// per user.
pub fn build_sim(cfg: &HarnessConfig) -> Result<Sim, HarnessError> {
    let topology = sim_topology(cfg)?;
    let mut sim = Sim::new(cfg.seed, LatencyModel::from_settings(&cfg.latency));
    for spec in &topology.clusters {
        for member in &spec.members {
            let node = NodeState::new(member, topology.clone(), Box::new(MemoryStore::new()))
                .map_err(|e| HarnessError::Invalid(format!("node {member}: {e}")))?;
            sim.add_node(node);
        }
    }
    let switch = topology.directory_addr().to_string();
    for u in 0..cfg.users {
        let user = user_name(u);
        sim.add_client(ClientState::new(
            &writer_addr(u),
            &user,
            &switch,
            topology.clone(),
            cfg.chunking,
            cfg.fetch_window,
            cfg.cache_budget,
        ));
        sim.add_client(ClientState::new(
            &reader_addr(u),
            &user,
            &switch,
            topology.clone(),
            cfg.chunking,
            cfg.fetch_window,
            0,
        ));
    }
    Ok(sim)
}

pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub reports: Vec<OpReport>,
    /// Per-message-type wire tallies from the transport.
    pub counters: BTreeMap<&'static str, Counter>,
}

/// Replays `wl` through a fresh simulated deployment.
pub fn run_sim(cfg: &HarnessConfig, wl: &Workload) -> Result<RunOutcome, HarnessError> {
    if wl.files.is_empty() {
        return Err(HarnessError::Invalid("empty workload".into()));
    }
    let mut sim = build_sim(cfg)?;
    let switch = sim_topology(cfg)?.directory_addr().to_string();

    // Upload phase: waves bound queued payload memory. Each wave
    // drains fully, so every get observes a complete corpus.
    let puts: Vec<_> = wl.events.iter().filter(|e| e.kind == EventKind::Put).collect();
    for wave in puts.chunks(PUT_WAVE) {
        for e in wave {
            let spec = wl
                .file(e.user, &e.name)
                .ok_or_else(|| HarnessError::Invalid(format!("no spec for {}", e.name)))?;
            sim.schedule_command(
                e.at_ms * 1_000_000,
                &writer_addr(e.user),
                Command::Put {
                    name: e.name.clone(),
                    data: spec.content(wl.seed),
                    timestamp_ms: e.at_ms,
                },
            );
        }
        sim.run_until_idle();
    }

    // Request phase: trace offsets are preserved relative to the end
    // of the uploads, wherever the virtual clock landed.
    let base = sim.now_ns();
    for e in &wl.events {
        let at = base + e.at_ms.saturating_sub(wl.put_end_ms) * 1_000_000;
        match e.kind {
            EventKind::Put => {}
            EventKind::Get => {
                sim.schedule_command(at, &reader_addr(e.user), Command::Get { name: e.name.clone() })
            }
            EventKind::Delete => sim.schedule_command(
                at,
                &writer_addr(e.user),
                Command::Delete { name: e.name.clone() },
            ),
        }
    }
    sim.run_until_idle();

    let mut reports = Vec::new();
    for u in 0..cfg.users {
        reports.extend(sim.client_mut(&writer_addr(u)).drain_reports());
        reports.extend(sim.client_mut(&reader_addr(u)).drain_reports());
    }
    let stats: Vec<_> = sim.node_addrs().iter().map(|a| sim.node(a).stats()).collect();
    let m = metrics::aggregate(
        cfg.mode,
        cfg.params,
        cfg.users,
        sim.node(&switch).metas().iter(),
        &stats,
        sim.total_wire_bytes(),
        &reports,
    );
    if m.dedup_ratio().is_none() {
        return Err(HarnessError::Invalid(
            "nothing was stored; the deduplication ratio is undefined".into(),
        ));
    }
    Ok(RunOutcome { metrics: m, reports, counters: sim.counters().clone() })
}

/// One full experiment per the config; writes `report.csv` and
/// `report_hourly.csv` under the configured output directory.
pub fn run(cfg: &HarnessConfig) -> Result<RunOutcome, HarnessError> {
    let wl = workload::generate(&WorkloadParams::from_config(cfg));
    let outcome = match cfg.transport {
        Transport::Sim => run_sim(cfg, &wl)?,
        Transport::Sockets => process::run_sockets(cfg, &wl)?,
    };
    metrics::write_file(&cfg.out_dir.join("report.csv"), &metrics::report_csv(&outcome.metrics))?;
    metrics::write_file(
        &cfg.out_dir.join("report_hourly.csv"),
        &nonempty_hourly(&outcome.metrics),
    )?;
    Ok(outcome)
}

fn nonempty_hourly(m: &RunMetrics) -> String {
    metrics::hourly_csv(&m.hourly)
}

/// One run per k over a fixed corpus (the workload regenerates
/// identically because size and segment draws ignore the code
/// parameters); writes `sweep.csv`.
pub fn sweep_k(cfg: &HarnessConfig, ks: &[u8]) -> Result<Vec<SweepRow>, HarnessError> {
    let mut rows = Vec::new();
    for &k in ks {
        let mut c = cfg.clone();
        c.params = CodingParams::new(cfg.params.n(), k)
            .map_err(|e| HarnessError::Invalid(format!("k={k}: {e}")))?;
        let wl = workload::generate(&WorkloadParams::from_config(&c));
        let outcome = match cfg.transport {
            Transport::Sim => run_sim(&c, &wl)?,
            Transport::Sockets => process::run_sockets(&c, &wl)?,
        };
        rows.push(SweepRow {
            k,
            dedup_ratio: outcome.metrics.dedup_ratio().unwrap_or(0.0),
            avg_retrieval_ms: outcome.metrics.avg_retrieval_ms,
        });
    }
    metrics::write_file(&cfg.out_dir.join("sweep.csv"), &metrics::sweep_csv(&rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::KvConfig;
    use crate::endpoint::OpKind;
    use shardstore_core::BindingMode;

    fn tiny_cfg(extra: &str) -> HarnessConfig {
        let base = "clusters = 2\nn = 4\nk = 2\nusers = 2\nfiles_per_user = 2\n\
                    min_file_size = 16384\nmax_file_size = 65536\ngets_per_file = 1\n\
                    hot_files = 0\nhot_gets = 0\n\
                    base_ms = 0\nper_byte_ms = 0\njitter_ms = 0\nseed = 7\n";
        HarnessConfig::from_kv(&KvConfig::parse(&format!("{base}{extra}")).unwrap()).unwrap()
    }

    #[test]
    fn two_clusters_of_four_register_eight_endpoints() {
        let cfg = tiny_cfg("");
        let sim = build_sim(&cfg).unwrap();
        assert_eq!(sim.node_addrs().len(), 8);
        let topo = sim_topology(&cfg).unwrap();
        assert_eq!(topo.directory_addr(), "n000.0");
        assert!(sim.node("n000.0").directory().is_some());
        assert!(sim.node("n001.3").directory().is_none());
    }

    #[test]
    fn tiny_run_is_deterministic_and_complete() {
        let cfg = tiny_cfg("");
        let wl = workload::generate(&WorkloadParams::from_config(&cfg));
        let a = run_sim(&cfg, &wl).unwrap();
        let b = run_sim(&cfg, &wl).unwrap();
        assert_eq!(metrics::report_csv(&a.metrics), metrics::report_csv(&b.metrics));
        assert_eq!(a.metrics.files, 4);
        assert_eq!(a.metrics.retrievals, 4);
        assert_eq!(a.metrics.failures, 0);
        let ratio = a.metrics.dedup_ratio().unwrap();
        assert!(ratio > 0.0 && ratio < 1.0, "ratio {ratio}");
        // Every get refetched its file over the network.
        for r in a.reports.iter().filter(|r| r.kind == OpKind::Get) {
            assert!(r.ok);
            assert!(r.bytes >= 16384);
        }
    }

    #[test]
    fn unique_corpus_wire_bytes_match_the_uploads() {
        // No shared or repeated segments: every chunk uploads exactly
        // once, so StoreChunk payload bytes equal the corpus size.
        let cfg = tiny_cfg("shared_fraction = 0\nintra_fraction = 0\ngets_per_file = 0\n");
        let wl = workload::generate(&WorkloadParams::from_config(&cfg));
        let out = run_sim(&cfg, &wl).unwrap();
        let c = out.counters["StoreChunk"];
        // Frame overhead per StoreChunk: 13 header + 20 id + 2 cluster
        // + 4 length prefix.
        assert_eq!(c.bytes - 39 * c.count, wl.total_original_bytes());
        assert_eq!(out.metrics.total_original_bytes, wl.total_original_bytes());
    }

    #[test]
    fn clb_outdedups_ulb_on_a_shared_corpus() {
        let clb = tiny_cfg("shared_fraction = 0.5\nusers = 3\ngets_per_file = 0\n");
        let mut ulb = clb.clone();
        ulb.mode = BindingMode::Ulb;
        let wl = workload::generate(&WorkloadParams::from_config(&clb));
        let a = run_sim(&clb, &wl).unwrap().metrics.dedup_ratio().unwrap();
        let b = run_sim(&ulb, &wl).unwrap().metrics.dedup_ratio().unwrap();
        assert!(a > b, "clb {a} vs ulb {b}");
    }
}
