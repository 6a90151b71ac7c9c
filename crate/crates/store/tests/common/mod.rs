//! Shared plumbing for the integration suites: deployment builders,
//! one-command drivers, and the storewide consistency scan.

#![allow(dead_code)]

use shardstore::client::ClientState;
use shardstore::endpoint::{Command, OpReport};
use shardstore::node::NodeState;
use shardstore::piecestore::MemoryStore;
use shardstore::sim::{LatencyModel, Sim};
use shardstore_core::chunking::ChunkParams;
use shardstore_core::erasure::CodingParams;
use shardstore_core::metadata::{RefCountTable, ChunkRef};
use shardstore_core::{BindingMode, ClusterId, ClusterSpec, Topology};

pub fn topology(mode: BindingMode, clusters: u16, n: u8, k: u8, capacity: u64) -> Topology {
    let t = Topology {
        mode,
        params: CodingParams::new(n, k).unwrap(),
        cluster_capacity: capacity,
        clusters: (0..clusters)
            .map(|c| ClusterSpec {
                id: ClusterId(c),
                members: (0..n).map(|p| format!("n{c:03}.{p}")).collect(),
            })
            .collect(),
    };
    t.validate().unwrap();
    t
}

/// Simulator with every node registered and zero default latency.
pub fn deployment(topo: &Topology, seed: u64, latency: LatencyModel) -> Sim {
    let mut sim = Sim::new(seed, latency);
    for spec in &topo.clusters {
        for member in &spec.members {
            sim.add_node(NodeState::new(member, topo.clone(), Box::new(MemoryStore::new())).unwrap());
        }
    }
    sim
}

pub fn add_device(sim: &mut Sim, topo: &Topology, device: &str, user: &str, cache_budget: u64) {
    sim.add_client(ClientState::new(
        device,
        user,
        topo.directory_addr(),
        topo.clone(),
        ChunkParams::default(),
        4,
        cache_budget,
    ));
}

/// Runs one command to completion and returns its report.
pub fn run_op(sim: &mut Sim, device: &str, cmd: Command) -> OpReport {
    let at = sim.now_ns();
    sim.schedule_command(at, device, cmd);
    sim.run_until_idle();
    sim.client_mut(device)
        .drain_reports()
        .pop()
        .unwrap_or_else(|| panic!("{device}: command produced no report"))
}

pub fn put(sim: &mut Sim, device: &str, name: &str, data: Vec<u8>, ts: u64) -> OpReport {
    run_op(sim, device, Command::Put { name: name.into(), data, timestamp_ms: ts })
}

pub fn get(sim: &mut Sim, device: &str, name: &str) -> OpReport {
    run_op(sim, device, Command::Get { name: name.into() })
}

/// Retrieves and returns the payload, asserting success.
pub fn get_bytes(sim: &mut Sim, device: &str, name: &str) -> Vec<u8> {
    let r = get(sim, device, name);
    assert!(r.ok, "{device} get {name}: {:?} {}", r.error, r.detail);
    let (got_name, payload) = sim.client_mut(device).take_payload().expect("payload after get");
    assert_eq!(got_name, name);
    payload
}

/// Total piece payload bytes at rest across every node.
pub fn piece_bytes(sim: &Sim) -> u64 {
    sim.node_addrs().iter().map(|a| sim.node(a).store().payload_bytes()).sum()
}

/// Cross-checks the directory against a from-scratch recount of the
/// switch's metas and against the pieces actually on disk.
///
/// Exact agreement required: every directory entry matches the recount,
/// every stored entry has all n pieces in its cluster, and no node
/// holds a piece the directory does not reference (zero orphans).
pub fn consistency_scan(sim: &Sim, topo: &Topology) {
    let switch = sim.node(topo.directory_addr());
    let dir = switch.directory().expect("switch hosts the directory");

    let recount = RefCountTable::from_metas(switch.metas().iter());
    let entries: Vec<(ChunkRef, u64)> = dir
        .entries()
        .map(|(r, e)| {
            assert!(e.stored, "bound but never stored: {} in {}", r.chunk_id, r.cluster_id);
            (*r, e.refs)
        })
        .collect();
    assert_eq!(
        entries.len(),
        recount.len(),
        "directory tracks {} refs, recount found {}",
        entries.len(),
        recount.len()
    );
    for (r, refs) in &entries {
        assert_eq!(recount.count(r), *refs, "refcount mismatch for {} in {}", r.chunk_id, r.cluster_id);
    }

    let n = topo.params.n() as usize;
    for spec in &topo.clusters {
        let mut held = 0usize;
        for member in &spec.members {
            for (chunk_id, _, _) in sim.node(member).store().scan().unwrap() {
                let r = ChunkRef { chunk_id, cluster_id: spec.id };
                let entry = dir.entry(&r);
                assert!(
                    entry.is_some_and(|e| e.refs > 0),
                    "orphan piece for {chunk_id} on {member}"
                );
                held += 1;
            }
        }
        let stored: usize =
            entries.iter().filter(|(r, _)| r.cluster_id == spec.id).count();
        assert_eq!(held, stored * n, "cluster {} piece count", spec.id);
    }
}

pub fn latency_ms(base: f64) -> LatencyModel {
    LatencyModel::new(base, 0.0, 0.0)
}
