//! Whole-system flows over the simulated transport: real client and
//! node state machines, a switch with the placement directory, and
//! in-memory piece stores, checked down to the stored-byte level.

mod common;

use std::collections::BTreeMap;

use common::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shardstore::endpoint::Command;
use shardstore_core::BindingMode;

fn bytes(seed: u64, len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut out);
    out
}

/// Put-then-get returns identical bytes for every binding mode and
/// code shape, including the degenerate (1,1) code and the empty file.
#[test]
fn round_trips_bytes_across_modes_and_codes() {
    for mode in [BindingMode::Clb, BindingMode::Ulb] {
        for (clusters, n, k) in [(1u16, 1u8, 1u8), (2, 4, 2), (2, 10, 5)] {
            let topo = topology(mode, clusters, n, k, 1 << 40);
            let mut sim = deployment(&topo, 11, latency_ms(0.5));
            add_device(&mut sim, &topo, "w", "u", 1 << 20);
            add_device(&mut sim, &topo, "r", "u", 0);

            let cases: Vec<(String, Vec<u8>)> = [0, 1, 4096, 100_000]
                .into_iter()
                .enumerate()
                .map(|(i, len)| (format!("f{i}"), bytes(50 + i as u64, len)))
                .collect();
            for (i, (name, data)) in cases.iter().enumerate() {
                let r = put(&mut sim, "w", name, data.clone(), i as u64 + 1);
                assert!(r.ok, "{mode:?} ({n},{k}) put {name}: {}", r.detail);
                if data.is_empty() {
                    assert_eq!(r.chunks_total, 0, "empty file stores no chunks");
                }
            }
            for (name, data) in &cases {
                assert_eq!(
                    &get_bytes(&mut sim, "r", name),
                    data,
                    "{mode:?} ({n},{k}) get {name}"
                );
            }
            consistency_scan(&sim, &topo);
        }
    }
}

/// Once a device has fetched a file, repeat gets are answered from its
/// chunk cache without a single message on the wire.
#[test]
fn warm_cache_answers_repeat_gets_without_traffic() {
    let topo = topology(BindingMode::Clb, 1, 4, 2, 1 << 40);
    let mut sim = deployment(&topo, 12, latency_ms(1.0));
    add_device(&mut sim, &topo, "w", "u", 1 << 20);
    add_device(&mut sim, &topo, "r", "u", 1 << 30);

    let data = bytes(60, 80_000);
    assert!(put(&mut sim, "w", "f", data.clone(), 1).ok);
    assert_eq!(get_bytes(&mut sim, "r", "f"), data);

    let before = sim.counters().clone();
    assert_eq!(get_bytes(&mut sim, "r", "f"), data);
    assert_eq!(sim.counters(), &before, "warm get must stay local");
}

/// Under CLB a second user uploading identical content sends no chunk
/// payloads and adds no pieces; the directory just gains references.
#[test]
fn clb_deduplicates_identical_content_across_users() {
    let topo = topology(BindingMode::Clb, 2, 4, 2, 1 << 40);
    let mut sim = deployment(&topo, 13, latency_ms(1.0));
    add_device(&mut sim, &topo, "wa", "alice", 1 << 20);
    add_device(&mut sim, &topo, "wb", "bob", 1 << 20);
    add_device(&mut sim, &topo, "rb", "bob", 0);

    let data = bytes(61, 60_000);
    let first = put(&mut sim, "wa", "doc", data.clone(), 1);
    assert!(first.ok);
    assert!(first.chunks_sent > 0);
    let stored = piece_bytes(&sim);

    let second = put(&mut sim, "wb", "notes", data.clone(), 2);
    assert!(second.ok);
    assert_eq!(second.chunks_sent, 0, "every chunk was already present");
    assert_eq!(second.bytes, 0, "no payload bytes move on a full dedup hit");
    assert_eq!(piece_bytes(&sim), stored, "no new pieces at rest");

    assert_eq!(get_bytes(&mut sim, "rb", "notes"), data);
    consistency_scan(&sim, &topo);
}

/// Under ULB the same two uploads land in each user's own cluster, so
/// the pieces at rest double: space traded for per-user locality.
#[test]
fn ulb_stores_shared_content_once_per_user() {
    // alice and bob hash to different clusters when two exist.
    let topo = topology(BindingMode::Ulb, 2, 4, 2, 1 << 40);
    let mut sim = deployment(&topo, 14, latency_ms(1.0));
    add_device(&mut sim, &topo, "wa", "alice", 1 << 20);
    add_device(&mut sim, &topo, "wb", "bob", 1 << 20);

    let data = bytes(62, 60_000);
    assert!(put(&mut sim, "wa", "doc", data.clone(), 1).ok);
    let stored = piece_bytes(&sim);
    assert!(stored > 0);

    let second = put(&mut sim, "wb", "doc", data.clone(), 2);
    assert!(second.ok);
    assert!(second.chunks_sent > 0, "bob's cluster has none of the chunks");
    assert_eq!(piece_bytes(&sim), 2 * stored, "one full copy per user cluster");
    consistency_scan(&sim, &topo);
}

/// Overwriting a file releases the old version's exclusive chunks and
/// serves the new bytes; a stale-timestamped rewrite loses the merge.
#[test]
fn update_replaces_content_and_releases_old_pieces() {
    let topo = topology(BindingMode::Clb, 1, 4, 2, 1 << 40);
    let mut sim = deployment(&topo, 15, latency_ms(1.0));
    add_device(&mut sim, &topo, "w", "u", 1 << 20);
    add_device(&mut sim, &topo, "r", "u", 0);

    let v1 = bytes(63, 40_000);
    let v2 = bytes(64, 40_000);

    // Reference: what v2 alone occupies at rest.
    let v2_alone = {
        let mut solo = deployment(&topo, 15, latency_ms(1.0));
        add_device(&mut solo, &topo, "w", "u", 1 << 20);
        assert!(put(&mut solo, "w", "f", v2.clone(), 20).ok);
        piece_bytes(&solo)
    };

    assert!(put(&mut sim, "w", "f", v1.clone(), 10).ok);
    assert!(put(&mut sim, "w", "f", v2.clone(), 20).ok);

    // v1's chunks were exclusive to the old version, so the rewrite
    // swaps the stored bytes rather than accumulating them.
    assert_eq!(piece_bytes(&sim), v2_alone);
    assert_eq!(get_bytes(&mut sim, "r", "f"), v2);
    consistency_scan(&sim, &topo);

    // Last-writer-wins: an older timestamp cannot roll the file back.
    let stale = put(&mut sim, "w", "f", v1.clone(), 5);
    assert!(stale.ok, "stale put is acknowledged, not an error");
    add_device(&mut sim, &topo, "r2", "u", 0);
    assert_eq!(get_bytes(&mut sim, "r2", "f"), v2);
    consistency_scan(&sim, &topo);
}

/// Deleting one reference leaves shared chunks in place; deleting the
/// last reference frees the pieces.
#[test]
fn delete_frees_only_exclusive_pieces() {
    let topo = topology(BindingMode::Clb, 1, 4, 2, 1 << 40);
    let mut sim = deployment(&topo, 16, latency_ms(1.0));
    add_device(&mut sim, &topo, "wa", "alice", 1 << 20);
    add_device(&mut sim, &topo, "wb", "bob", 1 << 20);

    let shared = bytes(65, 50_000);
    assert!(put(&mut sim, "wa", "doc", shared.clone(), 1).ok);
    let one_copy = piece_bytes(&sim);
    assert!(put(&mut sim, "wb", "doc", shared.clone(), 2).ok);
    assert_eq!(piece_bytes(&sim), one_copy);

    // alice's delete only drops her references.
    assert!(run_op(&mut sim, "wa", Command::Delete { name: "doc".into() }).ok);
    assert_eq!(piece_bytes(&sim), one_copy, "bob still references every chunk");
    consistency_scan(&sim, &topo);

    // bob's delete drops the last references and the pieces go away.
    assert!(run_op(&mut sim, "wb", Command::Delete { name: "doc".into() }).ok);
    assert_eq!(piece_bytes(&sim), 0);
    consistency_scan(&sim, &topo);

    // A fresh device no longer finds the file.
    add_device(&mut sim, &topo, "rc", "bob", 0);
    let r = get(&mut sim, "rc", "doc");
    assert!(!r.ok);
}

/// Two devices of one user exchange their file lists through the
/// switch: after both sync, each can fetch what the other uploaded.
#[test]
fn two_devices_converge_after_sync() {
    let topo = topology(BindingMode::Clb, 1, 4, 2, 1 << 40);
    let mut sim = deployment(&topo, 17, latency_ms(1.0));
    add_device(&mut sim, &topo, "phone", "u", 1 << 30);
    add_device(&mut sim, &topo, "laptop", "u", 1 << 30);

    let from_phone = bytes(66, 30_000);
    let from_laptop = bytes(67, 45_000);
    assert!(put(&mut sim, "phone", "p.bin", from_phone.clone(), 1).ok);
    assert!(put(&mut sim, "laptop", "l.bin", from_laptop.clone(), 2).ok);

    // Neither device knows the other's file yet.
    assert!(sim.client("phone").metas().get("u", "l.bin").is_none());
    assert!(sim.client("laptop").metas().get("u", "p.bin").is_none());

    assert!(run_op(&mut sim, "phone", Command::Sync).ok);
    assert!(run_op(&mut sim, "laptop", Command::Sync).ok);

    assert_eq!(get_bytes(&mut sim, "phone", "l.bin"), from_laptop);
    assert_eq!(get_bytes(&mut sim, "laptop", "p.bin"), from_phone);
    consistency_scan(&sim, &topo);
}

/// A randomized put/get/delete mix stays consistent in both modes:
/// every surviving file reads back exactly, every deleted file is gone
/// for fresh devices, and the directory survives a full recount.
#[test]
fn seeded_lifecycle_mix_preserves_consistency() {
    for (mode, seed) in [(BindingMode::Clb, 18u64), (BindingMode::Ulb, 19u64)] {
        let topo = topology(mode, 3, 4, 2, 1 << 40);
        let mut sim = deployment(&topo, seed, latency_ms(0.5));
        let users = ["alice", "bob", "carol"];
        for u in &users {
            add_device(&mut sim, &topo, &format!("w-{u}"), u, 1 << 20);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut live: BTreeMap<(usize, String), Vec<u8>> = BTreeMap::new();
        let mut gone: Vec<(usize, String)> = Vec::new();
        for step in 0..60u64 {
            let u = rng.gen_range(0..users.len());
            let w = format!("w-{}", users[u]);
            let name = format!("f{}", rng.gen_range(0..6u32));
            let roll: f64 = rng.gen();
            if roll < 0.6 {
                let len = rng.gen_range(1..30_000);
                let data = bytes(1000 + step, len);
                assert!(put(&mut sim, &w, &name, data.clone(), step + 1).ok);
                live.insert((u, name.clone()), data);
                gone.retain(|k| k != &(u, name.clone()));
            } else if roll < 0.8 {
                let r = run_op(&mut sim, &w, Command::Delete { name: name.clone() });
                assert_eq!(r.ok, live.remove(&(u, name.clone())).is_some());
                if r.ok {
                    gone.push((u, name));
                }
            } else if let Some(data) = live.get(&(u, name.clone())) {
                // The writer may serve this from cache; correctness of
                // the bytes is what matters here.
                assert_eq!(&get_bytes(&mut sim, &w, &name), data);
            }
        }

        consistency_scan(&sim, &topo);

        // Fresh cold devices re-fetch everything over the network.
        for (i, u) in users.iter().enumerate() {
            let probe = format!("probe-{u}");
            add_device(&mut sim, &topo, &probe, u, 0);
            for ((owner, name), data) in live.iter().filter(|((o, _), _)| *o == i) {
                assert_eq!(*owner, i);
                assert_eq!(&get_bytes(&mut sim, &probe, name), data, "{mode:?} {name}");
            }
            for (_, name) in gone.iter().filter(|(o, _)| *o == i) {
                assert!(!get(&mut sim, &probe, name).ok, "{mode:?} deleted {name}");
            }
        }
    }
}
