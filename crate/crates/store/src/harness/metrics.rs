//! Metric aggregation and CSV reports.
//!
//! The deduplication ratio divides the bytes users handed in by the
//! bytes the system holds: piece payloads plus every form of indexing
//! overhead (piece headers, serialized file metadata, the presence
//! index). Retrieval time is measured per get from command issue to
//! payload ready, averaged over successful gets.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use shardstore_core::erasure::CodingParams;
use shardstore_core::wire::NodeStats;
use shardstore_core::{BindingMode, FileMeta};

use crate::endpoint::{OpKind, OpReport};
use crate::piecestore::PIECE_HEADER_LEN;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HourBucket {
    pub hour: u64,
    pub requests: u64,
    pub avg_retrieval_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub mode: BindingMode,
    pub n: u8,
    pub k: u8,
    pub users: u32,
    pub files: u64,
    pub total_original_bytes: u64,
    pub piece_bytes: u64,
    pub piece_count: u64,
    pub meta_bytes: u64,
    pub index_bytes: u64,
    pub wire_bytes: u64,
    pub retrievals: u64,
    pub failures: u64,
    pub avg_retrieval_ms: f64,
    pub hourly: Vec<HourBucket>,
}

impl RunMetrics {
    /// Everything the cluster spends beyond raw piece payloads.
    pub fn overhead_bytes(&self) -> u64 {
        self.piece_count * PIECE_HEADER_LEN + self.meta_bytes + self.index_bytes
    }

    pub fn total_consumed_bytes(&self) -> u64 {
        self.piece_bytes + self.overhead_bytes()
    }

    /// None while nothing is stored; the metric is undefined then.
    pub fn dedup_ratio(&self) -> Option<f64> {
        let consumed = self.total_consumed_bytes();
        (consumed > 0).then(|| self.total_original_bytes as f64 / consumed as f64)
    }
}

/// Rolls one finished run into a report.
///
/// `live` is the switching node's meta table (duplicates counted per
/// file, per the metric's definition); `node_stats` one entry per
/// storage node.
pub fn aggregate(
    mode: BindingMode,
    params: CodingParams,
    users: u32,
    live: impl IntoIterator<Item = impl core::borrow::Borrow<FileMeta>>,
    node_stats: &[NodeStats],
    wire_bytes: u64,
    reports: &[OpReport],
) -> RunMetrics {
    let mut files = 0u64;
    let mut total_original = 0u64;
    for meta in live {
        files += 1;
        total_original += meta.borrow().total_len;
    }

    let mut piece_bytes = 0u64;
    let mut piece_count = 0u64;
    let mut meta_bytes = 0u64;
    let mut index_bytes = 0u64;
    for s in node_stats {
        piece_bytes += s.piece_bytes;
        piece_count += s.piece_count;
        meta_bytes += s.meta_bytes;
        index_bytes += s.index_bytes;
    }

    let mut retrievals = 0u64;
    let mut failures = 0u64;
    let mut elapsed_sum_ms = 0.0f64;
    // hour -> (requests, ok count, elapsed sum)
    let mut by_hour: std::collections::BTreeMap<u64, (u64, u64, f64)> =
        std::collections::BTreeMap::new();
    for r in reports {
        if !r.ok {
            failures += 1;
        }
        if r.kind != OpKind::Get {
            continue;
        }
        let slot = by_hour.entry(r.issued_ns / 3_600_000_000_000).or_default();
        slot.0 += 1;
        if r.ok {
            retrievals += 1;
            elapsed_sum_ms += r.elapsed_ms();
            slot.1 += 1;
            slot.2 += r.elapsed_ms();
        }
    }
    let buckets = by_hour
        .into_iter()
        .map(|(hour, (requests, ok, sum))| HourBucket {
            hour,
            requests,
            avg_retrieval_ms: if ok > 0 { sum / ok as f64 } else { 0.0 },
        })
        .collect();

    RunMetrics {
        mode,
        n: params.n(),
        k: params.k(),
        users,
        files,
        total_original_bytes: total_original,
        piece_bytes,
        piece_count,
        meta_bytes,
        index_bytes,
        wire_bytes,
        retrievals,
        failures,
        avg_retrieval_ms: if retrievals > 0 { elapsed_sum_ms / retrievals as f64 } else { 0.0 },
        hourly: buckets,
    }
}

pub const REPORT_HEADER: &str = "mode,n,k,users,files,total_original_bytes,piece_bytes,\
index_bytes,total_consumed_bytes,dedup_ratio,avg_retrieval_ms,retrievals,failures,wire_bytes";

pub fn report_csv(m: &RunMetrics) -> String {
    let mut s = String::new();
    s.push_str(REPORT_HEADER);
    s.push('\n');
    let _ = writeln!(
        s,
        "{},{},{},{},{},{},{},{},{},{:.6},{:.3},{},{},{}",
        m.mode,
        m.n,
        m.k,
        m.users,
        m.files,
        m.total_original_bytes,
        m.piece_bytes,
        m.overhead_bytes(),
        m.total_consumed_bytes(),
        m.dedup_ratio().unwrap_or(0.0),
        m.avg_retrieval_ms,
        m.retrievals,
        m.failures,
        m.wire_bytes,
    );
    s
}

pub const HOURLY_HEADER: &str = "hour,requests,avg_retrieval_ms";

pub fn hourly_csv(buckets: &[HourBucket]) -> String {
    let mut s = String::new();
    s.push_str(HOURLY_HEADER);
    s.push('\n');
    for b in buckets {
        let _ = writeln!(s, "{},{},{:.3}", b.hour, b.requests, b.avg_retrieval_ms);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub k: u8,
    pub dedup_ratio: f64,
    pub avg_retrieval_ms: f64,
}

pub const SWEEP_HEADER: &str = "k,dedup_ratio,avg_retrieval_ms";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    s.push_str(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.3}", r.k, r.dedup_ratio, r.avg_retrieval_ms);
    }
    s
}

pub fn write_file(path: &Path, text: &str) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)
}
