//! File metadata, reference counting, and last-writer-wins merging.
//!
//! A file is a recipe: an ordered list of (chunk id, cluster) references
//! plus a client timestamp. Two devices editing the same file reconcile
//! by timestamp, newest wins, with ties going to the incoming copy.
//! Reference counts are kept per (chunk id, cluster) pair so the same
//! content bound to two clusters is tracked as two stored objects.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::binding::ClusterId;
use crate::chunking::{Chunk, ChunkId};

/// A chunk and the cluster holding its coded pieces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChunkRef {
    pub chunk_id: ChunkId,
    pub cluster_id: ClusterId,
}

/// Recipe for one stored file.
///
/// `chunks` is ordered and keeps one entry per occurrence, repeats
/// included; reassembly is a straight walk of the list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileMeta {
    pub user_id: String,
    pub file_name: String,
    /// Client wall-clock milliseconds since the epoch. Drives
    /// last-writer-wins merging; never interpreted as server time.
    pub timestamp_ms: u64,
    pub total_len: u64,
    pub chunks: Vec<ChunkRef>,
}

/// Builds the metadata for a file from its chunks and their placements.
///
/// `placements[i]` is the cluster for `chunks[i]`; when the same chunk id
/// occurs more than once the first placement wins for every occurrence,
/// so one id never maps to two clusters within a file.
pub fn build_file_meta(
    user_id: &str,
    file_name: &str,
    timestamp_ms: u64,
    chunks: &[Chunk],
    placements: &[ClusterId],
) -> Result<FileMeta, MetaError> {
    if chunks.len() != placements.len() {
        return Err(MetaError::LengthMismatch { chunks: chunks.len(), placements: placements.len() });
    }
    let mut first_placement: BTreeMap<ChunkId, ClusterId> = BTreeMap::new();
    let mut refs = Vec::with_capacity(chunks.len());
    let mut total_len = 0u64;
    for (chunk, &cluster) in chunks.iter().zip(placements) {
        let id = chunk.id();
        let cluster = *first_placement.entry(id).or_insert(cluster);
        refs.push(ChunkRef { chunk_id: id, cluster_id: cluster });
        total_len += chunk.len() as u64;
    }
    Ok(FileMeta {
        user_id: String::from(user_id),
        file_name: String::from(file_name),
        timestamp_ms,
        total_len,
        chunks: refs,
    })
}

/// Distinct references in `meta` whose chunk ids are not in `known`,
/// in first-occurrence order.
pub fn missing_chunks(meta: &FileMeta, known: &BTreeSet<ChunkId>) -> Vec<ChunkRef> {
    let mut seen = BTreeSet::new();
    meta.chunks
        .iter()
        .filter(|r| seen.insert(r.chunk_id) && !known.contains(&r.chunk_id))
        .copied()
        .collect()
}

/// Picks the winning copy of a file present on up to two sides.
///
/// Strictly newer timestamp wins; on a tie the remote copy wins, so the
/// side applying an incoming update converges to it. Both sides must
/// describe the same (user, file).
pub fn sync_meta<'a>(
    local: Option<&'a FileMeta>,
    remote: Option<&'a FileMeta>,
) -> Result<&'a FileMeta, MetaError> {
    match (local, remote) {
        (None, None) => Err(MetaError::BothAbsent),
        (Some(l), None) => Ok(l),
        (None, Some(r)) => Ok(r),
        (Some(l), Some(r)) => {
            if l.user_id != r.user_id || l.file_name != r.file_name {
                return Err(MetaError::IdentityMismatch);
            }
            if r.timestamp_ms >= l.timestamp_ms {
                Ok(r)
            } else {
                Ok(l)
            }
        }
    }
}

/// Per-user file tables keyed by (user id, file name).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChunkMetaTable {
    files: BTreeMap<(String, String), FileMeta>,
}

impl ChunkMetaTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `meta`, returning the copy it replaced. Callers decide
    /// precedence with [`sync_meta`] before writing.
    pub fn upsert(&mut self, meta: FileMeta) -> Option<FileMeta> {
        self.files.insert((meta.user_id.clone(), meta.file_name.clone()), meta)
    }

    pub fn get(&self, user_id: &str, file_name: &str) -> Option<&FileMeta> {
        self.files.get(&(String::from(user_id), String::from(file_name)))
    }

    pub fn remove(&mut self, user_id: &str, file_name: &str) -> Option<FileMeta> {
        self.files.remove(&(String::from(user_id), String::from(file_name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = &FileMeta> {
        self.files.values()
    }

    pub fn files_of(&self, user_id: &str) -> impl Iterator<Item = &FileMeta> {
        let user = String::from(user_id);
        self.files
            .range((user.clone(), String::new())..)
            .take_while(move |((u, _), _)| *u == user)
            .map(|(_, m)| m)
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }
}

/// Direction of a reference-count adjustment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefDelta {
    Add,
    Remove,
}

/// Reference counts over (chunk id, cluster) pairs.
///
/// Each file contributes at most one count per distinct reference no
/// matter how often the chunk repeats inside it. Entries are dropped at
/// zero, so presence in the table means the pieces should exist.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RefCountTable {
    counts: BTreeMap<ChunkRef, u64>,
}

impl RefCountTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one file's worth of references and returns the refs whose
    /// count reached zero (always empty for `Add`).
    pub fn apply(&mut self, meta: &FileMeta, delta: RefDelta) -> Result<Vec<ChunkRef>, MetaError> {
        let distinct: BTreeSet<ChunkRef> = meta.chunks.iter().copied().collect();
        let mut dead = Vec::new();
        match delta {
            RefDelta::Add => {
                for r in distinct {
                    *self.counts.entry(r).or_insert(0) += 1;
                }
            }
            RefDelta::Remove => {
                // Validate the whole batch first so a failed remove
                // leaves the table untouched.
                for r in &distinct {
                    if self.counts.get(r).copied().unwrap_or(0) == 0 {
                        return Err(MetaError::RefUnderflow(*r));
                    }
                }
                for r in distinct {
                    let count = self.counts.get_mut(&r).unwrap();
                    *count -= 1;
                    if *count == 0 {
                        self.counts.remove(&r);
                        dead.push(r);
                    }
                }
            }
        }
        Ok(dead)
    }

    /// Rebuilds counts from scratch; the consistency check compares this
    /// against the incrementally maintained copy.
    pub fn from_metas<'a>(metas: impl IntoIterator<Item = &'a FileMeta>) -> Self {
        let mut table = RefCountTable::new();
        for meta in metas {
            let _ = table.apply(meta, RefDelta::Add);
        }
        table
    }

    pub fn count(&self, r: &ChunkRef) -> u64 {
        self.counts.get(r).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ChunkRef, u64)> {
        self.counts.iter().map(|(r, &c)| (r, c))
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetaError {
    LengthMismatch { chunks: usize, placements: usize },
    BothAbsent,
    IdentityMismatch,
    RefUnderflow(ChunkRef),
}

impl fmt::Display for MetaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetaError::LengthMismatch { chunks, placements } => {
                write!(f, "{chunks} chunks but {placements} placements")
            }
            MetaError::BothAbsent => write!(f, "no copy of the file on either side"),
            MetaError::IdentityMismatch => write!(f, "metas describe different files"),
            MetaError::RefUnderflow(r) => {
                write!(f, "refcount underflow for {} in cluster {}", r.chunk_id, r.cluster_id)
            }
        }
    }
}

impl core::error::Error for MetaError {}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn chunk(byte: u8, len: usize) -> Chunk {
        Chunk::new(vec![byte; len])
    }

    fn meta_of(user: &str, name: &str, ts: u64, parts: &[(u8, usize, u16)]) -> FileMeta {
        let chunks: Vec<Chunk> = parts.iter().map(|&(b, l, _)| chunk(b, l)).collect();
        let placements: Vec<ClusterId> = parts.iter().map(|&(_, _, c)| ClusterId(c)).collect();
        build_file_meta(user, name, ts, &chunks, &placements).unwrap()
    }

    #[test]
    fn build_sums_lengths_and_keeps_occurrences() {
        let m = meta_of("u", "f", 1, &[(1, 10, 0), (2, 20, 1), (1, 10, 5)]);
        assert_eq!(m.total_len, 40);
        assert_eq!(m.chunks.len(), 3);
        // Repeated id keeps its first placement even when told otherwise.
        assert_eq!(m.chunks[0], m.chunks[2]);
        assert_eq!(m.chunks[0].cluster_id, ClusterId(0));
    }

    #[test]
    fn build_rejects_misaligned_input() {
        let chunks = vec![chunk(1, 4)];
        let err = build_file_meta("u", "f", 1, &chunks, &[]).unwrap_err();
        assert_eq!(err, MetaError::LengthMismatch { chunks: 1, placements: 0 });
    }

    #[test]
    fn missing_preserves_first_occurrence_order() {
        let m = meta_of("u", "f", 1, &[(3, 8, 0), (1, 8, 0), (3, 8, 0), (2, 8, 0)]);
        let mut known = BTreeSet::new();
        known.insert(m.chunks[1].chunk_id);
        let missing = missing_chunks(&m, &known);
        assert_eq!(missing.len(), 2);
        assert_eq!(missing[0].chunk_id, m.chunks[0].chunk_id);
        assert_eq!(missing[1].chunk_id, m.chunks[3].chunk_id);

        assert!(missing_chunks(&m, &m.chunks.iter().map(|r| r.chunk_id).collect()).is_empty());
    }

    #[test]
    fn newest_timestamp_wins_and_ties_go_remote() {
        let old = meta_of("u", "f", 100, &[(1, 8, 0)]);
        let new = meta_of("u", "f", 200, &[(2, 8, 0)]);
        assert_eq!(sync_meta(Some(&old), Some(&new)).unwrap(), &new);
        assert_eq!(sync_meta(Some(&new), Some(&old)).unwrap(), &new);

        let remote_tie = meta_of("u", "f", 100, &[(3, 8, 0)]);
        assert_eq!(sync_meta(Some(&old), Some(&remote_tie)).unwrap(), &remote_tie);

        assert_eq!(sync_meta(Some(&old), None).unwrap(), &old);
        assert_eq!(sync_meta(None, Some(&new)).unwrap(), &new);
        assert_eq!(sync_meta(None, None).unwrap_err(), MetaError::BothAbsent);

        let other = meta_of("u", "g", 300, &[(1, 8, 0)]);
        assert_eq!(sync_meta(Some(&old), Some(&other)).unwrap_err(), MetaError::IdentityMismatch);
    }

    #[test]
    fn refcounts_track_sharing() {
        let a = meta_of("u", "a", 1, &[(1, 8, 0), (2, 8, 0)]);
        let b = meta_of("u", "b", 1, &[(2, 8, 0), (3, 8, 0)]);
        let mut t = RefCountTable::new();
        assert!(t.apply(&a, RefDelta::Add).unwrap().is_empty());
        assert!(t.apply(&b, RefDelta::Add).unwrap().is_empty());
        assert_eq!(t.count(&a.chunks[1]), 2);

        let dead = t.apply(&a, RefDelta::Remove).unwrap();
        assert_eq!(dead, vec![a.chunks[0]]);
        assert_eq!(t.count(&a.chunks[1]), 1);

        let mut dead = t.apply(&b, RefDelta::Remove).unwrap();
        dead.sort();
        let mut want = vec![b.chunks[0], b.chunks[1]];
        want.sort();
        assert_eq!(dead, want);
        assert!(t.is_empty());
    }

    #[test]
    fn repeated_chunk_counts_once_per_file() {
        let m = meta_of("u", "f", 1, &[(1, 8, 0), (1, 8, 0), (1, 8, 0)]);
        let mut t = RefCountTable::new();
        t.apply(&m, RefDelta::Add).unwrap();
        assert_eq!(t.count(&m.chunks[0]), 1);
        let dead = t.apply(&m, RefDelta::Remove).unwrap();
        assert_eq!(dead, vec![m.chunks[0]]);
    }

    #[test]
    fn update_in_bind_then_release_order_never_drops_shared_chunks() {
        let v1 = meta_of("u", "f", 1, &[(1, 8, 0), (2, 8, 0)]);
        let v2 = meta_of("u", "f", 2, &[(2, 8, 0), (3, 8, 0)]);
        let mut t = RefCountTable::new();
        t.apply(&v1, RefDelta::Add).unwrap();
        t.apply(&v2, RefDelta::Add).unwrap();
        let dead = t.apply(&v1, RefDelta::Remove).unwrap();
        // Only the chunk unique to v1 dies; the shared one never dips to zero.
        assert_eq!(dead, vec![v1.chunks[0]]);
        assert_eq!(t.count(&v1.chunks[1]), 1);
    }

    #[test]
    fn remove_of_untracked_file_is_rejected_atomically() {
        let a = meta_of("u", "a", 1, &[(1, 8, 0)]);
        let b = meta_of("u", "b", 1, &[(1, 8, 0), (9, 8, 0)]);
        let mut t = RefCountTable::new();
        t.apply(&a, RefDelta::Add).unwrap();
        let err = t.apply(&b, RefDelta::Remove).unwrap_err();
        assert!(matches!(err, MetaError::RefUnderflow(_)));
        // The shared chunk's count must be untouched by the failed batch.
        assert_eq!(t.count(&a.chunks[0]), 1);
    }

    #[test]
    fn scan_rebuild_matches_incremental() {
        let a = meta_of("u", "a", 1, &[(1, 8, 0), (2, 8, 1)]);
        let b = meta_of("v", "b", 1, &[(2, 8, 1), (2, 8, 1), (3, 8, 0)]);
        let mut inc = RefCountTable::new();
        inc.apply(&a, RefDelta::Add).unwrap();
        inc.apply(&b, RefDelta::Add).unwrap();
        assert_eq!(RefCountTable::from_metas([&a, &b]), inc);
    }

    #[test]
    fn table_scopes_files_by_user() {
        let mut t = ChunkMetaTable::new();
        t.upsert(meta_of("alice", "x", 1, &[(1, 8, 0)]));
        t.upsert(meta_of("alice", "y", 1, &[(2, 8, 0)]));
        t.upsert(meta_of("bob", "x", 1, &[(3, 8, 0)]));
        assert_eq!(t.len(), 3);
        assert_eq!(t.files_of("alice").count(), 2);
        assert_eq!(t.files_of("bob").count(), 1);
        assert!(t.get("alice", "x").is_some());
        assert!(t.get("bob", "y").is_none());
        assert!(t.remove("alice", "x").is_some());
        assert_eq!(t.files_of("alice").count(), 1);
    }
}
