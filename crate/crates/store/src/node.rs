//! Storage node behavior as a pure state machine: messages in, actions
//! out. Drivers (simulator, socket runtime) own transport and time.
//!
//! The first member of the first cluster additionally hosts the
//! placement directory: the presence index mapping (chunk, cluster) to
//! a reference count, cluster space accounting, and the binding policy
//! state. Every node reaches the directory through ordinary messages,
//! the host included; drivers loop self-addressed sends back in.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use shardstore_core::binding::{BindingPolicy, BoundChunk};
use shardstore_core::erasure::{encode_chunk, expansion};
use shardstore_core::metadata::sync_meta;
use shardstore_core::wire::{decode_file_meta, encode_file_meta, NodeStats};
use shardstore_core::{
    ChunkId, ChunkMetaTable, ChunkRef, ClusterId, ClusterState, Envelope, ErrorCode, FileMeta,
    Message, Topology,
};

use crate::endpoint::Action;
use crate::piecestore::PieceStore;

/// Where a reply must go once an internal exchange finishes.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Caller {
    addr: String,
    rid: u64,
}

/// Sync work left to do: remaining incoming metas plus the reply target.
#[derive(Debug)]
struct SyncFlow {
    reply_to: Caller,
    user_id: String,
    queue: VecDeque<FileMeta>,
}

/// One in-flight internal exchange, keyed by our outbound request id.
#[derive(Debug)]
enum Pending {
    /// StoreMeta sent BindChunks; `old` is the meta being replaced.
    Bind { reply_to: Caller, meta: FileMeta, old: Option<FileMeta> },
    /// StoreMeta sent ReleaseChunks for the replaced meta; the missing
    /// list is already final.
    StoreRelease { reply_to: Caller, missing: Vec<ChunkRef> },
    /// DeleteFile sent ReleaseChunks; the meta is already removed.
    DeleteRelease { reply_to: Caller },
    /// StoreChunk fanned pieces out to cluster peers under one id.
    PieceFan {
        reply_to: Caller,
        chunk_id: ChunkId,
        awaiting: BTreeSet<String>,
        my_index: u8,
    },
    /// StoreChunk sent MarkStored after all pieces landed.
    AwaitStored { reply_to: Caller },
    /// Sync adoption sent BindChunks (require_present) for one meta.
    SyncBind { flow: SyncFlow, meta: FileMeta, old: Option<FileMeta> },
    /// Sync adoption sent ReleaseChunks for a replaced meta.
    SyncRelease { flow: SyncFlow },
}

fn reply_env(rid: u64, message: Message) -> Envelope {
    Envelope { request_id: rid, message }
}

fn error_env(rid: u64, code: ErrorCode, detail: impl Into<String>) -> Envelope {
    reply_env(rid, Message::ErrorReply { code, detail: detail.into() })
}

pub struct NodeState {
    addr: String,
    topology: Topology,
    cluster_id: ClusterId,
    position: usize,
    store: Box<dyn PieceStore>,
    metas: ChunkMetaTable,
    directory: Option<Directory>,
    next_rid: u64,
    pending: BTreeMap<u64, Pending>,
    persist: Option<PathBuf>,
}

impl NodeState {
    /// `addr` must be a member of the topology. The directory lives on
    /// `topology.directory_addr()`.
    pub fn new(addr: &str, topology: Topology, store: Box<dyn PieceStore>) -> io::Result<Self> {
        topology
            .validate()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
        let (cluster_id, position) = topology
            .position_of(addr)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "address not in topology"))?;
        let directory =
            (addr == topology.directory_addr()).then(|| Directory::new(&topology));
        Ok(NodeState {
            addr: addr.to_string(),
            topology,
            cluster_id,
            position,
            store,
            metas: ChunkMetaTable::new(),
            directory,
            next_rid: 0,
            pending: BTreeMap::new(),
            persist: None,
        })
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn metas(&self) -> &ChunkMetaTable {
        &self.metas
    }

    pub fn store(&self) -> &dyn PieceStore {
        self.store.as_ref()
    }

    pub fn directory(&self) -> Option<&Directory> {
        self.directory.as_ref()
    }

    /// Arms snapshot persistence under `dir` and loads any snapshots a
    /// previous run left there.
    pub fn set_persistence(&mut self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let meta_path = dir.join("meta.bin");
        if meta_path.exists() {
            self.metas = load_metas(&meta_path)?;
        }
        let dir_path = dir.join("directory.bin");
        if dir_path.exists() {
            if let Some(d) = self.directory.as_mut() {
                *d = Directory::load(&fs::read(&dir_path)?, &self.topology)?;
            }
        }
        self.persist = Some(dir.to_path_buf());
        Ok(())
    }

    pub fn stats(&self) -> NodeStats {
        let mut meta_bytes = 0u64;
        let mut buf = Vec::new();
        for m in self.metas.iter() {
            buf.clear();
            let _ = encode_file_meta(m, &mut buf);
            meta_bytes += buf.len() as u64;
        }
        NodeStats {
            piece_count: self.store.piece_count(),
            piece_bytes: self.store.payload_bytes(),
            meta_count: self.metas.len() as u64,
            meta_bytes,
            index_bytes: self.directory.as_ref().map_or(0, |d| d.serialize().len() as u64),
        }
    }

    fn next_rid(&mut self) -> u64 {
        self.next_rid += 1;
        self.next_rid
    }

    fn persist_metas(&self) {
        if let Some(dir) = &self.persist {
            let _ = save_metas(&dir.join("meta.bin"), &self.metas);
        }
    }

    fn persist_directory(&self) {
        if let (Some(dir), Some(d)) = (&self.persist, &self.directory) {
            let _ = write_atomic(&dir.join("directory.bin"), &d.serialize());
        }
    }

    /// Synthesizes failures for every exchange waiting on `peer`. Socket
    /// drivers call this when a connection drops.
    pub fn fail_peer(&mut self, peer: &str, now_ns: u64, out: &mut Vec<Action>) {
        let rids: Vec<u64> = self
            .pending
            .iter()
            .filter(|(_, p)| match p {
                Pending::PieceFan { awaiting, .. } => awaiting.contains(peer),
                _ => self.topology.directory_addr() == peer,
            })
            .map(|(&rid, _)| rid)
            .collect();
        for rid in rids {
            let env = error_env(rid, ErrorCode::Unreachable, peer);
            self.on_message(peer, env, now_ns, out);
        }
    }

    pub fn on_message(&mut self, from: &str, env: Envelope, now_ns: u64, out: &mut Vec<Action>) {
        let _ = now_ns;
        let rid = env.request_id;
        let send = |out: &mut Vec<Action>, to: &str, env: Envelope| {
            out.push(Action::Send { to: to.to_string(), env });
        };
        match env.message {
            Message::StoreMeta { meta, chunk_lens } => {
                self.on_store_meta(from, rid, meta, chunk_lens, out)
            }
            Message::GetMeta { user_id, file_name } => {
                let meta = self.metas.get(&user_id, &file_name).cloned();
                send(out, from, reply_env(rid, Message::MetaReply { meta }));
            }
            Message::StoreChunk { chunk_id, cluster_id, payload } => {
                self.on_store_chunk(from, rid, chunk_id, cluster_id, payload, out)
            }
            Message::StorePiece { piece } => {
                if piece.index() as usize != self.position
                    || piece.params() != self.topology.params
                {
                    send(out, from, error_env(rid, ErrorCode::Malformed, "piece misdirected"));
                } else if self.store.put(&piece).is_err() {
                    send(out, from, error_env(rid, ErrorCode::Internal, "store write failed"));
                } else {
                    send(out, from, reply_env(rid, Message::PieceAck));
                }
            }
            Message::GetPiece { chunk_id, index } => {
                let piece = self.store.get(chunk_id, index).unwrap_or(None);
                send(out, from, reply_env(rid, Message::PieceReply { piece }));
            }
            Message::DeleteFile { user_id, file_name } => {
                self.on_delete_file(from, rid, &user_id, &file_name, out)
            }
            Message::DeletePiece { chunk_id, index } => {
                let _ = self.store.delete(chunk_id, index);
            }
            Message::Cancel { target } => {
                let caller = Caller { addr: from.to_string(), rid: target };
                self.pending.retain(|_, p| reply_target(p) != &caller);
            }
            Message::SyncMeta { user_id, metas } => {
                if metas.iter().any(|m| m.user_id != user_id) {
                    send(out, from, error_env(rid, ErrorCode::Malformed, "foreign user in sync"));
                } else {
                    let flow = SyncFlow {
                        reply_to: Caller { addr: from.to_string(), rid },
                        user_id,
                        queue: metas.into(),
                    };
                    self.continue_sync(flow, out);
                }
            }
            Message::BindChunks { user_id, require_present, entries } => {
                self.on_bind_chunks(from, rid, &user_id, require_present, &entries, out)
            }
            Message::ReleaseChunks { refs } => match self.directory.as_mut() {
                None => send(out, from, error_env(rid, ErrorCode::Malformed, "not the directory")),
                Some(d) => {
                    match d.release(&refs) {
                        Ok(dead) => {
                            self.persist_directory();
                            send(out, from, reply_env(rid, Message::ReleaseReply { dead }));
                        }
                        Err(e) => send(out, from, error_env(rid, ErrorCode::Internal, e)),
                    }
                }
            },
            Message::MarkStored { chunk_id, cluster_id } => match self.directory.as_mut() {
                None => send(out, from, error_env(rid, ErrorCode::Malformed, "not the directory")),
                Some(d) => {
                    d.mark_stored(ChunkRef { chunk_id, cluster_id });
                    self.persist_directory();
                    send(out, from, reply_env(rid, Message::StoredAck));
                }
            },
            Message::GetTopology => {
                let topology = self.topology.clone();
                send(out, from, reply_env(rid, Message::TopologyReply { topology }));
            }
            Message::GetStats => {
                let stats = self.stats();
                send(out, from, reply_env(rid, Message::StatsReply { stats }));
            }

            Message::BindReply { entries } => self.on_bind_reply(rid, entries, out),
            Message::ReleaseReply { dead } => self.on_release_reply(rid, dead, out),
            Message::PieceAck => self.on_piece_ack(from, rid, out),
            Message::StoredAck => {
                // Remove only a matching pending: a reply of the wrong
                // shape must not destroy an unrelated exchange.
                if matches!(self.pending.get(&rid), Some(Pending::AwaitStored { .. })) {
                    let Some(Pending::AwaitStored { reply_to }) = self.pending.remove(&rid)
                    else {
                        unreachable!()
                    };
                    send(out, &reply_to.addr, reply_env(reply_to.rid, Message::StoreAck));
                }
            }
            Message::ErrorReply { code, detail } => self.on_error_reply(rid, code, detail, out),

            // Replies no node flow ever waits for.
            Message::MissingList { .. }
            | Message::MetaReply { .. }
            | Message::StoreAck
            | Message::PieceReply { .. }
            | Message::DeleteAck { .. }
            | Message::TopologyReply { .. }
            | Message::StatsReply { .. }
            | Message::SyncReply { .. } => {}
        }
    }

    fn on_store_meta(
        &mut self,
        from: &str,
        rid: u64,
        meta: FileMeta,
        chunk_lens: Vec<u32>,
        out: &mut Vec<Action>,
    ) {
        if meta.user_id.is_empty() || meta.file_name.is_empty() {
            out.push(Action::Send {
                to: from.to_string(),
                env: error_env(rid, ErrorCode::Malformed, "empty user or file name"),
            });
            return;
        }
        let total: u64 = chunk_lens.iter().map(|&l| l as u64).sum();
        let entries = distinct_entries(&meta, &chunk_lens);
        if total != meta.total_len || entries.is_none() {
            out.push(Action::Send {
                to: from.to_string(),
                env: error_env(rid, ErrorCode::Malformed, "chunk lengths inconsistent"),
            });
            return;
        }
        let entries = entries.unwrap();

        let local = self.metas.get(&meta.user_id, &meta.file_name).cloned();
        if let Ok(winner) = sync_meta(local.as_ref(), Some(&meta)) {
            if local.as_ref().is_some_and(|l| core::ptr::eq(winner, l)) {
                // A strictly newer meta is already in place; nothing to do.
                out.push(Action::Send {
                    to: from.to_string(),
                    env: reply_env(rid, Message::MissingList { refs: Vec::new() }),
                });
                return;
            }
        }

        let reply_to = Caller { addr: from.to_string(), rid };
        if entries.is_empty() {
            // Empty file: no binding, just settle the meta and any old refs.
            self.metas.upsert(meta);
            self.persist_metas();
            self.finish_store_release(reply_to, Vec::new(), local, out);
            return;
        }
        let bind_rid = self.next_rid();
        self.pending.insert(bind_rid, Pending::Bind { reply_to, meta: meta.clone(), old: local });
        let dir = self.topology.directory_addr().to_string();
        out.push(Action::Send {
            to: dir,
            env: reply_env(
                bind_rid,
                Message::BindChunks { user_id: meta.user_id, require_present: false, entries },
            ),
        });
    }

    /// Sends ReleaseChunks for `old` if it holds any refs, parking the
    /// final reply; otherwise replies immediately.
    fn finish_store_release(
        &mut self,
        reply_to: Caller,
        missing: Vec<ChunkRef>,
        old: Option<FileMeta>,
        out: &mut Vec<Action>,
    ) {
        let old_refs = old.map(|m| distinct_refs(&m)).unwrap_or_default();
        if old_refs.is_empty() {
            out.push(Action::Send {
                to: reply_to.addr.clone(),
                env: reply_env(reply_to.rid, Message::MissingList { refs: missing }),
            });
            return;
        }
        let rel_rid = self.next_rid();
        self.pending.insert(rel_rid, Pending::StoreRelease { reply_to, missing });
        let dir = self.topology.directory_addr().to_string();
        out.push(Action::Send {
            to: dir,
            env: reply_env(rel_rid, Message::ReleaseChunks { refs: old_refs }),
        });
    }

    fn on_bind_reply(&mut self, rid: u64, entries: Vec<BoundChunk>, out: &mut Vec<Action>) {
        if !matches!(
            self.pending.get(&rid),
            Some(Pending::Bind { .. }) | Some(Pending::SyncBind { .. })
        ) {
            return;
        }
        match self.pending.remove(&rid) {
            Some(Pending::Bind { reply_to, mut meta, old }) => {
                let placed: BTreeMap<ChunkId, (ClusterId, bool)> =
                    entries.iter().map(|b| (b.chunk_id, (b.cluster_id, b.stored))).collect();
                let mut missing = Vec::new();
                let mut seen = BTreeSet::new();
                for r in &mut meta.chunks {
                    let Some(&(cluster, stored)) = placed.get(&r.chunk_id) else {
                        out.push(Action::Send {
                            to: reply_to.addr,
                            env: error_env(reply_to.rid, ErrorCode::Internal, "bind reply incomplete"),
                        });
                        return;
                    };
                    r.cluster_id = cluster;
                    if !stored && seen.insert(r.chunk_id) {
                        missing.push(*r);
                    }
                }
                self.metas.upsert(meta);
                self.persist_metas();
                self.finish_store_release(reply_to, missing, old, out);
            }
            Some(Pending::SyncBind { flow, mut meta, old }) => {
                let placed: BTreeMap<ChunkId, ClusterId> =
                    entries.iter().map(|b| (b.chunk_id, b.cluster_id)).collect();
                for r in &mut meta.chunks {
                    if let Some(&cluster) = placed.get(&r.chunk_id) {
                        r.cluster_id = cluster;
                    }
                }
                self.metas.upsert(meta);
                self.persist_metas();
                self.continue_sync_release(flow, old, out);
            }
            _ => {}
        }
    }

    fn on_release_reply(&mut self, rid: u64, dead: Vec<ChunkRef>, out: &mut Vec<Action>) {
        if !matches!(
            self.pending.get(&rid),
            Some(Pending::StoreRelease { .. })
                | Some(Pending::DeleteRelease { .. })
                | Some(Pending::SyncRelease { .. })
        ) {
            return;
        }
        match self.pending.remove(&rid) {
            Some(Pending::StoreRelease { reply_to, missing }) => {
                self.fan_delete(&dead, out);
                out.push(Action::Send {
                    to: reply_to.addr,
                    env: reply_env(reply_to.rid, Message::MissingList { refs: missing }),
                });
            }
            Some(Pending::DeleteRelease { reply_to }) => {
                self.fan_delete(&dead, out);
                out.push(Action::Send {
                    to: reply_to.addr,
                    env: reply_env(reply_to.rid, Message::DeleteAck { found: true }),
                });
            }
            Some(Pending::SyncRelease { flow }) => {
                self.fan_delete(&dead, out);
                self.continue_sync(flow, out);
            }
            _ => {}
        }
    }

    /// Unreferenced placements get their pieces deleted on every member
    /// of the owning cluster. Fire and forget: nothing waits on these.
    fn fan_delete(&mut self, dead: &[ChunkRef], out: &mut Vec<Action>) {
        for r in dead {
            let Some(spec) = self.topology.cluster(r.cluster_id) else { continue };
            for (i, member) in spec.members.iter().enumerate() {
                out.push(Action::Send {
                    to: member.clone(),
                    env: reply_env(
                        0,
                        Message::DeletePiece { chunk_id: r.chunk_id, index: i as u8 },
                    ),
                });
            }
        }
    }

    fn on_store_chunk(
        &mut self,
        from: &str,
        rid: u64,
        chunk_id: ChunkId,
        cluster_id: ClusterId,
        payload: Vec<u8>,
        out: &mut Vec<Action>,
    ) {
        let reply_to = Caller { addr: from.to_string(), rid };
        if cluster_id != self.cluster_id {
            out.push(Action::Send {
                to: reply_to.addr,
                env: error_env(rid, ErrorCode::Malformed, "chunk addressed to wrong cluster"),
            });
            return;
        }
        if ChunkId::of(&payload) != chunk_id {
            out.push(Action::Send {
                to: reply_to.addr,
                env: error_env(rid, ErrorCode::IntegrityMismatch, "chunk digest mismatch"),
            });
            return;
        }
        let pieces = match encode_chunk(&payload, self.topology.params) {
            Ok(p) => p,
            Err(e) => {
                out.push(Action::Send {
                    to: reply_to.addr,
                    env: error_env(rid, ErrorCode::Malformed, e.to_string()),
                });
                return;
            }
        };
        if self.store.put(&pieces[self.position]).is_err() {
            out.push(Action::Send {
                to: reply_to.addr,
                env: error_env(rid, ErrorCode::Internal, "store write failed"),
            });
            return;
        }

        let members = self.topology.cluster(self.cluster_id).unwrap().members.clone();
        let awaiting: BTreeSet<String> =
            members.iter().filter(|m| *m != &self.addr).cloned().collect();
        if awaiting.is_empty() {
            self.send_mark_stored(reply_to, chunk_id, out);
            return;
        }
        let fan_rid = self.next_rid();
        for (i, member) in members.iter().enumerate() {
            if i == self.position {
                continue;
            }
            out.push(Action::Send {
                to: member.clone(),
                env: reply_env(fan_rid, Message::StorePiece { piece: pieces[i].clone() }),
            });
        }
        self.pending.insert(
            fan_rid,
            Pending::PieceFan { reply_to, chunk_id, awaiting, my_index: self.position as u8 },
        );
    }

    fn send_mark_stored(&mut self, reply_to: Caller, chunk_id: ChunkId, out: &mut Vec<Action>) {
        let mark_rid = self.next_rid();
        self.pending.insert(mark_rid, Pending::AwaitStored { reply_to });
        let dir = self.topology.directory_addr().to_string();
        out.push(Action::Send {
            to: dir,
            env: reply_env(mark_rid, Message::MarkStored { chunk_id, cluster_id: self.cluster_id }),
        });
    }

    fn on_piece_ack(&mut self, from: &str, rid: u64, out: &mut Vec<Action>) {
        let Some(Pending::PieceFan { awaiting, .. }) = self.pending.get_mut(&rid) else {
            return;
        };
        awaiting.remove(from);
        if !awaiting.is_empty() {
            return;
        }
        let Some(Pending::PieceFan { reply_to, chunk_id, .. }) = self.pending.remove(&rid) else {
            unreachable!();
        };
        self.send_mark_stored(reply_to, chunk_id, out);
    }

    fn on_delete_file(
        &mut self,
        from: &str,
        rid: u64,
        user_id: &str,
        file_name: &str,
        out: &mut Vec<Action>,
    ) {
        let Some(old) = self.metas.remove(user_id, file_name) else {
            out.push(Action::Send {
                to: from.to_string(),
                env: reply_env(rid, Message::DeleteAck { found: false }),
            });
            return;
        };
        self.persist_metas();
        let refs = distinct_refs(&old);
        if refs.is_empty() {
            out.push(Action::Send {
                to: from.to_string(),
                env: reply_env(rid, Message::DeleteAck { found: true }),
            });
            return;
        }
        let rel_rid = self.next_rid();
        self.pending.insert(
            rel_rid,
            Pending::DeleteRelease { reply_to: Caller { addr: from.to_string(), rid } },
        );
        let dir = self.topology.directory_addr().to_string();
        out.push(Action::Send { to: dir, env: reply_env(rel_rid, Message::ReleaseChunks { refs }) });
    }

    fn on_bind_chunks(
        &mut self,
        from: &str,
        rid: u64,
        user_id: &str,
        require_present: bool,
        entries: &[(ChunkId, u32)],
        out: &mut Vec<Action>,
    ) {
        let Some(dir) = self.directory.as_mut() else {
            out.push(Action::Send {
                to: from.to_string(),
                env: error_env(rid, ErrorCode::Malformed, "not the directory"),
            });
            return;
        };
        let env = match dir.bind(user_id, require_present, entries) {
            Ok(entries) => reply_env(rid, Message::BindReply { entries }),
            Err(BindFail::Capacity { needed }) => {
                error_env(rid, ErrorCode::CapacityExhausted, format!("{needed} bytes needed"))
            }
            Err(BindFail::Missing(id)) => {
                error_env(rid, ErrorCode::MissingChunks, id.to_hex())
            }
        };
        self.persist_directory();
        out.push(Action::Send { to: from.to_string(), env });
    }

    fn on_error_reply(&mut self, rid: u64, code: ErrorCode, detail: String, out: &mut Vec<Action>) {
        match self.pending.remove(&rid) {
            None => {}
            Some(Pending::Bind { reply_to, .. })
            | Some(Pending::StoreRelease { reply_to, .. })
            | Some(Pending::DeleteRelease { reply_to })
            | Some(Pending::AwaitStored { reply_to }) => {
                out.push(Action::Send {
                    to: reply_to.addr,
                    env: error_env(reply_to.rid, code, detail),
                });
            }
            Some(Pending::PieceFan { reply_to, chunk_id, my_index, .. }) => {
                // Roll the partial fan-out back everywhere, own piece included.
                let _ = self.store.delete(chunk_id, my_index);
                let members = self.topology.cluster(self.cluster_id).unwrap().members.clone();
                for (i, member) in members.iter().enumerate() {
                    if i == self.position {
                        continue;
                    }
                    out.push(Action::Send {
                        to: member.clone(),
                        env: reply_env(0, Message::DeletePiece { chunk_id, index: i as u8 }),
                    });
                }
                out.push(Action::Send {
                    to: reply_to.addr,
                    env: error_env(reply_to.rid, ErrorCode::PartialStore, detail),
                });
            }
            Some(Pending::SyncBind { flow, .. }) if code == ErrorCode::MissingChunks => {
                // The remote meta names chunks this deployment does not
                // hold; skip that file and keep syncing.
                self.continue_sync(flow, out);
            }
            Some(Pending::SyncBind { flow, .. }) | Some(Pending::SyncRelease { flow }) => {
                out.push(Action::Send {
                    to: flow.reply_to.addr,
                    env: error_env(flow.reply_to.rid, code, detail),
                });
            }
        }
    }

    /// Works through the sync queue until a directory exchange is needed
    /// or the queue drains, then replies with our table for the user.
    fn continue_sync(&mut self, mut flow: SyncFlow, out: &mut Vec<Action>) {
        while let Some(incoming) = flow.queue.pop_front() {
            let local = self.metas.get(&flow.user_id, &incoming.file_name).cloned();
            let adopt = match sync_meta(local.as_ref(), Some(&incoming)) {
                Ok(winner) => {
                    core::ptr::eq(winner, &incoming) && local.as_ref() != Some(&incoming)
                }
                Err(_) => false,
            };
            if !adopt {
                continue;
            }
            let entries: Vec<(ChunkId, u32)> =
                distinct_refs(&incoming).iter().map(|r| (r.chunk_id, 0)).collect();
            if entries.is_empty() {
                self.metas.upsert(incoming);
                self.persist_metas();
                if self.start_sync_release(&mut flow, local, out) {
                    return;
                }
                continue;
            }
            let bind_rid = self.next_rid();
            let user_id = flow.user_id.clone();
            self.pending.insert(
                bind_rid,
                Pending::SyncBind { flow, meta: incoming, old: local },
            );
            let dir = self.topology.directory_addr().to_string();
            out.push(Action::Send {
                to: dir,
                env: reply_env(
                    bind_rid,
                    Message::BindChunks { user_id, require_present: true, entries },
                ),
            });
            return;
        }
        out.push(Action::Send {
            to: flow.reply_to.addr.clone(),
            env: reply_env(
                flow.reply_to.rid,
                Message::SyncReply {
                    metas: self.metas.files_of(&flow.user_id).cloned().collect(),
                },
            ),
        });
    }

    fn continue_sync_release(
        &mut self,
        mut flow: SyncFlow,
        old: Option<FileMeta>,
        out: &mut Vec<Action>,
    ) {
        if !self.start_sync_release(&mut flow, old, out) {
            self.continue_sync(flow, out);
        }
    }

    /// True when a release round trip was started (the flow is parked).
    fn start_sync_release(
        &mut self,
        flow: &mut SyncFlow,
        old: Option<FileMeta>,
        out: &mut Vec<Action>,
    ) -> bool {
        let refs = old.map(|m| distinct_refs(&m)).unwrap_or_default();
        if refs.is_empty() {
            return false;
        }
        let rel_rid = self.next_rid();
        let parked = SyncFlow {
            reply_to: flow.reply_to.clone(),
            user_id: flow.user_id.clone(),
            queue: core::mem::take(&mut flow.queue),
        };
        self.pending.insert(rel_rid, Pending::SyncRelease { flow: parked });
        let dir = self.topology.directory_addr().to_string();
        out.push(Action::Send { to: dir, env: reply_env(rel_rid, Message::ReleaseChunks { refs }) });
        true
    }
}

fn reply_target(p: &Pending) -> &Caller {
    match p {
        Pending::Bind { reply_to, .. }
        | Pending::StoreRelease { reply_to, .. }
        | Pending::DeleteRelease { reply_to }
        | Pending::PieceFan { reply_to, .. }
        | Pending::AwaitStored { reply_to } => reply_to,
        Pending::SyncBind { flow, .. } | Pending::SyncRelease { flow } => &flow.reply_to,
    }
}

/// First-occurrence distinct (chunk, len) pairs, or None when repeats of
/// one chunk disagree on length or any length is zero.
fn distinct_entries(meta: &FileMeta, lens: &[u32]) -> Option<Vec<(ChunkId, u32)>> {
    let mut seen: BTreeMap<ChunkId, u32> = BTreeMap::new();
    let mut order = Vec::new();
    for (r, &len) in meta.chunks.iter().zip(lens) {
        if len == 0 {
            return None;
        }
        match seen.get(&r.chunk_id) {
            Some(&l) if l != len => return None,
            Some(_) => {}
            None => {
                seen.insert(r.chunk_id, len);
                order.push((r.chunk_id, len));
            }
        }
    }
    Some(order)
}

/// First-occurrence distinct refs of a meta.
fn distinct_refs(meta: &FileMeta) -> Vec<ChunkRef> {
    let mut seen = BTreeSet::new();
    meta.chunks.iter().filter(|r| seen.insert(r.chunk_id)).copied().collect()
}

/// Feeds one message in and loops any self-addressed sends back until
/// only external actions remain. Socket drivers use this; the simulator
/// does its own equivalent so it can meter self-traffic too.
pub fn drive(node: &mut NodeState, from: &str, env: Envelope, now_ns: u64) -> Vec<Action> {
    let mut queue = VecDeque::new();
    queue.push_back((from.to_string(), env));
    let mut external = Vec::new();
    while let Some((from, env)) = queue.pop_front() {
        let mut out = Vec::new();
        node.on_message(&from, env, now_ns, &mut out);
        for Action::Send { to, env } in out {
            if to == node.addr() {
                queue.push_back((to, env));
            } else {
                external.push(Action::Send { to, env });
            }
        }
    }
    external
}

/// Presence index entry: reference count, chunk length, and whether the
/// pieces have actually landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirEntry {
    pub refs: u64,
    pub len: u32,
    pub stored: bool,
}

#[derive(Debug)]
pub enum BindFail {
    Capacity { needed: u64 },
    Missing(ChunkId),
}

enum Undo {
    Bumped(ChunkRef),
    Inserted(ChunkRef, u32),
}

/// The placement directory: presence index, cluster space accounting,
/// and binding policy state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Directory {
    states: Vec<ClusterState>,
    policy: BindingPolicy,
    index: BTreeMap<ChunkRef, DirEntry>,
    topology: Topology,
}

impl Directory {
    fn new(topology: &Topology) -> Self {
        Directory {
            states: topology.fresh_states(),
            policy: BindingPolicy::new(topology.mode),
            index: BTreeMap::new(),
            topology: topology.clone(),
        }
    }

    pub fn states(&self) -> &[ClusterState] {
        &self.states
    }

    pub fn policy(&self) -> &BindingPolicy {
        &self.policy
    }

    pub fn entries(&self) -> impl Iterator<Item = (&ChunkRef, &DirEntry)> {
        self.index.iter()
    }

    pub fn entry(&self, r: &ChunkRef) -> Option<&DirEntry> {
        self.index.get(r)
    }

    /// Clusters currently holding `chunk`, lowest id first.
    fn placements_of(&self, chunk: ChunkId) -> Vec<ClusterId> {
        self.index
            .range(
                ChunkRef { chunk_id: chunk, cluster_id: ClusterId(0) }
                    ..=ChunkRef { chunk_id: chunk, cluster_id: ClusterId(u16::MAX) },
            )
            .map(|(r, _)| r.cluster_id)
            .collect()
    }

    /// Binds every entry for `user_id`, bumping refs on placements that
    /// already exist and placing the rest per policy. All or nothing: a
    /// failure undoes the bumps and inserts already made.
    pub fn bind(
        &mut self,
        user_id: &str,
        require_present: bool,
        entries: &[(ChunkId, u32)],
    ) -> Result<Vec<BoundChunk>, BindFail> {
        let mut journal = Vec::new();
        let mut bound = Vec::new();
        let mut seen = BTreeSet::new();
        let result = (|| {
            for &(chunk_id, len) in entries {
                if !seen.insert(chunk_id) {
                    continue;
                }
                let existing = if self.policy.mode() == shardstore_core::BindingMode::Ulb
                    && !require_present
                {
                    // User-local reuse only: a copy in someone else's
                    // cluster does not count.
                    self.policy
                        .assignments_of(user_id)
                        .iter()
                        .find(|cid| {
                            self.index.contains_key(&ChunkRef { chunk_id, cluster_id: **cid })
                        })
                        .copied()
                } else {
                    self.placements_of(chunk_id).first().copied()
                };
                if let Some(cluster_id) = existing {
                    let r = ChunkRef { chunk_id, cluster_id };
                    let e = self.index.get_mut(&r).unwrap();
                    e.refs += 1;
                    journal.push(Undo::Bumped(r));
                    bound.push(BoundChunk { chunk_id, cluster_id, stored: e.stored });
                    continue;
                }
                if require_present {
                    return Err(BindFail::Missing(chunk_id));
                }
                let need = expansion(len as u64, self.topology.params);
                let cluster_id = self
                    .policy
                    .select(user_id, len as u64, self.topology.params, &self.states)
                    .map_err(|_| BindFail::Capacity { needed: need })?;
                let state =
                    self.states.iter_mut().find(|s| s.cluster_id == cluster_id).unwrap();
                state.charge(need);
                let r = ChunkRef { chunk_id, cluster_id };
                self.index.insert(r, DirEntry { refs: 1, len, stored: false });
                journal.push(Undo::Inserted(r, len));
                bound.push(BoundChunk { chunk_id, cluster_id, stored: false });
            }
            Ok(bound)
        })();
        if result.is_err() {
            for undo in journal.into_iter().rev() {
                match undo {
                    Undo::Bumped(r) => self.index.get_mut(&r).unwrap().refs -= 1,
                    Undo::Inserted(r, len) => {
                        self.index.remove(&r);
                        let need = expansion(len as u64, self.topology.params);
                        self.states
                            .iter_mut()
                            .find(|s| s.cluster_id == r.cluster_id)
                            .unwrap()
                            .release(need);
                    }
                }
            }
        }
        result
    }

    /// Drops one reference per distinct ref; placements reaching zero
    /// are removed and returned. All refs are validated before anything
    /// is touched.
    pub fn release(&mut self, refs: &[ChunkRef]) -> Result<Vec<ChunkRef>, &'static str> {
        let mut seen = BTreeSet::new();
        let distinct: Vec<ChunkRef> = refs.iter().filter(|r| seen.insert(**r)).copied().collect();
        for r in &distinct {
            match self.index.get(r) {
                Some(e) if e.refs >= 1 => {}
                _ => return Err("refcount underflow"),
            }
        }
        let mut dead = Vec::new();
        for r in &distinct {
            let e = self.index.get_mut(r).unwrap();
            e.refs -= 1;
            if e.refs == 0 {
                let len = e.len;
                self.index.remove(r);
                let need = expansion(len as u64, self.topology.params);
                self.states
                    .iter_mut()
                    .find(|s| s.cluster_id == r.cluster_id)
                    .unwrap()
                    .release(need);
                dead.push(*r);
            }
        }
        Ok(dead)
    }

    /// Lenient: a placement released while its upload was in flight is
    /// not an error.
    pub fn mark_stored(&mut self, r: ChunkRef) {
        if let Some(e) = self.index.get_mut(&r) {
            e.stored = true;
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.push(match self.policy.mode() {
            shardstore_core::BindingMode::Clb => 0u8,
            shardstore_core::BindingMode::Ulb => 1u8,
        });
        out.extend_from_slice(&(self.states.len() as u32).to_be_bytes());
        for s in &self.states {
            out.extend_from_slice(&s.cluster_id.0.to_be_bytes());
            out.extend_from_slice(&s.used.to_be_bytes());
        }
        let assigns: Vec<_> = self.policy.iter_assignments().collect();
        out.extend_from_slice(&(assigns.len() as u32).to_be_bytes());
        for (user, list) in assigns {
            out.extend_from_slice(&(user.len() as u16).to_be_bytes());
            out.extend_from_slice(user.as_bytes());
            out.extend_from_slice(&(list.len() as u16).to_be_bytes());
            for c in list {
                out.extend_from_slice(&c.0.to_be_bytes());
            }
        }
        out.extend_from_slice(&(self.index.len() as u32).to_be_bytes());
        for (r, e) in &self.index {
            out.extend_from_slice(r.chunk_id.as_bytes());
            out.extend_from_slice(&r.cluster_id.0.to_be_bytes());
            out.extend_from_slice(&e.refs.to_be_bytes());
            out.extend_from_slice(&e.len.to_be_bytes());
            out.push(e.stored as u8);
        }
        out
    }

    pub fn load(buf: &[u8], topology: &Topology) -> io::Result<Self> {
        let bad = |m: &'static str| io::Error::new(io::ErrorKind::InvalidData, m);
        let mut c = Cursor { buf, at: 0 };
        let mode = match c.u8()? {
            0 => shardstore_core::BindingMode::Clb,
            1 => shardstore_core::BindingMode::Ulb,
            _ => return Err(bad("unknown mode")),
        };
        if mode != topology.mode {
            return Err(bad("snapshot mode does not match topology"));
        }
        let mut dir = Directory::new(topology);
        let nstates = c.u32()? as usize;
        for _ in 0..nstates {
            let id = ClusterId(c.u16()?);
            let used = c.u64()?;
            let state = dir
                .states
                .iter_mut()
                .find(|s| s.cluster_id == id)
                .ok_or_else(|| bad("snapshot names unknown cluster"))?;
            state.used = used;
        }
        let nassign = c.u32()? as usize;
        for _ in 0..nassign {
            let ulen = c.u16()? as usize;
            let user = String::from_utf8(c.take(ulen)?.to_vec())
                .map_err(|_| bad("snapshot user not utf-8"))?;
            let llen = c.u16()? as usize;
            let mut list = Vec::with_capacity(llen.min(1024));
            for _ in 0..llen {
                list.push(ClusterId(c.u16()?));
            }
            dir.policy.restore(user, list);
        }
        let nindex = c.u32()? as usize;
        for _ in 0..nindex {
            let chunk_id = ChunkId::from_bytes(c.take(20)?.try_into().unwrap());
            let cluster_id = ClusterId(c.u16()?);
            let refs = c.u64()?;
            let len = c.u32()?;
            let stored = c.u8()? != 0;
            dir.index
                .insert(ChunkRef { chunk_id, cluster_id }, DirEntry { refs, len, stored });
        }
        if c.at != buf.len() {
            return Err(bad("trailing bytes in snapshot"));
        }
        Ok(dir)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> io::Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "snapshot truncated"));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> io::Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> io::Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)
}

/// Snapshot of a meta table: count then each record, written atomically.
pub fn save_metas(path: &Path, metas: &ChunkMetaTable) -> io::Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&(metas.len() as u32).to_be_bytes());
    for m in metas.iter() {
        encode_file_meta(m, &mut out)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
    }
    write_atomic(path, &out)
}

pub fn load_metas(path: &Path) -> io::Result<ChunkMetaTable> {
    let buf = fs::read(path)?;
    if buf.len() < 4 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "snapshot truncated"));
    }
    let count = u32::from_be_bytes(buf[..4].try_into().unwrap());
    let mut at = 4;
    let mut table = ChunkMetaTable::new();
    for _ in 0..count {
        let (meta, used) = decode_file_meta(&buf[at..])
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        at += used;
        table.upsert(meta);
    }
    if at != buf.len() {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "trailing bytes in snapshot"));
    }
    Ok(table)
}
