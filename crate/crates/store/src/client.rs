//! Client endpoint: chunks files, negotiates placement with its
//! switching node, moves chunk payloads and pieces, and keeps a local
//! meta table plus a bounded chunk cache.
//!
//! Like the node, the client is a pure state machine; drivers feed it
//! commands and messages and carry out the actions it returns. One
//! operation runs at a time, the rest wait in a queue.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use shardstore_core::chunking::{chunk_stream, Chunk, ChunkParams};
use shardstore_core::erasure::{decode_chunk, CodedPiece};
use shardstore_core::metadata::{build_file_meta, sync_meta};
use shardstore_core::{
    ChunkId, ChunkMetaTable, ChunkRef, ClusterId, Envelope, ErrorCode, FileMeta, Message, Topology,
};

use crate::endpoint::{Action, Command, OpKind, OpReport};

/// Chunk payload cache, least recently used out first.
#[derive(Debug, Default)]
pub struct LocalCache {
    budget: u64,
    used: u64,
    tick: u64,
    entries: BTreeMap<ChunkId, (u64, Vec<u8>)>,
    dirty: BTreeSet<ChunkId>,
}

impl LocalCache {
    /// A zero budget disables caching entirely.
    pub fn new(budget: u64) -> Self {
        LocalCache { budget, ..Default::default() }
    }

    pub fn get(&mut self, id: ChunkId) -> Option<&[u8]> {
        self.tick += 1;
        let tick = self.tick;
        self.entries.get_mut(&id).map(|(last, data)| {
            *last = tick;
            data.as_slice()
        })
    }

    pub fn put(&mut self, id: ChunkId, data: Vec<u8>) {
        if data.len() as u64 > self.budget {
            return;
        }
        self.tick += 1;
        if let Some((last, old)) = self.entries.get_mut(&id) {
            *last = self.tick;
            self.used -= old.len() as u64;
            self.used += data.len() as u64;
            *old = data;
            return;
        }
        self.used += data.len() as u64;
        self.entries.insert(id, (self.tick, data));
        self.dirty.insert(id);
        while self.used > self.budget {
            let oldest = self.entries.iter().min_by_key(|(_, (last, _))| *last).map(|(&id, _)| id);
            let Some(id) = oldest else { break };
            let (_, data) = self.entries.remove(&id).unwrap();
            self.used -= data.len() as u64;
            self.dirty.remove(&id);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn used_bytes(&self) -> u64 {
        self.used
    }

    /// Ids inserted since the last call, with their payloads; lets a
    /// CLI spill new entries to disk.
    pub fn take_dirty(&mut self) -> Vec<(ChunkId, Vec<u8>)> {
        let ids = core::mem::take(&mut self.dirty);
        ids.iter()
            .filter_map(|id| self.entries.get(id).map(|(_, d)| (*id, d.clone())))
            .collect()
    }
}

/// One chunk being reconstructed from pieces.
#[derive(Debug)]
struct ChunkFetch {
    r: ChunkRef,
    members: Vec<String>,
    pieces: BTreeMap<u8, CodedPiece>,
    replied: BTreeSet<String>,
}

#[derive(Debug)]
struct Fetch {
    meta: FileMeta,
    have: BTreeMap<ChunkId, Vec<u8>>,
    queue: VecDeque<ChunkRef>,
    in_flight: BTreeMap<u64, ChunkFetch>,
    fetched_count: u32,
}

#[derive(Debug)]
enum OpState {
    PutAwaitMissing {
        rid: u64,
        payloads: BTreeMap<ChunkId, Vec<u8>>,
        total_chunks: u32,
    },
    PutUploading {
        payloads: BTreeMap<ChunkId, Vec<u8>>,
        queue: VecDeque<ChunkRef>,
        in_flight: BTreeMap<u64, (ChunkRef, String)>,
        sent_bytes: u64,
        sent_count: u32,
        total_chunks: u32,
    },
    PutRefresh {
        rid: u64,
        sent_bytes: u64,
        sent_count: u32,
        total_chunks: u32,
    },
    GetAwaitMeta {
        rid: u64,
    },
    GetFetching(Fetch),
    DeleteAwait {
        rid: u64,
    },
    SyncAwait {
        rid: u64,
    },
}

#[derive(Debug)]
struct Op {
    kind: OpKind,
    name: String,
    issued_ns: u64,
    state: OpState,
}

/// Which handler an incoming message belongs to, decided before any
/// mutable work starts.
enum Route {
    PutMissing,
    PutUpload,
    PutRefresh,
    GetMeta,
    GetPiece,
    Delete,
    Sync,
}

pub struct ClientState {
    addr: String,
    user_id: String,
    switch: String,
    topology: Topology,
    chunk_params: ChunkParams,
    fetch_window: usize,
    metas: ChunkMetaTable,
    cache: LocalCache,
    next_rid: u64,
    queue: VecDeque<(Command, u64)>,
    current: Option<Op>,
    reports: Vec<OpReport>,
    last_payload: Option<(String, Vec<u8>)>,
    now_stamp: u64,
}

impl ClientState {
    pub fn new(
        addr: &str,
        user_id: &str,
        switch: &str,
        topology: Topology,
        chunk_params: ChunkParams,
        fetch_window: usize,
        cache_budget: u64,
    ) -> Self {
        ClientState {
            addr: addr.to_string(),
            user_id: user_id.to_string(),
            switch: switch.to_string(),
            topology,
            chunk_params,
            fetch_window: fetch_window.max(1),
            metas: ChunkMetaTable::new(),
            cache: LocalCache::new(cache_budget),
            next_rid: 0,
            queue: VecDeque::new(),
            current: None,
            reports: Vec::new(),
            last_payload: None,
            now_stamp: 0,
        }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn metas(&self) -> &ChunkMetaTable {
        &self.metas
    }

    /// Preloads one meta, e.g. from a CLI state directory.
    pub fn restore_meta(&mut self, meta: FileMeta) {
        self.metas.upsert(meta);
    }

    pub fn cache_mut(&mut self) -> &mut LocalCache {
        &mut self.cache
    }

    pub fn idle(&self) -> bool {
        self.current.is_none() && self.queue.is_empty()
    }

    pub fn drain_reports(&mut self) -> Vec<OpReport> {
        core::mem::take(&mut self.reports)
    }

    /// The bytes reassembled by the most recent successful get.
    pub fn take_payload(&mut self) -> Option<(String, Vec<u8>)> {
        self.last_payload.take()
    }

    fn next_rid(&mut self) -> u64 {
        self.next_rid += 1;
        self.next_rid
    }

    pub fn on_command(&mut self, cmd: Command, now_ns: u64, out: &mut Vec<Action>) {
        self.now_stamp = now_ns;
        self.queue.push_back((cmd, now_ns));
        if self.current.is_none() {
            self.start_next(out);
        }
    }

    fn start_next(&mut self, out: &mut Vec<Action>) {
        let Some((cmd, issued_ns)) = self.queue.pop_front() else { return };
        match cmd {
            Command::Put { name, data, timestamp_ms } => {
                self.start_put(name, data, timestamp_ms, issued_ns, out)
            }
            Command::Get { name } => {
                let local = self.metas.get(&self.user_id, &name).cloned();
                self.current = Some(Op {
                    kind: OpKind::Get,
                    name: name.clone(),
                    issued_ns,
                    state: OpState::GetAwaitMeta { rid: 0 },
                });
                match local {
                    Some(meta) => self.begin_fetch(meta, out),
                    None => {
                        let rid = self.next_rid();
                        if let Some(op) = self.current.as_mut() {
                            op.state = OpState::GetAwaitMeta { rid };
                        }
                        out.push(Action::Send {
                            to: self.switch.clone(),
                            env: Envelope {
                                request_id: rid,
                                message: Message::GetMeta {
                                    user_id: self.user_id.clone(),
                                    file_name: name,
                                },
                            },
                        });
                    }
                }
            }
            Command::Delete { name } => {
                let rid = self.next_rid();
                self.current = Some(Op {
                    kind: OpKind::Delete,
                    name: name.clone(),
                    issued_ns,
                    state: OpState::DeleteAwait { rid },
                });
                out.push(Action::Send {
                    to: self.switch.clone(),
                    env: Envelope {
                        request_id: rid,
                        message: Message::DeleteFile {
                            user_id: self.user_id.clone(),
                            file_name: name,
                        },
                    },
                });
            }
            Command::Sync => {
                let rid = self.next_rid();
                let metas: Vec<FileMeta> = self.metas.files_of(&self.user_id).cloned().collect();
                self.current = Some(Op {
                    kind: OpKind::Sync,
                    name: String::new(),
                    issued_ns,
                    state: OpState::SyncAwait { rid },
                });
                out.push(Action::Send {
                    to: self.switch.clone(),
                    env: Envelope {
                        request_id: rid,
                        message: Message::SyncMeta { user_id: self.user_id.clone(), metas },
                    },
                });
            }
        }
    }

    fn start_put(
        &mut self,
        name: String,
        data: Vec<u8>,
        timestamp_ms: u64,
        issued_ns: u64,
        out: &mut Vec<Action>,
    ) {
        let chunks: Vec<Chunk> = chunk_stream(&data, &self.chunk_params);
        let lens: Vec<u32> = chunks.iter().map(|c| c.len() as u32).collect();
        let placeholders = vec![ClusterId(0); chunks.len()];
        let meta = build_file_meta(&self.user_id, &name, timestamp_ms, &chunks, &placeholders)
            .expect("placements match chunks");
        let mut payloads: BTreeMap<ChunkId, Vec<u8>> = BTreeMap::new();
        for c in chunks {
            let id = c.id();
            let payload = c.into_payload();
            self.cache.put(id, payload.clone());
            payloads.entry(id).or_insert(payload);
        }
        let total_chunks = meta.chunks.len() as u32;
        let rid = self.next_rid();
        self.current = Some(Op {
            kind: OpKind::Put,
            name,
            issued_ns,
            state: OpState::PutAwaitMissing { rid, payloads, total_chunks },
        });
        out.push(Action::Send {
            to: self.switch.clone(),
            env: Envelope { request_id: rid, message: Message::StoreMeta { meta, chunk_lens: lens } },
        });
    }

    /// Synthesizes unreachable errors for everything the current
    /// operation still expects from `peer`. Socket drivers call this
    /// when a connection drops.
    pub fn fail_peer(&mut self, peer: &str, now_ns: u64, out: &mut Vec<Action>) {
        let mut rids = Vec::new();
        match self.current.as_ref().map(|op| &op.state) {
            Some(OpState::PutAwaitMissing { rid, .. })
            | Some(OpState::PutRefresh { rid, .. })
            | Some(OpState::GetAwaitMeta { rid })
            | Some(OpState::DeleteAwait { rid })
            | Some(OpState::SyncAwait { rid }) => {
                if self.switch == peer {
                    rids.push(*rid);
                }
            }
            Some(OpState::PutUploading { in_flight, .. }) => {
                rids.extend(in_flight.iter().filter(|(_, (_, t))| t == peer).map(|(&rid, _)| rid));
            }
            Some(OpState::GetFetching(fetch)) => {
                rids.extend(
                    fetch
                        .in_flight
                        .iter()
                        .filter(|(_, cf)| {
                            cf.members.iter().any(|m| m == peer) && !cf.replied.contains(peer)
                        })
                        .map(|(&rid, _)| rid),
                );
            }
            None => {}
        }
        for rid in rids {
            let env = Envelope {
                request_id: rid,
                message: Message::ErrorReply {
                    code: ErrorCode::Unreachable,
                    detail: peer.to_string(),
                },
            };
            self.on_message(peer, env, now_ns, out);
        }
    }

    pub fn on_message(&mut self, from: &str, env: Envelope, now_ns: u64, out: &mut Vec<Action>) {
        self.now_stamp = now_ns;
        let rid = env.request_id;
        let route = {
            let Some(op) = self.current.as_ref() else { return };
            match &op.state {
                OpState::PutAwaitMissing { rid: w, .. } if rid == *w && from == self.switch => {
                    Route::PutMissing
                }
                OpState::PutUploading { in_flight, .. }
                    if in_flight.get(&rid).is_some_and(|(_, t)| t.as_str() == from) =>
                {
                    Route::PutUpload
                }
                OpState::PutRefresh { rid: w, .. } if rid == *w && from == self.switch => {
                    Route::PutRefresh
                }
                OpState::GetAwaitMeta { rid: w } if rid == *w && from == self.switch => {
                    Route::GetMeta
                }
                OpState::GetFetching(f) if f.in_flight.contains_key(&rid) => Route::GetPiece,
                OpState::DeleteAwait { rid: w } if rid == *w && from == self.switch => Route::Delete,
                OpState::SyncAwait { rid: w } if rid == *w && from == self.switch => Route::Sync,
                _ => return,
            }
        };
        match (route, env.message) {
            (_, Message::ErrorReply { code, detail }) => {
                // A get tolerates individual piece errors; anything else
                // fails the operation.
                if matches!(self.current.as_ref().map(|o| &o.state), Some(OpState::GetFetching(_)))
                {
                    self.piece_reply(rid, from, None, out);
                } else {
                    self.fail_current(code, &detail, out);
                }
            }
            (Route::PutMissing, Message::MissingList { refs }) => self.put_missing(refs, out),
            (Route::PutUpload, Message::StoreAck) => self.put_acked(rid, out),
            (Route::PutRefresh, Message::MetaReply { meta }) => self.put_refreshed(meta, out),
            (Route::GetMeta, Message::MetaReply { meta: Some(meta) }) => {
                self.metas.upsert(meta.clone());
                self.begin_fetch(meta, out);
            }
            (Route::GetMeta, Message::MetaReply { meta: None }) => {
                self.fail_current(ErrorCode::NotFound, "no such file", out)
            }
            (Route::GetPiece, Message::PieceReply { piece }) => {
                self.piece_reply(rid, from, piece, out)
            }
            (Route::Delete, Message::DeleteAck { found }) => self.delete_acked(found, out),
            (Route::Sync, Message::SyncReply { metas }) => self.sync_merged(metas, out),
            _ => {}
        }
    }

    /// Fails the in-progress operation, salvaging progress counters for
    /// the report.
    fn fail_current(&mut self, code: ErrorCode, detail: &str, out: &mut Vec<Action>) {
        let (total, sent) = match self.current.as_ref().map(|o| &o.state) {
            Some(OpState::PutAwaitMissing { total_chunks, .. }) => (*total_chunks, 0),
            Some(OpState::PutUploading { total_chunks, sent_count, .. })
            | Some(OpState::PutRefresh { total_chunks, sent_count, .. }) => {
                (*total_chunks, *sent_count)
            }
            Some(OpState::GetFetching(f)) => (f.meta.chunks.len() as u32, f.fetched_count),
            _ => (0, 0),
        };
        self.finish(false, Some(code), detail, 0, None, total, sent, out);
    }

    fn put_missing(&mut self, refs: Vec<ChunkRef>, out: &mut Vec<Action>) {
        {
            let Some(op) = self.current.as_mut() else { return };
            let OpState::PutAwaitMissing { payloads, total_chunks, .. } = &mut op.state else {
                return;
            };
            let payloads = core::mem::take(payloads);
            let total_chunks = *total_chunks;
            let mut seen = BTreeSet::new();
            let queue: VecDeque<ChunkRef> =
                refs.into_iter().filter(|r| seen.insert(r.chunk_id)).collect();
            op.state = OpState::PutUploading {
                payloads,
                queue,
                in_flight: BTreeMap::new(),
                sent_bytes: 0,
                sent_count: 0,
                total_chunks,
            };
        }
        self.pump_uploads(out);
    }

    /// Keeps the upload window full; finishes with a meta refresh once
    /// everything is acknowledged.
    fn pump_uploads(&mut self, out: &mut Vec<Action>) {
        enum Next {
            Fail(&'static str),
            Refresh { sent_bytes: u64, sent_count: u32, total_chunks: u32, name: String },
            Wait,
        }
        let window = self.fetch_window;
        let mut sends: Vec<(u64, ChunkRef, String, Vec<u8>)> = Vec::new();
        let next = {
            let Some(op) = self.current.as_mut() else { return };
            let name = op.name.clone();
            let OpState::PutUploading { payloads, queue, in_flight, sent_bytes, sent_count, total_chunks } =
                &mut op.state
            else {
                return;
            };
            let mut failed = None;
            while failed.is_none() && in_flight.len() + sends.len() < window {
                let Some(r) = queue.pop_front() else { break };
                let Some(payload) = payloads.get(&r.chunk_id).cloned() else {
                    failed = Some("switch asked for a chunk this file does not contain");
                    break;
                };
                let Some(target) = self.topology.coding_member(r.cluster_id, r.chunk_id) else {
                    failed = Some("placement names an unknown cluster");
                    break;
                };
                self.next_rid += 1;
                sends.push((self.next_rid, r, target.to_string(), payload));
            }
            match failed {
                Some(detail) => Next::Fail(detail),
                None => {
                    for (rid, r, target, _) in &sends {
                        in_flight.insert(*rid, (*r, target.clone()));
                    }
                    if in_flight.is_empty() && queue.is_empty() {
                        Next::Refresh {
                            sent_bytes: *sent_bytes,
                            sent_count: *sent_count,
                            total_chunks: *total_chunks,
                            name,
                        }
                    } else {
                        Next::Wait
                    }
                }
            }
        };
        for (rid, r, target, payload) in sends {
            out.push(Action::Send {
                to: target,
                env: Envelope {
                    request_id: rid,
                    message: Message::StoreChunk {
                        chunk_id: r.chunk_id,
                        cluster_id: r.cluster_id,
                        payload,
                    },
                },
            });
        }
        match next {
            Next::Fail(detail) => self.fail_current(ErrorCode::Internal, detail, out),
            Next::Wait => {}
            Next::Refresh { sent_bytes, sent_count, total_chunks, name } => {
                let rid = self.next_rid();
                if let Some(op) = self.current.as_mut() {
                    op.state = OpState::PutRefresh { rid, sent_bytes, sent_count, total_chunks };
                }
                out.push(Action::Send {
                    to: self.switch.clone(),
                    env: Envelope {
                        request_id: rid,
                        message: Message::GetMeta { user_id: self.user_id.clone(), file_name: name },
                    },
                });
            }
        }
    }

    fn put_acked(&mut self, rid: u64, out: &mut Vec<Action>) {
        {
            let Some(op) = self.current.as_mut() else { return };
            let OpState::PutUploading { payloads, in_flight, sent_bytes, sent_count, .. } =
                &mut op.state
            else {
                return;
            };
            let Some((r, _)) = in_flight.remove(&rid) else { return };
            *sent_bytes += payloads.get(&r.chunk_id).map(|p| p.len() as u64).unwrap_or(0);
            *sent_count += 1;
        }
        self.pump_uploads(out);
    }

    fn put_refreshed(&mut self, meta: Option<FileMeta>, out: &mut Vec<Action>) {
        let (bytes, sent, total) = match self.current.as_ref().map(|o| &o.state) {
            Some(OpState::PutRefresh { sent_bytes, sent_count, total_chunks, .. }) => {
                (*sent_bytes, *sent_count, *total_chunks)
            }
            _ => return,
        };
        match meta {
            Some(meta) => {
                self.metas.upsert(meta);
                self.finish(true, None, "", bytes, None, total, sent, out);
            }
            None => self.finish(
                false,
                Some(ErrorCode::Internal),
                "meta vanished after upload",
                0,
                None,
                total,
                sent,
                out,
            ),
        }
    }

    fn delete_acked(&mut self, found: bool, out: &mut Vec<Action>) {
        let name = match self.current.as_ref() {
            Some(op) => op.name.clone(),
            None => return,
        };
        let user = self.user_id.clone();
        self.metas.remove(&user, &name);
        let detail = if found { "deleted" } else { "absent" };
        self.finish(found, (!found).then_some(ErrorCode::NotFound), detail, 0, None, 0, 0, out);
    }

    fn sync_merged(&mut self, metas: Vec<FileMeta>, out: &mut Vec<Action>) {
        let mut adopted = 0u32;
        for m in metas {
            let local = self.metas.get(&m.user_id, &m.file_name).cloned();
            let take = match sync_meta(local.as_ref(), Some(&m)) {
                Ok(w) => core::ptr::eq(w, &m) && local.as_ref() != Some(&m),
                Err(_) => false,
            };
            if take {
                self.metas.upsert(m);
                adopted += 1;
            }
        }
        let detail = format!("{adopted} adopted");
        self.finish(true, None, &detail, 0, None, 0, 0, out);
    }

    fn begin_fetch(&mut self, meta: FileMeta, out: &mut Vec<Action>) {
        let mut have = BTreeMap::new();
        let mut queue = VecDeque::new();
        let mut seen = BTreeSet::new();
        for r in &meta.chunks {
            if !seen.insert(r.chunk_id) {
                continue;
            }
            match self.cache.get(r.chunk_id) {
                Some(data) => {
                    have.insert(r.chunk_id, data.to_vec());
                }
                None => queue.push_back(*r),
            }
        }
        let mut fetch = Fetch { meta, have, queue, in_flight: BTreeMap::new(), fetched_count: 0 };
        if fetch.queue.is_empty() {
            self.assemble(fetch, out);
            return;
        }
        if !self.fill_fetch_window(&mut fetch, out) {
            self.fail_current(ErrorCode::Internal, "placement names an unknown cluster", out);
            return;
        }
        if let Some(op) = self.current.as_mut() {
            op.state = OpState::GetFetching(fetch);
        }
    }

    /// False when a placement cannot be resolved against the topology.
    fn fill_fetch_window(&mut self, fetch: &mut Fetch, out: &mut Vec<Action>) -> bool {
        while fetch.in_flight.len() < self.fetch_window {
            let Some(r) = fetch.queue.pop_front() else { break };
            let Some(spec) = self.topology.cluster(r.cluster_id) else {
                return false;
            };
            let members = spec.members.clone();
            let rid = self.next_rid();
            for (i, member) in members.iter().enumerate() {
                out.push(Action::Send {
                    to: member.clone(),
                    env: Envelope {
                        request_id: rid,
                        message: Message::GetPiece { chunk_id: r.chunk_id, index: i as u8 },
                    },
                });
            }
            fetch.in_flight.insert(
                rid,
                ChunkFetch { r, members, pieces: BTreeMap::new(), replied: BTreeSet::new() },
            );
        }
        true
    }

    fn piece_reply(
        &mut self,
        rid: u64,
        from: &str,
        piece: Option<CodedPiece>,
        out: &mut Vec<Action>,
    ) {
        let params = self.topology.params;
        enum Outcome {
            Wait,
            Decoded(ChunkId, Vec<u8>),
            Corrupt(ChunkId),
            Exhausted(ChunkId),
        }
        let outcome = {
            let Some(op) = self.current.as_mut() else { return };
            let OpState::GetFetching(fetch) = &mut op.state else { return };
            let Some(cf) = fetch.in_flight.get_mut(&rid) else { return };
            if !cf.members.iter().any(|m| m == from) || !cf.replied.insert(from.to_string()) {
                return;
            }
            if let Some(p) = piece {
                if p.chunk_id() == cf.r.chunk_id && p.params() == params {
                    cf.pieces.insert(p.index(), p);
                }
            }
            if cf.pieces.len() >= params.k() as usize {
                let pieces: Vec<CodedPiece> = cf.pieces.values().cloned().collect();
                let chunk_id = cf.r.chunk_id;
                for m in cf.members.clone() {
                    if !cf.replied.contains(&m) {
                        out.push(Action::Send {
                            to: m,
                            env: Envelope { request_id: 0, message: Message::Cancel { target: rid } },
                        });
                    }
                }
                fetch.in_flight.remove(&rid);
                match decode_chunk(&pieces, params) {
                    Ok(payload) if ChunkId::of(&payload) == chunk_id => {
                        Outcome::Decoded(chunk_id, payload)
                    }
                    _ => Outcome::Corrupt(chunk_id),
                }
            } else if cf.replied.len() == cf.members.len() {
                Outcome::Exhausted(cf.r.chunk_id)
            } else {
                Outcome::Wait
            }
        };
        match outcome {
            Outcome::Wait => {}
            Outcome::Decoded(chunk_id, payload) => {
                self.cache.put(chunk_id, payload.clone());
                if let Some(op) = self.current.as_mut() {
                    if let OpState::GetFetching(fetch) = &mut op.state {
                        fetch.fetched_count += 1;
                        fetch.have.insert(chunk_id, payload);
                    }
                }
                self.continue_fetch(out);
            }
            Outcome::Corrupt(id) => {
                let detail = format!("chunk {id} failed verification");
                self.abort_fetch(ErrorCode::IntegrityMismatch, &detail, out)
            }
            Outcome::Exhausted(id) => {
                // Everyone answered and k pieces never materialized.
                let detail = format!("chunk {id}: too few pieces reachable");
                self.abort_fetch(ErrorCode::NotFound, &detail, out)
            }
        }
    }

    fn continue_fetch(&mut self, out: &mut Vec<Action>) {
        let mut fetch = {
            let Some(op) = self.current.as_mut() else { return };
            if !matches!(op.state, OpState::GetFetching(_)) {
                return;
            }
            // Park a placeholder while the fetch is worked on owned;
            // rid 0 is never allocated, so nothing routes to it.
            match core::mem::replace(&mut op.state, OpState::GetAwaitMeta { rid: 0 }) {
                OpState::GetFetching(f) => f,
                _ => unreachable!(),
            }
        };
        if fetch.queue.is_empty() && fetch.in_flight.is_empty() {
            self.assemble(fetch, out);
            return;
        }
        if !self.fill_fetch_window(&mut fetch, out) {
            self.fail_current(ErrorCode::Internal, "placement names an unknown cluster", out);
            return;
        }
        if let Some(op) = self.current.as_mut() {
            op.state = OpState::GetFetching(fetch);
        }
    }

    /// Cancels every outstanding piece request and fails the get.
    fn abort_fetch(&mut self, code: ErrorCode, detail: &str, out: &mut Vec<Action>) {
        if let Some(op) = self.current.as_mut() {
            if let OpState::GetFetching(fetch) = &mut op.state {
                for (&rid, cf) in &fetch.in_flight {
                    for m in cf.members.iter().filter(|m| !cf.replied.contains(*m)) {
                        out.push(Action::Send {
                            to: m.clone(),
                            env: Envelope { request_id: 0, message: Message::Cancel { target: rid } },
                        });
                    }
                }
            }
        }
        self.fail_current(code, detail, out);
    }

    /// Concatenates chunk payloads in meta order and finishes the get.
    fn assemble(&mut self, fetch: Fetch, out: &mut Vec<Action>) {
        let mut data = Vec::with_capacity(fetch.meta.total_len as usize);
        for r in &fetch.meta.chunks {
            match fetch.have.get(&r.chunk_id) {
                Some(p) => data.extend_from_slice(p),
                None => {
                    self.finish(
                        false,
                        Some(ErrorCode::Internal),
                        "chunk lost in reassembly",
                        0,
                        None,
                        fetch.meta.chunks.len() as u32,
                        fetch.fetched_count,
                        out,
                    );
                    return;
                }
            }
        }
        if data.len() as u64 != fetch.meta.total_len {
            self.finish(
                false,
                Some(ErrorCode::IntegrityMismatch),
                "reassembled length mismatch",
                0,
                None,
                fetch.meta.chunks.len() as u32,
                fetch.fetched_count,
                out,
            );
            return;
        }
        let digest = ChunkId::of(&data);
        let bytes = data.len() as u64;
        let chunks_total = fetch.meta.chunks.len() as u32;
        let name = self.current.as_ref().map(|op| op.name.clone()).unwrap_or_default();
        self.last_payload = Some((name, data));
        self.finish(true, None, "", bytes, Some(digest), chunks_total, fetch.fetched_count, out);
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &mut self,
        ok: bool,
        error: Option<ErrorCode>,
        detail: &str,
        bytes: u64,
        digest: Option<ChunkId>,
        chunks_total: u32,
        chunks_sent: u32,
        out: &mut Vec<Action>,
    ) {
        let Some(op) = self.current.take() else { return };
        self.reports.push(OpReport {
            user_id: self.user_id.clone(),
            kind: op.kind,
            file_name: op.name,
            issued_ns: op.issued_ns,
            completed_ns: self.now_stamp,
            ok,
            error,
            detail: detail.to_string(),
            bytes,
            digest,
            chunks_total,
            chunks_sent,
        });
        self.start_next(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::endpoint::Action;
    use crate::node::{drive, NodeState};
    use crate::piecestore::MemoryStore;
    use shardstore_core::binding::ClusterSpec;
    use shardstore_core::erasure::CodingParams;
    use shardstore_core::BindingMode;

    fn topology() -> Topology {
        Topology {
            mode: BindingMode::Clb,
            params: CodingParams::new(1, 1).unwrap(),
            cluster_capacity: 1 << 30,
            clusters: vec![ClusterSpec { id: ClusterId(0), members: vec!["n0.0".into()] }],
        }
    }

    fn client(addr: &str, cache: u64) -> ClientState {
        ClientState::new(addr, "alice", "n0.0", topology(), ChunkParams::default(), 4, cache)
    }

    /// Ferries actions between one client and a single node until both
    /// go quiet, zero latency, FIFO order.
    fn pump(client: &mut ClientState, node: &mut NodeState, mut actions: Vec<Action>) {
        let mut queue: VecDeque<Action> = actions.drain(..).collect();
        while let Some(Action::Send { to, env }) = queue.pop_front() {
            if to == node.addr() {
                queue.extend(drive(node, client.addr(), env, 0));
            } else if to == client.addr() {
                let mut out = Vec::new();
                client.on_message(node.addr(), env, 0, &mut out);
                queue.extend(out);
            }
        }
    }

    fn test_data(len: usize) -> Vec<u8> {
        let mut x = 0x2545F4914F6CDD1Du64;
        (0..len)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (x >> 56) as u8
            })
            .collect()
    }

    #[test]
    fn put_get_delete_round_trip() {
        let mut node = NodeState::new("n0.0", topology(), Box::new(MemoryStore::new())).unwrap();
        let mut c = client("c", 1 << 20);
        let data = test_data(20_000);

        let mut out = Vec::new();
        c.on_command(
            Command::Put { name: "f".into(), data: data.clone(), timestamp_ms: 1 },
            0,
            &mut out,
        );
        pump(&mut c, &mut node, out);
        let reports = c.drain_reports();
        assert_eq!(reports.len(), 1);
        assert!(reports[0].ok, "{:?}", reports[0]);
        assert_eq!(reports[0].bytes, data.len() as u64);
        assert!(reports[0].chunks_total >= 1);
        assert_eq!(reports[0].chunks_sent, reports[0].chunks_total);

        // Cached get: no pieces move.
        let mut out = Vec::new();
        c.on_command(Command::Get { name: "f".into() }, 0, &mut out);
        pump(&mut c, &mut node, out);
        let reports = c.drain_reports();
        assert!(reports[0].ok);
        assert_eq!(reports[0].chunks_sent, 0);
        assert_eq!(reports[0].digest, Some(ChunkId::of(&data)));
        assert_eq!(c.take_payload().unwrap().1, data);

        // Cold get from a second device of the same user.
        let mut c2 = client("c2", 0);
        let mut out = Vec::new();
        c2.on_command(Command::Get { name: "f".into() }, 0, &mut out);
        pump(&mut c2, &mut node, out);
        let reports = c2.drain_reports();
        assert!(reports[0].ok, "{:?}", reports[0]);
        assert!(reports[0].chunks_sent > 0);
        assert_eq!(c2.take_payload().unwrap().1, data);

        let mut out = Vec::new();
        c.on_command(Command::Delete { name: "f".into() }, 0, &mut out);
        pump(&mut c, &mut node, out);
        assert!(c.drain_reports()[0].ok);
        assert_eq!(node.store().piece_count(), 0);

        // The file is gone for a cache-less client.
        let mut out = Vec::new();
        c2.metas().get("alice", "f").unwrap();
        c2.on_command(Command::Sync, 0, &mut out);
        pump(&mut c2, &mut node, out);
        c2.drain_reports();
        let mut out = Vec::new();
        c2.on_command(Command::Get { name: "missing".into() }, 0, &mut out);
        pump(&mut c2, &mut node, out);
        let reports = c2.drain_reports();
        assert!(!reports[0].ok);
        assert_eq!(reports[0].error, Some(ErrorCode::NotFound));
    }

    #[test]
    fn repeat_put_uploads_nothing() {
        let mut node = NodeState::new("n0.0", topology(), Box::new(MemoryStore::new())).unwrap();
        let mut c = client("c", 0);
        let data = test_data(9_000);
        for round in 0..2 {
            let mut out = Vec::new();
            c.on_command(
                Command::Put { name: "f".into(), data: data.clone(), timestamp_ms: 5 },
                0,
                &mut out,
            );
            pump(&mut c, &mut node, out);
            let r = &c.drain_reports()[0];
            assert!(r.ok);
            if round == 1 {
                assert_eq!(r.chunks_sent, 0, "{r:?}");
                assert_eq!(r.bytes, 0);
            }
        }
    }

    #[test]
    fn sync_carries_metas_between_devices() {
        let mut node = NodeState::new("n0.0", topology(), Box::new(MemoryStore::new())).unwrap();
        let mut a = client("a", 0);
        let data = test_data(4_000);
        let mut out = Vec::new();
        a.on_command(
            Command::Put { name: "shared.bin".into(), data: data.clone(), timestamp_ms: 9 },
            0,
            &mut out,
        );
        pump(&mut a, &mut node, out);
        assert!(a.drain_reports()[0].ok);

        let mut b = client("b", 0);
        let mut out = Vec::new();
        b.on_command(Command::Sync, 0, &mut out);
        pump(&mut b, &mut node, out);
        assert!(b.drain_reports()[0].ok);
        assert!(b.metas().get("alice", "shared.bin").is_some());

        let mut out = Vec::new();
        b.on_command(Command::Get { name: "shared.bin".into() }, 0, &mut out);
        pump(&mut b, &mut node, out);
        let r = b.drain_reports();
        assert!(r[0].ok);
        assert_eq!(b.take_payload().unwrap().1, data);
    }

    #[test]
    fn cache_evicts_least_recently_used() {
        let mut cache = LocalCache::new(100);
        let a = ChunkId::of(b"a");
        let b = ChunkId::of(b"b");
        let c = ChunkId::of(b"c");
        cache.put(a, vec![0; 40]);
        cache.put(b, vec![0; 40]);
        assert!(cache.get(a).is_some());
        cache.put(c, vec![0; 40]);
        assert!(cache.get(b).is_none(), "least recently used entry evicted");
        assert!(cache.get(a).is_some());
        assert!(cache.get(c).is_some());
        assert!(cache.used_bytes() <= 100);

        let mut off = LocalCache::new(0);
        off.put(a, vec![1]);
        assert!(off.get(a).is_none());
    }
}
