//! Binary message codec.
//!
//! Every message travels as one frame:
//!
//! ```text
//! [u32 length][u8 msg_type][u64 request_id][body...]
//! ```
//!
//! The length counts everything after itself (type + request id + body)
//! and all integers are big-endian. Replies echo the request id of the
//! message they answer; unsolicited messages pick a fresh id. The codec
//! is strict in both directions: decoding checks every length, flag,
//! and code, and a body with trailing bytes is rejected rather than
//! silently accepted.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::binding::{BindingMode, BoundChunk, ClusterId, ClusterSpec, Topology};
use crate::chunking::ChunkId;
use crate::erasure::{CodedPiece, CodingParams};
use crate::metadata::{ChunkRef, FileMeta};

/// Frame header bytes ahead of the body.
pub const HEADER_LEN: usize = 13;

/// Largest admissible body, bounded by the u32 length field.
pub const MAX_BODY_LEN: usize = u32::MAX as usize - 12;

const T_STORE_META: u8 = 0x01;
const T_MISSING_LIST: u8 = 0x02;
const T_GET_META: u8 = 0x03;
const T_META_REPLY: u8 = 0x04;
const T_STORE_CHUNK: u8 = 0x05;
const T_STORE_ACK: u8 = 0x06;
const T_STORE_PIECE: u8 = 0x07;
const T_PIECE_ACK: u8 = 0x08;
const T_GET_PIECE: u8 = 0x09;
const T_PIECE_REPLY: u8 = 0x0A;
const T_DELETE_FILE: u8 = 0x0B;
const T_DELETE_ACK: u8 = 0x0C;
const T_DELETE_PIECE: u8 = 0x0D;
const T_CANCEL: u8 = 0x0E;
const T_BIND_CHUNKS: u8 = 0x10;
const T_BIND_REPLY: u8 = 0x11;
const T_RELEASE_CHUNKS: u8 = 0x12;
const T_RELEASE_REPLY: u8 = 0x13;
const T_MARK_STORED: u8 = 0x14;
const T_STORED_ACK: u8 = 0x15;
const T_GET_TOPOLOGY: u8 = 0x16;
const T_TOPOLOGY_REPLY: u8 = 0x17;
const T_GET_STATS: u8 = 0x18;
const T_STATS_REPLY: u8 = 0x19;
const T_SYNC_META: u8 = 0x1A;
const T_SYNC_REPLY: u8 = 0x1B;
const T_ERROR_REPLY: u8 = 0x7F;

/// A message plus its correlation id.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub request_id: u64,
    pub message: Message,
}

/// Storage occupancy as reported by one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NodeStats {
    pub piece_count: u64,
    /// Payload bytes of coded pieces at rest. Per-piece header overhead
    /// is `10 * piece_count` and is accounted as indexing cost.
    pub piece_bytes: u64,
    pub meta_count: u64,
    /// Serialized size of the file metadata held here.
    pub meta_bytes: u64,
    /// Serialized size of the placement directory, zero off the
    /// directory node.
    pub index_bytes: u64,
}

/// Small, stable catalogue of failure kinds carried by `ErrorReply`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    Malformed,
    NotFound,
    CapacityExhausted,
    IntegrityMismatch,
    PartialStore,
    Unreachable,
    MissingChunks,
    Internal,
}

impl ErrorCode {
    pub fn as_u8(self) -> u8 {
        match self {
            ErrorCode::Malformed => 1,
            ErrorCode::NotFound => 2,
            ErrorCode::CapacityExhausted => 3,
            ErrorCode::IntegrityMismatch => 4,
            ErrorCode::PartialStore => 5,
            ErrorCode::Unreachable => 6,
            ErrorCode::MissingChunks => 7,
            ErrorCode::Internal => 8,
        }
    }

    pub fn from_u8(code: u8) -> Option<Self> {
        Some(match code {
            1 => ErrorCode::Malformed,
            2 => ErrorCode::NotFound,
            3 => ErrorCode::CapacityExhausted,
            4 => ErrorCode::IntegrityMismatch,
            5 => ErrorCode::PartialStore,
            6 => ErrorCode::Unreachable,
            7 => ErrorCode::MissingChunks,
            8 => ErrorCode::Internal,
            _ => return None,
        })
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorCode::Malformed => "malformed",
            ErrorCode::NotFound => "not found",
            ErrorCode::CapacityExhausted => "capacity exhausted",
            ErrorCode::IntegrityMismatch => "integrity mismatch",
            ErrorCode::PartialStore => "partial store",
            ErrorCode::Unreachable => "unreachable",
            ErrorCode::MissingChunks => "missing chunks",
            ErrorCode::Internal => "internal",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Client -> switching node: store or update a file. `chunk_lens`
    /// carries the byte length of each entry in `meta.chunks`, which the
    /// binding step needs and the meta encoding does not include.
    StoreMeta { meta: FileMeta, chunk_lens: Vec<u32> },
    /// Reply: the distinct chunks the client must upload.
    MissingList { refs: Vec<ChunkRef> },
    GetMeta { user_id: String, file_name: String },
    MetaReply { meta: Option<FileMeta> },
    /// Client -> coding node: full chunk payload for encode and fan-out.
    StoreChunk { chunk_id: ChunkId, cluster_id: ClusterId, payload: Vec<u8> },
    StoreAck,
    /// Coding node -> member: one coded piece to hold.
    StorePiece { piece: CodedPiece },
    PieceAck,
    GetPiece { chunk_id: ChunkId, index: u8 },
    PieceReply { piece: Option<CodedPiece> },
    DeleteFile { user_id: String, file_name: String },
    DeleteAck { found: bool },
    DeletePiece { chunk_id: ChunkId, index: u8 },
    /// Withdraw interest in an outstanding request id.
    Cancel { target: u64 },
    /// Node -> directory: allocate placements. With `require_present`
    /// the bind fails unless every chunk is already stored (used when
    /// adopting a synced meta that arrives without payload).
    BindChunks { user_id: String, require_present: bool, entries: Vec<(ChunkId, u32)> },
    BindReply { entries: Vec<BoundChunk> },
    /// Node -> directory: drop one file's references.
    ReleaseChunks { refs: Vec<ChunkRef> },
    /// Reply: references whose count reached zero.
    ReleaseReply { dead: Vec<ChunkRef> },
    /// Coding node -> directory: a chunk's pieces are all in place.
    MarkStored { chunk_id: ChunkId, cluster_id: ClusterId },
    StoredAck,
    GetTopology,
    TopologyReply { topology: Topology },
    GetStats,
    StatsReply { stats: NodeStats },
    /// Device -> switching node: full table exchange for one user.
    SyncMeta { user_id: String, metas: Vec<FileMeta> },
    SyncReply { metas: Vec<FileMeta> },
    ErrorReply { code: ErrorCode, detail: String },
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::StoreMeta { .. } => T_STORE_META,
            Message::MissingList { .. } => T_MISSING_LIST,
            Message::GetMeta { .. } => T_GET_META,
            Message::MetaReply { .. } => T_META_REPLY,
            Message::StoreChunk { .. } => T_STORE_CHUNK,
            Message::StoreAck => T_STORE_ACK,
            Message::StorePiece { .. } => T_STORE_PIECE,
            Message::PieceAck => T_PIECE_ACK,
            Message::GetPiece { .. } => T_GET_PIECE,
            Message::PieceReply { .. } => T_PIECE_REPLY,
            Message::DeleteFile { .. } => T_DELETE_FILE,
            Message::DeleteAck { .. } => T_DELETE_ACK,
            Message::DeletePiece { .. } => T_DELETE_PIECE,
            Message::Cancel { .. } => T_CANCEL,
            Message::BindChunks { .. } => T_BIND_CHUNKS,
            Message::BindReply { .. } => T_BIND_REPLY,
            Message::ReleaseChunks { .. } => T_RELEASE_CHUNKS,
            Message::ReleaseReply { .. } => T_RELEASE_REPLY,
            Message::MarkStored { .. } => T_MARK_STORED,
            Message::StoredAck => T_STORED_ACK,
            Message::GetTopology => T_GET_TOPOLOGY,
            Message::TopologyReply { .. } => T_TOPOLOGY_REPLY,
            Message::GetStats => T_GET_STATS,
            Message::StatsReply { .. } => T_STATS_REPLY,
            Message::SyncMeta { .. } => T_SYNC_META,
            Message::SyncReply { .. } => T_SYNC_REPLY,
            Message::ErrorReply { .. } => T_ERROR_REPLY,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Message::StoreMeta { .. } => "StoreMeta",
            Message::MissingList { .. } => "MissingList",
            Message::GetMeta { .. } => "GetMeta",
            Message::MetaReply { .. } => "MetaReply",
            Message::StoreChunk { .. } => "StoreChunk",
            Message::StoreAck => "StoreAck",
            Message::StorePiece { .. } => "StorePiece",
            Message::PieceAck => "PieceAck",
            Message::GetPiece { .. } => "GetPiece",
            Message::PieceReply { .. } => "PieceReply",
            Message::DeleteFile { .. } => "DeleteFile",
            Message::DeleteAck { .. } => "DeleteAck",
            Message::DeletePiece { .. } => "DeletePiece",
            Message::Cancel { .. } => "Cancel",
            Message::BindChunks { .. } => "BindChunks",
            Message::BindReply { .. } => "BindReply",
            Message::ReleaseChunks { .. } => "ReleaseChunks",
            Message::ReleaseReply { .. } => "ReleaseReply",
            Message::MarkStored { .. } => "MarkStored",
            Message::StoredAck => "StoredAck",
            Message::GetTopology => "GetTopology",
            Message::TopologyReply { .. } => "TopologyReply",
            Message::GetStats => "GetStats",
            Message::StatsReply { .. } => "StatsReply",
            Message::SyncMeta { .. } => "SyncMeta",
            Message::SyncReply { .. } => "SyncReply",
            Message::ErrorReply { .. } => "ErrorReply",
        }
    }
}

/// Encodes an envelope into one frame.
pub fn encode(env: &Envelope) -> Result<Vec<u8>, WireError> {
    let mut body = Vec::new();
    encode_body(&env.message, &mut body)?;
    if body.len() > MAX_BODY_LEN {
        return Err(WireError::TooLarge { body: body.len() });
    }
    let mut frame = Vec::with_capacity(HEADER_LEN + body.len());
    frame.extend_from_slice(&((1 + 8 + body.len()) as u32).to_be_bytes());
    frame.push(env.message.type_byte());
    frame.extend_from_slice(&env.request_id.to_be_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

/// Size of the frame [`encode`] would produce.
pub fn encoded_len(env: &Envelope) -> Result<usize, WireError> {
    Ok(encode(env)?.len())
}

/// Decodes one frame from the front of `buf`, returning the envelope and
/// the bytes consumed. Bytes past the frame are untouched. A partial
/// frame yields [`WireError::Incomplete`] with the total length needed.
pub fn decode(buf: &[u8]) -> Result<(Envelope, usize), WireError> {
    if buf.len() < 4 {
        return Err(WireError::Incomplete { need: 4 });
    }
    let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
    if len < 9 {
        return Err(WireError::Invalid("length below header size"));
    }
    let total = 4 + len;
    if buf.len() < total {
        return Err(WireError::Incomplete { need: total });
    }
    let msg_type = buf[4];
    let request_id = u64::from_be_bytes(buf[5..13].try_into().unwrap());
    let mut r = Reader::new(&buf[13..total]);
    let message = decode_body(msg_type, &mut r)?;
    r.expect_end()?;
    Ok((Envelope { request_id, message }, total))
}

fn encode_body(msg: &Message, out: &mut Vec<u8>) -> Result<(), WireError> {
    match msg {
        Message::StoreMeta { meta, chunk_lens } => {
            if chunk_lens.len() != meta.chunks.len() {
                return Err(WireError::Invalid("length table size"));
            }
            encode_file_meta(meta, out)?;
            put_u32(out, chunk_lens.len() as u32);
            for &l in chunk_lens {
                put_u32(out, l);
            }
        }
        Message::MissingList { refs } => encode_refs(refs, out)?,
        Message::GetMeta { user_id, file_name } => {
            put_str16(out, user_id)?;
            put_str16(out, file_name)?;
        }
        Message::MetaReply { meta } => match meta {
            None => out.push(0),
            Some(m) => {
                out.push(1);
                encode_file_meta(m, out)?;
            }
        },
        Message::StoreChunk { chunk_id, cluster_id, payload } => {
            out.extend_from_slice(chunk_id.as_bytes());
            put_u16(out, cluster_id.0);
            put_bytes32(out, payload)?;
        }
        Message::StoreAck | Message::PieceAck | Message::StoredAck => {}
        Message::GetTopology | Message::GetStats => {}
        Message::StorePiece { piece } => encode_piece(piece, out)?,
        Message::GetPiece { chunk_id, index } | Message::DeletePiece { chunk_id, index } => {
            out.extend_from_slice(chunk_id.as_bytes());
            out.push(*index);
        }
        Message::PieceReply { piece } => match piece {
            None => out.push(0),
            Some(p) => {
                out.push(1);
                encode_piece(p, out)?;
            }
        },
        Message::DeleteFile { user_id, file_name } => {
            put_str16(out, user_id)?;
            put_str16(out, file_name)?;
        }
        Message::DeleteAck { found } => out.push(*found as u8),
        Message::Cancel { target } => put_u64(out, *target),
        Message::BindChunks { user_id, require_present, entries } => {
            put_str16(out, user_id)?;
            out.push(*require_present as u8);
            put_u32(out, entries.len() as u32);
            for (id, len) in entries {
                out.extend_from_slice(id.as_bytes());
                put_u32(out, *len);
            }
        }
        Message::BindReply { entries } => {
            put_u32(out, entries.len() as u32);
            for b in entries {
                out.extend_from_slice(b.chunk_id.as_bytes());
                put_u16(out, b.cluster_id.0);
                out.push(b.stored as u8);
            }
        }
        Message::ReleaseChunks { refs } => encode_refs(refs, out)?,
        Message::ReleaseReply { dead } => encode_refs(dead, out)?,
        Message::MarkStored { chunk_id, cluster_id } => {
            out.extend_from_slice(chunk_id.as_bytes());
            put_u16(out, cluster_id.0);
        }
        Message::TopologyReply { topology } => encode_topology(topology, out)?,
        Message::StatsReply { stats } => {
            put_u64(out, stats.piece_count);
            put_u64(out, stats.piece_bytes);
            put_u64(out, stats.meta_count);
            put_u64(out, stats.meta_bytes);
            put_u64(out, stats.index_bytes);
        }
        Message::SyncMeta { user_id, metas } => {
            put_str16(out, user_id)?;
            put_u32(out, metas.len() as u32);
            for m in metas {
                encode_file_meta(m, out)?;
            }
        }
        Message::SyncReply { metas } => {
            put_u32(out, metas.len() as u32);
            for m in metas {
                encode_file_meta(m, out)?;
            }
        }
        Message::ErrorReply { code, detail } => {
            out.push(code.as_u8());
            put_str16(out, detail)?;
        }
    }
    Ok(())
}

fn decode_body(msg_type: u8, r: &mut Reader<'_>) -> Result<Message, WireError> {
    Ok(match msg_type {
        T_STORE_META => {
            let meta = read_file_meta(r)?;
            let count = r.u32()? as usize;
            if count != meta.chunks.len() {
                return Err(WireError::Invalid("length table size"));
            }
            let mut chunk_lens = Vec::new();
            for _ in 0..count {
                chunk_lens.push(r.u32()?);
            }
            Message::StoreMeta { meta, chunk_lens }
        }
        T_MISSING_LIST => Message::MissingList { refs: read_refs(r)? },
        T_GET_META => {
            Message::GetMeta { user_id: r.str16()?, file_name: r.str16()? }
        }
        T_META_REPLY => Message::MetaReply {
            meta: match r.flag()? {
                false => None,
                true => Some(read_file_meta(r)?),
            },
        },
        T_STORE_CHUNK => Message::StoreChunk {
            chunk_id: r.chunk_id()?,
            cluster_id: ClusterId(r.u16()?),
            payload: r.bytes32()?,
        },
        T_STORE_ACK => Message::StoreAck,
        T_STORE_PIECE => Message::StorePiece { piece: read_piece(r)? },
        T_PIECE_ACK => Message::PieceAck,
        T_GET_PIECE => Message::GetPiece { chunk_id: r.chunk_id()?, index: r.u8()? },
        T_PIECE_REPLY => Message::PieceReply {
            piece: match r.flag()? {
                false => None,
                true => Some(read_piece(r)?),
            },
        },
        T_DELETE_FILE => {
            Message::DeleteFile { user_id: r.str16()?, file_name: r.str16()? }
        }
        T_DELETE_ACK => Message::DeleteAck { found: r.flag()? },
        T_DELETE_PIECE => Message::DeletePiece { chunk_id: r.chunk_id()?, index: r.u8()? },
        T_CANCEL => Message::Cancel { target: r.u64()? },
        T_BIND_CHUNKS => {
            let user_id = r.str16()?;
            let require_present = r.flag()?;
            let count = r.u32()?;
            let mut entries = Vec::new();
            for _ in 0..count {
                entries.push((r.chunk_id()?, r.u32()?));
            }
            Message::BindChunks { user_id, require_present, entries }
        }
        T_BIND_REPLY => {
            let count = r.u32()?;
            let mut entries = Vec::new();
            for _ in 0..count {
                entries.push(BoundChunk {
                    chunk_id: r.chunk_id()?,
                    cluster_id: ClusterId(r.u16()?),
                    stored: r.flag()?,
                });
            }
            Message::BindReply { entries }
        }
        T_RELEASE_CHUNKS => Message::ReleaseChunks { refs: read_refs(r)? },
        T_RELEASE_REPLY => Message::ReleaseReply { dead: read_refs(r)? },
        T_MARK_STORED => {
            Message::MarkStored { chunk_id: r.chunk_id()?, cluster_id: ClusterId(r.u16()?) }
        }
        T_STORED_ACK => Message::StoredAck,
        T_GET_TOPOLOGY => Message::GetTopology,
        T_TOPOLOGY_REPLY => Message::TopologyReply { topology: read_topology(r)? },
        T_GET_STATS => Message::GetStats,
        T_STATS_REPLY => Message::StatsReply {
            stats: NodeStats {
                piece_count: r.u64()?,
                piece_bytes: r.u64()?,
                meta_count: r.u64()?,
                meta_bytes: r.u64()?,
                index_bytes: r.u64()?,
            },
        },
        T_SYNC_META => {
            let user_id = r.str16()?;
            let count = r.u32()?;
            let mut metas = Vec::new();
            for _ in 0..count {
                metas.push(read_file_meta(r)?);
            }
            Message::SyncMeta { user_id, metas }
        }
        T_SYNC_REPLY => {
            let count = r.u32()?;
            let mut metas = Vec::new();
            for _ in 0..count {
                metas.push(read_file_meta(r)?);
            }
            Message::SyncReply { metas }
        }
        T_ERROR_REPLY => {
            let code = ErrorCode::from_u8(r.u8()?).ok_or(WireError::Invalid("error code"))?;
            Message::ErrorReply { code, detail: r.str16()? }
        }
        other => return Err(WireError::UnknownType(other)),
    })
}

/// Serializes a file meta: user, name, timestamp, total length, then one
/// 22-byte (chunk id, cluster) entry per occurrence. Also the at-rest
/// format for metadata snapshots.
pub fn encode_file_meta(meta: &FileMeta, out: &mut Vec<u8>) -> Result<(), WireError> {
    put_str16(out, &meta.user_id)?;
    put_str16(out, &meta.file_name)?;
    put_u64(out, meta.timestamp_ms);
    put_u64(out, meta.total_len);
    encode_refs(&meta.chunks, out)
}

/// Decodes one file meta from the front of `buf`, returning it and the
/// bytes consumed.
pub fn decode_file_meta(buf: &[u8]) -> Result<(FileMeta, usize), WireError> {
    let mut r = Reader::new(buf);
    let meta = read_file_meta(&mut r)?;
    Ok((meta, r.pos))
}

fn read_file_meta(r: &mut Reader<'_>) -> Result<FileMeta, WireError> {
    Ok(FileMeta {
        user_id: r.str16()?,
        file_name: r.str16()?,
        timestamp_ms: r.u64()?,
        total_len: r.u64()?,
        chunks: read_refs(r)?,
    })
}

fn encode_refs(refs: &[ChunkRef], out: &mut Vec<u8>) -> Result<(), WireError> {
    if refs.len() > u32::MAX as usize {
        return Err(WireError::Invalid("too many refs"));
    }
    put_u32(out, refs.len() as u32);
    for r in refs {
        out.extend_from_slice(r.chunk_id.as_bytes());
        put_u16(out, r.cluster_id.0);
    }
    Ok(())
}

fn read_refs(r: &mut Reader<'_>) -> Result<Vec<ChunkRef>, WireError> {
    let count = r.u32()?;
    let mut refs = Vec::new();
    for _ in 0..count {
        refs.push(ChunkRef { chunk_id: r.chunk_id()?, cluster_id: ClusterId(r.u16()?) });
    }
    Ok(refs)
}

fn encode_piece(piece: &CodedPiece, out: &mut Vec<u8>) -> Result<(), WireError> {
    out.extend_from_slice(piece.chunk_id().as_bytes());
    out.push(piece.index());
    out.push(piece.params().n());
    out.push(piece.params().k());
    put_u64(out, piece.original_len());
    put_bytes32(out, piece.payload())
}

fn read_piece(r: &mut Reader<'_>) -> Result<CodedPiece, WireError> {
    let chunk_id = r.chunk_id()?;
    let index = r.u8()?;
    let n = r.u8()?;
    let k = r.u8()?;
    let original_len = r.u64()?;
    let payload = r.bytes32()?;
    let params = CodingParams::new(n, k).map_err(|_| WireError::Invalid("coding params"))?;
    CodedPiece::new(chunk_id, index, params, original_len, payload)
        .map_err(|_| WireError::Invalid("piece geometry"))
}

fn encode_topology(t: &Topology, out: &mut Vec<u8>) -> Result<(), WireError> {
    out.push(match t.mode {
        BindingMode::Clb => 0,
        BindingMode::Ulb => 1,
    });
    out.push(t.params.n());
    out.push(t.params.k());
    put_u64(out, t.cluster_capacity);
    if t.clusters.len() > u16::MAX as usize {
        return Err(WireError::Invalid("too many clusters"));
    }
    put_u16(out, t.clusters.len() as u16);
    for c in &t.clusters {
        put_u16(out, c.id.0);
        if c.members.len() > u8::MAX as usize {
            return Err(WireError::Invalid("too many members"));
        }
        out.push(c.members.len() as u8);
        for m in &c.members {
            put_str16(out, m)?;
        }
    }
    Ok(())
}

fn read_topology(r: &mut Reader<'_>) -> Result<Topology, WireError> {
    let mode = match r.u8()? {
        0 => BindingMode::Clb,
        1 => BindingMode::Ulb,
        _ => return Err(WireError::Invalid("binding mode")),
    };
    let n = r.u8()?;
    let k = r.u8()?;
    let params = CodingParams::new(n, k).map_err(|_| WireError::Invalid("coding params"))?;
    let cluster_capacity = r.u64()?;
    let cluster_count = r.u16()?;
    let mut clusters = Vec::new();
    for _ in 0..cluster_count {
        let id = ClusterId(r.u16()?);
        let member_count = r.u8()?;
        let mut members = Vec::new();
        for _ in 0..member_count {
            members.push(r.str16()?);
        }
        clusters.push(ClusterSpec { id, members });
    }
    Ok(Topology { mode, params, cluster_capacity, clusters })
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_str16(out: &mut Vec<u8>, s: &str) -> Result<(), WireError> {
    if s.len() > u16::MAX as usize {
        return Err(WireError::Invalid("string too long"));
    }
    put_u16(out, s.len() as u16);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_bytes32(out: &mut Vec<u8>, b: &[u8]) -> Result<(), WireError> {
    if b.len() > u32::MAX as usize {
        return Err(WireError::Invalid("byte string too long"));
    }
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::Truncated("body"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(WireError::Invalid("flag byte")),
        }
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn chunk_id(&mut self) -> Result<ChunkId, WireError> {
        Ok(ChunkId::from_bytes(self.take(ChunkId::LEN)?.try_into().unwrap()))
    }

    fn str16(&mut self) -> Result<String, WireError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        core::str::from_utf8(bytes)
            .map(String::from)
            .map_err(|_| WireError::Invalid("utf-8 string"))
    }

    fn bytes32(&mut self) -> Result<Vec<u8>, WireError> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    fn expect_end(&self) -> Result<(), WireError> {
        if self.pos != self.buf.len() {
            return Err(WireError::Invalid("trailing bytes in body"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireError {
    /// Not a full frame yet; `need` is the total frame size required.
    Incomplete { need: usize },
    UnknownType(u8),
    TooLarge { body: usize },
    Truncated(&'static str),
    Invalid(&'static str),
}

impl fmt::Display for WireError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WireError::Incomplete { need } => write!(f, "incomplete frame, need {need} bytes"),
            WireError::UnknownType(t) => write!(f, "unknown message type 0x{t:02X}"),
            WireError::TooLarge { body } => write!(f, "body of {body} bytes exceeds the frame limit"),
            WireError::Truncated(what) => write!(f, "truncated {what}"),
            WireError::Invalid(what) => write!(f, "invalid {what}"),
        }
    }
}

impl core::error::Error for WireError {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::erasure::encode_chunk;
    use alloc::string::ToString;
    use alloc::vec;

    fn meta_sample() -> FileMeta {
        FileMeta {
            user_id: "alice".to_string(),
            file_name: "photos/cat.jpg".to_string(),
            timestamp_ms: 1_700_000_000_123,
            total_len: 12_345,
            chunks: vec![
                ChunkRef { chunk_id: ChunkId::of(b"one"), cluster_id: ClusterId(0) },
                ChunkRef { chunk_id: ChunkId::of(b"two"), cluster_id: ClusterId(3) },
            ],
        }
    }

    fn piece_sample() -> CodedPiece {
        let params = CodingParams::new(4, 2).unwrap();
        encode_chunk(b"piece sample payload", params).unwrap().remove(3)
    }

    fn topology_sample() -> Topology {
        Topology {
            mode: BindingMode::Ulb,
            params: CodingParams::new(2, 1).unwrap(),
            cluster_capacity: 1 << 30,
            clusters: vec![
                ClusterSpec { id: ClusterId(0), members: vec!["n0".into(), "n1".into()] },
                ClusterSpec { id: ClusterId(1), members: vec!["n2".into(), "n3".into()] },
            ],
        }
    }

    fn samples() -> Vec<Message> {
        let meta = meta_sample();
        vec![
            Message::StoreMeta { meta: meta.clone(), chunk_lens: vec![4096, 8249] },
            Message::MissingList { refs: meta.chunks.clone() },
            Message::GetMeta { user_id: "alice".into(), file_name: "a.txt".into() },
            Message::MetaReply { meta: None },
            Message::MetaReply { meta: Some(meta.clone()) },
            Message::StoreChunk {
                chunk_id: ChunkId::of(b"payload"),
                cluster_id: ClusterId(7),
                payload: b"payload".to_vec(),
            },
            Message::StoreAck,
            Message::StorePiece { piece: piece_sample() },
            Message::PieceAck,
            Message::GetPiece { chunk_id: ChunkId::of(b"x"), index: 9 },
            Message::PieceReply { piece: None },
            Message::PieceReply { piece: Some(piece_sample()) },
            Message::DeleteFile { user_id: "alice".into(), file_name: "a.txt".into() },
            Message::DeleteAck { found: true },
            Message::DeletePiece { chunk_id: ChunkId::of(b"x"), index: 0 },
            Message::Cancel { target: 42 },
            Message::BindChunks {
                user_id: "bob".into(),
                require_present: true,
                entries: vec![(ChunkId::of(b"e"), 4096), (ChunkId::of(b"f"), 100)],
            },
            Message::BindReply {
                entries: vec![BoundChunk {
                    chunk_id: ChunkId::of(b"e"),
                    cluster_id: ClusterId(1),
                    stored: false,
                }],
            },
            Message::ReleaseChunks { refs: meta.chunks.clone() },
            Message::ReleaseReply { dead: vec![meta.chunks[1]] },
            Message::MarkStored { chunk_id: ChunkId::of(b"e"), cluster_id: ClusterId(1) },
            Message::StoredAck,
            Message::GetTopology,
            Message::TopologyReply { topology: topology_sample() },
            Message::GetStats,
            Message::StatsReply {
                stats: NodeStats {
                    piece_count: 1,
                    piece_bytes: 2,
                    meta_count: 3,
                    meta_bytes: 4,
                    index_bytes: 5,
                },
            },
            Message::SyncMeta { user_id: "alice".into(), metas: vec![meta.clone()] },
            Message::SyncReply { metas: vec![meta] },
            Message::ErrorReply { code: ErrorCode::NotFound, detail: "no such file".into() },
        ]
    }

    #[test]
    fn every_variant_round_trips() {
        for (i, message) in samples().into_iter().enumerate() {
            let env = Envelope { request_id: 1000 + i as u64, message };
            let frame = encode(&env).unwrap();
            assert_eq!(encoded_len(&env).unwrap(), frame.len());
            let (back, consumed) = decode(&frame).unwrap();
            assert_eq!(consumed, frame.len(), "sample {i}");
            assert_eq!(back, env, "sample {i}");
        }
    }

    #[test]
    fn get_piece_frame_is_34_bytes() {
        let id = ChunkId::of(b"frame layout");
        let env = Envelope {
            request_id: 0x0102030405060708,
            message: Message::GetPiece { chunk_id: id, index: 7 },
        };
        let frame = encode(&env).unwrap();
        assert_eq!(frame.len(), 34);
        assert_eq!(&frame[..4], &30u32.to_be_bytes());
        assert_eq!(frame[4], 0x09);
        assert_eq!(&frame[5..13], &[1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(&frame[13..33], id.as_bytes());
        assert_eq!(frame[33], 7);
    }

    #[test]
    fn partial_frames_report_needed_bytes() {
        let env = Envelope { request_id: 1, message: Message::StoreAck };
        let frame = encode(&env).unwrap();

        assert_eq!(decode(&frame[..3]), Err(WireError::Incomplete { need: 4 }));
        for cut in 4..frame.len() {
            assert_eq!(decode(&frame[..cut]), Err(WireError::Incomplete { need: frame.len() }));
        }
    }

    #[test]
    fn trailing_bytes_are_left_for_the_next_frame() {
        let first = encode(&Envelope { request_id: 1, message: Message::GetTopology }).unwrap();
        let second = encode(&Envelope { request_id: 2, message: Message::Cancel { target: 1 } })
            .unwrap();
        let mut buf = first.clone();
        buf.extend_from_slice(&second);

        let (env1, used1) = decode(&buf).unwrap();
        assert_eq!(used1, first.len());
        assert_eq!(env1.request_id, 1);
        let (env2, used2) = decode(&buf[used1..]).unwrap();
        assert_eq!(used2, second.len());
        assert_eq!(env2.message, Message::Cancel { target: 1 });
    }

    #[test]
    fn unknown_type_carries_the_code() {
        let mut frame = encode(&Envelope { request_id: 9, message: Message::StoreAck }).unwrap();
        frame[4] = 0xFF;
        assert_eq!(decode(&frame), Err(WireError::UnknownType(0xFF)));
    }

    #[test]
    fn structural_garbage_is_rejected() {
        // Declared length smaller than the fixed header.
        let mut tiny = vec![0, 0, 0, 5];
        tiny.extend_from_slice(&[1u8; 5]);
        assert_eq!(decode(&tiny), Err(WireError::Invalid("length below header size")));

        // Body longer than its message needs.
        let mut padded = encode(&Envelope { request_id: 1, message: Message::StoreAck }).unwrap();
        padded.push(0xAB);
        let fixed_len = (padded.len() - 4) as u32;
        padded[..4].copy_from_slice(&fixed_len.to_be_bytes());
        assert_eq!(decode(&padded), Err(WireError::Invalid("trailing bytes in body")));

        // Body shorter than its fields claim.
        let mut get = encode(&Envelope {
            request_id: 1,
            message: Message::GetPiece { chunk_id: ChunkId::of(b"z"), index: 1 },
        })
        .unwrap();
        get.truncate(20);
        let fixed_len = (get.len() - 4) as u32;
        get[..4].copy_from_slice(&fixed_len.to_be_bytes());
        assert_eq!(decode(&get), Err(WireError::Truncated("body")));

        // Flag byte that is neither 0 nor 1.
        let mut reply = encode(&Envelope { request_id: 1, message: Message::MetaReply { meta: None } })
            .unwrap();
        reply[13] = 7;
        assert_eq!(decode(&reply), Err(WireError::Invalid("flag byte")));

        // Error code outside the catalogue.
        let mut err = encode(&Envelope {
            request_id: 1,
            message: Message::ErrorReply { code: ErrorCode::Internal, detail: "x".into() },
        })
        .unwrap();
        err[13] = 0xEE;
        assert_eq!(decode(&err), Err(WireError::Invalid("error code")));

        // Invalid utf-8 inside a string field.
        let mut name = encode(&Envelope {
            request_id: 1,
            message: Message::GetMeta { user_id: "ab".into(), file_name: "cd".into() },
        })
        .unwrap();
        name[15] = 0xFF;
        name[16] = 0xFE;
        assert_eq!(decode(&name), Err(WireError::Invalid("utf-8 string")));
    }

    #[test]
    fn store_meta_length_table_must_match_entries() {
        let meta = meta_sample();
        let env = Envelope {
            request_id: 1,
            message: Message::StoreMeta { meta, chunk_lens: vec![1] },
        };
        assert_eq!(encode(&env), Err(WireError::Invalid("length table size")));
    }

    #[test]
    fn file_meta_round_trips_standalone() {
        let meta = meta_sample();
        let mut buf = Vec::new();
        encode_file_meta(&meta, &mut buf).unwrap();
        let (back, used) = decode_file_meta(&buf).unwrap();
        assert_eq!(used, buf.len());
        assert_eq!(back, meta);
    }

    #[test]
    fn mutated_piece_geometry_is_rejected() {
        let env = Envelope { request_id: 1, message: Message::StorePiece { piece: piece_sample() } };
        let mut frame = encode(&env).unwrap();
        // Corrupt k so that n < k.
        frame[13 + 20 + 2] = 9;
        assert!(matches!(decode(&frame), Err(WireError::Invalid(_))));
    }
}
