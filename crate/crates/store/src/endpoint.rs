//! Types shared by every endpoint implementation: the actions an
//! endpoint hands back to its driver, the commands a client accepts,
//! and the per-operation reports it emits.

use shardstore_core::wire::ErrorCode;
use shardstore_core::{ChunkId, Envelope};

/// One effect requested by an endpoint. Drivers (the simulator or the
/// socket runtimes) own delivery; endpoints never perform IO.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send { to: String, env: Envelope },
}

/// Client-level operations, issued by the harness or the CLI.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    /// Store `data` under `name`. `timestamp_ms` orders concurrent
    /// writers of the same file.
    Put { name: String, data: Vec<u8>, timestamp_ms: u64 },
    Get { name: String },
    Delete { name: String },
    /// Reconcile the local metadata table with the switching node.
    Sync,
}

impl Command {
    pub fn kind(&self) -> OpKind {
        match self {
            Command::Put { .. } => OpKind::Put,
            Command::Get { .. } => OpKind::Get,
            Command::Delete { .. } => OpKind::Delete,
            Command::Sync => OpKind::Sync,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Command::Put { name, .. } | Command::Get { name } | Command::Delete { name } => name,
            Command::Sync => "",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Put,
    Get,
    Delete,
    Sync,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Put => "put",
            OpKind::Get => "get",
            OpKind::Delete => "delete",
            OpKind::Sync => "sync",
        }
    }
}

/// Outcome of one completed client operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpReport {
    pub user_id: String,
    pub kind: OpKind,
    pub file_name: String,
    pub issued_ns: u64,
    pub completed_ns: u64,
    pub ok: bool,
    pub error: Option<ErrorCode>,
    pub detail: String,
    /// Payload bytes moved: file length for get, chunk bytes actually
    /// uploaded (after dedup) for put.
    pub bytes: u64,
    /// Digest of the fully reassembled file, gets only.
    pub digest: Option<ChunkId>,
    pub chunks_total: u32,
    /// Chunks the switch reported absent and we had to upload.
    pub chunks_sent: u32,
}

impl OpReport {
    pub fn elapsed_ns(&self) -> u64 {
        self.completed_ns.saturating_sub(self.issued_ns)
    }

    pub fn elapsed_ms(&self) -> f64 {
        self.elapsed_ns() as f64 / 1_000_000.0
    }
}
