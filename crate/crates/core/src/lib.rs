#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

//! Core primitives for a deduplicating, erasure-coded chunk store.
//!
//! Everything in this crate is pure computation over byte slices and
//! in-memory tables: content-defined chunking, Reed-Solomon coding over
//! GF(2^8), file metadata with reference counting, cluster binding
//! policies, and the wire codec. IO, transports, simulation, and the
//! command-line tools live in the companion `shardstore` crate.

extern crate alloc;

pub mod binding;
pub mod chunking;
pub mod erasure;
pub mod gf256;
pub mod metadata;
pub mod sha1;
pub mod wire;

pub use binding::{BindingMode, BindingPolicy, ClusterId, ClusterSpec, ClusterState, Topology};
pub use chunking::{chunk_stream, Chunk, ChunkId, ChunkParams};
pub use erasure::{decode_chunk, encode_chunk, expansion, CodedPiece, CodingParams};
pub use metadata::{
    build_file_meta, missing_chunks, sync_meta, ChunkMetaTable, ChunkRef, FileMeta, RefCountTable,
};
pub use wire::{Envelope, ErrorCode, Message};
