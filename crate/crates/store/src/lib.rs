//! Deployment side of shardstore: piece stores, the node and client
//! state machines, a deterministic network simulator, a socket runtime,
//! configuration parsing, and the measurement harness.

pub mod client;
pub mod config;
pub mod endpoint;
pub mod harness;
pub mod node;
pub mod piecestore;
pub mod sim;
pub mod sockets;
