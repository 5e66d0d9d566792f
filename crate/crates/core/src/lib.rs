//! Immutable object store over memory-disaggregated arenas.
//!
//! Each store daemon owns one memory-mapped arena and serves local clients
//! over a Unix socket. Stores on other nodes are reached for metadata over
//! TCP; their arenas are mapped read-only and accessed directly, paying a
//! configurable remote access penalty.

pub mod allocator;
pub mod arena;
pub mod bench;
pub mod client;
pub mod config;
pub mod daemon;
pub mod frame;
pub mod id;
pub mod ipc;
pub mod peer;
mod service;
pub mod store;

pub use allocator::ArenaAllocator;
pub use arena::{MemoryRegion, NodeId, RemoteAccessModel};
pub use client::ClientSession;
pub use config::DaemonConfig;
pub use daemon::Daemon;
pub use id::ObjectId;
pub use store::Store;
