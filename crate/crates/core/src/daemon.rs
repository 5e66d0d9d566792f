//! Store daemon assembly: arena, store, peer service and client listener.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;
use tracing::info;

use crate::arena::{self, ArenaError, MemoryRegion};
use crate::config::{ConfigError, DaemonConfig};
use crate::ipc::{Advertisement, IpcError, IpcServer, RemoteArena};
use crate::peer::{PeerClient, PeerError, PeerLink, PeerServer};
use crate::store::{Store, StoreOptions};

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("arena: {0}")]
    Arena(#[from] ArenaError),
    #[error(transparent)]
    Peer(#[from] PeerError),
    #[error(transparent)]
    Ipc(#[from] IpcError),
    #[error("peer arena {0} did not appear")]
    PeerArenaMissing(PathBuf),
    #[error("cannot install signal handler: {0}")]
    Signal(std::io::Error),
}

pub struct Daemon {
    store: Arc<Store>,
    ipc: Option<IpcServer>,
    peer: Option<PeerServer>,
    socket_path: PathBuf,
}

fn wait_for_file(path: &Path, patience: Duration) -> Result<(), DaemonError> {
    let deadline = Instant::now() + patience;
    while std::fs::File::open(path).is_err() {
        if Instant::now() >= deadline {
            return Err(DaemonError::PeerArenaMissing(path.to_path_buf()));
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    Ok(())
}

impl Daemon {
    pub fn start(config: &DaemonConfig) -> Result<Self, DaemonError> {
        config.validate()?;
        let region = Arc::new(MemoryRegion::create(
            config.node_id,
            config.arena_capacity_bytes,
            &config.arena_path,
        )?);
        for p in &config.peers {
            wait_for_file(&p.backing_path, config.peer_wait)?;
        }
        let reference_bandwidth = config
            .local_reference_bandwidth
            .unwrap_or_else(|| arena::measure_local_bandwidth(arena::CALIBRATION_BYTES));

        let peers: Vec<Arc<dyn PeerLink>> = config
            .peers
            .iter()
            .map(|p| Arc::new(PeerClient::new(p.endpoint.clone(), p.access_model.peer_rpc_latency)) as Arc<dyn PeerLink>)
            .collect();
        let options = StoreOptions {
            coalescing: config.allocator_coalescing,
            ..StoreOptions::default()
        };
        let store = Arc::new(Store::new(region, peers, options));

        let peer = PeerServer::serve(config.peer_listen.as_str(), Arc::clone(&store))?;
        let advert = Advertisement {
            reference_bandwidth,
            remotes: config
                .peers
                .iter()
                .map(|p| RemoteArena {
                    node_id: p.endpoint.node_id,
                    backing_path: p.backing_path.clone(),
                    access_model: p.access_model,
                })
                .collect(),
        };
        let ipc = IpcServer::bind(&config.client_socket_path, Arc::clone(&store), advert)?;
        info!(
            node = config.node_id,
            capacity = config.arena_capacity_bytes,
            reference_bandwidth,
            peer_addr = %peer.local_addr(),
            "store daemon started"
        );
        Ok(Self {
            store,
            ipc: Some(ipc),
            peer: Some(peer),
            socket_path: config.client_socket_path.clone(),
        })
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn socket_path(&self) -> &Path {
        &self.socket_path
    }

    pub fn peer_addr(&self) -> SocketAddr {
        self.peer.as_ref().expect("running daemon").local_addr()
    }

    /// Stops both listeners and flushes the arena.
    pub fn shutdown(mut self) -> Result<(), DaemonError> {
        self.stop();
        self.store.region().flush()?;
        info!(node = self.store.node_id(), "store daemon stopped");
        Ok(())
    }

    fn stop(&mut self) {
        if let Some(ipc) = self.ipc.take() {
            ipc.shutdown();
        }
        if let Some(peer) = self.peer.take() {
            peer.shutdown();
        }
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Runs a daemon until SIGINT or SIGTERM.
pub fn run(config: &DaemonConfig) -> Result<(), DaemonError> {
    let stop = Arc::new(AtomicBool::new(false));
    for signal in [signal_hook::consts::SIGINT, signal_hook::consts::SIGTERM] {
        signal_hook::flag::register(signal, Arc::clone(&stop)).map_err(DaemonError::Signal)?;
    }
    let daemon = Daemon::start(config)?;
    while !stop.load(Ordering::Relaxed) {
        std::thread::sleep(Duration::from_millis(50));
    }
    daemon.shutdown()
}
