#![allow(dead_code)]

pub mod fuzz;
pub mod messages;
pub mod oracle;

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use disagg_store::arena::{NodeId, RemoteAccessModel};
use disagg_store::config::{DaemonConfig, PeerConfig};
use disagg_store::peer::PeerEndpoint;
use disagg_store::store::Store;
use disagg_store::{ClientSession, Daemon};

pub fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

pub struct NodeSpec {
    pub capacity: u64,
    pub model: RemoteAccessModel,
}

impl NodeSpec {
    pub fn new(capacity: u64) -> Self {
        Self {
            capacity,
            model: RemoteAccessModel {
                peer_rpc_latency: Duration::ZERO,
                ..RemoteAccessModel::default()
            },
        }
    }
}

/// Two or more in-process daemons, each peered with all the others.
pub struct Cluster {
    // declared first so daemons shut down before their directory goes away
    pub daemons: Vec<Option<Daemon>>,
    pub configs: Vec<DaemonConfig>,
    pub dir: tempfile::TempDir,
}

impl Cluster {
    pub fn start(nodes: &[NodeSpec]) -> Self {
        Self::start_in(tempfile::tempdir().unwrap(), nodes, Some(1e10))
    }

    /// Arenas under /dev/shm, reference bandwidth calibrated.
    pub fn start_shm(nodes: &[NodeSpec]) -> Self {
        let dir = tempfile::Builder::new().prefix("disagg-").tempdir_in("/dev/shm").unwrap();
        Self::start_in(dir, nodes, None)
    }

    pub fn start_in(dir: tempfile::TempDir, nodes: &[NodeSpec], reference_bandwidth: Option<f64>) -> Self {
        let ports: Vec<u16> = nodes.iter().map(|_| free_port()).collect();
        let arena = |i: usize| dir.path().join(format!("node{i}.arena"));
        let configs: Vec<DaemonConfig> = (0..nodes.len())
            .map(|i| {
                let mut c = DaemonConfig::standalone(
                    i as NodeId,
                    arena(i),
                    nodes[i].capacity,
                    dir.path().join(format!("node{i}.sock")),
                );
                c.peer_listen = format!("127.0.0.1:{}", ports[i]);
                c.local_reference_bandwidth = reference_bandwidth;
                c.peers = (0..nodes.len())
                    .filter(|&j| j != i)
                    .map(|j| PeerConfig {
                        endpoint: PeerEndpoint::new("127.0.0.1", ports[j], j as NodeId),
                        backing_path: arena(j),
                        access_model: nodes[j].model,
                    })
                    .collect();
                c
            })
            .collect();
        for (i, n) in nodes.iter().enumerate() {
            let f = std::fs::File::create(arena(i)).unwrap();
            f.set_len(n.capacity).unwrap();
        }
        let daemons = configs.iter().map(|c| Some(Daemon::start(c).unwrap())).collect();
        Self { daemons, configs, dir }
    }

    pub fn daemon(&self, i: usize) -> &Daemon {
        self.daemons[i].as_ref().expect("daemon stopped")
    }

    pub fn store(&self, i: usize) -> &Arc<Store> {
        self.daemon(i).store()
    }

    pub fn socket(&self, i: usize) -> PathBuf {
        self.configs[i].client_socket_path.clone()
    }

    pub fn client(&self, i: usize) -> ClientSession {
        ClientSession::connect(self.socket(i)).unwrap()
    }

    pub fn stop(&mut self, i: usize) {
        if let Some(d) = self.daemons[i].take() {
            d.shutdown().unwrap();
        }
    }

    pub fn dir(&self) -> &Path {
        self.dir.path()
    }
}

/// Polls `cond` until it holds or `patience` runs out.
pub fn eventually(patience: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = std::time::Instant::now() + patience;
    loop {
        if cond() {
            return true;
        }
        if std::time::Instant::now() >= deadline {
            return false;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
}
