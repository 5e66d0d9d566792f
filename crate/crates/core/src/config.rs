//! Flat `key = value` daemon configuration.
//!
//! One key per line, `#` starts a comment. Peers are described with keys of
//! the form `peer.<node_id>.<field>`:
//!
//! ```text
//! node_id = 0
//! arena_path = /dev/shm/store0.arena
//! arena_capacity_bytes = 1342177280
//! client_socket_path = /tmp/store0.sock
//! peer_listen = 127.0.0.1:7100
//! allocator_coalescing = true
//! log_level = info
//!
//! peer.1.address = 127.0.0.1:7101
//! peer.1.backing_path = /dev/shm/store1.arena
//! peer.1.bandwidth_ratio = 0.885
//! peer.1.per_access_latency_ns = 0
//! peer.1.peer_rpc_latency_ns = 2500000
//! ```
//!
//! Optional keys: `local_reference_bandwidth` (bytes/s, skips calibration)
//! and `peer_wait_ms` (how long to wait for peer arena files at startup).

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::arena::{NodeId, RemoteAccessModel};
use crate::peer::PeerEndpoint;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeerConfig {
    pub endpoint: PeerEndpoint,
    pub backing_path: PathBuf,
    pub access_model: RemoteAccessModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaemonConfig {
    pub node_id: NodeId,
    pub arena_path: PathBuf,
    pub arena_capacity_bytes: u64,
    pub client_socket_path: PathBuf,
    pub peer_listen: String,
    pub peers: Vec<PeerConfig>,
    pub allocator_coalescing: bool,
    pub log_level: String,
    pub local_reference_bandwidth: Option<f64>,
    pub peer_wait: Duration,
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.parse().map_err(|e: T::Err| ConfigError::Invalid {
        key: key.to_string(),
        message: e.to_string(),
    })
}

fn split_host_port(key: &str, addr: &str) -> Result<(String, u16), ConfigError> {
    let (host, port) = addr.rsplit_once(':').ok_or_else(|| ConfigError::Invalid {
        key: key.to_string(),
        message: format!("`{addr}` is not host:port"),
    })?;
    Ok((host.trim_matches(['[', ']']).to_string(), parse_value(key, port)?))
}

impl DaemonConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        text.parse()
    }

    /// A single-store config with no peers; handy for tests and demos.
    pub fn standalone(node_id: NodeId, arena_path: PathBuf, capacity: u64, socket: PathBuf) -> Self {
        Self {
            node_id,
            arena_path,
            arena_capacity_bytes: capacity,
            client_socket_path: socket,
            peer_listen: "127.0.0.1:0".into(),
            peers: Vec::new(),
            allocator_coalescing: true,
            log_level: "info".into(),
            local_reference_bandwidth: None,
            peer_wait: Duration::from_secs(30),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: String| ConfigError::Invalid {
            key: key.to_string(),
            message,
        };
        if self.arena_capacity_bytes == 0 {
            return Err(invalid("arena_capacity_bytes", "must be positive".into()));
        }
        let mut seen = HashSet::from([self.node_id]);
        for p in &self.peers {
            if !seen.insert(p.endpoint.node_id) {
                return Err(invalid(
                    &format!("peer.{}", p.endpoint.node_id),
                    format!("node id {} is not unique", p.endpoint.node_id),
                ));
            }
            p.access_model
                .validate()
                .map_err(|e| invalid(&format!("peer.{}", p.endpoint.node_id), e.to_string()))?;
        }
        if let Some(bw) = self.local_reference_bandwidth {
            if !(bw.is_finite() && bw > 0.0) {
                return Err(invalid("local_reference_bandwidth", "must be positive".into()));
            }
        }
        Ok(())
    }

    /// Renders the config back into its file format.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "node_id = {}\narena_path = {}\narena_capacity_bytes = {}\nclient_socket_path = {}\n\
             peer_listen = {}\nallocator_coalescing = {}\nlog_level = {}\npeer_wait_ms = {}\n",
            self.node_id,
            self.arena_path.display(),
            self.arena_capacity_bytes,
            self.client_socket_path.display(),
            self.peer_listen,
            self.allocator_coalescing,
            self.log_level,
            self.peer_wait.as_millis(),
        );
        if let Some(bw) = self.local_reference_bandwidth {
            out.push_str(&format!("local_reference_bandwidth = {bw}\n"));
        }
        for p in &self.peers {
            let n = p.endpoint.node_id;
            out.push_str(&format!(
                "peer.{n}.address = {}:{}\npeer.{n}.backing_path = {}\npeer.{n}.bandwidth_ratio = {}\n\
                 peer.{n}.per_access_latency_ns = {}\npeer.{n}.peer_rpc_latency_ns = {}\n",
                p.endpoint.host,
                p.endpoint.port,
                p.backing_path.display(),
                p.access_model.bandwidth_ratio,
                p.access_model.per_access_latency.as_nanos(),
                p.access_model.peer_rpc_latency.as_nanos(),
            ));
        }
        out
    }
}

#[derive(Default)]
struct PeerKeys {
    address: Option<String>,
    backing_path: Option<PathBuf>,
    model: RemoteAccessModel,
}

impl FromStr for DaemonConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut keys: BTreeMap<String, String> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split_once('#').map_or(line, |(before, _)| before).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: "expected key = value".into(),
            })?;
            let k = k.trim().to_string();
            if keys.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    message: format!("duplicate key `{k}`"),
                });
            }
        }

        let mut take = |key: &'static str| keys.remove(key);
        let node_id: NodeId = parse_value("node_id", &take("node_id").ok_or(ConfigError::Missing("node_id"))?)?;
        let arena_path = PathBuf::from(take("arena_path").ok_or(ConfigError::Missing("arena_path"))?);
        let arena_capacity_bytes = parse_value(
            "arena_capacity_bytes",
            &take("arena_capacity_bytes").ok_or(ConfigError::Missing("arena_capacity_bytes"))?,
        )?;
        let client_socket_path = PathBuf::from(take("client_socket_path").ok_or(ConfigError::Missing("client_socket_path"))?);
        let peer_listen = take("peer_listen").ok_or(ConfigError::Missing("peer_listen"))?;
        let allocator_coalescing = match take("allocator_coalescing") {
            Some(v) => parse_value("allocator_coalescing", &v)?,
            None => true,
        };
        let log_level = take("log_level").unwrap_or_else(|| "info".into());
        let local_reference_bandwidth = take("local_reference_bandwidth")
            .map(|v| parse_value("local_reference_bandwidth", &v))
            .transpose()?;
        let peer_wait = match take("peer_wait_ms") {
            Some(v) => Duration::from_millis(parse_value("peer_wait_ms", &v)?),
            None => Duration::from_secs(30),
        };

        let mut peers: BTreeMap<NodeId, PeerKeys> = BTreeMap::new();
        for (key, value) in keys {
            let mut parts = key.splitn(3, '.');
            let (Some("peer"), Some(id), Some(field)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(ConfigError::Invalid {
                    key,
                    message: "unknown key".into(),
                });
            };
            let id: NodeId = parse_value(&key, id)?;
            let p = peers.entry(id).or_default();
            match field {
                "address" => p.address = Some(value),
                "backing_path" => p.backing_path = Some(PathBuf::from(value)),
                "bandwidth_ratio" => p.model.bandwidth_ratio = parse_value(&key, &value)?,
                "per_access_latency_ns" => p.model.per_access_latency = Duration::from_nanos(parse_value(&key, &value)?),
                "peer_rpc_latency_ns" => p.model.peer_rpc_latency = Duration::from_nanos(parse_value(&key, &value)?),
                _ => {
                    return Err(ConfigError::Invalid {
                        key,
                        message: "unknown peer field".into(),
                    })
                }
            }
        }
        let peers = peers
            .into_iter()
            .map(|(node_id, p)| {
                let addr_key = format!("peer.{node_id}.address");
                let address = p.address.ok_or_else(|| ConfigError::Invalid {
                    key: addr_key.clone(),
                    message: "missing".into(),
                })?;
                let (host, port) = split_host_port(&addr_key, &address)?;
                let backing_path = p.backing_path.ok_or_else(|| ConfigError::Invalid {
                    key: format!("peer.{node_id}.backing_path"),
                    message: "missing".into(),
                })?;
                Ok(PeerConfig {
                    endpoint: PeerEndpoint::new(host, port, node_id),
                    backing_path,
                    access_model: p.model,
                })
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;

        let config = DaemonConfig {
            node_id,
            arena_path,
            arena_capacity_bytes,
            client_socket_path,
            peer_listen,
            peers,
            allocator_coalescing,
            log_level,
            local_reference_bandwidth,
            peer_wait,
        };
        config.validate()?;
        Ok(config)
    }
}
