//! Client/store protocol over a Unix stream socket.
//!
//! Only buffer descriptors cross the socket. Clients map the arenas named in
//! the hello response and move payload bytes through those mappings.
//!
//! Frames share the peer protocol's shape, `[u32 LE len][u8 type][payload]`.
//! The hello response layout is:
//!
//! ```text
//! status u8 | protocol_version u32 | local_node_id u32 | reference_bandwidth f64
//! | arena count u32 | arenas...
//! arena: node_id u32 | kind u8 (0 owned, 1 remote) | capacity u64
//!        | per_access_latency_ns u64 | bandwidth_ratio f64 | peer_rpc_latency_ns u64
//!        | path_len u16 | path (UTF-8)
//! ```

use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;
use tracing::{debug, info, warn};

use crate::arena::{NodeId, RegionKind, RemoteAccessModel};
use crate::frame::{self, FrameError, Reader};
use crate::id::{ObjectId, OBJECT_ID_LEN};
use crate::service::Connections;
use crate::store::{ClientId, Store, StoreError};

pub const PROTOCOL_VERSION: u32 = 1;

pub const CREATE_REQ: u8 = 0x10;
pub const CREATE_RESP: u8 = 0x11;
pub const SEAL_REQ: u8 = 0x12;
pub const SEAL_RESP: u8 = 0x13;
pub const GET_REQ: u8 = 0x14;
pub const GET_RESP: u8 = 0x15;
pub const RELEASE_REQ: u8 = 0x16;
pub const RELEASE_RESP: u8 = 0x17;
pub const HELLO_REQ: u8 = 0x18;
pub const HELLO_RESP: u8 = 0x19;
pub const EVICT_REQ: u8 = 0x1a;
pub const EVICT_RESP: u8 = 0x1b;

const DESCRIPTOR_LEN: usize = 29;
const ACCEPT_POLL: Duration = Duration::from_millis(2);

/// Where an object's bytes live: data at `offset`, metadata right after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct BufferDescriptor {
    pub node_id: NodeId,
    pub offset: u64,
    pub data_size: u64,
    pub metadata_size: u64,
    pub writable: bool,
}

impl BufferDescriptor {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.node_id.to_le_bytes());
        out.extend_from_slice(&self.offset.to_le_bytes());
        out.extend_from_slice(&self.data_size.to_le_bytes());
        out.extend_from_slice(&self.metadata_size.to_le_bytes());
        out.push(u8::from(self.writable));
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, FrameError> {
        Ok(Self {
            node_id: r.u32()?,
            offset: r.u64()?,
            data_size: r.u64()?,
            metadata_size: r.u64()?,
            writable: r.bool()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    NotFound = 1,
    Exists = 2,
    OutOfMemory = 3,
    Timeout = 4,
    ProtocolError = 5,
    PeerUnreachable = 6,
    NotReferenced = 7,
    AlreadySealed = 8,
    InvalidArgument = 9,
}

impl Status {
    pub const ALL: [Status; 10] = [
        Status::Ok,
        Status::NotFound,
        Status::Exists,
        Status::OutOfMemory,
        Status::Timeout,
        Status::ProtocolError,
        Status::PeerUnreachable,
        Status::NotReferenced,
        Status::AlreadySealed,
        Status::InvalidArgument,
    ];

    pub fn from_u8(b: u8) -> Option<Self> {
        Self::ALL.get(b as usize).copied()
    }
}

impl From<&StoreError> for Status {
    fn from(e: &StoreError) -> Self {
        match e {
            StoreError::ObjectExists(_) => Status::Exists,
            StoreError::ObjectNotFound(_) => Status::NotFound,
            StoreError::AlreadySealed(_) => Status::AlreadySealed,
            StoreError::NotReferenced(_) => Status::NotReferenced,
            StoreError::OutOfMemory { .. } => Status::OutOfMemory,
            StoreError::InvalidSize | StoreError::EmptyRequest => Status::InvalidArgument,
            StoreError::PeerUnreachable { .. } => Status::PeerUnreachable,
            StoreError::Arena(_) => Status::ProtocolError,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArenaSpec {
    pub node_id: NodeId,
    pub kind: RegionKind,
    pub capacity: u64,
    pub backing_path: PathBuf,
    /// Present for remote views only.
    pub access_model: Option<RemoteAccessModel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreHello {
    pub protocol_version: u32,
    pub local_node_id: NodeId,
    /// Local copy bandwidth (bytes/s) that remote read penalties scale from.
    pub reference_bandwidth: f64,
    pub arenas: Vec<ArenaSpec>,
}

impl StoreHello {
    /// Checks there is exactly one owned arena, belonging to the local node.
    pub fn validate(&self) -> Result<(), String> {
        let owned: Vec<_> = self.arenas.iter().filter(|a| a.kind == RegionKind::LocalOwned).collect();
        match owned.as_slice() {
            [one] if one.node_id == self.local_node_id => {}
            _ => return Err(format!("{} owned arenas advertised", owned.len())),
        }
        let mut ids: Vec<NodeId> = self.arenas.iter().map(|a| a.node_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.arenas.len() {
            return Err("duplicate node ids in hello".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    CreateRequest { id: ObjectId, data_size: u64, metadata_size: u64 },
    CreateResponse { status: Status, descriptor: BufferDescriptor },
    SealRequest { id: ObjectId },
    SealResponse { status: Status },
    GetRequest { ids: Vec<ObjectId>, timeout_ms: u64 },
    GetResponse { results: Vec<(Status, BufferDescriptor)> },
    ReleaseRequest { id: ObjectId },
    ReleaseResponse { status: Status },
    HelloRequest { protocol_version: u32 },
    HelloResponse { status: Status, hello: StoreHello },
    EvictRequest { bytes: u64 },
    EvictResponse { status: Status, freed: u64 },
}

fn status(r: &mut Reader<'_>) -> Result<Status, FrameError> {
    let b = r.u8()?;
    Status::from_u8(b).ok_or_else(|| r.malformed())
}

impl Message {
    pub fn kind(&self) -> u8 {
        match self {
            Self::CreateRequest { .. } => CREATE_REQ,
            Self::CreateResponse { .. } => CREATE_RESP,
            Self::SealRequest { .. } => SEAL_REQ,
            Self::SealResponse { .. } => SEAL_RESP,
            Self::GetRequest { .. } => GET_REQ,
            Self::GetResponse { .. } => GET_RESP,
            Self::ReleaseRequest { .. } => RELEASE_REQ,
            Self::ReleaseResponse { .. } => RELEASE_RESP,
            Self::HelloRequest { .. } => HELLO_REQ,
            Self::HelloResponse { .. } => HELLO_RESP,
            Self::EvictRequest { .. } => EVICT_REQ,
            Self::EvictResponse { .. } => EVICT_RESP,
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Self::CreateRequest {
                id,
                data_size,
                metadata_size,
            } => {
                out.extend_from_slice(id.as_bytes());
                out.extend_from_slice(&data_size.to_le_bytes());
                out.extend_from_slice(&metadata_size.to_le_bytes());
            }
            Self::CreateResponse { status, descriptor } => {
                out.push(*status as u8);
                descriptor.encode_into(&mut out);
            }
            Self::SealRequest { id } | Self::ReleaseRequest { id } => out.extend_from_slice(id.as_bytes()),
            Self::SealResponse { status } | Self::ReleaseResponse { status } => out.push(*status as u8),
            Self::GetRequest { ids, timeout_ms } => {
                out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
                for id in ids {
                    out.extend_from_slice(id.as_bytes());
                }
                out.extend_from_slice(&timeout_ms.to_le_bytes());
            }
            Self::GetResponse { results } => {
                for (status, d) in results {
                    out.push(*status as u8);
                    d.encode_into(&mut out);
                }
            }
            Self::HelloRequest { protocol_version } => out.extend_from_slice(&protocol_version.to_le_bytes()),
            Self::EvictRequest { bytes } => out.extend_from_slice(&bytes.to_le_bytes()),
            Self::EvictResponse { status, freed } => {
                out.push(*status as u8);
                out.extend_from_slice(&freed.to_le_bytes());
            }
            Self::HelloResponse { status, hello } => {
                out.push(*status as u8);
                out.extend_from_slice(&hello.protocol_version.to_le_bytes());
                out.extend_from_slice(&hello.local_node_id.to_le_bytes());
                out.extend_from_slice(&hello.reference_bandwidth.to_bits().to_le_bytes());
                out.extend_from_slice(&(hello.arenas.len() as u32).to_le_bytes());
                for a in &hello.arenas {
                    out.extend_from_slice(&a.node_id.to_le_bytes());
                    out.push(match a.kind {
                        RegionKind::LocalOwned => 0,
                        RegionKind::RemoteView => 1,
                    });
                    out.extend_from_slice(&a.capacity.to_le_bytes());
                    let m = a.access_model.unwrap_or_else(RemoteAccessModel::transparent);
                    out.extend_from_slice(&(m.per_access_latency.as_nanos() as u64).to_le_bytes());
                    out.extend_from_slice(&m.bandwidth_ratio.to_bits().to_le_bytes());
                    out.extend_from_slice(&(m.peer_rpc_latency.as_nanos() as u64).to_le_bytes());
                    let path = a.backing_path.to_string_lossy();
                    let path = path.as_bytes();
                    let len = path.len().min(u16::MAX as usize);
                    out.extend_from_slice(&(len as u16).to_le_bytes());
                    out.extend_from_slice(&path[..len]);
                }
            }
        }
        out
    }

    /// Full wire frame: header plus payload.
    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        frame::encode_frame(self.kind(), &self.encode_payload())
    }

    pub fn decode(kind: u8, payload: &[u8]) -> Result<Self, FrameError> {
        let msg = match kind {
            CREATE_REQ => {
                let mut r = Reader::new(payload, "create request");
                let msg = Self::CreateRequest {
                    id: r.id()?,
                    data_size: r.u64()?,
                    metadata_size: r.u64()?,
                };
                r.finish()?;
                msg
            }
            CREATE_RESP => {
                let mut r = Reader::new(payload, "create response");
                let msg = Self::CreateResponse {
                    status: status(&mut r)?,
                    descriptor: BufferDescriptor::decode(&mut r)?,
                };
                r.finish()?;
                msg
            }
            SEAL_REQ | RELEASE_REQ => {
                let mut r = Reader::new(payload, "id request");
                let id = r.id()?;
                r.finish()?;
                if kind == SEAL_REQ {
                    Self::SealRequest { id }
                } else {
                    Self::ReleaseRequest { id }
                }
            }
            SEAL_RESP | RELEASE_RESP => {
                let mut r = Reader::new(payload, "status response");
                let status = status(&mut r)?;
                r.finish()?;
                if kind == SEAL_RESP {
                    Self::SealResponse { status }
                } else {
                    Self::ReleaseResponse { status }
                }
            }
            GET_REQ => {
                let mut r = Reader::new(payload, "get request");
                let n = r.count(OBJECT_ID_LEN)?;
                let ids = (0..n).map(|_| r.id()).collect::<Result<_, _>>()?;
                let timeout_ms = r.u64()?;
                r.finish()?;
                Self::GetRequest { ids, timeout_ms }
            }
            GET_RESP => {
                let mut r = Reader::new(payload, "get response");
                if !payload.len().is_multiple_of(DESCRIPTOR_LEN + 1) {
                    return Err(r.malformed());
                }
                let mut results = Vec::with_capacity(payload.len() / (DESCRIPTOR_LEN + 1));
                while r.remaining() > 0 {
                    results.push((status(&mut r)?, BufferDescriptor::decode(&mut r)?));
                }
                Self::GetResponse { results }
            }
            HELLO_REQ => {
                let mut r = Reader::new(payload, "hello request");
                let protocol_version = r.u32()?;
                r.finish()?;
                Self::HelloRequest { protocol_version }
            }
            HELLO_RESP => {
                let mut r = Reader::new(payload, "hello response");
                let status = status(&mut r)?;
                let protocol_version = r.u32()?;
                let local_node_id = r.u32()?;
                let reference_bandwidth = r.f64()?;
                let n = r.count(39)?;
                let mut arenas = Vec::with_capacity(n);
                for _ in 0..n {
                    let node_id = r.u32()?;
                    let kind = match r.u8()? {
                        0 => RegionKind::LocalOwned,
                        1 => RegionKind::RemoteView,
                        _ => return Err(r.malformed()),
                    };
                    let capacity = r.u64()?;
                    let model = RemoteAccessModel {
                        per_access_latency: Duration::from_nanos(r.u64()?),
                        bandwidth_ratio: r.f64()?,
                        peer_rpc_latency: Duration::from_nanos(r.u64()?),
                    };
                    let len = r.u16()? as usize;
                    let path = std::str::from_utf8(r.bytes(len)?).map_err(|_| r.malformed())?;
                    arenas.push(ArenaSpec {
                        node_id,
                        kind,
                        capacity,
                        backing_path: PathBuf::from(path),
                        access_model: (kind == RegionKind::RemoteView).then_some(model),
                    });
                }
                r.finish()?;
                Self::HelloResponse {
                    status,
                    hello: StoreHello {
                        protocol_version,
                        local_node_id,
                        reference_bandwidth,
                        arenas,
                    },
                }
            }
            EVICT_REQ => {
                let mut r = Reader::new(payload, "evict request");
                let bytes = r.u64()?;
                r.finish()?;
                Self::EvictRequest { bytes }
            }
            EVICT_RESP => {
                let mut r = Reader::new(payload, "evict response");
                let msg = Self::EvictResponse {
                    status: status(&mut r)?,
                    freed: r.u64()?,
                };
                r.finish()?;
                msg
            }
            other => return Err(FrameError::UnknownType(other)),
        };
        Ok(msg)
    }

    /// Decodes one complete frame held in `bytes`.
    pub fn decode_frame(bytes: &[u8]) -> Result<Self, FrameError> {
        let mut cursor = bytes;
        let (kind, payload) = frame::read_frame(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(FrameError::Malformed { what: "trailing bytes" });
        }
        Self::decode(kind, &payload)
    }
}

/// Deployment facts the store advertises in its hello response.
#[derive(Debug, Clone)]
pub struct Advertisement {
    pub reference_bandwidth: f64,
    pub remotes: Vec<RemoteArena>,
}

#[derive(Debug, Clone)]
pub struct RemoteArena {
    pub node_id: NodeId,
    pub backing_path: PathBuf,
    pub access_model: RemoteAccessModel,
}

#[derive(Debug, Error)]
pub enum IpcError {
    #[error("cannot bind client socket {path}: {source}")]
    Bind {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Client-facing listener; one handler thread per connection.
pub struct IpcServer {
    path: PathBuf,
    conns: Arc<Connections<UnixStream>>,
    acceptor: Option<JoinHandle<()>>,
}

impl IpcServer {
    pub fn bind(path: impl AsRef<Path>, store: Arc<Store>, advert: Advertisement) -> Result<Self, IpcError> {
        let path = path.as_ref().to_path_buf();
        let bind_err = |source| IpcError::Bind {
            path: path.clone(),
            source,
        };
        if path.exists() {
            // a live daemon would still answer; a stale socket file would not
            if UnixStream::connect(&path).is_ok() {
                return Err(bind_err(std::io::Error::new(
                    std::io::ErrorKind::AddrInUse,
                    "socket already served",
                )));
            }
            std::fs::remove_file(&path).map_err(bind_err)?;
        }
        let listener = UnixListener::bind(&path).map_err(bind_err)?;
        // polled, so shutdown never depends on the socket path still existing
        listener.set_nonblocking(true).map_err(bind_err)?;
        let conns = Arc::new(Connections::new());
        let advert = Arc::new(advert);
        let acceptor = {
            let conns = Arc::clone(&conns);
            std::thread::Builder::new()
                .name(format!("ipc-accept-{}", store.node_id()))
                .spawn(move || accept_loop(listener, store, advert, conns))
                .map_err(bind_err)?
        };
        info!(path = %path.display(), "client socket listening");
        Ok(Self {
            path,
            conns,
            acceptor: Some(acceptor),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn open_connections(&self) -> usize {
        self.conns.len()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.conns.stop();
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        let _ = std::fs::remove_file(&self.path);
    }
}

impl Drop for IpcServer {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.stop();
        }
    }
}

fn accept_loop(listener: UnixListener, store: Arc<Store>, advert: Arc<Advertisement>, conns: Arc<Connections<UnixStream>>) {
    while !conns.is_stopping() {
        let stream = match listener.accept() {
            Ok((s, _)) => s,
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(ACCEPT_POLL);
                continue;
            }
            Err(e) => {
                warn!(error = %e, "client accept failed");
                std::thread::sleep(ACCEPT_POLL);
                continue;
            }
        };
        if stream.set_nonblocking(false).is_err() {
            continue;
        }
        let Ok(handle) = stream.try_clone() else {
            continue;
        };
        let Some(key) = conns.track(handle) else {
            break;
        };
        let store = Arc::clone(&store);
        let advert = Arc::clone(&advert);
        let conns_for_thread = Arc::clone(&conns);
        let spawned = std::thread::Builder::new().name("ipc-conn".into()).spawn(move || {
            let client = store.register_client();
            serve_connection(stream, &store, &advert, client);
            store.disconnect(client);
            conns_for_thread.forget(key);
        });
        if spawned.is_err() {
            conns.forget(key);
        }
    }
}

fn hello_for(store: &Store, advert: &Advertisement) -> StoreHello {
    let region = store.region();
    let mut arenas = vec![ArenaSpec {
        node_id: store.node_id(),
        kind: RegionKind::LocalOwned,
        capacity: region.capacity(),
        backing_path: region.backing_path().to_path_buf(),
        access_model: None,
    }];
    for remote in &advert.remotes {
        let capacity = std::fs::metadata(&remote.backing_path).map(|m| m.len()).unwrap_or(0);
        arenas.push(ArenaSpec {
            node_id: remote.node_id,
            kind: RegionKind::RemoteView,
            capacity,
            backing_path: remote.backing_path.clone(),
            access_model: Some(remote.access_model),
        });
    }
    StoreHello {
        protocol_version: PROTOCOL_VERSION,
        local_node_id: store.node_id(),
        reference_bandwidth: advert.reference_bandwidth,
        arenas,
    }
}

fn status_of(r: Result<(), StoreError>) -> Status {
    match r {
        Ok(()) => Status::Ok,
        Err(e) => Status::from(&e),
    }
}

/// Services one request. `None` means the request was a protocol violation
/// and the connection should be dropped.
fn handle(store: &Store, advert: &Advertisement, client: ClientId, msg: Message, stream: &UnixStream) -> Option<Message> {
    let reply = match msg {
        Message::HelloRequest { protocol_version } => Message::HelloResponse {
            status: if protocol_version == PROTOCOL_VERSION {
                Status::Ok
            } else {
                Status::ProtocolError
            },
            hello: hello_for(store, advert),
        },
        Message::CreateRequest {
            id,
            data_size,
            metadata_size,
        } => match store.create_object(client, id, data_size, metadata_size) {
            Ok(descriptor) => Message::CreateResponse {
                status: Status::Ok,
                descriptor,
            },
            Err(e) => Message::CreateResponse {
                status: Status::from(&e),
                descriptor: BufferDescriptor::default(),
            },
        },
        Message::SealRequest { id } => Message::SealResponse {
            status: status_of(store.seal_object(id)),
        },
        Message::GetRequest { ids, timeout_ms } => {
            if ids.is_empty() {
                return None;
            }
            let timeout = Duration::from_millis(timeout_ms);
            let found = match store.get_objects_until(client, &ids, timeout, &|| peer_hung_up(stream)) {
                Ok(found) => found,
                Err(e) => {
                    warn!(error = %e, "get failed");
                    return None;
                }
            };
            Message::GetResponse {
                results: found
                    .into_iter()
                    .map(|d| match d {
                        Some(d) => (Status::Ok, d),
                        None => (Status::Timeout, BufferDescriptor::default()),
                    })
                    .collect(),
            }
        }
        Message::ReleaseRequest { id } => Message::ReleaseResponse {
            status: status_of(store.release_object(client, id)),
        },
        Message::EvictRequest { bytes } => Message::EvictResponse {
            status: Status::Ok,
            freed: store.evict_bytes(bytes),
        },
        other => {
            debug!(kind = other.kind(), "response-type frame sent by client");
            return None;
        }
    };
    Some(reply)
}

/// True once the client has closed its end; pending request bytes do not
/// count as a hang-up.
fn peer_hung_up(stream: &UnixStream) -> bool {
    use std::os::fd::AsRawFd;
    let mut byte = 0u8;
    // SAFETY: one-byte peek into a live local buffer on a descriptor we own
    let n = unsafe {
        libc::recv(
            stream.as_raw_fd(),
            std::ptr::addr_of_mut!(byte).cast(),
            1,
            libc::MSG_PEEK | libc::MSG_DONTWAIT,
        )
    };
    match n {
        0 => true,
        n if n > 0 => false,
        _ => {
            let e = std::io::Error::last_os_error();
            !matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::Interrupted)
        }
    }
}

fn serve_connection(mut stream: UnixStream, store: &Store, advert: &Advertisement, client: ClientId) {
    loop {
        let (kind, payload) = match frame::read_frame(&mut stream) {
            Ok(f) => f,
            Err(FrameError::Closed) => return,
            Err(e) => {
                debug!(error = %e, "dropping client connection");
                return;
            }
        };
        let msg = match Message::decode(kind, &payload) {
            Ok(m) => m,
            Err(e) => {
                debug!(error = %e, "malformed client frame");
                return;
            }
        };
        let Some(reply) = handle(store, advert, client, msg, &stream) else {
            return;
        };
        if let Err(e) = frame::write_frame(&mut stream, reply.kind(), &reply.encode_payload()) {
            debug!(error = %e, "client went away mid-reply");
            return;
        }
    }
}
