//! Producer/consumer SDK.
//!
//! A [`ClientSession`] talks to one store over its Unix socket and maps every
//! arena the store advertises: its own arena read-write, each peer's arena as
//! a penalized read-only view. Payloads are written and read through those
//! mappings; the socket only carries descriptors.

use std::collections::HashMap;
use std::os::unix::net::UnixStream;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::arena::{ArenaError, MemoryRegion, NodeId, RegionKind};
use crate::frame::{self, FrameError};
use crate::id::ObjectId;
use crate::ipc::{BufferDescriptor, Message, Status, StoreHello, PROTOCOL_VERSION};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot connect to store: {0}")]
    ConnectFailure(std::io::Error),
    #[error("store speaks protocol {server}, client speaks {client}")]
    VersionMismatch { server: u32, client: u32 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("connection to store lost: {0}")]
    ConnectionLost(String),
    #[error("object {0} already exists")]
    ObjectExists(ObjectId),
    #[error("object {0} not found")]
    ObjectNotFound(ObjectId),
    #[error("object {0} already sealed")]
    AlreadySealed(ObjectId),
    #[error("object {0} is not referenced by this session")]
    NotReferenced(ObjectId),
    #[error("store out of memory")]
    OutOfMemory,
    #[error("a peer store is unreachable")]
    PeerUnreachable,
    #[error("invalid argument")]
    InvalidArgument,
    #[error("descriptor names unmapped node {0}")]
    UnmappedNode(NodeId),
    #[error(transparent)]
    Arena(#[from] ArenaError),
}

impl From<FrameError> for ClientError {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::Io(_) | FrameError::Closed => ClientError::ConnectionLost(e.to_string()),
            other => ClientError::Protocol(other.to_string()),
        }
    }
}

fn status_error(status: Status, id: ObjectId) -> ClientError {
    match status {
        Status::NotFound | Status::Timeout => ClientError::ObjectNotFound(id),
        Status::Exists => ClientError::ObjectExists(id),
        Status::OutOfMemory => ClientError::OutOfMemory,
        Status::PeerUnreachable => ClientError::PeerUnreachable,
        Status::NotReferenced => ClientError::NotReferenced(id),
        Status::AlreadySealed => ClientError::AlreadySealed(id),
        Status::InvalidArgument => ClientError::InvalidArgument,
        Status::ProtocolError | Status::Ok => ClientError::Protocol(format!("unexpected status {status:?}")),
    }
}

/// Read-only window onto one part of an object (its data or its metadata).
#[derive(Debug, Clone)]
pub struct BufferView {
    region: Arc<MemoryRegion>,
    offset: u64,
    len: u64,
}

impl BufferView {
    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_remote(&self) -> bool {
        self.region.kind() == RegionKind::RemoteView
    }

    /// Sequential read of the whole buffer, penalized when remote.
    pub fn read_all(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len as usize];
        self.read_into(&mut out);
        out
    }

    /// Reads the buffer into the front of `buf`, which must be at least
    /// `len()` bytes.
    pub fn read_into(&self, buf: &mut [u8]) {
        let dst = &mut buf[..self.len as usize];
        self.region
            .read_into(self.offset, dst)
            .expect("descriptor validated against region bounds");
    }
}

/// A sealed object obtained through [`ClientSession::get`].
#[derive(Debug, Clone)]
pub struct ObjectView {
    pub id: ObjectId,
    pub descriptor: BufferDescriptor,
    pub data: BufferView,
    pub metadata: BufferView,
}

/// Wall time spent in each phase of [`ClientSession::create_and_write`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WriteTimings {
    pub create: Duration,
    pub write: Duration,
    pub seal: Duration,
}

impl WriteTimings {
    pub fn total(&self) -> Duration {
        self.create + self.write + self.seal
    }
}

pub struct ClientSession {
    stream: UnixStream,
    hello: StoreHello,
    regions: HashMap<NodeId, Arc<MemoryRegion>>,
    open: HashMap<ObjectId, u32>,
}

impl ClientSession {
    /// Connects, performs the hello handshake and maps every advertised
    /// arena.
    pub fn connect(socket_path: impl AsRef<Path>) -> Result<Self, ClientError> {
        let mut stream = UnixStream::connect(socket_path).map_err(ClientError::ConnectFailure)?;
        let reply = roundtrip(
            &mut stream,
            &Message::HelloRequest {
                protocol_version: PROTOCOL_VERSION,
            },
        )?;
        let Message::HelloResponse { status, hello } = reply else {
            return Err(ClientError::Protocol("expected hello response".into()));
        };
        if status != Status::Ok || hello.protocol_version != PROTOCOL_VERSION {
            return Err(ClientError::VersionMismatch {
                server: hello.protocol_version,
                client: PROTOCOL_VERSION,
            });
        }
        hello.validate().map_err(ClientError::Protocol)?;

        let mut regions = HashMap::new();
        for spec in &hello.arenas {
            let region = match spec.kind {
                RegionKind::LocalOwned => MemoryRegion::open_owned(spec.node_id, &spec.backing_path)?,
                RegionKind::RemoteView => MemoryRegion::attach_remote_with_reference(
                    spec.node_id,
                    &spec.backing_path,
                    spec.access_model.unwrap_or_default(),
                    hello.reference_bandwidth,
                )?,
            };
            regions.insert(spec.node_id, Arc::new(region));
        }
        Ok(Self {
            stream,
            hello,
            regions,
            open: HashMap::new(),
        })
    }

    pub fn hello(&self) -> &StoreHello {
        &self.hello
    }

    pub fn local_node(&self) -> NodeId {
        self.hello.local_node_id
    }

    pub fn mapped_nodes(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.regions.keys().copied().collect();
        v.sort_unstable();
        v
    }

    /// Number of references this session holds on `id`.
    pub fn open_references(&self, id: &ObjectId) -> u32 {
        self.open.get(id).copied().unwrap_or(0)
    }

    fn request(&mut self, msg: &Message) -> Result<Message, ClientError> {
        roundtrip(&mut self.stream, msg)
    }

    fn region_for(&self, d: &BufferDescriptor) -> Result<&Arc<MemoryRegion>, ClientError> {
        let region = self.regions.get(&d.node_id).ok_or(ClientError::UnmappedNode(d.node_id))?;
        let end = d
            .offset
            .checked_add(d.data_size)
            .and_then(|v| v.checked_add(d.metadata_size));
        match end {
            Some(end) if end <= region.capacity() => Ok(region),
            _ => Err(ClientError::Protocol(format!("descriptor outside arena of node {}", d.node_id))),
        }
    }

    /// Reserves `id` and returns a writable descriptor into the local arena.
    /// The session holds one reference until [`release`](Self::release).
    pub fn create(&mut self, id: ObjectId, data_size: u64, metadata_size: u64) -> Result<BufferDescriptor, ClientError> {
        let reply = self.request(&Message::CreateRequest {
            id,
            data_size,
            metadata_size,
        })?;
        match reply {
            Message::CreateResponse {
                status: Status::Ok,
                descriptor,
            } => {
                self.region_for(&descriptor)?;
                *self.open.entry(id).or_default() += 1;
                Ok(descriptor)
            }
            Message::CreateResponse { status, .. } => Err(status_error(status, id)),
            _ => Err(ClientError::Protocol("expected create response".into())),
        }
    }

    /// Writes into an object created by this session; `offset` is relative
    /// to the start of the object's data.
    pub fn write(&self, descriptor: &BufferDescriptor, offset: u64, bytes: &[u8]) -> Result<(), ClientError> {
        if !descriptor.writable {
            return Err(ClientError::Arena(ArenaError::CoherencyViolation {
                node_id: descriptor.node_id,
            }));
        }
        let limit = descriptor.data_size + descriptor.metadata_size;
        if offset.checked_add(bytes.len() as u64).is_none_or(|end| end > limit) {
            return Err(ClientError::InvalidArgument);
        }
        self.region_for(descriptor)?.write_at(descriptor.offset + offset, bytes)?;
        Ok(())
    }

    pub fn seal(&mut self, id: ObjectId) -> Result<(), ClientError> {
        match self.request(&Message::SealRequest { id })? {
            Message::SealResponse { status: Status::Ok } => Ok(()),
            Message::SealResponse { status } => Err(status_error(status, id)),
            _ => Err(ClientError::Protocol("expected seal response".into())),
        }
    }

    /// Create, write data then metadata, seal, and drop the creator's
    /// reference.
    pub fn create_and_write(&mut self, id: ObjectId, data: &[u8], metadata: &[u8]) -> Result<WriteTimings, ClientError> {
        let t0 = Instant::now();
        let desc = self.create(id, data.len() as u64, metadata.len() as u64)?;
        let t1 = Instant::now();
        let written = self
            .write(&desc, 0, data)
            .and_then(|_| self.write(&desc, data.len() as u64, metadata));
        let t2 = Instant::now();
        if let Err(e) = written {
            let _ = self.release(id);
            return Err(e);
        }
        self.seal(id)?;
        let t3 = Instant::now();
        self.release(id)?;
        Ok(WriteTimings {
            create: t1 - t0,
            write: t2 - t1,
            seal: t3 - t2,
        })
    }

    /// Resolves `ids`, waiting up to `timeout_ms` for objects not yet sealed.
    /// Every returned view holds one reference until released.
    pub fn get(&mut self, ids: &[ObjectId], timeout_ms: u64) -> Result<Vec<Option<ObjectView>>, ClientError> {
        if ids.is_empty() {
            return Err(ClientError::InvalidArgument);
        }
        let reply = self.request(&Message::GetRequest {
            ids: ids.to_vec(),
            timeout_ms,
        })?;
        let Message::GetResponse { results } = reply else {
            return Err(ClientError::Protocol("expected get response".into()));
        };
        if results.len() != ids.len() {
            return Err(ClientError::Protocol(format!("{} results for {} ids", results.len(), ids.len())));
        }
        let mut views = Vec::with_capacity(ids.len());
        for (id, (status, d)) in ids.iter().zip(results) {
            if status != Status::Ok {
                views.push(None);
                continue;
            }
            *self.open.entry(*id).or_default() += 1;
            let region = Arc::clone(self.region_for(&d)?);
            views.push(Some(ObjectView {
                id: *id,
                descriptor: d,
                data: BufferView {
                    region: Arc::clone(&region),
                    offset: d.offset,
                    len: d.data_size,
                },
                metadata: BufferView {
                    region,
                    offset: d.offset + d.data_size,
                    len: d.metadata_size,
                },
            }));
        }
        Ok(views)
    }

    pub fn release(&mut self, id: ObjectId) -> Result<(), ClientError> {
        match self.open.get_mut(&id) {
            Some(n) if *n > 0 => {}
            _ => return Err(ClientError::NotReferenced(id)),
        }
        let reply = self.request(&Message::ReleaseRequest { id })?;
        match reply {
            Message::ReleaseResponse { status: Status::Ok } => {
                let n = self.open.get_mut(&id).expect("checked above");
                *n -= 1;
                if *n == 0 {
                    self.open.remove(&id);
                }
                Ok(())
            }
            Message::ReleaseResponse { status } => Err(status_error(status, id)),
            _ => Err(ClientError::Protocol("expected release response".into())),
        }
    }

    /// Asks the store to evict unreferenced objects, least recently released
    /// first, until `bytes` are freed. Returns the bytes actually freed.
    pub fn evict(&mut self, bytes: u64) -> Result<u64, ClientError> {
        match self.request(&Message::EvictRequest { bytes })? {
            Message::EvictResponse { status: Status::Ok, freed } => Ok(freed),
            Message::EvictResponse { status, .. } => Err(ClientError::Protocol(format!("evict failed: {status:?}"))),
            _ => Err(ClientError::Protocol("expected evict response".into())),
        }
    }

    /// Releases every open reference, then closes the connection.
    pub fn close(mut self) -> Result<(), ClientError> {
        let held: Vec<(ObjectId, u32)> = self.open.iter().map(|(id, n)| (*id, *n)).collect();
        for (id, n) in held {
            for _ in 0..n {
                self.release(id)?;
            }
        }
        Ok(())
    }
}

fn roundtrip(stream: &mut UnixStream, msg: &Message) -> Result<Message, ClientError> {
    frame::write_frame(stream, msg.kind(), &msg.encode_payload())?;
    let (kind, payload) = frame::read_frame(stream)?;
    Ok(Message::decode(kind, &payload)?)
}
