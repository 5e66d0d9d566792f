//! Store-to-store lookup protocol.
//!
//! A synchronous, unary request/response exchange over TCP: every request
//! frame is answered by exactly one response frame. Stores use it to check
//! identifier uniqueness on create and to resolve objects sealed on another
//! node. Object payloads never travel over this channel; a lookup only
//! returns where the bytes live in the owner's arena.

use std::fmt;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;
use tracing::{debug, info};

use crate::arena::NodeId;
use crate::frame::{self, FrameError, Reader};
use crate::id::{ObjectId, OBJECT_ID_LEN};
use crate::service::Connections;
use crate::store::Store;

pub const LOOKUP_REQ: u8 = 0x01;
pub const LOOKUP_RESP: u8 = 0x02;
pub const EXISTS_REQ: u8 = 0x03;
pub const EXISTS_RESP: u8 = 0x04;

const RECORD_LEN: usize = 25;
const FLAG_FOUND: u8 = 0b01;
const FLAG_SEALED: u8 = 0b10;

#[derive(Debug, Error)]
pub enum PeerError {
    #[error("peer unreachable: {0}")]
    Unreachable(String),
    #[error("peer protocol error: {0}")]
    Protocol(String),
    #[error("lookup requires at least one id")]
    EmptyRequest,
    #[error("cannot bind peer service: {0}")]
    Bind(io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PeerEndpoint {
    pub host: String,
    pub port: u16,
    pub node_id: NodeId,
}

impl PeerEndpoint {
    pub fn new(host: impl Into<String>, port: u16, node_id: NodeId) -> Self {
        Self {
            host: host.into(),
            port,
            node_id,
        }
    }
}

impl fmt::Display for PeerEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{} (node {})", self.host, self.port, self.node_id)
    }
}

/// Answer to a lookup for one id. Offsets and sizes are meaningful only when
/// the object was found sealed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LookupResponse {
    pub found: bool,
    pub sealed: bool,
    pub offset: u64,
    pub data_size: u64,
    pub metadata_size: u64,
}

impl LookupResponse {
    pub const fn absent() -> Self {
        Self {
            found: false,
            sealed: false,
            offset: 0,
            data_size: 0,
            metadata_size: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PeerMessage {
    LookupRequest(Vec<ObjectId>),
    LookupResponse(Vec<LookupResponse>),
    ExistsRequest(ObjectId),
    ExistsResponse(bool),
}

impl PeerMessage {
    pub fn kind(&self) -> u8 {
        match self {
            Self::LookupRequest(_) => LOOKUP_REQ,
            Self::LookupResponse(_) => LOOKUP_RESP,
            Self::ExistsRequest(_) => EXISTS_REQ,
            Self::ExistsResponse(_) => EXISTS_RESP,
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Self::LookupRequest(ids) => {
                out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
                for id in ids {
                    out.extend_from_slice(id.as_bytes());
                }
            }
            Self::LookupResponse(records) => {
                for r in records {
                    let r = if r.found { *r } else { LookupResponse::absent() };
                    let mut flags = 0;
                    if r.found {
                        flags |= FLAG_FOUND;
                    }
                    if r.sealed {
                        flags |= FLAG_SEALED;
                    }
                    out.push(flags);
                    out.extend_from_slice(&r.offset.to_le_bytes());
                    out.extend_from_slice(&r.data_size.to_le_bytes());
                    out.extend_from_slice(&r.metadata_size.to_le_bytes());
                }
            }
            Self::ExistsRequest(id) => out.extend_from_slice(id.as_bytes()),
            Self::ExistsResponse(b) => out.push(u8::from(*b)),
        }
        out
    }

    /// Full wire frame: header plus payload.
    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        frame::encode_frame(self.kind(), &self.encode_payload())
    }

    pub fn decode(kind: u8, payload: &[u8]) -> Result<Self, FrameError> {
        match kind {
            LOOKUP_REQ => {
                let mut r = Reader::new(payload, "lookup request");
                let n = r.count(OBJECT_ID_LEN)?;
                let ids = (0..n).map(|_| r.id()).collect::<Result<_, _>>()?;
                r.finish()?;
                Ok(Self::LookupRequest(ids))
            }
            LOOKUP_RESP => {
                let mut r = Reader::new(payload, "lookup response");
                if !payload.len().is_multiple_of(RECORD_LEN) {
                    return Err(r.malformed());
                }
                let mut records = Vec::with_capacity(payload.len() / RECORD_LEN);
                while r.remaining() > 0 {
                    let flags = r.u8()?;
                    let rec = LookupResponse {
                        found: flags & FLAG_FOUND != 0,
                        sealed: flags & FLAG_SEALED != 0,
                        offset: r.u64()?,
                        data_size: r.u64()?,
                        metadata_size: r.u64()?,
                    };
                    let bad_flags = flags & !(FLAG_FOUND | FLAG_SEALED) != 0;
                    if bad_flags || (!rec.found && rec != LookupResponse::absent()) {
                        return Err(r.malformed());
                    }
                    records.push(rec);
                }
                Ok(Self::LookupResponse(records))
            }
            EXISTS_REQ => {
                let mut r = Reader::new(payload, "exists request");
                let id = r.id()?;
                r.finish()?;
                Ok(Self::ExistsRequest(id))
            }
            EXISTS_RESP => {
                let mut r = Reader::new(payload, "exists response");
                let b = r.bool()?;
                r.finish()?;
                Ok(Self::ExistsResponse(b))
            }
            other => Err(FrameError::UnknownType(other)),
        }
    }
}

/// What a store needs from another store.
pub trait PeerLink: Send + Sync {
    fn node_id(&self) -> NodeId;
    /// True if the peer holds `id` in any state.
    fn exists(&self, id: &ObjectId) -> Result<bool, PeerError>;
    /// One round trip resolving every id; responses align with `ids`.
    fn lookup(&self, ids: &[ObjectId]) -> Result<Vec<LookupResponse>, PeerError>;
}

/// Client side of the peer protocol, holding one persistent connection.
pub struct PeerClient {
    endpoint: PeerEndpoint,
    rpc_latency: Duration,
    io_timeout: Duration,
    conn: Mutex<Option<TcpStream>>,
}

impl PeerClient {
    /// `rpc_latency` is added to every lookup round trip.
    pub fn new(endpoint: PeerEndpoint, rpc_latency: Duration) -> Self {
        Self {
            endpoint,
            rpc_latency,
            io_timeout: Duration::from_secs(10),
            conn: Mutex::new(None),
        }
    }

    pub fn endpoint(&self) -> &PeerEndpoint {
        &self.endpoint
    }

    fn connect(&self) -> io::Result<TcpStream> {
        let mut last = io::Error::new(io::ErrorKind::NotFound, "no address");
        for addr in (self.endpoint.host.as_str(), self.endpoint.port).to_socket_addrs()? {
            match TcpStream::connect_timeout(&addr, Duration::from_secs(2)) {
                Ok(s) => {
                    s.set_nodelay(true)?;
                    s.set_read_timeout(Some(self.io_timeout))?;
                    s.set_write_timeout(Some(self.io_timeout))?;
                    return Ok(s);
                }
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    /// Sends one request and waits for its single response, reconnecting
    /// once if the connection is broken.
    fn call(&self, request: &PeerMessage) -> Result<PeerMessage, PeerError> {
        let bytes = request.encode().map_err(|e| PeerError::Protocol(e.to_string()))?;
        let mut conn = self.conn.lock().unwrap_or_else(|e| e.into_inner());
        let mut last_err = String::new();
        for _ in 0..2 {
            if conn.is_none() {
                match self.connect() {
                    Ok(s) => *conn = Some(s),
                    Err(e) => {
                        last_err = e.to_string();
                        continue;
                    }
                }
            }
            let stream = conn.as_mut().expect("connected above");
            let outcome = io::Write::write_all(stream, &bytes)
                .map_err(FrameError::from)
                .and_then(|_| frame::read_frame(stream));
            match outcome {
                Ok((kind, payload)) => {
                    return PeerMessage::decode(kind, &payload).map_err(|e| {
                        *conn = None;
                        PeerError::Protocol(e.to_string())
                    });
                }
                Err(e @ (FrameError::Io(_) | FrameError::Closed)) => {
                    *conn = None;
                    last_err = e.to_string();
                }
                Err(e) => {
                    *conn = None;
                    return Err(PeerError::Protocol(e.to_string()));
                }
            }
        }
        Err(PeerError::Unreachable(format!("{}: {last_err}", self.endpoint)))
    }

    pub fn remote_lookup(&self, id: &ObjectId) -> Result<LookupResponse, PeerError> {
        Ok(self.batch_lookup(std::slice::from_ref(id))?[0])
    }

    pub fn batch_lookup(&self, ids: &[ObjectId]) -> Result<Vec<LookupResponse>, PeerError> {
        if ids.is_empty() {
            return Err(PeerError::EmptyRequest);
        }
        let resp = self.call(&PeerMessage::LookupRequest(ids.to_vec()));
        if !self.rpc_latency.is_zero() {
            std::thread::sleep(self.rpc_latency);
        }
        match resp? {
            PeerMessage::LookupResponse(records) if records.len() == ids.len() => Ok(records),
            PeerMessage::LookupResponse(records) => Err(PeerError::Protocol(format!(
                "{} records for {} ids",
                records.len(),
                ids.len()
            ))),
            other => Err(PeerError::Protocol(format!("unexpected reply {:#04x}", other.kind()))),
        }
    }

    pub fn remote_exists(&self, id: &ObjectId) -> Result<bool, PeerError> {
        match self.call(&PeerMessage::ExistsRequest(*id))? {
            PeerMessage::ExistsResponse(b) => Ok(b),
            other => Err(PeerError::Protocol(format!("unexpected reply {:#04x}", other.kind()))),
        }
    }
}

impl PeerLink for PeerClient {
    fn node_id(&self) -> NodeId {
        self.endpoint.node_id
    }

    fn exists(&self, id: &ObjectId) -> Result<bool, PeerError> {
        self.remote_exists(id)
    }

    fn lookup(&self, ids: &[ObjectId]) -> Result<Vec<LookupResponse>, PeerError> {
        self.batch_lookup(ids)
    }
}

/// Running peer service. Dropping it stops the service like
/// [`PeerServer::shutdown`].
pub struct PeerServer {
    local_addr: SocketAddr,
    conns: Arc<Connections<TcpStream>>,
    acceptor: Option<JoinHandle<()>>,
}

impl PeerServer {
    /// Binds `listen` and services lookups against `store` on a dedicated
    /// thread, one handler thread per inbound connection.
    pub fn serve(listen: impl ToSocketAddrs, store: Arc<Store>) -> Result<Self, PeerError> {
        let listener = TcpListener::bind(listen).map_err(PeerError::Bind)?;
        let local_addr = listener.local_addr().map_err(PeerError::Bind)?;
        let conns = Arc::new(Connections::new());
        let acceptor = {
            let conns = Arc::clone(&conns);
            std::thread::Builder::new()
                .name(format!("peer-serve-{}", store.node_id()))
                .spawn(move || accept_loop(listener, store, conns))
                .map_err(PeerError::Bind)?
        };
        info!(%local_addr, "peer service listening");
        Ok(Self {
            local_addr,
            conns,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn open_connections(&self) -> usize {
        self.conns.len()
    }

    /// Stops accepting, closes open connections and waits for the service
    /// thread; the port is released when this returns.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.conns.stop();
        let _ = TcpStream::connect_timeout(&self.local_addr, Duration::from_secs(1));
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for PeerServer {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.stop();
        }
    }
}

fn accept_loop(listener: TcpListener, store: Arc<Store>, conns: Arc<Connections<TcpStream>>) {
    for incoming in listener.incoming() {
        if conns.is_stopping() {
            break;
        }
        let stream = match incoming {
            Ok(s) => s,
            Err(e) => {
                debug!(error = %e, "peer accept failed");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let Ok(handle) = stream.try_clone() else {
            continue;
        };
        let Some(key) = conns.track(handle) else {
            break;
        };
        let store = Arc::clone(&store);
        let conns_for_thread = Arc::clone(&conns);
        let spawned = std::thread::Builder::new()
            .name("peer-conn".into())
            .spawn(move || {
                serve_connection(stream, &store);
                conns_for_thread.forget(key);
            });
        if spawned.is_err() {
            conns.forget(key);
        }
    }
}

fn serve_connection(mut stream: TcpStream, store: &Store) {
    loop {
        let (kind, payload) = match frame::read_frame(&mut stream) {
            Ok(f) => f,
            Err(FrameError::Closed) => return,
            Err(e) => {
                debug!(error = %e, "dropping peer connection");
                return;
            }
        };
        let reply = match PeerMessage::decode(kind, &payload) {
            Ok(PeerMessage::LookupRequest(ids)) if !ids.is_empty() => PeerMessage::LookupResponse(store.lookup_local(&ids)),
            Ok(PeerMessage::ExistsRequest(id)) => PeerMessage::ExistsResponse(store.exists_local(&id)),
            Ok(other) => {
                debug!(kind = other.kind(), "unexpected peer request, dropping connection");
                return;
            }
            Err(e) => {
                debug!(error = %e, "malformed peer frame, dropping connection");
                return;
            }
        };
        if frame::write_frame(&mut stream, reply.kind(), &reply.encode_payload()).is_err() {
            return;
        }
    }
}
