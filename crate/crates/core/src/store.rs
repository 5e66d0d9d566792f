//! Store daemon core: object table, create/seal/get/release lifecycle and
//! least-recently-released eviction.
//!
//! One mutex guards the object table, the allocator and per-client reference
//! bookkeeping. Payload bytes are never touched while it is held: sealing
//! checksums the extent between two short critical sections, and outbound
//! peer calls (uniqueness checks, remote lookups) are issued unlocked so two
//! stores calling each other cannot deadlock.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use thiserror::Error;
use tracing::{debug, warn};

use crate::allocator::{AllocError, AllocatorStats, ArenaAllocator};
use crate::arena::{ArenaError, MemoryRegion, NodeId, RegionKind};
use crate::id::ObjectId;
use crate::ipc::BufferDescriptor;
use crate::peer::{LookupResponse, PeerError, PeerLink};

/// Extents are rounded up to this many bytes.
pub const EXTENT_ALIGN: u64 = 8;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("object {0} already exists")]
    ObjectExists(ObjectId),
    #[error("object {0} not found")]
    ObjectNotFound(ObjectId),
    #[error("object {0} is already sealed")]
    AlreadySealed(ObjectId),
    #[error("object {0} is not referenced by this client")]
    NotReferenced(ObjectId),
    #[error("out of memory: {requested} bytes requested")]
    OutOfMemory { requested: u64 },
    #[error("object data size must be positive")]
    InvalidSize,
    #[error("request names no objects")]
    EmptyRequest,
    #[error("peer node {node_id} unreachable: {source}")]
    PeerUnreachable {
        node_id: NodeId,
        #[source]
        source: PeerError,
    },
    #[error(transparent)]
    Arena(#[from] ArenaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectState {
    Created,
    Sealed,
}

/// Result of [`Store::contains`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Presence {
    Absent,
    Created,
    Sealed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClientId(pub u64);

#[derive(Debug, Clone)]
pub struct ObjectEntry {
    pub id: ObjectId,
    pub offset: u64,
    pub data_size: u64,
    pub metadata_size: u64,
    pub state: ObjectState,
    pub ref_count: u32,
    pub last_release: Option<Instant>,
    pub seal_checksum: Option<u64>,
    creator: ClientId,
    release_seq: Option<u64>,
}

impl ObjectEntry {
    pub fn payload_len(&self) -> u64 {
        self.data_size + self.metadata_size
    }
}

/// Object entries plus the queue of sealed, unreferenced entries ordered by
/// release time.
#[derive(Debug, Default)]
pub struct ObjectTable {
    entries: HashMap<ObjectId, ObjectEntry>,
    eviction_order: BTreeMap<u64, ObjectId>,
    next_seq: u64,
}

impl ObjectTable {
    pub fn get(&self, id: &ObjectId) -> Option<&ObjectEntry> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn evictable(&self) -> impl Iterator<Item = &ObjectId> {
        self.eviction_order.values()
    }

    fn enqueue(&mut self, id: ObjectId) {
        let seq = self.next_seq;
        self.next_seq += 1;
        if let Some(entry) = self.entries.get_mut(&id) {
            entry.last_release = Some(Instant::now());
            entry.release_seq = Some(seq);
            self.eviction_order.insert(seq, id);
        }
    }

    fn dequeue(&mut self, id: &ObjectId) {
        if let Some(seq) = self.entries.get_mut(id).and_then(|e| e.release_seq.take()) {
            self.eviction_order.remove(&seq);
        }
    }

    fn dequeue_evicted(&mut self, seq: Option<u64>) {
        if let Some(seq) = seq {
            self.eviction_order.remove(&seq);
        }
    }

    /// Checks that the eviction queue holds exactly the sealed entries with
    /// no references.
    pub fn check_invariants(&self) -> Result<(), String> {
        let expected = self
            .entries
            .values()
            .filter(|e| e.state == ObjectState::Sealed && e.ref_count == 0)
            .count();
        if expected != self.eviction_order.len() {
            return Err(format!(
                "eviction queue has {} entries, {expected} evictable objects",
                self.eviction_order.len()
            ));
        }
        for (seq, id) in &self.eviction_order {
            match self.entries.get(id) {
                Some(e) if e.release_seq == Some(*seq) && e.ref_count == 0 && e.state == ObjectState::Sealed => {}
                _ => return Err(format!("queue entry {id} is not evictable")),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Holding {
    count: u32,
    local: bool,
}

struct StoreState {
    table: ObjectTable,
    allocator: ArenaAllocator,
    clients: HashMap<ClientId, HashMap<ObjectId, Holding>>,
    seal_generation: u64,
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    pub coalescing: bool,
    /// How often a blocked get re-polls peers for objects not yet found.
    pub poll_interval: Duration,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            coalescing: true,
            poll_interval: Duration::from_millis(10),
        }
    }
}

/// Snapshot of store counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreStats {
    pub objects: usize,
    pub created: usize,
    pub sealed: usize,
    pub evictable: usize,
    pub total_refs: u64,
    pub clients: usize,
    pub evictions: u64,
    pub allocator: AllocatorStats,
}

/// An object whose payload no longer matches its seal-time digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditViolation {
    pub id: ObjectId,
    pub sealed: u64,
    pub recomputed: u64,
}

pub struct Store {
    node_id: NodeId,
    region: Arc<MemoryRegion>,
    state: Mutex<StoreState>,
    sealed: Condvar,
    peers: Vec<Arc<dyn PeerLink>>,
    options: StoreOptions,
    next_client: AtomicU64,
    evictions: AtomicU64,
}

fn align_up(n: u64) -> Option<u64> {
    n.checked_add(EXTENT_ALIGN - 1).map(|v| v / EXTENT_ALIGN * EXTENT_ALIGN)
}

impl Store {
    /// Builds a store over a locally owned arena. The allocator spans the
    /// whole arena; any previous content is treated as free space.
    pub fn new(region: Arc<MemoryRegion>, peers: Vec<Arc<dyn PeerLink>>, options: StoreOptions) -> Self {
        assert_eq!(region.kind(), RegionKind::LocalOwned, "a store needs an owned arena");
        let allocator = ArenaAllocator::with_coalescing(region.capacity(), options.coalescing);
        Self {
            node_id: region.node_id(),
            region,
            state: Mutex::new(StoreState {
                table: ObjectTable::default(),
                allocator,
                clients: HashMap::new(),
                seal_generation: 0,
            }),
            sealed: Condvar::new(),
            peers,
            options,
            next_client: AtomicU64::new(1),
            evictions: AtomicU64::new(0),
        }
    }

    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    pub fn region(&self) -> &Arc<MemoryRegion> {
        &self.region
    }

    pub fn peers(&self) -> &[Arc<dyn PeerLink>] {
        &self.peers
    }

    fn lock(&self) -> MutexGuard<'_, StoreState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn register_client(&self) -> ClientId {
        let id = ClientId(self.next_client.fetch_add(1, Ordering::Relaxed));
        self.lock().clients.insert(id, HashMap::new());
        id
    }

    /// Drops every reference `client` holds and aborts objects it created but
    /// never sealed.
    pub fn disconnect(&self, client: ClientId) {
        let mut st = self.lock();
        let st = &mut *st;
        let Some(held) = st.clients.remove(&client) else {
            return;
        };
        let mut released = 0u64;
        for (id, holding) in held {
            if !holding.local {
                continue;
            }
            let Some(entry) = st.table.entries.get_mut(&id) else {
                continue;
            };
            entry.ref_count = entry.ref_count.saturating_sub(holding.count);
            released += u64::from(holding.count);
            if entry.ref_count == 0 && entry.state == ObjectState::Sealed {
                st.table.enqueue(id);
            }
        }
        let orphans: Vec<ObjectId> = st
            .table
            .entries
            .values()
            .filter(|e| e.state == ObjectState::Created && e.creator == client)
            .map(|e| e.id)
            .collect();
        for id in &orphans {
            let entry = st.table.entries.remove(id).expect("orphan listed above");
            st.allocator
                .deallocate(entry.offset)
                .expect("table entry without allocation");
        }
        debug!(client = client.0, released, aborted = orphans.len(), "client disconnected");
    }

    fn local_descriptor(&self, entry: &ObjectEntry, writable: bool) -> BufferDescriptor {
        BufferDescriptor {
            node_id: self.node_id,
            offset: entry.offset,
            data_size: entry.data_size,
            metadata_size: entry.metadata_size,
            writable,
        }
    }

    pub fn create_object(
        &self,
        client: ClientId,
        id: ObjectId,
        data_size: u64,
        metadata_size: u64,
    ) -> Result<BufferDescriptor, StoreError> {
        if data_size == 0 {
            return Err(StoreError::InvalidSize);
        }
        let extent = data_size
            .checked_add(metadata_size)
            .and_then(align_up)
            .ok_or(StoreError::OutOfMemory { requested: u64::MAX })?;

        if self.lock().table.entries.contains_key(&id) {
            return Err(StoreError::ObjectExists(id));
        }
        for peer in &self.peers {
            match peer.exists(&id) {
                Ok(false) => {}
                Ok(true) => return Err(StoreError::ObjectExists(id)),
                Err(source) => {
                    return Err(StoreError::PeerUnreachable {
                        node_id: peer.node_id(),
                        source,
                    })
                }
            }
        }

        let mut st = self.lock();
        let st = &mut *st;
        if st.table.entries.contains_key(&id) {
            return Err(StoreError::ObjectExists(id));
        }
        if extent > st.allocator.capacity() {
            return Err(StoreError::OutOfMemory { requested: extent });
        }
        let offset = match st.allocator.allocate(extent) {
            Ok(offset) => offset,
            Err(AllocError::OutOfMemory { .. }) => {
                self.evict_locked(st, extent);
                st.allocator
                    .allocate(extent)
                    .map_err(|_| StoreError::OutOfMemory { requested: extent })?
            }
            Err(e) => unreachable!("allocator rejected a positive size: {e}"),
        };
        let entry = ObjectEntry {
            id,
            offset,
            data_size,
            metadata_size,
            state: ObjectState::Created,
            ref_count: 1,
            last_release: None,
            seal_checksum: None,
            creator: client,
            release_seq: None,
        };
        let desc = self.local_descriptor(&entry, true);
        st.table.entries.insert(id, entry);
        let held = st.clients.entry(client).or_default();
        held.entry(id).or_insert(Holding { count: 0, local: true }).count += 1;
        Ok(desc)
    }

    pub fn seal_object(&self, id: ObjectId) -> Result<(), StoreError> {
        let (offset, len) = {
            let st = self.lock();
            let entry = st.table.get(&id).ok_or(StoreError::ObjectNotFound(id))?;
            if entry.state == ObjectState::Sealed {
                return Err(StoreError::AlreadySealed(id));
            }
            (entry.offset, entry.payload_len())
        };
        let checksum = self.region.checksum(offset, len)?;

        let mut st = self.lock();
        let st = &mut *st;
        let entry = st.table.entries.get_mut(&id).ok_or(StoreError::ObjectNotFound(id))?;
        if entry.state == ObjectState::Sealed {
            return Err(StoreError::AlreadySealed(id));
        }
        entry.state = ObjectState::Sealed;
        entry.seal_checksum = Some(checksum);
        if entry.ref_count == 0 {
            st.table.enqueue(id);
        }
        st.seal_generation += 1;
        self.sealed.notify_all();
        Ok(())
    }

    /// Resolves each id to a read-only descriptor, locally or through a peer,
    /// waiting up to `timeout` for ids not yet sealed anywhere. Ids still
    /// missing at the deadline come back as `None`.
    pub fn get_objects(
        &self,
        client: ClientId,
        ids: &[ObjectId],
        timeout: Duration,
    ) -> Result<Vec<Option<BufferDescriptor>>, StoreError> {
        self.get_objects_until(client, ids, timeout, &|| false)
    }

    /// [`get_objects`](Self::get_objects) that also gives up waiting once
    /// `cancelled` returns true; it is polled between lookups.
    pub fn get_objects_until(
        &self,
        client: ClientId,
        ids: &[ObjectId],
        timeout: Duration,
        cancelled: &dyn Fn() -> bool,
    ) -> Result<Vec<Option<BufferDescriptor>>, StoreError> {
        if ids.is_empty() {
            return Err(StoreError::EmptyRequest);
        }
        let deadline = Instant::now() + timeout;
        let mut out: Vec<Option<BufferDescriptor>> = vec![None; ids.len()];
        loop {
            let generation = {
                let mut st = self.lock();
                self.resolve_local(&mut st, client, ids, &mut out);
                st.seal_generation
            };
            if out.iter().all(Option::is_some) {
                return Ok(out);
            }
            self.resolve_remote(client, ids, &mut out);
            if out.iter().all(Option::is_some) {
                return Ok(out);
            }

            let now = Instant::now();
            if now >= deadline || cancelled() {
                return Ok(out);
            }
            let wait = (deadline - now).min(self.options.poll_interval);
            let st = self.lock();
            if st.seal_generation == generation {
                drop(self.sealed.wait_timeout(st, wait).unwrap_or_else(|e| e.into_inner()));
            }
        }
    }

    fn resolve_local(
        &self,
        st: &mut StoreState,
        client: ClientId,
        ids: &[ObjectId],
        out: &mut [Option<BufferDescriptor>],
    ) {
        for (slot, id) in out.iter_mut().zip(ids) {
            if slot.is_some() {
                continue;
            }
            let Some(entry) = st.table.entries.get_mut(id) else {
                continue;
            };
            if entry.state != ObjectState::Sealed {
                continue;
            }
            entry.ref_count += 1;
            let desc = self.local_descriptor(entry, false);
            if entry.ref_count == 1 {
                st.table.dequeue(id);
            }
            let held = st.clients.entry(client).or_default();
            held.entry(*id).or_insert(Holding { count: 0, local: true }).count += 1;
            *slot = Some(desc);
        }
    }

    fn resolve_remote(&self, client: ClientId, ids: &[ObjectId], out: &mut [Option<BufferDescriptor>]) {
        for peer in &self.peers {
            let missing: Vec<usize> = (0..ids.len()).filter(|&i| out[i].is_none()).collect();
            if missing.is_empty() {
                return;
            }
            let query: Vec<ObjectId> = missing.iter().map(|&i| ids[i]).collect();
            let responses = match peer.lookup(&query) {
                Ok(r) => r,
                Err(e) => {
                    warn!(peer = peer.node_id(), error = %e, "peer lookup failed, resolving locally only");
                    continue;
                }
            };
            let mut found = Vec::new();
            for (&i, resp) in missing.iter().zip(&responses) {
                if resp.found && resp.sealed {
                    out[i] = Some(BufferDescriptor {
                        node_id: peer.node_id(),
                        offset: resp.offset,
                        data_size: resp.data_size,
                        metadata_size: resp.metadata_size,
                        writable: false,
                    });
                    found.push(ids[i]);
                }
            }
            if !found.is_empty() {
                let mut st = self.lock();
                let held = st.clients.entry(client).or_default();
                for id in found {
                    held.entry(id).or_insert(Holding { count: 0, local: false }).count += 1;
                }
            }
        }
    }

    pub fn release_object(&self, client: ClientId, id: ObjectId) -> Result<(), StoreError> {
        let mut st = self.lock();
        let st = &mut *st;
        let held = st.clients.entry(client).or_default();
        let Entry::Occupied(mut slot) = held.entry(id) else {
            return Err(if st.table.entries.contains_key(&id) {
                StoreError::NotReferenced(id)
            } else {
                StoreError::ObjectNotFound(id)
            });
        };
        let local = slot.get().local;
        slot.get_mut().count -= 1;
        if slot.get().count == 0 {
            slot.remove();
        }
        if !local {
            return Ok(());
        }
        let entry = st.table.entries.get_mut(&id).ok_or(StoreError::ObjectNotFound(id))?;
        if entry.ref_count == 0 {
            return Err(StoreError::NotReferenced(id));
        }
        entry.ref_count -= 1;
        if entry.ref_count == 0 && entry.state == ObjectState::Sealed {
            st.table.enqueue(id);
        }
        Ok(())
    }

    /// Evicts least-recently-released objects until an extent of
    /// `bytes_needed` fits or nothing evictable remains. Returns the bytes
    /// freed.
    pub fn evict_until(&self, bytes_needed: u64) -> u64 {
        let mut st = self.lock();
        self.evict_locked(&mut st, bytes_needed)
    }

    /// Evicts least-recently-released objects until at least `bytes` have
    /// been freed or nothing evictable remains. Returns the bytes freed.
    pub fn evict_bytes(&self, bytes: u64) -> u64 {
        let mut st = self.lock();
        let mut freed = 0;
        while freed < bytes {
            let Some(id) = st.table.eviction_order.first_key_value().map(|(_, v)| *v) else {
                break;
            };
            freed += self.evict_one(&mut st, id);
        }
        freed
    }

    fn evict_one(&self, st: &mut StoreState, id: ObjectId) -> u64 {
        let entry = st.table.entries.remove(&id).expect("queued object missing from table");
        st.table.dequeue_evicted(entry.release_seq);
        assert!(
            entry.ref_count == 0 && entry.state == ObjectState::Sealed,
            "eviction candidate {id} is in use (refs {}, {:?})",
            entry.ref_count,
            entry.state
        );
        self.evictions.fetch_add(1, Ordering::Relaxed);
        st.allocator
            .deallocate(entry.offset)
            .expect("table entry without allocation")
    }

    fn evict_locked(&self, st: &mut StoreState, bytes_needed: u64) -> u64 {
        let mut freed = 0;
        while !st.allocator.can_fit(bytes_needed) {
            let Some(id) = st.table.eviction_order.first_key_value().map(|(_, v)| *v) else {
                break;
            };
            freed += self.evict_one(st, id);
        }
        freed
    }

    pub fn contains(&self, id: &ObjectId) -> Presence {
        match self.lock().table.get(id).map(|e| e.state) {
            None => Presence::Absent,
            Some(ObjectState::Created) => Presence::Created,
            Some(ObjectState::Sealed) => Presence::Sealed,
        }
    }

    /// Peer-service view of the table: unsealed objects report as absent.
    pub fn lookup_local(&self, ids: &[ObjectId]) -> Vec<LookupResponse> {
        let st = self.lock();
        ids.iter()
            .map(|id| match st.table.get(id) {
                Some(e) if e.state == ObjectState::Sealed => LookupResponse {
                    found: true,
                    sealed: true,
                    offset: e.offset,
                    data_size: e.data_size,
                    metadata_size: e.metadata_size,
                },
                _ => LookupResponse::absent(),
            })
            .collect()
    }

    /// True if `id` is present in any state.
    pub fn exists_local(&self, id: &ObjectId) -> bool {
        self.lock().table.entries.contains_key(id)
    }

    pub fn entry(&self, id: &ObjectId) -> Option<ObjectEntry> {
        self.lock().table.get(id).cloned()
    }

    pub fn ref_count(&self, id: &ObjectId) -> Option<u32> {
        self.lock().table.get(id).map(|e| e.ref_count)
    }

    pub fn stats(&self) -> StoreStats {
        let st = self.lock();
        let mut stats = StoreStats {
            objects: st.table.len(),
            created: 0,
            sealed: 0,
            evictable: st.table.eviction_order.len(),
            total_refs: 0,
            clients: st.clients.len(),
            evictions: self.evictions.load(Ordering::Relaxed),
            allocator: st.allocator.stats(),
        };
        for e in st.table.entries.values() {
            match e.state {
                ObjectState::Created => stats.created += 1,
                ObjectState::Sealed => stats.sealed += 1,
            }
            stats.total_refs += u64::from(e.ref_count);
        }
        stats
    }

    /// Cross-checks the table, the eviction queue, the allocator and client
    /// reference bookkeeping.
    pub fn check_invariants(&self) -> Result<(), String> {
        let st = self.lock();
        st.table.check_invariants()?;
        st.allocator.check_invariants()?;
        let mut refs: HashMap<ObjectId, u32> = HashMap::new();
        for held in st.clients.values() {
            for (id, h) in held.iter().filter(|(_, h)| h.local) {
                *refs.entry(*id).or_default() += h.count;
            }
        }
        for e in st.table.entries.values() {
            let expected = refs.get(&e.id).copied().unwrap_or(0);
            if e.ref_count != expected {
                return Err(format!("{}: ref_count {} but clients hold {expected}", e.id, e.ref_count));
            }
            let size = st
                .allocator
                .allocation_size(e.offset)
                .ok_or_else(|| format!("{}: no allocation at {}", e.id, e.offset))?;
            if size != align_up(e.payload_len()).unwrap() {
                return Err(format!("{}: extent {size} for payload {}", e.id, e.payload_len()));
            }
        }
        if st.allocator.allocated_extents().len() != st.table.len() {
            return Err("allocations without table entries".into());
        }
        Ok(())
    }

    /// Recomputes the digest of every sealed object and reports mismatches.
    pub fn audit(&self) -> Result<Vec<AuditViolation>, StoreError> {
        let sealed: Vec<(ObjectId, u64, u64, u64)> = {
            let st = self.lock();
            st.table
                .entries
                .values()
                .filter_map(|e| e.seal_checksum.map(|c| (e.id, e.offset, e.payload_len(), c)))
                .collect()
        };
        let mut violations = Vec::new();
        for (id, offset, len, sealed) in sealed {
            let recomputed = self.region.checksum(offset, len)?;
            if recomputed != sealed {
                violations.push(AuditViolation { id, sealed, recomputed });
            }
        }
        Ok(violations)
    }

    /// Order-independent digest of the table's observable state, for checking
    /// that read-only paths leave it untouched.
    pub fn state_digest(&self) -> u64 {
        let st = self.lock();
        let mut entries: Vec<&ObjectEntry> = st.table.entries.values().collect();
        entries.sort_by_key(|e| e.id);
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for e in entries {
            (e.id, e.offset, e.data_size, e.metadata_size, e.state, e.ref_count, e.seal_checksum).hash(&mut h);
        }
        st.table.eviction_order.len().hash(&mut h);
        st.allocator.stats().bytes_in_use.hash(&mut h);
        h.finish()
    }
}
