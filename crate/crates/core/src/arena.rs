//! File-backed memory arenas standing in for disaggregated memory.
//!
//! Every store node owns one arena: a plain file (normally on tmpfs) mapped
//! shared by the store daemon and by its clients. Other nodes attach the same
//! file as a read-only [`RegionKind::RemoteView`]; reads through a remote view
//! are slowed down according to a [`RemoteAccessModel`] so that the
//! local/remote asymmetry of the real interconnect is reproduced. Remote views
//! are mapped `PROT_READ`, so a write through them is impossible even with
//! raw pointers; the API reports such attempts as
//! [`ArenaError::CoherencyViolation`].

use std::fs::{File, OpenOptions};
use std::hint::black_box;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use memmap2::{Mmap, MmapOptions, MmapRaw};
use thiserror::Error;

/// Identifies a store node and therefore the arena it owns.
pub type NodeId = u32;

/// Size of the warm-up copy used to estimate local memory bandwidth.
pub const CALIBRATION_BYTES: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum ArenaError {
    #[error("arena io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("arena capacity must be positive")]
    InvalidCapacity,
    #[error("access [{offset}, {offset}+{len}) outside arena of {capacity} bytes")]
    OutOfBounds { offset: u64, len: u64, capacity: u64 },
    #[error("write attempted through a remote view of node {node_id}")]
    CoherencyViolation { node_id: NodeId },
    #[error("invalid remote access model: {0}")]
    InvalidAccessModel(String),
}

pub type Result<T, E = ArenaError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionKind {
    LocalOwned,
    RemoteView,
}

/// Penalties applied to reads through a remote view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemoteAccessModel {
    /// Fixed delay added to every non-empty read call.
    pub per_access_latency: Duration,
    /// Remote read throughput as a fraction of local throughput, in (0, 1].
    pub bandwidth_ratio: f64,
    /// Delay added to every peer lookup round trip.
    pub peer_rpc_latency: Duration,
}

impl Default for RemoteAccessModel {
    fn default() -> Self {
        // 5.75 GiB/s remote vs 6.5 GiB/s local; ~2.5 ms per lookup round trip.
        Self {
            per_access_latency: Duration::ZERO,
            bandwidth_ratio: 0.885,
            peer_rpc_latency: Duration::from_micros(2_500),
        }
    }
}

impl RemoteAccessModel {
    /// A model with no penalties at all.
    pub fn transparent() -> Self {
        Self {
            per_access_latency: Duration::ZERO,
            bandwidth_ratio: 1.0,
            peer_rpc_latency: Duration::ZERO,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_ratio > 0.0 && self.bandwidth_ratio <= 1.0) {
            return Err(ArenaError::InvalidAccessModel(format!(
                "bandwidth_ratio {} not in (0, 1]",
                self.bandwidth_ratio
            )));
        }
        Ok(())
    }

    /// Minimum wall time a remote read of `len` bytes must take, given how
    /// long the same copy took locally.
    pub fn read_budget(&self, len: usize, reference_bandwidth: f64, copy_time: Duration) -> Duration {
        let modeled = len as f64 / (reference_bandwidth * self.bandwidth_ratio);
        let scaled = copy_time.as_secs_f64() / self.bandwidth_ratio;
        self.per_access_latency + Duration::from_secs_f64(modeled.max(scaled))
    }
}

enum Mapping {
    Owned(MmapRaw),
    Remote {
        map: Mmap,
        model: RemoteAccessModel,
        reference_bandwidth: f64,
    },
}

/// One node's arena, either owned (read-write) or a remote read-only view.
pub struct MemoryRegion {
    node_id: NodeId,
    capacity: u64,
    backing_path: PathBuf,
    mapping: Mapping,
}

impl std::fmt::Debug for MemoryRegion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryRegion")
            .field("node_id", &self.node_id)
            .field("kind", &self.kind())
            .field("capacity", &self.capacity)
            .field("backing_path", &self.backing_path)
            .finish()
    }
}

impl MemoryRegion {
    /// Creates (or reopens) the backing file at exactly `capacity` bytes and
    /// maps it read-write. Existing content is preserved; new space reads as
    /// zeros.
    pub fn create(node_id: NodeId, capacity: u64, backing_path: impl AsRef<Path>) -> Result<Self> {
        if capacity == 0 {
            return Err(ArenaError::InvalidCapacity);
        }
        let path = backing_path.as_ref();
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        if file.metadata()?.len() != capacity {
            file.set_len(capacity)?;
        }
        Self::map_owned(node_id, capacity, path, &file)
    }

    /// Maps an existing arena read-write without resizing it. Used by
    /// clients of the owning store.
    pub fn open_owned(node_id: NodeId, backing_path: impl AsRef<Path>) -> Result<Self> {
        let path = backing_path.as_ref();
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let capacity = file.metadata()?.len();
        if capacity == 0 {
            return Err(ArenaError::InvalidCapacity);
        }
        Self::map_owned(node_id, capacity, path, &file)
    }

    fn map_owned(node_id: NodeId, capacity: u64, path: &Path, file: &File) -> Result<Self> {
        let len = usize::try_from(capacity).map_err(|_| ArenaError::InvalidCapacity)?;
        let raw = MmapOptions::new().len(len).map_raw(file)?;
        Ok(Self {
            node_id,
            capacity,
            backing_path: path.to_path_buf(),
            mapping: Mapping::Owned(raw),
        })
    }

    /// Attaches another node's arena read-only, using the process-wide
    /// calibrated local bandwidth as the penalty reference.
    pub fn attach_remote(node_id: NodeId, backing_path: impl AsRef<Path>, model: RemoteAccessModel) -> Result<Self> {
        Self::attach_remote_with_reference(node_id, backing_path, model, local_reference_bandwidth())
    }

    pub fn attach_remote_with_reference(
        node_id: NodeId,
        backing_path: impl AsRef<Path>,
        model: RemoteAccessModel,
        reference_bandwidth: f64,
    ) -> Result<Self> {
        model.validate()?;
        if !(reference_bandwidth.is_finite() && reference_bandwidth > 0.0) {
            return Err(ArenaError::InvalidAccessModel(format!(
                "reference bandwidth {reference_bandwidth} must be positive"
            )));
        }
        let path = backing_path.as_ref();
        let file = File::open(path)?;
        let capacity = file.metadata()?.len();
        if capacity == 0 {
            return Err(ArenaError::InvalidCapacity);
        }
        // SAFETY: the mapping is read-only; the owner may mutate the file
        // concurrently, which is the point of the emulation.
        let map = unsafe { MmapOptions::new().map(&file)? };
        Ok(Self {
            node_id,
            capacity,
            backing_path: path.to_path_buf(),
            mapping: Mapping::Remote {
                map,
                model,
                reference_bandwidth,
            },
        })
    }

    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    pub fn kind(&self) -> RegionKind {
        match self.mapping {
            Mapping::Owned(_) => RegionKind::LocalOwned,
            Mapping::Remote { .. } => RegionKind::RemoteView,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn backing_path(&self) -> &Path {
        &self.backing_path
    }

    pub fn access_model(&self) -> Option<&RemoteAccessModel> {
        match &self.mapping {
            Mapping::Owned(_) => None,
            Mapping::Remote { model, .. } => Some(model),
        }
    }

    fn check_bounds(&self, offset: u64, len: u64) -> Result<()> {
        match offset.checked_add(len) {
            Some(end) if end <= self.capacity => Ok(()),
            _ => Err(ArenaError::OutOfBounds {
                offset,
                len,
                capacity: self.capacity,
            }),
        }
    }

    fn base_ptr(&self) -> *const u8 {
        match &self.mapping {
            Mapping::Owned(raw) => raw.as_ptr(),
            Mapping::Remote { map, .. } => map.as_ptr(),
        }
    }

    pub fn read_at(&self, offset: u64, len: u64) -> Result<Vec<u8>> {
        self.check_bounds(offset, len)?;
        let mut out = vec![0u8; len as usize];
        self.read_into(offset, &mut out)?;
        Ok(out)
    }

    /// Copies `buf.len()` bytes starting at `offset` into `buf`, applying the
    /// remote access penalty when this is a remote view.
    pub fn read_into(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.check_bounds(offset, buf.len() as u64)?;
        if buf.is_empty() {
            return Ok(());
        }
        let started = Instant::now();
        // SAFETY: bounds checked above; the mapping outlives `self`.
        unsafe {
            std::ptr::copy_nonoverlapping(self.base_ptr().add(offset as usize), buf.as_mut_ptr(), buf.len());
        }
        if let Mapping::Remote {
            model,
            reference_bandwidth,
            ..
        } = &self.mapping
        {
            let budget = model.read_budget(buf.len(), *reference_bandwidth, started.elapsed());
            wait_until(started + budget);
        }
        Ok(())
    }

    pub fn write_at(&self, offset: u64, data: &[u8]) -> Result<()> {
        let raw = match &self.mapping {
            Mapping::Owned(raw) => raw,
            Mapping::Remote { .. } => {
                return Err(ArenaError::CoherencyViolation { node_id: self.node_id });
            }
        };
        self.check_bounds(offset, data.len() as u64)?;
        // SAFETY: bounds checked; callers write disjoint extents (the store
        // hands each creator its own allocation).
        unsafe {
            std::ptr::copy_nonoverlapping(data.as_ptr(), raw.as_mut_ptr().add(offset as usize), data.len());
        }
        Ok(())
    }

    /// 64-bit digest of a byte range, computed in place without penalties.
    pub fn checksum(&self, offset: u64, len: u64) -> Result<u64> {
        self.check_bounds(offset, len)?;
        // SAFETY: bounds checked; the range is not being written (sealed).
        let bytes = unsafe { std::slice::from_raw_parts(self.base_ptr().add(offset as usize), len as usize) };
        Ok(xxhash_rust::xxh3::xxh3_64(bytes))
    }

    pub fn flush(&self) -> Result<()> {
        if let Mapping::Owned(raw) = &self.mapping {
            raw.flush()?;
        }
        Ok(())
    }
}

/// Blocks until `deadline`, sleeping for the coarse part and spinning for the
/// last stretch so sub-millisecond budgets stay accurate.
fn wait_until(deadline: Instant) {
    const SPIN_WINDOW: Duration = Duration::from_micros(200);
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let remaining = deadline - now;
        if remaining > SPIN_WINDOW * 2 {
            std::thread::sleep(remaining - SPIN_WINDOW);
        } else {
            std::hint::spin_loop();
        }
    }
}

/// Measures peak single-threaded sequential read bandwidth in bytes per
/// second: `bytes` of source are copied out in chunk sizes from cache-sized
/// to whole-buffer, passes interleaved across sizes so a transient slowdown
/// cannot spoil every sample of one size, and the fastest pass wins.
/// Using the peak keeps the modeled remote floor at or below what any real
/// local read achieves.
pub fn measure_local_bandwidth(bytes: usize) -> f64 {
    const PASSES: usize = 7;
    let bytes = bytes.max(4096);
    let src = vec![0xA5u8; bytes];
    let chunks: Vec<usize> = [64 << 10, 1 << 20, 8 << 20, bytes].iter().map(|&c: &usize| c.min(bytes)).collect();
    let mut dst = vec![0u8; bytes];
    let mut peak = 0.0f64;
    for _ in 0..PASSES {
        for &chunk in &chunks {
            let t = Instant::now();
            for part in src.chunks(chunk) {
                dst[..part.len()].copy_from_slice(black_box(part));
                black_box(&mut dst);
            }
            peak = peak.max(bytes as f64 / t.elapsed().as_secs_f64().max(1e-9));
        }
    }
    peak
}

/// Process-wide calibrated local bandwidth, measured on first use.
pub fn local_reference_bandwidth() -> f64 {
    static BANDWIDTH: OnceLock<f64> = OnceLock::new();
    *BANDWIDTH.get_or_init(|| measure_local_bandwidth(CALIBRATION_BYTES))
}
