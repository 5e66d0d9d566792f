//! Best-fit arena allocator over a size-ordered free-region index.
//!
//! Free regions are indexed twice: by `(size, offset)` so the smallest region
//! that fits a request is a single ordered-map range query, and by offset so
//! a freed extent can find its neighbours for coalescing. Both lookups are
//! `O(log F)` in the number of free regions.
//!
//! The allocator hands out exact byte counts; callers that want alignment
//! round their requests (the store rounds to 8 bytes).

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AllocError {
    #[error("no free region can hold {requested} bytes (largest free region {largest_free})")]
    OutOfMemory { requested: u64, largest_free: u64 },
    #[error("allocation size must be positive")]
    InvalidSize,
    #[error("offset {0} is not an allocated extent")]
    UnknownOffset(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FreeRegion {
    pub offset: u64,
    pub size: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocatorStats {
    pub capacity: u64,
    pub bytes_in_use: u64,
    pub free_region_count: usize,
    pub largest_free_region: u64,
}

#[derive(Debug, Clone)]
pub struct ArenaAllocator {
    capacity: u64,
    coalesce: bool,
    free_by_size: BTreeSet<(u64, u64)>,
    free_by_offset: BTreeMap<u64, u64>,
    allocated: BTreeMap<u64, u64>,
    bytes_in_use: u64,
}

impl ArenaAllocator {
    /// A fresh allocator with one free region spanning `[0, capacity)` and
    /// coalescing enabled.
    pub fn new(capacity: u64) -> Self {
        Self::with_coalescing(capacity, true)
    }

    pub fn with_coalescing(capacity: u64, coalesce: bool) -> Self {
        let mut alloc = Self {
            capacity,
            coalesce,
            free_by_size: BTreeSet::new(),
            free_by_offset: BTreeMap::new(),
            allocated: BTreeMap::new(),
            bytes_in_use: 0,
        };
        if capacity > 0 {
            alloc.insert_free(0, capacity);
        }
        alloc
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn coalescing(&self) -> bool {
        self.coalesce
    }

    fn insert_free(&mut self, offset: u64, size: u64) {
        self.free_by_size.insert((size, offset));
        self.free_by_offset.insert(offset, size);
    }

    fn remove_free(&mut self, offset: u64, size: u64) {
        self.free_by_size.remove(&(size, offset));
        self.free_by_offset.remove(&offset);
    }

    /// Places `size` bytes in the smallest free region that fits, lowest
    /// offset first among equal sizes. Returns the extent's offset.
    pub fn allocate(&mut self, size: u64) -> Result<u64, AllocError> {
        if size == 0 {
            return Err(AllocError::InvalidSize);
        }
        let &(region_size, offset) = self
            .free_by_size
            .range((size, 0)..)
            .next()
            .ok_or(AllocError::OutOfMemory {
                requested: size,
                largest_free: self.largest_free_region(),
            })?;
        self.remove_free(offset, region_size);
        if region_size > size {
            self.insert_free(offset + size, region_size - size);
        }
        self.allocated.insert(offset, size);
        self.bytes_in_use += size;
        Ok(offset)
    }

    /// Returns the extent starting at `offset` to the free index and returns
    /// its size.
    pub fn deallocate(&mut self, offset: u64) -> Result<u64, AllocError> {
        let size = self.allocated.remove(&offset).ok_or(AllocError::UnknownOffset(offset))?;
        self.bytes_in_use -= size;

        let (mut start, mut len) = (offset, size);
        if self.coalesce {
            if let Some((&prev_off, &prev_size)) = self.free_by_offset.range(..offset).next_back() {
                if prev_off + prev_size == offset {
                    self.remove_free(prev_off, prev_size);
                    start = prev_off;
                    len += prev_size;
                }
            }
            if let Some(&next_size) = self.free_by_offset.get(&(offset + size)) {
                self.remove_free(offset + size, next_size);
                len += next_size;
            }
        }
        self.insert_free(start, len);
        Ok(size)
    }

    pub fn allocation_size(&self, offset: u64) -> Option<u64> {
        self.allocated.get(&offset).copied()
    }

    pub fn largest_free_region(&self) -> u64 {
        self.free_by_size.iter().next_back().map_or(0, |&(size, _)| size)
    }

    /// Whether an allocation of `size` bytes would currently succeed.
    pub fn can_fit(&self, size: u64) -> bool {
        size > 0 && self.largest_free_region() >= size
    }

    pub fn stats(&self) -> AllocatorStats {
        AllocatorStats {
            capacity: self.capacity,
            bytes_in_use: self.bytes_in_use,
            free_region_count: self.free_by_offset.len(),
            largest_free_region: self.largest_free_region(),
        }
    }

    /// Free regions in address order.
    pub fn free_regions(&self) -> Vec<FreeRegion> {
        self.free_by_offset
            .iter()
            .map(|(&offset, &size)| FreeRegion { offset, size })
            .collect()
    }

    /// Allocated extents in address order.
    pub fn allocated_extents(&self) -> Vec<FreeRegion> {
        self.allocated
            .iter()
            .map(|(&offset, &size)| FreeRegion { offset, size })
            .collect()
    }

    /// Verifies that free and allocated extents tile `[0, capacity)` exactly,
    /// that both free indices agree, and (with coalescing) that no two free
    /// regions touch. Returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.free_by_size.len() != self.free_by_offset.len() {
            return Err("free indices disagree in length".into());
        }
        for (&offset, &size) in &self.free_by_offset {
            if size == 0 {
                return Err(format!("empty free region at {offset}"));
            }
            if !self.free_by_size.contains(&(size, offset)) {
                return Err(format!("free region {offset}+{size} missing from size index"));
            }
        }
        let in_use: u64 = self.allocated.values().sum();
        if in_use != self.bytes_in_use {
            return Err(format!("bytes_in_use {} != sum of extents {in_use}", self.bytes_in_use));
        }

        // both maps are address-ordered, so walk them in step
        let mut free_iter = self.free_by_offset.iter().peekable();
        let mut used_iter = self.allocated.iter().peekable();
        let mut cursor = 0u64;
        let mut prev_free = false;
        loop {
            let (offset, size, free) = match (free_iter.peek(), used_iter.peek()) {
                (None, None) => break,
                (Some(&(&fo, &fs)), Some(&(&uo, _))) if fo < uo => {
                    free_iter.next();
                    (fo, fs, true)
                }
                (Some(&(&fo, &fs)), None) => {
                    free_iter.next();
                    (fo, fs, true)
                }
                (_, Some(&(&uo, &us))) => {
                    used_iter.next();
                    (uo, us, false)
                }
            };
            if offset != cursor {
                return Err(format!("gap or overlap at {cursor}: next extent starts at {offset}"));
            }
            if self.coalesce && free && prev_free {
                return Err(format!("adjacent free regions at {offset}"));
            }
            cursor = offset + size;
            prev_free = free;
        }
        if cursor != self.capacity {
            return Err(format!("extents end at {cursor}, capacity {}", self.capacity));
        }
        Ok(())
    }
}
