//! Reference best-fit allocator: a flat, address-ordered free list searched
//! linearly. Deliberately shares no code or data structures with the real one.

use rand::Rng;

#[derive(Debug, Clone)]
pub struct LinearBestFit {
    coalesce: bool,
    /// (offset, size), sorted by offset.
    free: Vec<(u64, u64)>,
    /// (offset, size), unsorted.
    live: Vec<(u64, u64)>,
}

impl LinearBestFit {
    pub fn new(capacity: u64, coalesce: bool) -> Self {
        Self {
            coalesce,
            free: vec![(0, capacity)],
            live: Vec::new(),
        }
    }

    pub fn allocate(&mut self, size: u64) -> Option<u64> {
        let mut best: Option<usize> = None;
        for (i, &(off, len)) in self.free.iter().enumerate() {
            if len < size {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => {
                    let (boff, blen) = self.free[b];
                    len < blen || (len == blen && off < boff)
                }
            };
            if better {
                best = Some(i);
            }
        }
        let i = best?;
        let (off, len) = self.free[i];
        if len == size {
            self.free.remove(i);
        } else {
            self.free[i] = (off + size, len - size);
        }
        self.live.push((off, size));
        Some(off)
    }

    pub fn deallocate(&mut self, offset: u64) -> u64 {
        let pos = self.live.iter().position(|&(o, _)| o == offset).expect("oracle: unknown offset");
        let (_, size) = self.live.swap_remove(pos);
        let at = self.free.partition_point(|&(o, _)| o < offset);
        self.free.insert(at, (offset, size));
        if self.coalesce {
            if at + 1 < self.free.len() && self.free[at].0 + self.free[at].1 == self.free[at + 1].0 {
                self.free[at].1 += self.free[at + 1].1;
                self.free.remove(at + 1);
            }
            if at > 0 && self.free[at - 1].0 + self.free[at - 1].1 == self.free[at].0 {
                self.free[at - 1].1 += self.free[at].1;
                self.free.remove(at);
            }
        }
        size
    }

    pub fn free_regions(&self) -> &[(u64, u64)] {
        &self.free
    }

    pub fn live(&self) -> &[(u64, u64)] {
        &self.live
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Alloc(u64),
    /// Frees the live extent at this index (modulo the live count).
    Free(usize),
}

/// A random alloc/free trace with sizes drawn uniformly from `1..=max_size`.
pub fn random_trace(rng: &mut impl Rng, len: usize, max_size: u64) -> Vec<Op> {
    (0..len)
        .map(|_| {
            if rng.gen_bool(0.55) {
                Op::Alloc(rng.gen_range(1..=max_size))
            } else {
                Op::Free(rng.gen())
            }
        })
        .collect()
}

/// Replays `trace` against both allocators. Every allocation must land at the
/// oracle's offset (or fail exactly when the oracle fails), the real
/// allocator's invariants must hold after every step, and the final free
/// regions must match.
pub fn replay(trace: &[Op], capacity: u64, coalesce: bool) -> Result<(), String> {
    use disagg_store::allocator::{AllocError, ArenaAllocator};

    let mut real = ArenaAllocator::with_coalescing(capacity, coalesce);
    let mut oracle = LinearBestFit::new(capacity, coalesce);
    for (step, op) in trace.iter().enumerate() {
        match *op {
            Op::Alloc(size) => match (real.allocate(size), oracle.allocate(size)) {
                (Ok(a), Some(b)) if a == b => {}
                (Err(AllocError::OutOfMemory { .. }), None) => {}
                (a, b) => return Err(format!("step {step}: alloc({size}) real {a:?} oracle {b:?}")),
            },
            Op::Free(i) => {
                if oracle.live().is_empty() {
                    continue;
                }
                let (offset, size) = oracle.live()[i % oracle.live().len()];
                oracle.deallocate(offset);
                match real.deallocate(offset) {
                    Ok(s) if s == size => {}
                    other => return Err(format!("step {step}: free({offset}) real {other:?}, oracle size {size}")),
                }
            }
        }
        real.check_invariants().map_err(|e| format!("step {step}: {e}"))?;
    }
    let real_free: Vec<(u64, u64)> = real.free_regions().iter().map(|r| (r.offset, r.size)).collect();
    if real_free != oracle.free_regions() {
        return Err(format!(
            "final free regions differ: real {} regions, oracle {}",
            real_free.len(),
            oracle.free_regions().len()
        ));
    }
    Ok(())
}
