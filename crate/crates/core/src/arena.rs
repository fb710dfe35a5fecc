//! Growable buffers with a reallocation-minimizing growth rule and a per-worker
//! scratch pool.
//!
//! Growth rule: when a request exceeds half of the current capacity, the
//! buffer is regrown to four times the request. Buffers never shrink during a
//! run; memory is reclaimed when the owner is dropped.

use std::collections::HashMap;

use crate::error::{MpmError, Result};

/// New capacity after `ensure_capacity(requested)` on a buffer of `capacity`,
/// or `None` when no growth is needed.
#[inline]
pub fn grown_capacity(capacity: usize, requested: usize) -> Option<usize> {
    if requested > capacity / 2 {
        Some(requested.saturating_mul(4))
    } else {
        None
    }
}

#[derive(Debug)]
pub struct GrowBuffer<T> {
    data: Vec<T>,
    capacity: usize,
    realloc_count: u64,
    what: &'static str,
}

impl<T> Default for GrowBuffer<T> {
    fn default() -> Self {
        GrowBuffer::new("buffer")
    }
}

impl<T> GrowBuffer<T> {
    pub fn new(what: &'static str) -> Self {
        GrowBuffer {
            data: Vec::new(),
            capacity: 0,
            realloc_count: 0,
            what,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn realloc_count(&self) -> u64 {
        self.realloc_count
    }

    pub fn element_size(&self) -> usize {
        std::mem::size_of::<T>()
    }

    /// Grows to `4 * requested` when `requested > capacity / 2`; contents up
    /// to `len` are preserved. Returns whether a reallocation happened.
    pub fn ensure_capacity(&mut self, requested: usize) -> Result<bool> {
        let Some(new_cap) = grown_capacity(self.capacity, requested) else {
            return Ok(false);
        };
        let mut fresh: Vec<T> = Vec::new();
        fresh.try_reserve_exact(new_cap).map_err(|_| MpmError::Resource {
            what: self.what,
            requested: new_cap,
        })?;
        fresh.extend(self.data.drain(..));
        self.data = fresh;
        self.capacity = new_cap;
        self.realloc_count += 1;
        Ok(true)
    }

    /// Sets the length to zero; capacity is kept.
    pub fn clear(&mut self) {
        self.data.clear();
    }

    pub fn truncate(&mut self, len: usize) {
        self.data.truncate(len);
    }

    pub fn push(&mut self, value: T) -> Result<()> {
        self.ensure_capacity(self.data.len() + 1)?;
        self.data.push(value);
        Ok(())
    }

    pub fn resize_with(&mut self, len: usize, f: impl FnMut() -> T) -> Result<()> {
        self.ensure_capacity(len)?;
        self.data.resize_with(len, f);
        Ok(())
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T: Clone> GrowBuffer<T> {
    pub fn resize(&mut self, len: usize, value: T) -> Result<()> {
        self.ensure_capacity(len)?;
        self.data.resize(len, value);
        Ok(())
    }

    pub fn extend_from_slice(&mut self, values: &[T]) -> Result<()> {
        self.ensure_capacity(self.data.len() + values.len())?;
        self.data.extend_from_slice(values);
        Ok(())
    }
}

impl<T> std::ops::Deref for GrowBuffer<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> std::ops::DerefMut for GrowBuffer<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

/// Workspace on loan from a [`ScratchPool`]. Must be handed back with
/// [`ScratchPool::release`].
#[derive(Debug)]
pub struct ScratchLease<T> {
    tag: &'static str,
    buffer: GrowBuffer<T>,
}

impl<T> ScratchLease<T> {
    pub fn tag(&self) -> &'static str {
        self.tag
    }
}

impl<T> std::ops::Deref for ScratchLease<T> {
    type Target = GrowBuffer<T>;
    fn deref(&self) -> &GrowBuffer<T> {
        &self.buffer
    }
}

impl<T> std::ops::DerefMut for ScratchLease<T> {
    fn deref_mut(&mut self) -> &mut GrowBuffer<T> {
        &mut self.buffer
    }
}

#[derive(Debug)]
struct ScratchSlot<T> {
    buffer: Option<GrowBuffer<T>>,
    high_water: usize,
}

/// Reusable per-worker workspace keyed by purpose tag.
#[derive(Debug)]
pub struct ScratchPool<T> {
    slots: HashMap<&'static str, ScratchSlot<T>>,
    retired_reallocs: u64,
}

impl<T> Default for ScratchPool<T> {
    fn default() -> Self {
        ScratchPool {
            slots: HashMap::new(),
            retired_reallocs: 0,
        }
    }
}

impl<T: Clone + Default> ScratchPool<T> {
    /// Hands out the workspace for `tag` resized to `size`. Acquiring a tag
    /// that is already on loan is a contract violation.
    pub fn acquire(&mut self, tag: &'static str, size: usize) -> Result<ScratchLease<T>> {
        let slot = self.slots.entry(tag).or_insert_with(|| ScratchSlot {
            buffer: Some(GrowBuffer::new(tag)),
            high_water: 0,
        });
        let Some(mut buffer) = slot.buffer.take() else {
            return Err(MpmError::ContractViolation(format!(
                "scratch tag '{tag}' acquired while already on loan"
            )));
        };
        buffer.clear();
        if let Err(e) = buffer.resize(size, T::default()) {
            slot.buffer = Some(buffer);
            return Err(e);
        }
        slot.high_water = slot.high_water.max(size);
        Ok(ScratchLease { tag, buffer })
    }

    pub fn release(&mut self, lease: ScratchLease<T>) {
        match self.slots.get_mut(lease.tag) {
            Some(slot) if slot.buffer.is_none() => slot.buffer = Some(lease.buffer),
            _ => self.retired_reallocs += lease.buffer.realloc_count(),
        }
    }

    pub fn high_water(&self, tag: &str) -> usize {
        self.slots.get(tag).map_or(0, |s| s.high_water)
    }

    pub fn capacity(&self, tag: &str) -> usize {
        self.slots
            .get(tag)
            .and_then(|s| s.buffer.as_ref())
            .map_or(0, |b| b.capacity())
    }

    /// Allocations performed by all buffers currently held by the pool.
    pub fn realloc_count(&self) -> u64 {
        self.retired_reallocs
            + self
                .slots
                .values()
                .filter_map(|s| s.buffer.as_ref())
                .map(|b| b.realloc_count())
                .sum::<u64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn growth_examples() {
        let mut b: GrowBuffer<u32> = GrowBuffer::new("t");
        b.ensure_capacity(16).unwrap();
        assert_eq!(b.capacity(), 64);
        assert!(!b.ensure_capacity(32).unwrap());
        assert_eq!(b.capacity(), 64);
        assert!(b.ensure_capacity(40).unwrap());
        assert_eq!(b.capacity(), 160);
        assert_eq!(b.realloc_count(), 2);
    }

    #[test]
    fn growth_preserves_contents() {
        let mut b: GrowBuffer<u32> = GrowBuffer::new("t");
        for i in 0..1000 {
            b.push(i).unwrap();
        }
        assert!(b.iter().copied().eq(0..1000));
        assert!(b.capacity() >= 2 * b.len());
    }

    #[test]
    fn sequential_requests_realloc_logarithmically() {
        let n = 1_000_000usize;
        let mut b: GrowBuffer<u8> = GrowBuffer::new("t");
        for r in 1..=n {
            b.ensure_capacity(r).unwrap();
        }
        // Rule simulation: capacity c -> 4r at r = c/2 + 1, so c roughly doubles.
        let mut cap = 0usize;
        let mut expected = 0u64;
        for r in 1..=n {
            if r > cap / 2 {
                cap = 4 * r;
                expected += 1;
            }
        }
        assert_eq!(b.realloc_count(), expected);
        assert!(expected as f64 <= 2.0 * (n as f64).log2());
    }

    proptest! {
        #[test]
        fn growth_rule_matches_simulation(reqs in proptest::collection::vec(0usize..50_000, 1..64)) {
            let mut b: GrowBuffer<u16> = GrowBuffer::new("t");
            let mut cap = 0usize;
            let mut count = 0u64;
            for &r in &reqs {
                let prev = b.capacity();
                b.ensure_capacity(r).unwrap();
                if r > cap / 2 { cap = 4 * r; count += 1; }
                prop_assert_eq!(b.capacity(), cap);
                prop_assert_eq!(b.realloc_count(), count);
                prop_assert!(b.capacity() >= 2 * r);
                prop_assert!(b.capacity() >= prev);
            }
        }
    }

    #[test]
    fn scratch_reuse() {
        let mut pool: ScratchPool<f64> = ScratchPool::default();
        let lease = pool.acquire("stress", 100).unwrap();
        assert_eq!(lease.len(), 100);
        assert_eq!(lease.capacity(), 400);
        pool.release(lease);
        let before = pool.realloc_count();
        let lease = pool.acquire("stress", 100).unwrap();
        pool.release(lease);
        assert_eq!(pool.realloc_count(), before, "same size reuses the block");
        let lease = pool.acquire("stress", 50).unwrap();
        assert_eq!(lease.len(), 50);
        pool.release(lease);
        assert_eq!(pool.realloc_count(), before);
        assert_eq!(pool.high_water("stress"), 100);
        let lease = pool.acquire("stress", 300).unwrap();
        assert_eq!(lease.capacity(), 1200);
        pool.release(lease);
        assert_eq!(pool.realloc_count(), before + 1);
    }

    #[test]
    fn scratch_double_acquire_is_violation() {
        let mut pool: ScratchPool<u32> = ScratchPool::default();
        let a = pool.acquire("keys", 8).unwrap();
        assert!(matches!(pool.acquire("keys", 8), Err(MpmError::ContractViolation(_))));
        let b = pool.acquire("other", 8).unwrap();
        pool.release(a);
        pool.release(b);
        assert!(pool.acquire("keys", 8).is_ok());
    }
}
