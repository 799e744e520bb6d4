//! Capacity-limited LRU cache of live tensors for one execution.

use std::collections::BTreeMap;

use super::KeyMode;
use crate::exec::{TensorStore, ValueKey};
use crate::kernels::{Buffer, ExecError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub stores: u64,
    /// Stores answered with an existing entry instead of the new value.
    pub reuses: u64,
    pub evictions: u64,
    /// Values too large to be cached at all.
    pub bypassed: u64,
}

struct Entry<T> {
    value: Buffer<T>,
    refs: usize,
    last_use: u64,
}

/// Entries are reference counted by the handles that point at them and
/// dropped once the last handle is released. With [`KeyMode::ByShapeDtype`]
/// a store that finds a live entry of the same shape hands that entry back.
pub struct TensorCache<T> {
    capacity: usize,
    mode: KeyMode,
    entries: BTreeMap<u64, Entry<T>>,
    handles: BTreeMap<ValueKey, u64>,
    next_slot: u64,
    clock: u64,
    bytes: usize,
    stats: CacheStats,
}

impl<T: Scalar> TensorCache<T> {
    pub fn new(capacity: usize, mode: KeyMode) -> TensorCache<T> {
        TensorCache {
            capacity,
            mode,
            entries: BTreeMap::new(),
            handles: BTreeMap::new(),
            next_slot: 0,
            clock: 0,
            bytes: 0,
            stats: CacheStats::default(),
        }
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn resident_bytes(&self) -> usize {
        self.bytes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn evict_for(&mut self, keep: u64) {
        while self.bytes > self.capacity {
            let victim = self
                .entries
                .iter()
                .filter(|(slot, _)| **slot != keep)
                .min_by_key(|(slot, e)| (e.last_use, **slot))
                .map(|(slot, _)| *slot);
            let Some(victim) = victim else { break };
            let e = self.entries.remove(&victim).unwrap();
            self.bytes -= e.value.byte_size();
            self.handles.retain(|_, s| *s != victim);
            self.stats.evictions += 1;
        }
    }
}

impl<T: Scalar> TensorStore<T> for TensorCache<T> {
    fn store(&mut self, key: ValueKey, value: Buffer<T>) -> Result<Buffer<T>, ExecError> {
        self.stats.stores += 1;
        let now = self.tick();
        if self.mode == KeyMode::ByShapeDtype {
            let hit = self
                .entries
                .iter()
                .filter(|(_, e)| e.refs > 0 && e.value.shape == value.shape)
                .max_by_key(|(slot, e)| (e.last_use, **slot))
                .map(|(slot, _)| *slot);
            if let Some(slot) = hit {
                let e = self.entries.get_mut(&slot).unwrap();
                e.refs += 1;
                e.last_use = now;
                self.handles.insert(key, slot);
                self.stats.reuses += 1;
                return Ok(e.value.clone());
            }
        }
        Ok(self.admit(key, value))
    }

    fn release(&mut self, key: ValueKey) {
        let Some(slot) = self.handles.remove(&key) else { return };
        if let Some(e) = self.entries.get_mut(&slot) {
            e.refs -= 1;
            if e.refs == 0 {
                let e = self.entries.remove(&slot).unwrap();
                self.bytes -= e.value.byte_size();
            }
        }
    }

    fn preload(&mut self, key: ValueKey, value: Buffer<T>) {
        self.tick();
        self.admit(key, value);
    }
}

impl<T: Scalar> TensorCache<T> {
    fn admit(&mut self, key: ValueKey, value: Buffer<T>) -> Buffer<T> {
        let size = value.byte_size();
        if size > self.capacity {
            self.stats.bypassed += 1;
            return value;
        }
        let slot = self.next_slot;
        self.next_slot += 1;
        self.entries.insert(
            slot,
            Entry {
                value: value.clone(),
                refs: 1,
                last_use: self.clock,
            },
        );
        self.bytes += size;
        self.handles.insert(key, slot);
        self.evict_for(slot);
        value
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn b(v: f32, n: usize) -> Buffer<f32> {
        Buffer::filled(Shape::new(1, 1, 1, n).unwrap(), v)
    }

    #[test]
    fn by_id_is_inert() {
        let mut c = TensorCache::<f32>::new(1 << 20, KeyMode::ById);
        c.store(ValueKey::Vertex(0), b(1.0, 4)).unwrap();
        let out = c.store(ValueKey::Vertex(1), b(2.0, 4)).unwrap();
        assert_eq!(out, b(2.0, 4));
        assert_eq!(c.stats().reuses, 0);
    }

    #[test]
    fn shape_keyed_returns_live_entry() {
        let mut c = TensorCache::<f32>::new(1 << 20, KeyMode::ByShapeDtype);
        c.store(ValueKey::Vertex(0), b(1.0, 4)).unwrap();
        assert_eq!(c.store(ValueKey::Vertex(1), b(2.0, 4)).unwrap(), b(1.0, 4));
        assert_eq!(c.store(ValueKey::Vertex(2), b(3.0, 5)).unwrap(), b(3.0, 5));
        c.release(ValueKey::Vertex(0));
        c.release(ValueKey::Vertex(1));
        assert_eq!(c.store(ValueKey::Vertex(3), b(4.0, 4)).unwrap(), b(4.0, 4));
    }

    #[test]
    fn resident_parameters_can_be_mistaken_for_values() {
        let mut c = TensorCache::<f32>::new(1 << 20, KeyMode::ByShapeDtype);
        c.preload(ValueKey::Param(0, 0), b(9.0, 3));
        c.preload(ValueKey::Param(0, 1), b(8.0, 3));
        assert_eq!(c.stats().reuses, 0);
        assert_eq!(c.store(ValueKey::Vertex(1), b(1.0, 3)).unwrap(), b(8.0, 3));
        let mut inert = TensorCache::<f32>::new(1 << 20, KeyMode::ById);
        inert.preload(ValueKey::Param(0, 0), b(9.0, 3));
        assert_eq!(inert.store(ValueKey::Vertex(1), b(1.0, 3)).unwrap(), b(1.0, 3));
    }

    #[test]
    fn lru_eviction_by_bytes() {
        let mut c = TensorCache::<f32>::new(32, KeyMode::ById);
        c.store(ValueKey::Vertex(0), b(1.0, 4)).unwrap();
        c.store(ValueKey::Vertex(1), b(1.0, 4)).unwrap();
        assert_eq!(c.resident_bytes(), 32);
        c.store(ValueKey::Vertex(2), b(1.0, 4)).unwrap();
        assert_eq!(c.stats().evictions, 1);
        assert_eq!(c.resident_bytes(), 32);
        c.store(ValueKey::Vertex(3), b(1.0, 100)).unwrap();
        assert_eq!(c.stats().bypassed, 1);
        c.release(ValueKey::Vertex(0));
        assert_eq!(c.len(), 2);
    }
}
