//! Content-addressed attention cache.
//!
//! Blocks are keyed by a 128-bit fingerprint of their own quantized content, so
//! repeated or near-identical blocks reuse a previously computed local-feature
//! output. Payloads are stored 8-bit quantized (or raw, for transparency tests)
//! in a byte-budgeted LRU.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};

use xxhash_rust::xxh3::Xxh3;

use crate::error::Result;
use crate::quant::{self, QuantizedTensor, HEADER_BYTES};
use crate::tensor::{Axis, Shape3, Tensor3};

pub const DEFAULT_CAPACITY: usize = 512 << 20;

/// How payloads (and key material) are represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    /// Affine quantization to codes in `[q_min, q_max]`.
    Quantized { q_min: i32, q_max: i32 },
    /// Raw `f32` values; cached and uncached runs are bit-identical.
    Raw,
}

impl Storage {
    pub fn bits(bits: u32) -> Result<Self> {
        let (q_min, q_max) = quant::code_range(bits)?;
        Ok(Storage::Quantized { q_min, q_max })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockKey {
    pub fingerprint: u128,
    pub dim_tag: Axis,
    pub shape: Shape3,
}

fn tag_byte(axis: Axis) -> u8 {
    match axis {
        Axis::Channel => 0,
        Axis::Width => 1,
        Axis::Height => 2,
    }
}

/// Key of `block` under 8-bit quantization and the default scope.
pub fn key_of(block: &Tensor3, dim_tag: Axis) -> BlockKey {
    key_with(block, dim_tag, 0, Storage::Quantized { q_min: 0, q_max: 255 })
}

/// Fingerprints `(scope, dim_tag, shape, key material)`.
///
/// `scope` separates callers whose local-feature function differs (different
/// weights); the quantization parameters are hashed with the codes because
/// equal codes under different scales denote different values.
pub fn key_with(block: &Tensor3, dim_tag: Axis, scope: u64, storage: Storage) -> BlockKey {
    let shape = block.shape();
    let mut h = Xxh3::new();
    h.update(&scope.to_le_bytes());
    h.update(&[tag_byte(dim_tag)]);
    for d in [shape.c, shape.w, shape.h] {
        h.update(&(d as u64).to_le_bytes());
    }
    match storage {
        Storage::Raw => {
            h.update(&[0xff]);
            for v in block.data() {
                h.update(&v.to_bits().to_le_bytes());
            }
        }
        Storage::Quantized { q_min, q_max } => match quant::fit_slice(block.data(), q_min, q_max) {
            Ok(p) => {
                h.update(&p.scale.to_bits().to_le_bytes());
                h.update(&p.zero_point.to_le_bytes());
                h.update(&q_min.to_le_bytes());
                h.update(&q_max.to_le_bytes());
                let mut codes = Vec::with_capacity(block.len());
                quant::encode_slice(block.data(), &p, &mut codes);
                h.update(&codes);
            }
            // Non-finite content: fall back to raw bits so the key stays a pure
            // function of the block.
            Err(_) => {
                h.update(&[0xfe]);
                for v in block.data() {
                    h.update(&v.to_bits().to_le_bytes());
                }
            }
        },
    }
    BlockKey {
        fingerprint: h.digest128(),
        dim_tag,
        shape,
    }
}

#[derive(Debug)]
enum Payload {
    Quantized(QuantizedTensor),
    Raw(Tensor3),
}

impl Payload {
    /// Stored size of a payload for `len` elements.
    fn size_for(len: usize, storage: Storage) -> usize {
        match storage {
            Storage::Raw => HEADER_BYTES + len * std::mem::size_of::<f32>(),
            Storage::Quantized { .. } => HEADER_BYTES + len,
        }
    }

    fn decode(&self) -> Tensor3 {
        match self {
            Payload::Raw(t) => t.clone(),
            // Payloads are produced by `encode`, so they are always consistent.
            Payload::Quantized(q) => quant::decode(q).expect("cached payload is well-formed"),
        }
    }

    fn decode_into(&self, out: &mut Tensor3) {
        match self {
            Payload::Raw(t) => out.data_mut().copy_from_slice(t.data()),
            Payload::Quantized(q) => quant::decode_into(q, out).expect("cached payload is well-formed"),
        }
    }
}

struct Entry {
    payload: Arc<Payload>,
    last_touch: u64,
    size: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    /// Inserts larger than the whole capacity (not stored).
    pub rejected: u64,
    pub bytes_used: usize,
    pub bytes_capacity: usize,
    pub peak_bytes: usize,
    pub lfe_evals_saved: u64,
    pub entries: usize,
}

impl CacheStats {
    pub fn lookups(&self) -> u64 {
        self.hits + self.misses
    }

    pub fn hit_rate(&self) -> f64 {
        match self.lookups() {
            0 => 0.0,
            n => self.hits as f64 / n as f64,
        }
    }
}

impl fmt::Display for CacheStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "hits={} misses={} evictions={} bytes_used={} lfe_evals_saved={}",
            self.hits, self.misses, self.evictions, self.bytes_used, self.lfe_evals_saved
        )
    }
}

#[derive(Default)]
struct Inner {
    map: HashMap<BlockKey, Entry>,
    // touch counter -> key, oldest first
    order: BTreeMap<u64, BlockKey>,
    clock: u64,
    stats: CacheStats,
}

impl Inner {
    fn touch(&mut self, key: &BlockKey) -> Option<Arc<Payload>> {
        self.clock += 1;
        let clock = self.clock;
        let entry = self.map.get_mut(key)?;
        self.order.remove(&entry.last_touch);
        entry.last_touch = clock;
        self.order.insert(clock, *key);
        Some(Arc::clone(&entry.payload))
    }

    fn remove(&mut self, key: &BlockKey) -> bool {
        match self.map.remove(key) {
            Some(e) => {
                self.order.remove(&e.last_touch);
                self.stats.bytes_used -= e.size;
                true
            }
            None => false,
        }
    }

    fn evict_oldest(&mut self) -> bool {
        let Some((_, key)) = self.order.pop_first() else {
            return false;
        };
        let e = self.map.remove(&key).expect("order and map agree");
        self.stats.bytes_used -= e.size;
        self.stats.evictions += 1;
        true
    }
}

/// Thread-safe LRU memo store with a byte budget.
pub struct AttentionCache {
    storage: Storage,
    capacity: usize,
    inner: Mutex<Inner>,
}

impl fmt::Debug for AttentionCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttentionCache")
            .field("storage", &self.storage)
            .field("stats", &self.stats())
            .finish()
    }
}

impl AttentionCache {
    pub fn new(capacity: usize, storage: Storage) -> Self {
        let inner = Inner {
            stats: CacheStats {
                bytes_capacity: capacity,
                ..CacheStats::default()
            },
            ..Inner::default()
        };
        AttentionCache {
            storage,
            capacity,
            inner: Mutex::new(inner),
        }
    }

    /// 8-bit quantized cache.
    pub fn with_capacity(capacity: usize) -> Self {
        Self::new(capacity, Storage::Quantized { q_min: 0, q_max: 255 })
    }

    pub fn storage(&self) -> Storage {
        self.storage
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_enabled(&self) -> bool {
        self.capacity > 0
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        // A panic while holding the lock cannot leave the maps inconsistent
        // mid-update in a way later calls rely on, so poisoning is ignored.
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn key(&self, block: &Tensor3, dim_tag: Axis, scope: u64) -> BlockKey {
        key_with(block, dim_tag, scope, self.storage)
    }

    pub fn stats(&self) -> CacheStats {
        let inner = self.lock();
        CacheStats {
            entries: inner.map.len(),
            ..inner.stats
        }
    }

    /// Zeroes the counters, keeping residency and byte accounting.
    pub fn reset_stats(&self) {
        let mut inner = self.lock();
        inner.stats = CacheStats {
            bytes_used: inner.stats.bytes_used,
            bytes_capacity: self.capacity,
            peak_bytes: inner.stats.bytes_used,
            ..CacheStats::default()
        };
    }

    pub fn clear(&self) {
        let mut inner = self.lock();
        inner.map.clear();
        inner.order.clear();
        inner.stats.bytes_used = 0;
    }

    pub fn contains(&self, key: &BlockKey) -> bool {
        self.lock().map.contains_key(key)
    }

    /// Resident keys, least recently touched first.
    pub fn resident_keys(&self) -> Vec<BlockKey> {
        self.lock().order.values().copied().collect()
    }

    pub fn lookup(&self, key: &BlockKey) -> Option<Tensor3> {
        let payload = {
            let mut inner = self.lock();
            let hit = inner.touch(key);
            match hit {
                Some(_) => inner.stats.hits += 1,
                None => inner.stats.misses += 1,
            }
            hit
        };
        payload.map(|p| p.decode())
    }

    /// Encodes and stores `value`; returns the value a later hit will decode to,
    /// or `None` if nothing was stored.
    pub fn insert(&self, key: BlockKey, value: &Tensor3) -> Option<Tensor3> {
        self.store(key, value).map(|p| p.decode())
    }

    /// Evicts down to the budget first and only then encodes, so resident
    /// payload bytes never exceed the capacity, even transiently.
    fn store(&self, key: BlockKey, value: &Tensor3) -> Option<Arc<Payload>> {
        let size = Payload::size_for(value.len(), self.storage);
        let params = match self.storage {
            Storage::Quantized { q_min, q_max } => quant::fit_params(value, q_min, q_max).ok(),
            Storage::Raw => None,
        };
        let mut inner = self.lock();
        if size > self.capacity || (params.is_none() && self.storage != Storage::Raw) {
            inner.stats.rejected += 1;
            return None;
        }
        inner.remove(&key);
        while inner.stats.bytes_used + size > self.capacity {
            if !inner.evict_oldest() {
                break;
            }
        }
        let payload = Arc::new(match params {
            Some(p) => Payload::Quantized(quant::encode(value, &p)),
            None => Payload::Raw(value.clone()),
        });
        inner.clock += 1;
        let clock = inner.clock;
        inner.order.insert(clock, key);
        inner.map.insert(
            key,
            Entry {
                payload: Arc::clone(&payload),
                last_touch: clock,
                size,
            },
        );
        inner.stats.bytes_used += size;
        inner.stats.peak_bytes = inner.stats.peak_bytes.max(inner.stats.bytes_used);
        Some(payload)
    }

    /// Returns the cached output for `block` or computes, stores and returns it.
    ///
    /// A freshly stored result is returned in its decoded form, so a repeated
    /// run sees exactly the same values whether it hits or misses; if the
    /// result could not be stored the exact output is returned. With zero
    /// capacity this is a plain call to `lfe`.
    pub fn memoized_lfe<F>(&self, block: &Tensor3, dim_tag: Axis, scope: u64, lfe: F) -> Result<Tensor3>
    where
        F: FnOnce(&Tensor3) -> Result<Tensor3>,
    {
        if !self.is_enabled() {
            return lfe(block);
        }
        let key = self.key(block, dim_tag, scope);
        if let Some(hit) = self.lookup(&key) {
            self.lock().stats.lfe_evals_saved += 1;
            return Ok(hit);
        }
        let mut out = lfe(block)?;
        if let Some(p) = self.store(key, &out) {
            p.decode_into(&mut out);
        }
        Ok(out)
    }
}
