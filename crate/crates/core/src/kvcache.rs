//! Per-layer key/value store with O(1) logical rollback.
//!
//! Storage is preallocated for `capacity` positions. Rolling back only moves
//! the length pointer; bytes past `len` are never read again and get
//! overwritten by the next append.
//!
//! Every position carries a chained FNV-1a digest of the live region up to and
//! including it, so checkpoints are O(1) and a rollback can be verified
//! against the digest recorded when the checkpoint was taken.

use serde::{Deserialize, Serialize};

use crate::error::{domain, LpsrError, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn fnv_floats(mut h: u64, xs: &[f32]) -> u64 {
    for x in xs {
        h = fnv1a(h, &x.to_le_bytes());
    }
    h
}

/// Key and value rows produced by one layer for one position.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv {
    pub key: Vec<f32>,
    pub value: Vec<f32>,
}

/// A restorable marker for a step boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KvCheckpoint {
    pub len: usize,
    pub digest: u64,
}

#[derive(Clone, Debug)]
pub struct KvCache {
    num_layers: usize,
    width: usize,
    capacity: usize,
    len: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    /// `prefix[i]` is the digest of positions `0..i`.
    prefix: Vec<u64>,
}

impl KvCache {
    pub fn new(num_layers: usize, width: usize, capacity: usize) -> Result<Self> {
        if num_layers == 0 || width == 0 {
            return Err(LpsrError::Config(
                "kv cache needs at least one layer and positive width".into(),
            ));
        }
        let mut prefix = vec![0u64; capacity + 1];
        prefix[0] = FNV_OFFSET;
        Ok(Self {
            num_layers,
            width,
            capacity,
            len: 0,
            keys: vec![vec![0.0; capacity * width]; num_layers],
            values: vec![vec![0.0; capacity * width]; num_layers],
            prefix,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.len == self.capacity
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Live keys of `layer`, `len * width` values in position order.
    pub fn keys(&self, layer: usize) -> &[f32] {
        &self.keys[layer][..self.len * self.width]
    }

    pub fn values(&self, layer: usize) -> &[f32] {
        &self.values[layer][..self.len * self.width]
    }

    pub fn key_at(&self, layer: usize, pos: usize) -> &[f32] {
        assert!(pos < self.len, "position {pos} outside live region {}", self.len);
        &self.keys[layer][pos * self.width..(pos + 1) * self.width]
    }

    pub fn value_at(&self, layer: usize, pos: usize) -> &[f32] {
        assert!(pos < self.len, "position {pos} outside live region {}", self.len);
        &self.values[layer][pos * self.width..(pos + 1) * self.width]
    }

    pub fn append(&mut self, per_layer: &[LayerKv]) -> Result<()> {
        if self.len >= self.capacity {
            return Err(LpsrError::GenerationLength {
                capacity: self.capacity,
            });
        }
        if per_layer.len() != self.num_layers {
            return Err(domain(format!(
                "expected kv for {} layers, got {}",
                self.num_layers,
                per_layer.len()
            )));
        }
        for kv in per_layer {
            if kv.key.len() != self.width || kv.value.len() != self.width {
                return Err(domain(format!("kv rows must have width {}", self.width)));
            }
            if kv.key.iter().chain(&kv.value).any(|x| !x.is_finite()) {
                return Err(domain("non-finite kv entry"));
            }
        }
        let at = self.len * self.width;
        let mut h = self.prefix[self.len];
        for (layer, kv) in per_layer.iter().enumerate() {
            self.keys[layer][at..at + self.width].copy_from_slice(&kv.key);
            self.values[layer][at..at + self.width].copy_from_slice(&kv.value);
            h = fnv_floats(h, &kv.key);
            h = fnv_floats(h, &kv.value);
        }
        self.len += 1;
        self.prefix[self.len] = h;
        Ok(())
    }

    /// Digest of the live region.
    pub fn digest(&self) -> u64 {
        self.prefix[self.len]
    }

    pub fn checkpoint(&self) -> KvCheckpoint {
        KvCheckpoint {
            len: self.len,
            digest: self.digest(),
        }
    }

    pub fn rollback_depth(&mut self, depth: usize) -> Result<()> {
        if depth > self.len {
            return Err(domain(format!(
                "rollback depth {depth} exceeds cache length {}",
                self.len
            )));
        }
        self.len -= depth;
        Ok(())
    }

    /// Truncate to `cp.len` and verify the surviving prefix still matches the
    /// checkpoint. On a digest mismatch the cache is left untouched.
    pub fn rollback_to(&mut self, cp: &KvCheckpoint) -> Result<()> {
        if cp.len > self.len {
            return Err(domain(format!(
                "checkpoint at len {} is ahead of cache length {}",
                cp.len, self.len
            )));
        }
        let found = self.prefix[cp.len];
        if found != cp.digest {
            return Err(LpsrError::StaleCheckpoint {
                len: cp.len,
                expected: cp.digest,
                found,
            });
        }
        self.len = cp.len;
        Ok(())
    }

    /// Raw little-endian bytes of the live region (all layers, keys then
    /// values per position), for exact comparison.
    pub fn live_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len * self.num_layers * self.width * 8);
        for pos in 0..self.len {
            for layer in 0..self.num_layers {
                for x in self.key_at(layer, pos).iter().chain(self.value_at(layer, pos)) {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }
}

/// Stable 64-bit hash of arbitrary bytes (same FNV-1a used for cache digests).
pub fn stable_hash(bytes: &[u8]) -> u64 {
    fnv1a(FNV_OFFSET, bytes)
}
