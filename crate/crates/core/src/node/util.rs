//! Small bounded containers used by the node runtime.

use std::collections::{HashMap, VecDeque};
use std::hash::Hash;

use crate::types::TimeMs;

/// Bounded LRU map with lazy eviction: touches push a fresh stamp onto the
/// queue and stale queue entries are skipped when evicting. Keeps message
/// caches from becoming a resource-depletion vector.
#[derive(Debug, Clone)]
pub struct BoundedLru<K, V> {
    map: HashMap<K, (V, u64)>,
    order: VecDeque<(K, u64)>,
    capacity: usize,
    stamp: u64,
}

impl<K: Eq + Hash + Clone, V> BoundedLru<K, V> {
    pub fn new(capacity: usize) -> Self {
        Self {
            map: HashMap::new(),
            order: VecDeque::new(),
            capacity: capacity.max(1),
        stamp: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, key: &K) -> bool {
        self.map.contains_key(key)
    }

    pub fn get(&mut self, key: &K) -> Option<&V> {
        self.stamp += 1;
        let stamp = self.stamp;
        if let Some((_, s)) = self.map.get_mut(key) {
            *s = stamp;
            self.order.push_back((key.clone(), stamp));
        }
        self.map.get(key).map(|(v, _)| v)
    }

    pub fn insert(&mut self, key: K, value: V) {
        self.stamp += 1;
        let stamp = self.stamp;
        self.map.insert(key.clone(), (value, stamp));
        self.order.push_back((key, stamp));
        while self.map.len() > self.capacity {
            self.evict_one();
        }
    }

    fn evict_one(&mut self) {
        while let Some((key, stamp)) = self.order.pop_front() {
            match self.map.get(&key) {
                Some((_, live)) if *live == stamp => {
                    self.map.remove(&key);
                    return;
                }
                _ => {} // stale queue entry, skip
            }
        }
    }
}

/// Per-origin token bucket: `rate_per_s` tokens per second, burst up to
/// `capacity`.
#[derive(Debug, Clone, Copy)]
pub struct TokenBucket {
    capacity: f64,
    tokens: f64,
    rate_per_s: f64,
    last_ms: TimeMs,
}

impl TokenBucket {
    pub fn new(rate_per_s: f64, capacity: f64, now: TimeMs) -> Self {
        Self {
            capacity,
            tokens: capacity,
            rate_per_s,
            last_ms: now,
        }
    }

    /// Take one token if available.
    pub fn allow(&mut self, now: TimeMs) -> bool {
        let elapsed_s = (now - self.last_ms).max(0) as f64 / 1000.0;
        self.tokens = (self.tokens + elapsed_s * self.rate_per_s).min(self.capacity);
        self.last_ms = now;
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            true
        } else {
            false
        }
    }
}
