//! Host/device buffer classification with a pointer cache.
//!
//! A unified address space means the same address can name host memory at
//! one moment and device memory the next. Finding out which one it is costs
//! a driver query. [`BufferRegistry`] owns a simulated allocator, a
//! ground-truth "driver" and a cache maintained under one of three policies:
//!
//! - [`CachePolicy::NoCache`]: every classification queries the driver.
//! - [`CachePolicy::LazyCache`]: the first classification of an address
//!   queries the driver and caches the answer. Frees are never observed, so
//!   an address reused for a different kind of buffer is misclassified.
//! - [`CachePolicy::InterceptCache`]: allocation and free calls update the
//!   cache directly, so classification never queries the driver.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First address handed out by the simulated allocator.
pub const BASE_ADDRESS: u64 = 0x7f00_0000_0000;
const ADDRESS_STRIDE: u64 = 0x1000;
pub const DEFAULT_DRIVER_DELAY_NS: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferKind {
    Host,
    Device,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    NoCache,
    LazyCache,
    InterceptCache,
}

impl fmt::Display for CachePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CachePolicy::NoCache => "no_cache",
            CachePolicy::LazyCache => "lazy_cache",
            CachePolicy::InterceptCache => "intercept_cache",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BufferHandle {
    pub address: u64,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegistryStats {
    pub driver_queries: u64,
    pub cache_hits: u64,
    pub inserts: u64,
    pub invalidations: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsReport {
    pub policy: CachePolicy,
    #[serde(flatten)]
    pub stats: RegistryStats,
}

#[derive(Debug, Default)]
struct Inner {
    /// Ground truth, as the driver would report it.
    live: HashMap<u64, BufferKind>,
    freed: BTreeSet<u64>,
    next_address: u64,
    cache: HashMap<u64, BufferKind>,
    stats: RegistryStats,
}

/// Thread-safe; every operation is atomic with respect to the others.
#[derive(Debug)]
pub struct BufferRegistry {
    policy: CachePolicy,
    driver_delay_ns: u64,
    inner: Mutex<Inner>,
}

impl BufferRegistry {
    pub fn new(policy: CachePolicy) -> Self {
        Self::with_driver_delay(policy, DEFAULT_DRIVER_DELAY_NS)
    }

    pub fn with_driver_delay(policy: CachePolicy, driver_delay_ns: u64) -> Self {
        Self {
            policy,
            driver_delay_ns,
            inner: Mutex::new(Inner {
                next_address: BASE_ADDRESS,
                ..Inner::default()
            }),
        }
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    /// Allocates a buffer, reusing the lowest freed address if there is one.
    pub fn alloc(&self, kind: BufferKind, size: usize) -> Result<BufferHandle> {
        if size == 0 {
            return Err(Error::Parameter("allocation size must be positive".into()));
        }
        let mut inner = self.inner.lock();
        let address = match inner.freed.pop_first() {
            Some(addr) => addr,
            None => {
                let addr = inner.next_address;
                inner.next_address += ADDRESS_STRIDE;
                addr
            }
        };
        inner.live.insert(address, kind);
        if self.policy == CachePolicy::InterceptCache {
            inner.cache.insert(address, kind);
            inner.stats.inserts += 1;
        }
        Ok(BufferHandle { address, size })
    }

    pub fn free(&self, handle: BufferHandle) -> Result<()> {
        let mut inner = self.inner.lock();
        if inner.live.remove(&handle.address).is_none() {
            return Err(Error::InvalidHandle(handle.address));
        }
        inner.freed.insert(handle.address);
        // a lazy cache never hears about frees
        if self.policy == CachePolicy::InterceptCache && inner.cache.remove(&handle.address).is_some() {
            inner.stats.invalidations += 1;
        }
        Ok(())
    }

    pub fn classify(&self, handle: BufferHandle) -> Result<BufferKind> {
        let address = handle.address;
        let mut inner = self.inner.lock();
        match self.policy {
            CachePolicy::NoCache => {
                inner.stats.driver_queries += 1;
                inner.live.get(&address).copied().ok_or(Error::UnknownBuffer(address))
            }
            CachePolicy::LazyCache => {
                if let Some(&kind) = inner.cache.get(&address) {
                    inner.stats.cache_hits += 1;
                    return Ok(kind);
                }
                inner.stats.driver_queries += 1;
                let kind = inner.live.get(&address).copied().ok_or(Error::UnknownBuffer(address))?;
                inner.cache.insert(address, kind);
                inner.stats.inserts += 1;
                Ok(kind)
            }
            CachePolicy::InterceptCache => {
                let kind = inner.cache.get(&address).copied().ok_or(Error::UnknownBuffer(address))?;
                inner.stats.cache_hits += 1;
                Ok(kind)
            }
        }
    }

    /// What the driver would say right now, without touching any counter.
    pub fn ground_truth(&self, handle: BufferHandle) -> Option<BufferKind> {
        self.inner.lock().live.get(&handle.address).copied()
    }

    pub fn stats(&self) -> RegistryStats {
        self.inner.lock().stats
    }

    pub fn report(&self) -> StatsReport {
        StatsReport {
            policy: self.policy,
            stats: self.stats(),
        }
    }

    /// `{policy, driver_queries, cache_hits, inserts, invalidations}`.
    pub fn stats_json(&self) -> String {
        serde_json::to_string(&self.report()).expect("stats serialize")
    }

    /// Simulated time spent in driver queries so far, in seconds.
    pub fn driver_time(&self) -> f64 {
        self.stats().driver_queries as f64 * self.driver_delay_ns as f64 * 1e-9
    }
}
