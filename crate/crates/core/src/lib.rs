//! A write-coalescing HTTP caching proxy.
//!
//! Requests whose path matches a configured upload rule are acknowledged
//! immediately, appended to an on-disk buffer and later delivered upstream as
//! a single bulk request. Download rules are served from a disk-backed LRU
//! cache with per-rule TTLs. Everything else is forwarded verbatim.
//!
//! The [`cost_model`] module is generic over the scalar type; [`CostParams`]
//! and [`ExactCostParams`] are the two instantiations used by the tooling.

pub mod cache_store;
pub mod config;
pub mod cost_model;
pub mod http;
pub mod log_record;
pub mod metrics;
pub mod proxy;
pub mod time;
pub mod upstream;
pub mod write_coalescer;

pub use cache_store::{CacheStore, Lookup};
pub use config::{CacheRule, Config, RuleKind};
pub use cost_model::InsertCostParams;
pub use proxy::{Proxy, ProxyHandle};
pub use time::Timestamp;
pub use upstream::UpstreamClient;
pub use write_coalescer::{FlushBatch, FlushTrigger, WriteCoalescer};

/// Cost model over `f64`.
pub type CostParams = InsertCostParams<f64>;

/// Cost model over exact rationals; speedups come out as reduced fractions.
pub type ExactCostParams = InsertCostParams<num_rational::Ratio<i128>>;

/// Hex SHA-256 digest used for cache object and buffer log file names.
pub fn hex_digest(s: &str) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(s.as_bytes()))
}
