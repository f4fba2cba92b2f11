use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

/// A monotonically increasing counter.
#[derive(Debug, Default)]
pub struct Counter(AtomicU64);

impl Counter {
    pub fn inc(&self) {
        self.add(1);
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Download-cache counters.
#[derive(Debug, Default)]
pub struct CacheMetrics {
    pub hits: Counter,
    pub misses: Counter,
    pub expired_refreshes: Counter,
    pub bytes_from_cache: Counter,
    pub bytes_total: Counter,
    pub evictions: Counter,
    /// Index entries whose file had disappeared from disk.
    pub index_repairs: Counter,
}

impl CacheMetrics {
    /// Fraction of lookups answered from cache; `None` before any lookup.
    pub fn hit_rate(&self) -> Option<f64> {
        let hits = self.hits.get();
        let total = hits + self.misses.get() + self.expired_refreshes.get();
        (total > 0).then(|| hits as f64 / total as f64)
    }

    /// Fraction of served bytes that came from cache.
    pub fn byte_hit_rate(&self) -> Option<f64> {
        let total = self.bytes_total.get();
        (total > 0).then(|| self.bytes_from_cache.get() as f64 / total as f64)
    }
}

/// Upload-buffer counters.
#[derive(Debug, Default)]
pub struct CoalescerMetrics {
    pub buffered_uploads: Counter,
    pub flushes: Counter,
    pub failed_flushes: Counter,
    /// Torn trailing records discarded while draining a log.
    pub dropped_records: Counter,
}

/// Point-in-time copy of every counter, rendered by the metrics endpoint.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetricsSnapshot {
    pub hits: u64,
    pub misses: u64,
    pub expired_refreshes: u64,
    pub bytes_from_cache: u64,
    pub bytes_total: u64,
    pub buffered_uploads: u64,
    pub flushes: u64,
    pub evictions: u64,
    pub failed_flushes: u64,
    pub dropped_records: u64,
    pub index_repairs: u64,
    pub rejected_connections: u64,
}

impl MetricsSnapshot {
    pub fn capture(cache: &CacheMetrics, coalescer: &CoalescerMetrics, rejected: u64) -> Self {
        MetricsSnapshot {
            hits: cache.hits.get(),
            misses: cache.misses.get(),
            expired_refreshes: cache.expired_refreshes.get(),
            bytes_from_cache: cache.bytes_from_cache.get(),
            bytes_total: cache.bytes_total.get(),
            buffered_uploads: coalescer.buffered_uploads.get(),
            flushes: coalescer.flushes.get(),
            evictions: cache.evictions.get(),
            failed_flushes: coalescer.failed_flushes.get(),
            dropped_records: coalescer.dropped_records.get(),
            index_repairs: cache.index_repairs.get(),
            rejected_connections: rejected,
        }
    }

    fn fields(&self) -> [(&'static str, u64); 12] {
        [
            ("hits", self.hits),
            ("misses", self.misses),
            ("expired_refreshes", self.expired_refreshes),
            ("bytes_from_cache", self.bytes_from_cache),
            ("bytes_total", self.bytes_total),
            ("buffered_uploads", self.buffered_uploads),
            ("flushes", self.flushes),
            ("evictions", self.evictions),
            ("failed_flushes", self.failed_flushes),
            ("dropped_records", self.dropped_records),
            ("index_repairs", self.index_repairs),
            ("rejected_connections", self.rejected_connections),
        ]
    }

    /// Parses the text produced by `Display`; unknown names are ignored.
    pub fn parse(text: &str) -> Option<Self> {
        let mut snap = MetricsSnapshot::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (name, value) = line.split_once(' ')?;
            let value: u64 = value.trim().parse().ok()?;
            let slot = match name {
                "hits" => &mut snap.hits,
                "misses" => &mut snap.misses,
                "expired_refreshes" => &mut snap.expired_refreshes,
                "bytes_from_cache" => &mut snap.bytes_from_cache,
                "bytes_total" => &mut snap.bytes_total,
                "buffered_uploads" => &mut snap.buffered_uploads,
                "flushes" => &mut snap.flushes,
                "evictions" => &mut snap.evictions,
                "failed_flushes" => &mut snap.failed_flushes,
                "dropped_records" => &mut snap.dropped_records,
                "index_repairs" => &mut snap.index_repairs,
                "rejected_connections" => &mut snap.rejected_connections,
                _ => continue,
            };
            *slot = value;
        }
        Some(snap)
    }
}

/// One `name value` pair per line.
impl fmt::Display for MetricsSnapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, value) in self.fields() {
            writeln!(f, "{name} {value}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates() {
        let m = CacheMetrics::default();
        assert_eq!(m.hit_rate(), None);
        m.misses.inc();
        m.hits.inc();
        assert_eq!(m.hit_rate(), Some(0.5));
        m.bytes_total.add(200);
        m.bytes_from_cache.add(100);
        assert_eq!(m.byte_hit_rate(), Some(0.5));
    }

    #[test]
    fn text_round_trip() {
        let snap = MetricsSnapshot {
            hits: 3,
            evictions: 7,
            rejected_connections: 1,
            ..Default::default()
        };
        let text = snap.to_string();
        assert!(text.starts_with("hits 3\nmisses 0\n"));
        assert_eq!(MetricsSnapshot::parse(&text), Some(snap));
    }
}
