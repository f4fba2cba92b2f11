//! Per-rule upload buffers.
//!
//! Each upload rule owns an append-only log at
//! `<cache_dir>/buffers/<hex-digest-of-path>.log` holding length-prefixed
//! payloads in arrival order. A buffer is drained into a [`FlushBatch`] when
//! it reaches its rule's flush threshold, when its deadline (first arrival
//! plus TTL) passes, or at shutdown.
//!
//! Draining renames the live log to a unique `.flushing-N` name under the
//! buffer's lock, so arrivals during a flush start a fresh log. Appends are not
//! fsynced; buffered data survives process crashes but not power loss.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use thiserror::Error;

use crate::config::{CacheRule, RuleKind};
use crate::hex_digest;
use crate::log_record;
use crate::metrics::CoalescerMetrics;
use crate::time::Timestamp;

#[derive(Debug, Error)]
pub enum CoalescerError {
    #[error("no upload rule for path `{0}`")]
    UnknownRule(String),
    #[error("failed to append to upload buffer for `{path}`: {source}")]
    DiskWriteFailed { path: String, source: io::Error },
    #[error("failed to drain upload buffer for `{path}`: {source}")]
    DrainFailed { path: String, source: io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlushTrigger {
    Deadline,
    Threshold,
    Shutdown,
}

/// Payloads drained from one rule's buffer, in arrival order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlushBatch {
    pub rule_path: String,
    pub payloads: Vec<Vec<u8>>,
    pub trigger: FlushTrigger,
}

impl FlushBatch {
    pub fn len(&self) -> usize {
        self.payloads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payloads.is_empty()
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum BufferOutcome {
    Buffered,
    FlushTriggered(FlushBatch),
}

struct UploadBuffer {
    rule_path: String,
    log_path: PathBuf,
    file: Option<File>,
    log_len: u64,
    count: u64,
    first_arrival: Option<Timestamp>,
    ttl: Duration,
    flush_threshold: u64,
}

impl UploadBuffer {
    fn deadline(&self) -> Option<Timestamp> {
        self.first_arrival.map(|t| t + self.ttl)
    }

    fn append(&mut self, payload: &[u8]) -> io::Result<()> {
        if self.file.is_none() {
            let f = OpenOptions::new().create(true).append(true).open(&self.log_path)?;
            self.log_len = f.metadata()?.len();
            self.file = Some(f);
        }
        let f = self.file.as_mut().unwrap();
        if let Err(e) = log_record::write_record(f, payload) {
            // keep the log decodable up to the last good record
            let _ = f.set_len(self.log_len);
            return Err(e);
        }
        self.log_len += log_record::encoded_len(payload) as u64;
        Ok(())
    }

    /// Detaches the live log under a unique name and resets the buffer.
    fn detach(&mut self, seq: u64) -> io::Result<Option<PathBuf>> {
        if self.count == 0 {
            return Ok(None);
        }
        self.file = None;
        let flushing = flushing_path(&self.log_path, seq);
        fs::rename(&self.log_path, &flushing)?;
        self.count = 0;
        self.log_len = 0;
        self.first_arrival = None;
        Ok(Some(flushing))
    }
}

fn flushing_path(log_path: &Path, seq: u64) -> PathBuf {
    let mut name = log_path.file_name().unwrap().to_os_string();
    name.push(format!(".flushing-{seq}"));
    log_path.with_file_name(name)
}

pub struct WriteCoalescer {
    buffers_dir: PathBuf,
    buffers: HashMap<String, Mutex<UploadBuffer>>,
    metrics: CoalescerMetrics,
    flush_seq: AtomicU64,
}

impl WriteCoalescer {
    /// Opens one buffer per upload rule under `<cache_dir>/buffers`.
    ///
    /// Logs left by a previous run (including interrupted drains) are
    /// recovered; recovered buffers get a deadline of `now + ttl`.
    pub fn open<'a>(
        cache_dir: &Path,
        rules: impl IntoIterator<Item = &'a CacheRule>,
        now: Timestamp,
    ) -> io::Result<Self> {
        let buffers_dir = cache_dir.join("buffers");
        fs::create_dir_all(&buffers_dir)?;
        let metrics = CoalescerMetrics::default();
        let mut buffers = HashMap::new();
        let mut max_seq = 0;
        for rule in rules.into_iter().filter(|r| r.kind == RuleKind::Upload) {
            let log_path = buffers_dir.join(format!("{}.log", hex_digest(&rule.path)));
            let (count, seq) = recover_log(&log_path, &metrics)?;
            max_seq = max_seq.max(seq);
            buffers.insert(
                rule.path.clone(),
                Mutex::new(UploadBuffer {
                    rule_path: rule.path.clone(),
                    log_len: fs::metadata(&log_path).map(|m| m.len()).unwrap_or(0),
                    log_path,
                    file: None,
                    count,
                    first_arrival: (count > 0).then_some(now),
                    ttl: rule.ttl(),
                    flush_threshold: rule.threshold(),
                }),
            );
        }
        Ok(WriteCoalescer {
            buffers_dir,
            buffers,
            metrics,
            flush_seq: AtomicU64::new(max_seq + 1),
        })
    }

    pub fn metrics(&self) -> &CoalescerMetrics {
        &self.metrics
    }

    pub fn buffers_dir(&self) -> &Path {
        &self.buffers_dir
    }

    /// Appends one upload to its rule's buffer.
    ///
    /// On error the payload is not buffered and the caller should forward it
    /// upstream directly.
    pub fn buffer_upload(
        &self,
        rule: &CacheRule,
        payload: &[u8],
        now: Timestamp,
    ) -> Result<BufferOutcome, CoalescerError> {
        let slot = self
            .buffers
            .get(&rule.path)
            .filter(|_| rule.kind == RuleKind::Upload)
            .ok_or_else(|| CoalescerError::UnknownRule(rule.path.clone()))?;
        let flushing = {
            let mut buf = slot.lock().unwrap();
            buf.append(payload).map_err(|source| CoalescerError::DiskWriteFailed {
                path: rule.path.clone(),
                source,
            })?;
            if buf.count == 0 {
                buf.first_arrival = Some(now);
            }
            buf.count += 1;
            self.metrics.buffered_uploads.inc();
            if buf.count < buf.flush_threshold {
                return Ok(BufferOutcome::Buffered);
            }
            // the payload is durable in the log from here on, so failures
            // below must not make the caller forward it a second time
            match self.detach(&mut buf) {
                Ok(p) => p,
                Err(e) => {
                    log::error!("{e}; retrying on the next timer tick");
                    return Ok(BufferOutcome::Buffered);
                }
            }
        };
        let Some(path) = flushing else {
            return Ok(BufferOutcome::Buffered);
        };
        match self.read_batch(&rule.path, &path, FlushTrigger::Threshold) {
            Ok(batch) => Ok(BufferOutcome::FlushTriggered(batch)),
            Err(e) => {
                log::error!("{e}; left for recovery at next start");
                Ok(BufferOutcome::Buffered)
            }
        }
    }

    /// Drains every non-empty buffer whose deadline is at or before `now`.
    ///
    /// Buffers recovered at or above their threshold are drained as well.
    pub fn collect_expired(&self, now: Timestamp) -> Vec<FlushBatch> {
        self.drain_where(|buf| {
            if buf.count >= buf.flush_threshold {
                Some(FlushTrigger::Threshold)
            } else if buf.deadline().is_some_and(|d| d <= now) {
                Some(FlushTrigger::Deadline)
            } else {
                None
            }
        })
    }

    /// Drains every non-empty buffer. Used at shutdown.
    pub fn drain_all(&self) -> Vec<FlushBatch> {
        self.drain_where(|_| Some(FlushTrigger::Shutdown))
    }

    /// Number of payloads currently buffered for `rule_path`.
    pub fn pending(&self, rule_path: &str) -> u64 {
        self.buffers
            .get(rule_path)
            .map_or(0, |b| b.lock().unwrap().count)
    }

    pub fn pending_total(&self) -> u64 {
        self.buffers.values().map(|b| b.lock().unwrap().count).sum()
    }

    /// Earliest pending deadline across all buffers.
    pub fn next_deadline(&self) -> Option<Timestamp> {
        self.buffers
            .values()
            .filter_map(|b| b.lock().unwrap().deadline())
            .min()
    }

    fn drain_where(&self, pick: impl Fn(&UploadBuffer) -> Option<FlushTrigger>) -> Vec<FlushBatch> {
        let mut paths: Vec<&String> = self.buffers.keys().collect();
        paths.sort();
        let mut batches = Vec::new();
        for path in paths {
            let detached = {
                let mut buf = self.buffers[path].lock().unwrap();
                if buf.count == 0 {
                    continue;
                }
                let Some(trigger) = pick(&buf) else { continue };
                match self.detach(&mut buf) {
                    Ok(Some(p)) => (p, trigger),
                    Ok(None) => continue,
                    Err(e) => {
                        log::error!("{e}");
                        continue;
                    }
                }
            };
            match self.read_batch(path, &detached.0, detached.1) {
                Ok(batch) if !batch.is_empty() => batches.push(batch),
                Ok(_) => {}
                Err(e) => log::error!("{e}"),
            }
        }
        batches
    }

    fn detach(&self, buf: &mut UploadBuffer) -> Result<Option<PathBuf>, CoalescerError> {
        let seq = self.flush_seq.fetch_add(1, Ordering::Relaxed);
        buf.detach(seq).map_err(|source| CoalescerError::DrainFailed {
            path: buf.rule_path.clone(),
            source,
        })
    }

    fn read_batch(&self, rule_path: &str, flushing: &Path, trigger: FlushTrigger) -> Result<FlushBatch, CoalescerError> {
        let decoded = log_record::read_log(flushing).map_err(|source| CoalescerError::DrainFailed {
            path: rule_path.to_string(),
            source,
        })?;
        if decoded.torn {
            log::warn!("dropping torn trailing record in {}", flushing.display());
            self.metrics.dropped_records.inc();
        }
        if let Err(e) = fs::remove_file(flushing) {
            log::warn!("failed to remove {}: {e}", flushing.display());
        }
        Ok(FlushBatch {
            rule_path: rule_path.to_string(),
            payloads: decoded.records,
            trigger,
        })
    }
}

/// Folds interrupted drains back into the live log and truncates any torn
/// tail. Returns the record count and the highest flushing sequence seen.
fn recover_log(log_path: &Path, metrics: &CoalescerMetrics) -> io::Result<(u64, u64)> {
    let dir = log_path.parent().unwrap();
    let prefix = format!("{}.flushing-", log_path.file_name().unwrap().to_string_lossy());
    let mut leftovers: Vec<(u64, PathBuf)> = Vec::new();
    for dirent in fs::read_dir(dir)? {
        let dirent = dirent?;
        let name = dirent.file_name().to_string_lossy().into_owned();
        if let Some(seq) = name.strip_prefix(&prefix).and_then(|s| s.parse().ok()) {
            leftovers.push((seq, dirent.path()));
        }
    }
    leftovers.sort();
    let max_seq = leftovers.last().map_or(0, |(s, _)| *s);

    let mut records = Vec::new();
    let mut dirty = !leftovers.is_empty();
    for (_, path) in &leftovers {
        let d = log_record::read_log(path)?;
        if d.torn {
            metrics.dropped_records.inc();
        }
        records.extend(d.records);
    }
    let live = log_record::read_log(log_path)?;
    if live.torn {
        metrics.dropped_records.inc();
        dirty = true;
    }
    records.extend(live.records);

    if dirty {
        let tmp = log_path.with_extension("log.recover");
        fs::write(&tmp, log_record::encode_all(&records))?;
        fs::rename(&tmp, log_path)?;
        for (_, path) in &leftovers {
            fs::remove_file(path)?;
        }
    }
    Ok((records.len() as u64, max_seq))
}
