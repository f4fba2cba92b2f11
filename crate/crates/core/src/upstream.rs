//! Everything the proxy sends to the origin server.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde_json::value::RawValue;
use thiserror::Error;

use crate::hex_digest;
use crate::http::{self, Header, HttpError, Request, Response};
use crate::log_record;
use crate::time::Timestamp;
use crate::write_coalescer::FlushBatch;

/// Header carrying the number of payloads in a bulk request. Its presence is
/// what tells the origin a request is a bulk envelope.
pub const COALESCE_COUNT_HEADER: &str = "X-Coalesce-Count";
/// Content type of the binary bulk framing.
pub const COALESCED_CONTENT_TYPE: &str = "application/x-coalesced";
pub const JSON_CONTENT_TYPE: &str = "application/json";

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_RETRY_DELAY: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum UpstreamError {
    #[error("upstream unreachable: {0}")]
    Unreachable(#[source] HttpError),
    #[error("upstream answered {status}")]
    Non2xx { status: u16, body: Vec<u8> },
}

#[derive(Debug, Error)]
pub enum BulkError {
    #[error("bulk write of {count} payloads to `{rule_path}` failed ({cause}); batch saved to {}", path.display())]
    DeadLettered {
        rule_path: String,
        count: usize,
        path: PathBuf,
        cause: UpstreamError,
    },
    #[error("bulk write of {count} payloads to `{rule_path}` failed ({cause}) and the dead-letter write failed: {io}")]
    Lost {
        rule_path: String,
        count: usize,
        cause: UpstreamError,
        io: io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BulkResult {
    pub accepted: u64,
}

/// Encodes payloads for a bulk request.
///
/// When every payload is a JSON document without surrounding whitespace the
/// body is a JSON array of the payloads, byte for byte. Otherwise it uses the
/// length-prefixed record framing. Returns `(content_type, body)`.
pub fn encode_bulk(payloads: &[Vec<u8>]) -> (&'static str, Vec<u8>) {
    let all_json = payloads.iter().all(|p| is_bare_json(p));
    if all_json {
        let total: usize = payloads.iter().map(|p| p.len() + 1).sum();
        let mut body = Vec::with_capacity(total + 2);
        body.push(b'[');
        for (i, p) in payloads.iter().enumerate() {
            if i > 0 {
                body.push(b',');
            }
            body.extend_from_slice(p);
        }
        body.push(b']');
        (JSON_CONTENT_TYPE, body)
    } else {
        (COALESCED_CONTENT_TYPE, log_record::encode_all(payloads))
    }
}

/// Inverse of [`encode_bulk`], for origin-side use.
pub fn decode_bulk(content_type: Option<&str>, body: &[u8]) -> Result<Vec<Vec<u8>>, String> {
    let is_binary = content_type
        .map(|ct| ct.split(';').next().unwrap_or("").trim().eq_ignore_ascii_case(COALESCED_CONTENT_TYPE))
        .unwrap_or(false);
    if is_binary {
        let decoded = log_record::decode_all(body);
        if decoded.torn {
            return Err("truncated record in bulk body".into());
        }
        return Ok(decoded.records);
    }
    let items: Vec<&RawValue> = serde_json::from_slice(body).map_err(|e| e.to_string())?;
    Ok(items.into_iter().map(|v| v.get().as_bytes().to_vec()).collect())
}

fn is_bare_json(p: &[u8]) -> bool {
    match (p.first(), p.last()) {
        (Some(a), Some(b)) if !a.is_ascii_whitespace() && !b.is_ascii_whitespace() => {
            serde_json::from_slice::<serde::de::IgnoredAny>(p).is_ok()
        }
        _ => false,
    }
}

pub struct UpstreamClient {
    authority: String,
    base_path: String,
    timeout: Duration,
    retry_delay: Duration,
    deadletter_dir: PathBuf,
    deadletter_seq: AtomicU64,
}

impl UpstreamClient {
    /// `base_url` must be an absolute `http://` URL; its path, if any, is
    /// prefixed to every request target.
    pub fn new(base_url: &str, cache_dir: &Path) -> Result<Self, String> {
        let url = url::Url::parse(base_url).map_err(|e| format!("`{base_url}`: {e}"))?;
        if url.scheme() != "http" {
            return Err(format!("unsupported scheme in `{base_url}`"));
        }
        let host = url.host_str().ok_or_else(|| format!("`{base_url}` has no host"))?;
        let port = url.port_or_known_default().unwrap_or(80);
        let authority = if host.contains(':') && !host.starts_with('[') {
            format!("[{host}]:{port}")
        } else {
            format!("{host}:{port}")
        };
        Ok(UpstreamClient {
            authority,
            base_path: url.path().trim_end_matches('/').to_string(),
            timeout: DEFAULT_TIMEOUT,
            retry_delay: DEFAULT_RETRY_DELAY,
            deadletter_dir: cache_dir.join("deadletter"),
            deadletter_seq: AtomicU64::new(0),
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_retry_delay(mut self, delay: Duration) -> Self {
        self.retry_delay = delay;
        self
    }

    pub fn authority(&self) -> &str {
        &self.authority
    }

    pub fn deadletter_dir(&self) -> &Path {
        &self.deadletter_dir
    }

    fn target(&self, target: &str) -> String {
        format!("{}{}", self.base_path, target)
    }

    fn send(&self, request: &Request) -> Result<Response, UpstreamError> {
        http::send(self.authority.as_str(), &self.authority, request, self.timeout)
            .map_err(UpstreamError::Unreachable)
    }

    /// Relays a request verbatim, minus hop-by-hop headers, and returns the
    /// origin's response with its hop-by-hop headers removed.
    pub fn forward(&self, request: &Request) -> Result<Response, UpstreamError> {
        let mut headers = http::strip_hop_by_hop(&request.headers);
        headers.retain(|h| !h.name.eq_ignore_ascii_case("host"));
        headers.insert(0, Header::new("Host", self.authority.as_str()));
        let upstream_req = Request {
            method: request.method.clone(),
            target: self.target(&request.target),
            headers,
            body: request.body.clone(),
        };
        let mut response = self.send(&upstream_req)?;
        response.headers = http::strip_hop_by_hop(&response.headers);
        Ok(response)
    }

    /// GETs `target` and returns the body of a 2xx response.
    pub fn fetch(&self, target: &str) -> Result<Vec<u8>, UpstreamError> {
        let response = self.send(&Request::new("GET", self.target(target)))?;
        if response.is_success() {
            Ok(response.body)
        } else {
            Err(UpstreamError::Non2xx {
                status: response.status,
                body: response.body,
            })
        }
    }

    fn bulk_once(&self, batch: &FlushBatch) -> Result<BulkResult, UpstreamError> {
        let (content_type, body) = encode_bulk(&batch.payloads);
        let request = Request::new("POST", self.target(&batch.rule_path))
            .with_header("Content-Type", content_type)
            .with_header(COALESCE_COUNT_HEADER, batch.len().to_string())
            .with_body(body);
        let response = self.send(&request)?;
        if !response.is_success() {
            return Err(UpstreamError::Non2xx {
                status: response.status,
                body: response.body,
            });
        }
        let accepted = serde_json::from_slice::<serde_json::Value>(&response.body)
            .ok()
            .and_then(|v| v.get("accepted").and_then(|a| a.as_u64()))
            .unwrap_or(batch.len() as u64);
        Ok(BulkResult { accepted })
    }

    /// Delivers a batch as one POST to the rule's URL.
    ///
    /// A failed attempt is retried once after the retry delay; if that also
    /// fails the batch is written to the dead-letter directory.
    pub fn bulk_write(&self, batch: &FlushBatch) -> Result<BulkResult, BulkError> {
        let cause = match self.bulk_once(batch) {
            Ok(r) => return Ok(r),
            Err(first) => {
                log::warn!(
                    "bulk write of {} payloads to `{}` failed ({first}); retrying in {:?}",
                    batch.len(),
                    batch.rule_path,
                    self.retry_delay
                );
                std::thread::sleep(self.retry_delay);
                match self.bulk_once(batch) {
                    Ok(r) => return Ok(r),
                    Err(second) => second,
                }
            }
        };
        match self.write_deadletter(batch) {
            Ok(path) => Err(BulkError::DeadLettered {
                rule_path: batch.rule_path.clone(),
                count: batch.len(),
                path,
                cause,
            }),
            Err(io) => Err(BulkError::Lost {
                rule_path: batch.rule_path.clone(),
                count: batch.len(),
                cause,
                io,
            }),
        }
    }

    fn write_deadletter(&self, batch: &FlushBatch) -> io::Result<PathBuf> {
        fs::create_dir_all(&self.deadletter_dir)?;
        let digest = hex_digest(&batch.rule_path);
        loop {
            let stamp = Timestamp::now().since_epoch().as_millis();
            let seq = self.deadletter_seq.fetch_add(1, Ordering::Relaxed);
            let path = self.deadletter_dir.join(format!("{stamp}{seq:06}-{digest}.log"));
            let file = fs::OpenOptions::new().write(true).create_new(true).open(&path);
            match file {
                Ok(mut f) => {
                    use io::Write;
                    f.write_all(&log_record::encode_all(&batch.payloads))?;
                    f.sync_all()?;
                    return Ok(path);
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e),
            }
        }
    }

    /// Re-sends every dead-letter file whose digest matches one of
    /// `rule_paths`. Delivered files are deleted; the rest are left in place.
    pub fn replay_deadletter<'a>(&self, rule_paths: impl IntoIterator<Item = &'a str>) -> io::Result<ReplaySummary> {
        let by_digest: std::collections::HashMap<String, &str> =
            rule_paths.into_iter().map(|p| (hex_digest(p), p)).collect();
        let mut summary = ReplaySummary::default();
        let mut files: Vec<PathBuf> = match fs::read_dir(&self.deadletter_dir) {
            Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).collect(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(summary),
            Err(e) => return Err(e),
        };
        files.sort();
        for path in files {
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let rule_path = name
                .strip_suffix(".log")
                .and_then(|s| s.rsplit_once('-'))
                .and_then(|(_, d)| by_digest.get(d).copied());
            let Some(rule_path) = rule_path else {
                log::warn!("no upload rule matches dead-letter file {name}");
                summary.skipped += 1;
                continue;
            };
            let decoded = log_record::read_log(&path)?;
            if decoded.records.is_empty() {
                fs::remove_file(&path)?;
                continue;
            }
            let batch = FlushBatch {
                rule_path: rule_path.to_string(),
                payloads: decoded.records,
                trigger: crate::write_coalescer::FlushTrigger::Shutdown,
            };
            match self.bulk_once(&batch) {
                Ok(_) => {
                    fs::remove_file(&path)?;
                    summary.delivered_files += 1;
                    summary.delivered_payloads += batch.len();
                }
                Err(e) => {
                    log::error!("replay of {name} failed: {e}");
                    summary.failed += 1;
                }
            }
        }
        Ok(summary)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReplaySummary {
    pub delivered_files: usize,
    pub delivered_payloads: usize,
    pub failed: usize,
    pub skipped: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn json_payloads_become_an_array() {
        let payloads = vec![br#"{"a":1}"#.to_vec(), b"[1, 2]".to_vec(), b"\"s\"".to_vec()];
        let (ct, body) = encode_bulk(&payloads);
        assert_eq!(ct, JSON_CONTENT_TYPE);
        assert_eq!(body, br#"[{"a":1},[1, 2],"s"]"#);
        assert_eq!(decode_bulk(Some(ct), &body).unwrap(), payloads);
    }

    #[test]
    fn non_json_falls_back_to_binary() {
        for odd in [&b"not json"[..], b"{\"a\":1}\n", b"", b"\x00\xff"] {
            let payloads = vec![br#"{"a":1}"#.to_vec(), odd.to_vec()];
            let (ct, body) = encode_bulk(&payloads);
            assert_eq!(ct, COALESCED_CONTENT_TYPE);
            assert_eq!(decode_bulk(Some(ct), &body).unwrap(), payloads);
        }
    }

    #[test]
    fn base_path_prefixes_targets() {
        let c = UpstreamClient::new("http://example.test:9000/api/", Path::new("/tmp")).unwrap();
        assert_eq!(c.authority(), "example.test:9000");
        assert_eq!(c.target("/emails?x=1"), "/api/emails?x=1");
        let c = UpstreamClient::new("http://example.test", Path::new("/tmp")).unwrap();
        assert_eq!(c.authority(), "example.test:80");
        assert_eq!(c.target("/a"), "/a");
        assert!(UpstreamClient::new("https://x", Path::new("/tmp")).is_err());
    }

    proptest! {
        #[test]
        fn bulk_encoding_round_trips(payloads in proptest::collection::vec(
            prop_oneof![
                proptest::collection::vec(any::<u8>(), 0..64),
                "[a-z]{0,10}".prop_map(|s| serde_json::json!({ "k": s }).to_string().into_bytes()),
            ],
            1..20,
        )) {
            let (ct, body) = encode_bulk(&payloads);
            prop_assert_eq!(decode_bulk(Some(ct), &body).unwrap(), payloads);
        }
    }
}
