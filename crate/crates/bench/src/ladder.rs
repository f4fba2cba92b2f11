//! Load generator: drives the proxy with n POSTs per cell and collects the
//! statement timings the mock upstream recorded.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::rngs::StdRng;
use rand::SeedableRng;
use wcproxy::http::{self, Request};
use wcproxy::proxy::ProxyOptions;
use wcproxy::upstream::JSON_CONTENT_TYPE;
use wcproxy::{CacheRule, Config, Proxy};

use crate::db::{DbError, Measurement};
use crate::mock_upstream::MockUpstreamServer;
use crate::schema::EntitySchema;

/// Request counts used for the full benchmark.
pub const FULL_LADDER: [u64; 8] = [1, 100, 1000, 5000, 10000, 25000, 50000, 100000];
/// Subset that runs in a couple of minutes.
pub const DESK_LADDER: [u64; 4] = [1, 100, 1000, 10000];
pub const DEFAULT_THRESHOLD: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// Upload rule configured; the proxy buffers and bulk-writes.
    Coalesced,
    /// No rule; every request is forwarded as is.
    PassThrough,
}

pub const MODES: [Mode; 2] = [Mode::Coalesced, Mode::PassThrough];

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Coalesced => "coalesced",
            Mode::PassThrough => "passthrough",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coalesced" => Ok(Mode::Coalesced),
            "passthrough" => Ok(Mode::PassThrough),
            _ => Err(format!("unknown mode `{s}` (expected coalesced or passthrough)")),
        }
    }
}

/// Summed statement timings for one (entity, n, mode) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchSample {
    pub entity: String,
    pub n_requests: u64,
    pub mode: Mode,
    pub execution_ms: f64,
    pub planning_ms: f64,
    pub measured: Measurement,
    pub statements: usize,
}

impl BenchSample {
    pub fn new(entity: &str, n_requests: u64, mode: Mode, execution_ms: f64, planning_ms: f64) -> Self {
        BenchSample {
            entity: entity.to_string(),
            n_requests,
            mode,
            execution_ms,
            planning_ms,
            measured: Measurement::Explain,
            statements: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LadderOptions {
    pub threshold: u64,
    pub threads: usize,
    pub ttl_seconds: f64,
    pub seed: u64,
    pub request_timeout: Duration,
}

impl Default for LadderOptions {
    fn default() -> Self {
        LadderOptions {
            threshold: DEFAULT_THRESHOLD,
            threads: 4,
            // long enough that only the threshold or the final drain flushes
            ttl_seconds: 3600.0,
            seed: 0,
            request_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("cell {entity}/{mode}/n={n}: inserted {inserted} rows, expected {n}")]
    CellInvalid {
        entity: String,
        mode: Mode,
        n: u64,
        inserted: u64,
    },
    #[error("entity {0} is not served by the mock upstream")]
    UnknownEntity(String),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error("proxy: {0}")]
    Proxy(String),
    #[error("request {index} of {n}: {message}")]
    Request { index: u64, n: u64, message: String },
    #[error("flush failed: {0}")]
    Flush(String),
}

/// Runs every (n, mode) cell for one entity, in ladder order. A cell whose
/// row count comes out wrong is discarded and run once more.
pub fn run_ladder(
    upstream: &MockUpstreamServer,
    entity: &EntitySchema,
    modes: &[Mode],
    ladder: &[u64],
    options: &LadderOptions,
) -> Result<Vec<BenchSample>, BenchError> {
    let mut samples = Vec::with_capacity(modes.len() * ladder.len());
    for &n in ladder {
        for &mode in modes {
            let sample = match run_cell(upstream, entity, mode, n, options) {
                Err(BenchError::CellInvalid { .. }) => {
                    log::warn!("cell {entity}/{mode}/n={n} invalid, rerunning");
                    run_cell(upstream, entity, mode, n, options)?
                }
                other => other?,
            };
            log::info!(
                "{entity} {mode} n={n}: {} statements, exec {:.3} ms, plan {:.3} ms",
                sample.statements,
                sample.execution_ms,
                sample.planning_ms
            );
            samples.push(sample);
        }
    }
    Ok(samples)
}

/// One cell: fresh tables, fresh proxy, n sequential POSTs, forced drain.
pub fn run_cell(
    upstream: &MockUpstreamServer,
    entity: &EntitySchema,
    mode: Mode,
    n: u64,
    options: &LadderOptions,
) -> Result<BenchSample, BenchError> {
    if !upstream.schemas().contains(entity) {
        return Err(BenchError::UnknownEntity(entity.name.to_string()));
    }
    upstream.reset_tables()?;
    upstream.clear_statements();
    let before = upstream.count_rows(entity)?;

    let cache_dir = tempfile::tempdir().map_err(|e| BenchError::Proxy(e.to_string()))?;
    let path = format!("/{}", entity.name);
    let mut config = Config::new(upstream.url());
    config.listen_address = "127.0.0.1:0".into();
    config.thread_pool_size = options.threads;
    config.cache_dir = cache_dir.path().to_path_buf();
    if mode == Mode::Coalesced {
        config.rules = vec![CacheRule::upload(&path, options.ttl_seconds, options.threshold)];
    }
    let proxy = Proxy::start_with(
        config,
        ProxyOptions {
            upstream_timeout: options.request_timeout,
            ..Default::default()
        },
    )
    .map_err(|e| BenchError::Proxy(e.to_string()))?;
    let addr = proxy.local_addr();
    let host = addr.to_string();

    let mut rng = StdRng::seed_from_u64(options.seed ^ n.rotate_left(17) ^ mode as u64);
    let mut seen = HashSet::with_capacity(n as usize);
    for index in 0..n {
        let body = loop {
            let candidate = entity.payload(&mut rng);
            if seen.insert(candidate.clone()) {
                break candidate;
            }
        };
        let req = Request::new("POST", &path)
            .with_header("Content-Type", JSON_CONTENT_TYPE)
            .with_body(body);
        let resp = http::send(addr, &host, &req, options.request_timeout).map_err(|e| BenchError::Request {
            index,
            n,
            message: e.to_string(),
        })?;
        if !resp.is_success() {
            return Err(BenchError::Request {
                index,
                n,
                message: format!("status {}: {}", resp.status, String::from_utf8_lossy(&resp.body)),
            });
        }
    }

    // shutdown waits for in-flight threshold flushes, then drains the rest
    let summary = proxy.shutdown();
    if !summary.is_success() {
        return Err(BenchError::Flush(summary.failures.join("; ")));
    }

    let inserted = upstream.count_rows(entity)?.saturating_sub(before);
    if inserted != n {
        return Err(BenchError::CellInvalid {
            entity: entity.name.to_string(),
            mode,
            n,
            inserted,
        });
    }
    let statements: Vec<_> = upstream
        .statements()
        .into_iter()
        .filter(|s| s.entity == entity.name)
        .collect();
    let measured = statements
        .first()
        .map(|s| s.timing.measured)
        .unwrap_or_else(|| upstream.with_db(|db| db.measurement()));
    Ok(BenchSample {
        entity: entity.name.to_string(),
        n_requests: n,
        mode,
        execution_ms: statements.iter().map(|s| s.timing.execution_ms).sum(),
        planning_ms: statements.iter().map(|s| s.timing.planning_ms).sum(),
        measured,
        statements: statements.len(),
    })
}
