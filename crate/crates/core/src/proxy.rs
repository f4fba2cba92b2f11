//! Connection handling.
//!
//! One acceptor thread pushes each accepted connection as a [`Task`] onto a
//! bounded shared queue. A dispatcher thread pops tasks and hands them to a
//! fixed pool of worker threads in round-robin order, each worker having its
//! own bounded inbox. A timer thread drains upload buffers whose deadline has
//! passed.

use std::io::{self, BufReader, BufWriter};
use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender, TrySendError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::cache_store::{CacheStore, Lookup};
use crate::config::{CacheRule, Config, ConfigError, RuleKind};
use crate::http::{self, HttpError, Request, Response};
use crate::metrics::{Counter, MetricsSnapshot};
use crate::time::Timestamp;
use crate::upstream::{self, UpstreamClient};
use crate::write_coalescer::{BufferOutcome, FlushBatch, WriteCoalescer};

pub const METRICS_PATH: &str = "/__rcsys/metrics";
pub const ACCEPT_QUEUE_CAPACITY: usize = 1024;
const WORKER_QUEUE_CAPACITY: usize = 64;
const CLIENT_IO_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid upstream: {0}")]
    Upstream(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Round-robin worker selection.
#[derive(Clone, Debug)]
pub struct RoundRobin {
    pool_size: usize,
    next_index: usize,
}

impl RoundRobin {
    pub fn new(pool_size: usize) -> Self {
        assert!(pool_size > 0, "worker pool must not be empty");
        RoundRobin {
            pool_size,
            next_index: 0,
        }
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size
    }

    pub fn next_index(&self) -> usize {
        self.next_index
    }

    /// Returns the current index and advances it modulo the pool size.
    pub fn assign_next_worker(&mut self) -> usize {
        let chosen = self.next_index;
        self.next_index = (self.next_index + 1) % self.pool_size;
        chosen
    }
}

/// One accepted connection waiting to be served.
pub struct Task {
    pub stream: TcpStream,
    pub arrival: Instant,
}

/// Tuning knobs that are not part of the configuration file.
#[derive(Clone, Debug)]
pub struct ProxyOptions {
    pub accept_queue_capacity: usize,
    pub upstream_timeout: Duration,
    pub bulk_retry_delay: Duration,
}

impl Default for ProxyOptions {
    fn default() -> Self {
        ProxyOptions {
            accept_queue_capacity: ACCEPT_QUEUE_CAPACITY,
            upstream_timeout: upstream::DEFAULT_TIMEOUT,
            bulk_retry_delay: upstream::DEFAULT_RETRY_DELAY,
        }
    }
}

/// Counters describing task flow through the pool.
#[derive(Debug)]
pub struct PoolStats {
    pub enqueued: Counter,
    pub completed: Counter,
    pub rejected: Counter,
    pub per_worker: Vec<Counter>,
}

impl PoolStats {
    fn new(workers: usize) -> Self {
        PoolStats {
            enqueued: Counter::default(),
            completed: Counter::default(),
            rejected: Counter::default(),
            per_worker: (0..workers).map(|_| Counter::default()).collect(),
        }
    }
}

/// Result of delivering a set of flush batches.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct FlushSummary {
    pub batches: usize,
    pub payloads: usize,
    pub failures: Vec<String>,
}

impl FlushSummary {
    pub fn is_success(&self) -> bool {
        self.failures.is_empty()
    }
}

struct Shared {
    config: Config,
    cache: CacheStore,
    coalescer: WriteCoalescer,
    upstream: UpstreamClient,
    stats: PoolStats,
}

impl Shared {
    fn snapshot(&self) -> MetricsSnapshot {
        MetricsSnapshot::capture(
            self.cache.metrics(),
            self.coalescer.metrics(),
            self.stats.rejected.get(),
        )
    }

    fn deliver(&self, batch: &FlushBatch, summary: &mut FlushSummary) {
        summary.batches += 1;
        summary.payloads += batch.len();
        match self.upstream.bulk_write(batch) {
            Ok(result) => {
                self.coalescer.metrics().flushes.inc();
                if result.accepted != batch.len() as u64 {
                    log::warn!(
                        "upstream accepted {} of {} payloads for `{}`",
                        result.accepted,
                        batch.len(),
                        batch.rule_path
                    );
                }
            }
            Err(e) => {
                self.coalescer.metrics().failed_flushes.inc();
                log::error!("{e}");
                summary.failures.push(e.to_string());
            }
        }
    }

    fn deliver_all(&self, batches: Vec<FlushBatch>) -> FlushSummary {
        let mut summary = FlushSummary::default();
        for batch in &batches {
            self.deliver(batch, &mut summary);
        }
        summary
    }
}

pub struct Proxy;

impl Proxy {
    pub fn start(config: Config) -> Result<ProxyHandle, ProxyError> {
        Self::start_with(config, ProxyOptions::default())
    }

    pub fn start_with(config: Config, options: ProxyOptions) -> Result<ProxyHandle, ProxyError> {
        config.validate()?;
        std::fs::create_dir_all(&config.cache_dir)?;
        let cache = CacheStore::open(&config.cache_dir)?;
        let coalescer = WriteCoalescer::open(&config.cache_dir, &config.rules, Timestamp::now())?;
        let upstream = UpstreamClient::new(&config.upstream_base_url, &config.cache_dir)
            .map_err(ProxyError::Upstream)?
            .with_timeout(options.upstream_timeout)
            .with_retry_delay(options.bulk_retry_delay);
        let listener = TcpListener::bind(&config.listen_address)?;
        let local_addr = listener.local_addr()?;
        let pool_size = config.thread_pool_size;
        let timer_period = timer_period(&config);

        let shared = Arc::new(Shared {
            stats: PoolStats::new(pool_size),
            config,
            cache,
            coalescer,
            upstream,
        });
        let stop = Arc::new(AtomicBool::new(false));

        let mut workers = Vec::with_capacity(pool_size);
        let mut inboxes = Vec::with_capacity(pool_size);
        for i in 0..pool_size {
            let (tx, rx) = mpsc::sync_channel::<Task>(WORKER_QUEUE_CAPACITY);
            inboxes.push(tx);
            let shared = Arc::clone(&shared);
            workers.push(
                thread::Builder::new()
                    .name(format!("worker-{i}"))
                    .spawn(move || worker_loop(&shared, rx))?,
            );
        }

        let (task_tx, task_rx) = mpsc::sync_channel::<Task>(options.accept_queue_capacity);
        let dispatcher = {
            let shared = Arc::clone(&shared);
            thread::Builder::new()
                .name("dispatcher".into())
                .spawn(move || dispatch_loop(&shared, task_rx, inboxes))?
        };
        let acceptor = {
            let shared = Arc::clone(&shared);
            let stop = Arc::clone(&stop);
            thread::Builder::new()
                .name("acceptor".into())
                .spawn(move || accept_loop(&shared, listener, task_tx, &stop))?
        };
        let (timer_stop, timer_rx) = mpsc::channel::<()>();
        let timer = {
            let shared = Arc::clone(&shared);
            thread::Builder::new()
                .name("flush-timer".into())
                .spawn(move || timer_loop(&shared, timer_rx, timer_period))?
        };

        log::info!(
            "listening on {local_addr}, {pool_size} workers, upstream {}",
            shared.config.upstream_base_url
        );
        Ok(ProxyHandle {
            shared,
            local_addr,
            stop,
            acceptor: Some(acceptor),
            dispatcher: Some(dispatcher),
            workers,
            timer: Some(timer),
            timer_stop: Some(timer_stop),
        })
    }
}

/// min(1 s, shortest upload TTL / 10).
pub fn timer_period(config: &Config) -> Duration {
    let one = Duration::from_secs(1);
    config
        .upload_rules()
        .map(|r| r.ttl() / 10)
        .min()
        .map_or(one, |p| p.min(one))
        .max(Duration::from_millis(1))
}

pub struct ProxyHandle {
    shared: Arc<Shared>,
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    dispatcher: Option<JoinHandle<()>>,
    workers: Vec<JoinHandle<()>>,
    timer: Option<JoinHandle<()>>,
    timer_stop: Option<mpsc::Sender<()>>,
}

impl ProxyHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn config(&self) -> &Config {
        &self.shared.config
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        self.shared.snapshot()
    }

    pub fn pool_stats(&self) -> &PoolStats {
        &self.shared.stats
    }

    pub fn cache(&self) -> &CacheStore {
        &self.shared.cache
    }

    pub fn coalescer(&self) -> &WriteCoalescer {
        &self.shared.coalescer
    }

    /// Drains and delivers every upload buffer now.
    pub fn flush_all(&self) -> FlushSummary {
        self.shared.deliver_all(self.shared.coalescer.drain_all())
    }

    /// Stops accepting, finishes queued and in-flight requests, then flushes
    /// every non-empty upload buffer.
    pub fn shutdown(mut self) -> FlushSummary {
        self.stop_threads();
        let summary = self.flush_all();
        log::info!(
            "shutdown flushed {} payloads in {} batches ({} failures)",
            summary.payloads,
            summary.batches,
            summary.failures.len()
        );
        summary
    }

    fn stop_threads(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(acceptor) = self.acceptor.take() {
            // wake the blocking accept
            let mut wake = self.local_addr;
            if wake.ip().is_unspecified() {
                wake.set_ip(IpAddr::V4(Ipv4Addr::LOCALHOST));
            }
            let _ = TcpStream::connect_timeout(&wake, Duration::from_secs(1));
            let _ = acceptor.join();
        }
        if let Some(dispatcher) = self.dispatcher.take() {
            let _ = dispatcher.join();
        }
        for worker in self.workers.drain(..) {
            let _ = worker.join();
        }
        self.timer_stop.take();
        if let Some(timer) = self.timer.take() {
            let _ = timer.join();
        }
    }
}

impl Drop for ProxyHandle {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.stop_threads();
            let summary = self.flush_all();
            if !summary.is_success() {
                log::error!("{} flush failures while dropping proxy", summary.failures.len());
            }
        }
    }
}

fn accept_loop(shared: &Shared, listener: TcpListener, queue: SyncSender<Task>, stop: &AtomicBool) {
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let task = Task {
            stream,
            arrival: Instant::now(),
        };
        match queue.try_send(task) {
            Ok(()) => shared.stats.enqueued.inc(),
            Err(TrySendError::Full(task)) => {
                shared.stats.rejected.inc();
                let mut w = BufWriter::new(&task.stream);
                let _ = Response::new(503, "accept queue full\n").write_to(&mut w);
            }
            Err(TrySendError::Disconnected(_)) => break,
        }
    }
}

fn dispatch_loop(shared: &Shared, queue: Receiver<Task>, inboxes: Vec<SyncSender<Task>>) {
    let mut rr = RoundRobin::new(inboxes.len());
    for task in queue {
        let idx = rr.assign_next_worker();
        shared.stats.per_worker[idx].inc();
        if inboxes[idx].send(task).is_err() {
            log::error!("worker {idx} has exited; dropping task");
        }
    }
}

fn worker_loop(shared: &Shared, inbox: Receiver<Task>) {
    for task in inbox {
        let waited = task.arrival.elapsed();
        if let Err(e) = handle_connection(shared, task.stream) {
            log::debug!("connection error: {e}");
        }
        shared.stats.completed.inc();
        log::trace!("task done, queued for {waited:?}");
    }
}

fn timer_loop(shared: &Shared, stop: Receiver<()>, period: Duration) {
    while let Err(RecvTimeoutError::Timeout) = stop.recv_timeout(period) {
        let batches = shared.coalescer.collect_expired(Timestamp::now());
        if !batches.is_empty() {
            shared.deliver_all(batches);
        }
    }
}

fn handle_connection(shared: &Shared, stream: TcpStream) -> io::Result<()> {
    stream.set_read_timeout(Some(CLIENT_IO_TIMEOUT))?;
    stream.set_write_timeout(Some(CLIENT_IO_TIMEOUT))?;
    let _ = stream.set_nodelay(true);
    let request = {
        let mut reader = BufReader::new(&stream);
        http::read_request(&mut reader)
    };
    let request = match request {
        Ok(r) => r,
        Err(HttpError::Closed) => return Ok(()),
        Err(HttpError::Malformed(msg)) => {
            let body = format!("malformed request: {msg}\n");
            return respond(&stream, Response::new(400, body));
        }
        Err(HttpError::Io(e)) => return Err(e),
    };

    let now = Timestamp::now();
    let evicted = shared.cache.enforce_capacity(shared.config.max_cache_bytes, now);
    if !evicted.is_empty() {
        log::debug!("evicted {} cache entries", evicted.len());
    }

    if request.method == "GET" && request.path() == METRICS_PATH {
        let body = shared.snapshot().to_string();
        return respond(
            &stream,
            Response::new(200, body).with_header("Content-Type", "text/plain"),
        );
    }

    match shared.config.match_rule(&request.method, request.path()) {
        None => respond(&stream, forward(shared, &request)),
        Some(rule) => match rule.kind {
            RuleKind::Upload => handle_upload(shared, &stream, rule, &request, now),
            RuleKind::Download => respond(&stream, handle_download(shared, rule, &request, now)),
        },
    }
}

fn respond(stream: &TcpStream, response: Response) -> io::Result<()> {
    let mut w = BufWriter::new(stream);
    response.write_to(&mut w)
}

fn forward(shared: &Shared, request: &Request) -> Response {
    match shared.upstream.forward(request) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("forwarding {} {} failed: {e}", request.method, request.target);
            Response::new(502, format!("{e}\n"))
        }
    }
}

fn handle_upload(
    shared: &Shared,
    stream: &TcpStream,
    rule: &CacheRule,
    request: &Request,
    now: Timestamp,
) -> io::Result<()> {
    match shared.coalescer.buffer_upload(rule, &request.body, now) {
        Ok(BufferOutcome::Buffered) => respond(stream, Response::new(202, Vec::new())),
        Ok(BufferOutcome::FlushTriggered(batch)) => {
            let answered = respond(stream, Response::new(202, Vec::new()));
            shared.deliver(&batch, &mut FlushSummary::default());
            answered
        }
        Err(e) => {
            log::warn!("{e}; forwarding upload directly");
            respond(stream, forward(shared, request))
        }
    }
}

fn handle_download(shared: &Shared, rule: &CacheRule, request: &Request, now: Timestamp) -> Response {
    let key = request.target.as_str();
    let cache = &shared.cache;
    let metrics = cache.metrics();
    let _flight = cache.begin_refresh(key);
    let state = cache.lookup(key, now);
    let label = match state {
        Lookup::Hit(body) => {
            metrics.bytes_total.add(body.len() as u64);
            return Response::new(200, body).with_header("X-Cache", "HIT");
        }
        Lookup::Expired => "REFRESH",
        Lookup::Miss => "MISS",
    };
    match shared.upstream.fetch(key) {
        Ok(body) => {
            if let Err(e) = cache.put(key, &body, rule.ttl(), Timestamp::now()) {
                log::warn!("{e}");
            }
            metrics.bytes_total.add(body.len() as u64);
            Response::new(200, body).with_header("X-Cache", label)
        }
        Err(e) => {
            log::warn!("refreshing `{key}` failed: {e}");
            match cache.read_stale(key) {
                Some(body) => {
                    metrics.bytes_total.add(body.len() as u64);
                    metrics.bytes_from_cache.add(body.len() as u64);
                    Response::new(200, body).with_header("X-Cache", "STALE")
                }
                None => Response::new(502, format!("{e}\n")),
            }
        }
    }
}
