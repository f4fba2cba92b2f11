#![allow(dead_code)]

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use wcproxy::http::{self, Request, Response};
use wcproxy::proxy::{ProxyHandle, ProxyOptions};
use wcproxy::{CacheRule, Config, Proxy};

type Handler = dyn Fn(&Request) -> Response + Send + Sync;

/// Origin stand-in that records every request it sees.
pub struct MockUpstream {
    addr: SocketAddr,
    requests: Arc<Mutex<Vec<Request>>>,
    handler: Arc<Mutex<Arc<Handler>>>,
    stop: Arc<AtomicBool>,
}

impl MockUpstream {
    pub fn start(handler: impl Fn(&Request) -> Response + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let requests = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Mutex<Arc<Handler>>> = Arc::new(Mutex::new(Arc::new(handler)));
        let stop = Arc::new(AtomicBool::new(false));
        {
            let requests = Arc::clone(&requests);
            let handler = Arc::clone(&handler);
            let stop = Arc::clone(&stop);
            thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = conn else { continue };
                    let requests = Arc::clone(&requests);
                    let handler = Arc::clone(&*handler.lock().unwrap());
                    thread::spawn(move || serve(stream, &requests, &*handler));
                }
            });
        }
        MockUpstream {
            addr,
            requests,
            handler,
            stop,
        }
    }

    /// Echo-ish origin: 200 with a body derived from the request.
    pub fn echo() -> Self {
        Self::start(|req| {
            Response::new(200, format!("{} {} {}", req.method, req.target, req.body.len()))
                .with_header("X-Origin", "mock")
        })
    }

    pub fn set_handler(&self, handler: impl Fn(&Request) -> Response + Send + Sync + 'static) {
        *self.handler.lock().unwrap() = Arc::new(handler);
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn requests(&self) -> Vec<Request> {
        self.requests.lock().unwrap().clone()
    }

    pub fn count(&self, method: &str, path: &str) -> usize {
        self.requests
            .lock()
            .unwrap()
            .iter()
            .filter(|r| r.method == method && r.path() == path)
            .count()
    }

    /// Sends a request straight to the origin, bypassing the proxy.
    pub fn direct(&self, req: &Request) -> Response {
        http::send(self.addr, &self.addr.to_string(), req, Duration::from_secs(10)).unwrap()
    }
}

impl Drop for MockUpstream {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
    }
}

fn serve(stream: TcpStream, requests: &Mutex<Vec<Request>>, handler: &Handler) {
    let req = {
        let mut r = BufReader::new(&stream);
        match http::read_request(&mut r) {
            Ok(req) => req,
            Err(_) => return,
        }
    };
    requests.lock().unwrap().push(req.clone());
    let resp = handler(&req);
    let _ = resp.write_to(&mut BufWriter::new(&stream));
}

/// An address nothing listens on.
pub fn dead_address() -> SocketAddr {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap()
}

pub fn config(upstream: &str, cache_dir: &Path, rules: Vec<CacheRule>) -> Config {
    let mut cfg = Config::new(upstream);
    cfg.listen_address = "127.0.0.1:0".into();
    cfg.cache_dir = cache_dir.to_path_buf();
    cfg.thread_pool_size = 4;
    cfg.rules = rules;
    cfg
}

pub fn start(cfg: Config) -> ProxyHandle {
    Proxy::start_with(
        cfg,
        ProxyOptions {
            bulk_retry_delay: Duration::from_millis(50),
            upstream_timeout: Duration::from_secs(10),
            ..Default::default()
        },
    )
    .unwrap()
}

pub fn send(proxy: &ProxyHandle, req: Request) -> Response {
    let addr = proxy.local_addr();
    http::send(addr, &addr.to_string(), &req, Duration::from_secs(20)).unwrap()
}

pub fn get(proxy: &ProxyHandle, target: &str) -> Response {
    send(proxy, Request::new("GET", target))
}

pub fn post(proxy: &ProxyHandle, target: &str, body: impl Into<Vec<u8>>) -> Response {
    send(proxy, Request::new("POST", target).with_body(body))
}

pub fn wait_until(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = std::time::Instant::now() + timeout;
    while std::time::Instant::now() < deadline {
        if cond() {
            return true;
        }
        thread::sleep(Duration::from_millis(10));
    }
    cond()
}
