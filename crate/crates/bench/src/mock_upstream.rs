//! A small web server that turns POSTs into INSERTs.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use serde_json::json;
use wcproxy::http::{self, Request, Response};
use wcproxy::upstream::{decode_bulk, COALESCE_COUNT_HEADER, JSON_CONTENT_TYPE};

use crate::db::{capture_timing, DbError, InsertDb, StatementTiming};
use crate::schema::EntitySchema;

pub const COUNT_PREFIX: &str = "/__count/";

/// One INSERT as seen by the database.
#[derive(Clone, Debug, PartialEq)]
pub struct StatementRecord {
    pub entity: &'static str,
    pub rows: usize,
    pub timing: StatementTiming,
}

type Job = Box<dyn FnOnce(&mut dyn InsertDb) + Send>;

/// Owns the connection; every statement runs on this one thread so its
/// caches stay warm and timings are not skewed by thread start-up.
struct DbThread {
    jobs: Sender<Job>,
}

impl DbThread {
    fn spawn(mut db: Box<dyn InsertDb>) -> std::io::Result<Self> {
        let (jobs, rx) = mpsc::channel::<Job>();
        thread::Builder::new().name("mock-db".into()).spawn(move || {
            for job in rx {
                job(db.as_mut());
            }
        })?;
        Ok(DbThread { jobs })
    }

    fn call<R: Send + 'static>(&self, f: impl FnOnce(&mut dyn InsertDb) -> R + Send + 'static) -> R {
        let (tx, rx) = mpsc::sync_channel(1);
        self.jobs
            .send(Box::new(move |db| {
                let _ = tx.send(f(db));
            }))
            .expect("database thread exited");
        rx.recv().expect("database thread exited")
    }
}

struct Shared {
    db: DbThread,
    schemas: Vec<EntitySchema>,
    log: Mutex<Vec<StatementRecord>>,
    counters: Mutex<BTreeMap<String, u64>>,
}

pub struct MockUpstreamServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

/// Creates the tables, seeds the FK reference rows and starts serving on an
/// ephemeral local port.
pub fn serve_mock_upstream(
    mut db: Box<dyn InsertDb>,
    schemas: &[EntitySchema],
) -> Result<MockUpstreamServer, DbError> {
    db.create_schema(schemas)?;
    db.reset(schemas)?;
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| DbError::Sql(e.to_string()))?;
    let addr = listener.local_addr().map_err(|e| DbError::Sql(e.to_string()))?;
    let shared = Arc::new(Shared {
        db: DbThread::spawn(db).map_err(|e| DbError::Sql(e.to_string()))?,
        schemas: schemas.to_vec(),
        log: Mutex::new(Vec::new()),
        counters: Mutex::new(BTreeMap::new()),
    });
    let stop = Arc::new(AtomicBool::new(false));
    let acceptor = {
        let shared = Arc::clone(&shared);
        let stop = Arc::clone(&stop);
        thread::Builder::new()
            .name("mock-upstream".into())
            .spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = conn else { continue };
                    let shared = Arc::clone(&shared);
                    thread::spawn(move || serve_connection(stream, &shared));
                }
            })
            .map_err(|e| DbError::Sql(e.to_string()))?
    };
    Ok(MockUpstreamServer {
        addr,
        shared,
        stop,
        acceptor: Some(acceptor),
    })
}

impl MockUpstreamServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn schemas(&self) -> &[EntitySchema] {
        &self.shared.schemas
    }

    pub fn statements(&self) -> Vec<StatementRecord> {
        self.shared.log.lock().unwrap().clone()
    }

    pub fn clear_statements(&self) {
        self.shared.log.lock().unwrap().clear();
    }

    /// Request counts keyed by `"METHOD /path"`.
    pub fn counters(&self) -> BTreeMap<String, u64> {
        self.shared.counters.lock().unwrap().clone()
    }

    pub fn counter(&self, method: &str, path: &str) -> u64 {
        self.counters().get(&format!("{method} {path}")).copied().unwrap_or(0)
    }

    pub fn clear_counters(&self) {
        self.shared.counters.lock().unwrap().clear();
    }

    /// Truncates every table and reseeds the FK reference rows.
    pub fn reset_tables(&self) -> Result<(), DbError> {
        let schemas = self.shared.schemas.clone();
        self.with_db(move |db| db.reset(&schemas))
    }

    pub fn count_rows(&self, schema: &EntitySchema) -> Result<u64, DbError> {
        let schema = *schema;
        self.with_db(move |db| db.count_rows(&schema))
    }

    /// Runs `f` on the database thread.
    pub fn with_db<R: Send + 'static>(&self, f: impl FnOnce(&mut dyn InsertDb) -> R + Send + 'static) -> R {
        self.shared.db.call(f)
    }
}

impl Drop for MockUpstreamServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

fn serve_connection(stream: TcpStream, shared: &Shared) {
    let req = match http::read_request(&mut BufReader::new(&stream)) {
        Ok(req) => req,
        Err(_) => return,
    };
    let resp = handle(shared, &req);
    let _ = resp.write_to(&mut BufWriter::new(&stream));
}

fn json_response(status: u16, body: serde_json::Value) -> Response {
    Response::new(status, body.to_string()).with_header("Content-Type", JSON_CONTENT_TYPE)
}

fn error(status: u16, message: &str) -> Response {
    json_response(status, json!({ "error": message }))
}

fn handle(shared: &Shared, req: &Request) -> Response {
    let path = req.path().to_string();
    *shared
        .counters
        .lock()
        .unwrap()
        .entry(format!("{} {path}", req.method))
        .or_insert(0) += 1;

    let find = |name: &str| shared.schemas.iter().find(|s| s.name == name).copied();
    if let Some(name) = path.strip_prefix(COUNT_PREFIX) {
        return match (req.method.as_str(), find(name)) {
            ("GET", Some(schema)) => match shared.db.call(move |db| db.count_rows(&schema)) {
                Ok(n) => json_response(200, json!({ "count": n })),
                Err(e) => error(500, &e.to_string()),
            },
            (_, None) => error(404, "unknown entity"),
            _ => error(405, "method not allowed"),
        };
    }
    let trimmed = path.trim_start_matches('/');
    if let Some(name) = trimmed.strip_suffix("/latest") {
        return match (req.method.as_str(), find(name)) {
            ("GET", Some(schema)) => match shared.db.call(move |db| db.latest_row(&schema)) {
                Ok(Some(row)) => json_response(200, row),
                Ok(None) => error(404, "no rows"),
                Err(e) => error(500, &e.to_string()),
            },
            (_, None) => error(404, "unknown entity"),
            _ => error(405, "method not allowed"),
        };
    }
    match (req.method.as_str(), find(trimmed)) {
        ("POST", Some(schema)) => insert(shared, &schema, req),
        (_, None) => error(404, "unknown entity"),
        _ => error(405, "method not allowed"),
    }
}

fn insert(shared: &Shared, schema: &EntitySchema, req: &Request) -> Response {
    let bulk = req.header(COALESCE_COUNT_HEADER).is_some();
    let payloads = if bulk {
        match decode_bulk(req.header_str("Content-Type"), &req.body) {
            Ok(p) => p,
            Err(e) => return error(400, &e),
        }
    } else {
        vec![req.body.clone()]
    };
    if bulk {
        let declared = req.header_str(COALESCE_COUNT_HEADER).and_then(|v| v.trim().parse::<usize>().ok());
        if declared != Some(payloads.len()) {
            return error(400, "X-Coalesce-Count does not match the body");
        }
    }
    if payloads.is_empty() {
        return error(400, "empty batch");
    }
    let mut rows = Vec::with_capacity(payloads.len());
    for p in &payloads {
        match schema.row_values(p) {
            Ok(r) => rows.push(r),
            Err(e) => return error(400, &e),
        }
    }
    let sql = schema.insert_sql(&rows);
    let result = shared.db.call(move |db| capture_timing(db, &sql));
    match result {
        Ok(timing) => {
            shared.log.lock().unwrap().push(StatementRecord {
                entity: schema.name,
                rows: rows.len(),
                timing,
            });
            json_response(if bulk { 200 } else { 201 }, json!({ "accepted": rows.len() }))
        }
        // the statement is atomic, so every row in it is rejected
        Err(DbError::ForeignKeyViolation(_)) => json_response(422, json!({ "rejected": rows.len() })),
        Err(e) => error(500, &e.to_string()),
    }
}
