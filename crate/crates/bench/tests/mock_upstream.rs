use std::time::Duration;

use rand::rngs::StdRng;
use rand::SeedableRng;
use wcproxy::http::{self, Request, Response};
use wcproxy::upstream::{encode_bulk, COALESCE_COUNT_HEADER};
use wcproxy_bench::schema::{E10C0FK, E4C0FK, E4C2FK};
use wcproxy_bench::{serve_mock_upstream, MockUpstreamServer, SqliteDb, ALL_ENTITIES};

fn server() -> MockUpstreamServer {
    serve_mock_upstream(Box::new(SqliteDb::in_memory().unwrap()), &ALL_ENTITIES).unwrap()
}

fn send(s: &MockUpstreamServer, req: Request) -> Response {
    http::send(s.addr(), &s.addr().to_string(), &req, Duration::from_secs(10)).unwrap()
}

fn count_via_http(s: &MockUpstreamServer, entity: &str) -> u64 {
    let resp = send(s, Request::new("GET", format!("/__count/{entity}")));
    assert_eq!(resp.status, 200);
    let v: serde_json::Value = serde_json::from_slice(&resp.body).unwrap();
    v["count"].as_u64().unwrap()
}

#[test]
fn single_post_adds_one_row() {
    let s = server();
    let before = count_via_http(&s, "4c0fk");
    let body = E4C0FK.payload(&mut StdRng::seed_from_u64(3));
    let resp = send(&s, Request::new("POST", "/4c0fk").with_body(body.clone()));
    assert_eq!(resp.status, 201, "{}", String::from_utf8_lossy(&resp.body));
    assert_eq!(count_via_http(&s, "4c0fk"), before + 1);

    let latest = send(&s, Request::new("GET", "/4c0fk/latest"));
    assert_eq!(latest.status, 200);
    assert_eq!(
        serde_json::from_slice::<serde_json::Value>(&latest.body).unwrap(),
        serde_json::from_slice::<serde_json::Value>(&body).unwrap()
    );
    assert_eq!(s.statements().len(), 1);
    assert_eq!(s.statements()[0].rows, 1);
    assert_eq!(s.counter("POST", "/4c0fk"), 1);
    assert_eq!(s.counter("GET", "/__count/4c0fk"), 2);
}

#[test]
fn bulk_post_is_one_statement() {
    let s = server();
    let mut rng = StdRng::seed_from_u64(4);
    let payloads: Vec<Vec<u8>> = (0..100).map(|_| E10C0FK.payload(&mut rng)).collect();
    let (ctype, body) = encode_bulk(&payloads);
    let before = s.count_rows(&E10C0FK).unwrap();
    let resp = send(
        &s,
        Request::new("POST", "/10c0fk")
            .with_header("Content-Type", ctype)
            .with_header(COALESCE_COUNT_HEADER, "100")
            .with_body(body),
    );
    assert_eq!(resp.status, 200);
    assert_eq!(&resp.body[..], br#"{"accepted":100}"#);
    assert_eq!(s.count_rows(&E10C0FK).unwrap(), before + 100);
    let log = s.statements();
    assert_eq!(log.len(), 1);
    assert_eq!((log[0].entity, log[0].rows), ("10c0fk", 100));
}

#[test]
fn binary_framed_bulk_is_accepted() {
    let s = server();
    let mut rng = StdRng::seed_from_u64(5);
    // a leading space makes the payloads non-bare JSON, forcing binary framing
    let payloads: Vec<Vec<u8>> = (0..3)
        .map(|_| {
            let mut p = b" ".to_vec();
            p.extend(E4C0FK.payload(&mut rng));
            p
        })
        .collect();
    let (ctype, body) = encode_bulk(&payloads);
    assert_ne!(ctype, "application/json");
    let resp = send(
        &s,
        Request::new("POST", "/4c0fk")
            .with_header("Content-Type", ctype)
            .with_header(COALESCE_COUNT_HEADER, "3")
            .with_body(body),
    );
    assert_eq!(resp.status, 200);
    assert_eq!(s.statements()[0].rows, 3);
}

#[test]
fn dangling_foreign_key_is_rejected() {
    let s = server();
    let before = s.count_rows(&E4C2FK).unwrap();
    let bad = br#"{"c1":"a","c2":"b","c3":"c","c4":"d","fk_4c0fk":1,"fk_10c0fk":999}"#;
    let resp = send(&s, Request::new("POST", "/4c2fk").with_body(&bad[..]));
    assert_eq!(resp.status, 422);
    assert_eq!(&resp.body[..], br#"{"rejected":1}"#);

    let good = E4C2FK.payload(&mut StdRng::seed_from_u64(6));
    let (ctype, body) = encode_bulk(&[good, bad.to_vec()]);
    let resp = send(
        &s,
        Request::new("POST", "/4c2fk")
            .with_header("Content-Type", ctype)
            .with_header(COALESCE_COUNT_HEADER, "2")
            .with_body(body),
    );
    assert_eq!(resp.status, 422);
    assert_eq!(&resp.body[..], br#"{"rejected":2}"#);
    assert_eq!(s.count_rows(&E4C2FK).unwrap(), before);
    assert!(s.statements().is_empty());
}

#[test]
fn malformed_bodies_are_400() {
    let s = server();
    for body in [&b"nope"[..], b"{}", br#"{"c1":1,"c2":"b","c3":"c","c4":"d"}"#] {
        let resp = send(&s, Request::new("POST", "/4c0fk").with_body(body));
        assert_eq!(resp.status, 400, "{}", String::from_utf8_lossy(body));
    }
    let resp = send(
        &s,
        Request::new("POST", "/4c0fk")
            .with_header("Content-Type", "application/json")
            .with_header(COALESCE_COUNT_HEADER, "2")
            .with_body(&b"[{\"c1\":\"a\"}]"[..]),
    );
    assert_eq!(resp.status, 400);
    assert_eq!(send(&s, Request::new("POST", "/nope")).status, 404);
    assert_eq!(send(&s, Request::new("GET", "/4c0fk")).status, 405);
    assert_eq!(s.count_rows(&E4C0FK).unwrap(), 1);
}

#[test]
fn reset_restores_seed_rows() {
    let s = server();
    let body = E4C0FK.payload(&mut StdRng::seed_from_u64(7));
    send(&s, Request::new("POST", "/4c0fk").with_body(body));
    assert_eq!(s.count_rows(&E4C0FK).unwrap(), 2);
    s.reset_tables().unwrap();
    assert_eq!(s.count_rows(&E4C0FK).unwrap(), 1);
    assert_eq!(s.count_rows(&E4C2FK).unwrap(), 0);
}
