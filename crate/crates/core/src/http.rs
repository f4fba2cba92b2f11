//! Minimal blocking HTTP/1.1 framing.
//!
//! Every connection carries exactly one request and one response
//! (`Connection: close`). Bodies are fully buffered; chunked bodies are
//! decoded on read and always re-emitted with `Content-Length`.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use thiserror::Error;

const MAX_HEAD_BYTES: usize = 64 * 1024;
const MAX_HEADERS: usize = 128;
const MAX_BODY_BYTES: u64 = 512 * 1024 * 1024;

/// Headers that describe a single transport hop and are never relayed.
pub const HOP_BY_HOP: &[&str] = &[
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "proxy-connection",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
];

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("connection closed before a complete message was read")]
    Closed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub name: String,
    pub value: Vec<u8>,
}

impl Header {
    pub fn new(name: impl Into<String>, value: impl Into<Vec<u8>>) -> Self {
        Header {
            name: name.into(),
            value: value.into(),
        }
    }
}

fn find_header<'a>(headers: &'a [Header], name: &str) -> Option<&'a [u8]> {
    headers
        .iter()
        .find(|h| h.name.eq_ignore_ascii_case(name))
        .map(|h| h.value.as_slice())
}

fn set_header(headers: &mut Vec<Header>, name: &str, value: impl Into<Vec<u8>>) {
    headers.retain(|h| !h.name.eq_ignore_ascii_case(name));
    headers.push(Header::new(name, value));
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Request {
    pub method: String,
    /// Origin-form target: path plus optional `?query`.
    pub target: String,
    pub headers: Vec<Header>,
    pub body: Vec<u8>,
}

impl Request {
    pub fn new(method: impl Into<String>, target: impl Into<String>) -> Self {
        Request {
            method: method.into(),
            target: target.into(),
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn with_body(mut self, body: impl Into<Vec<u8>>) -> Self {
        self.body = body.into();
        self
    }

    pub fn with_header(mut self, name: &str, value: impl Into<Vec<u8>>) -> Self {
        set_header(&mut self.headers, name, value);
        self
    }

    pub fn path(&self) -> &str {
        crate::config::strip_query(&self.target)
    }

    pub fn header(&self, name: &str) -> Option<&[u8]> {
        find_header(&self.headers, name)
    }

    pub fn header_str(&self, name: &str) -> Option<&str> {
        self.header(name).and_then(|v| std::str::from_utf8(v).ok())
    }

    pub fn set_header(&mut self, name: &str, value: impl Into<Vec<u8>>) {
        set_header(&mut self.headers, name, value)
    }

    /// Serializes with `Content-Length` and `Connection: close` framing.
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let mut head = Vec::with_capacity(256);
        write!(head, "{} {} HTTP/1.1\r\n", self.method, self.target)?;
        write_headers(&mut head, &self.headers, self.body.len())?;
        w.write_all(&head)?;
        w.write_all(&self.body)?;
        w.flush()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub reason: String,
    pub headers: Vec<Header>,
    pub body: Vec<u8>,
}

impl Response {
    pub fn new(status: u16, body: impl Into<Vec<u8>>) -> Self {
        Response {
            status,
            reason: reason_phrase(status).to_string(),
            headers: Vec::new(),
            body: body.into(),
        }
    }

    pub fn with_header(mut self, name: &str, value: impl Into<Vec<u8>>) -> Self {
        set_header(&mut self.headers, name, value);
        self
    }

    pub fn header(&self, name: &str) -> Option<&[u8]> {
        find_header(&self.headers, name)
    }

    pub fn header_str(&self, name: &str) -> Option<&str> {
        self.header(name).and_then(|v| std::str::from_utf8(v).ok())
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let mut head = Vec::with_capacity(256);
        write!(head, "HTTP/1.1 {} {}\r\n", self.status, self.reason)?;
        write_headers(&mut head, &self.headers, self.body.len())?;
        w.write_all(&head)?;
        w.write_all(&self.body)?;
        w.flush()
    }
}

fn write_headers(head: &mut Vec<u8>, headers: &[Header], body_len: usize) -> io::Result<()> {
    for h in headers {
        if h.name.eq_ignore_ascii_case("content-length")
            || h.name.eq_ignore_ascii_case("connection")
            || h.name.eq_ignore_ascii_case("transfer-encoding")
        {
            continue;
        }
        head.extend_from_slice(h.name.as_bytes());
        head.extend_from_slice(b": ");
        head.extend_from_slice(&h.value);
        head.extend_from_slice(b"\r\n");
    }
    write!(head, "Content-Length: {body_len}\r\nConnection: close\r\n\r\n")
}

/// Removes hop-by-hop headers, including any named by `Connection`.
pub fn strip_hop_by_hop(headers: &[Header]) -> Vec<Header> {
    let listed: Vec<String> = headers
        .iter()
        .filter(|h| h.name.eq_ignore_ascii_case("connection"))
        .flat_map(|h| {
            String::from_utf8_lossy(&h.value)
                .split(',')
                .map(|t| t.trim().to_ascii_lowercase())
                .collect::<Vec<_>>()
        })
        .collect();
    headers
        .iter()
        .filter(|h| {
            let name = h.name.to_ascii_lowercase();
            !HOP_BY_HOP.contains(&name.as_str()) && !listed.contains(&name)
        })
        .cloned()
        .collect()
}

pub fn reason_phrase(status: u16) -> &'static str {
    match status {
        200 => "OK",
        201 => "Created",
        202 => "Accepted",
        204 => "No Content",
        304 => "Not Modified",
        400 => "Bad Request",
        404 => "Not Found",
        405 => "Method Not Allowed",
        422 => "Unprocessable Entity",
        500 => "Internal Server Error",
        502 => "Bad Gateway",
        503 => "Service Unavailable",
        504 => "Gateway Timeout",
        _ => "",
    }
}

fn read_head<R: BufRead>(r: &mut R) -> Result<Vec<u8>, HttpError> {
    let mut head = Vec::with_capacity(512);
    loop {
        let before = head.len();
        let n = r.by_ref().take(MAX_HEAD_BYTES as u64).read_until(b'\n', &mut head)?;
        if n == 0 {
            return Err(HttpError::Closed);
        }
        if head.len() > MAX_HEAD_BYTES {
            return Err(HttpError::Malformed("header section too large".into()));
        }
        let line = &head[before..];
        if line == b"\r\n" || line == b"\n" {
            // leading blank lines before a request line are tolerated
            if before == 0 {
                head.clear();
                continue;
            }
            return Ok(head);
        }
    }
}

fn collect_headers(parsed: &[httparse::Header<'_>]) -> Vec<Header> {
    parsed
        .iter()
        .map(|h| Header::new(h.name, h.value))
        .collect()
}

enum BodyFraming {
    None,
    Length(u64),
    Chunked,
    UntilEof,
}

fn framing(headers: &[Header], default: BodyFraming) -> Result<BodyFraming, HttpError> {
    if let Some(te) = find_header(headers, "transfer-encoding") {
        let te = String::from_utf8_lossy(te).to_ascii_lowercase();
        if te.split(',').next_back().map(str::trim) == Some("chunked") {
            return Ok(BodyFraming::Chunked);
        }
        return Ok(BodyFraming::UntilEof);
    }
    if let Some(cl) = find_header(headers, "content-length") {
        let len = std::str::from_utf8(cl)
            .ok()
            .and_then(|s| s.trim().parse::<u64>().ok())
            .ok_or_else(|| HttpError::Malformed("invalid Content-Length".into()))?;
        if len > MAX_BODY_BYTES {
            return Err(HttpError::Malformed(format!("body of {len} bytes too large")));
        }
        return Ok(BodyFraming::Length(len));
    }
    Ok(default)
}

fn read_body<R: BufRead>(r: &mut R, framing: BodyFraming) -> Result<Vec<u8>, HttpError> {
    match framing {
        BodyFraming::None => Ok(Vec::new()),
        BodyFraming::Length(len) => {
            let mut body = Vec::with_capacity(len.min(1 << 20) as usize);
            r.by_ref().take(len).read_to_end(&mut body)?;
            if body.len() as u64 != len {
                return Err(HttpError::Closed);
            }
            Ok(body)
        }
        BodyFraming::UntilEof => {
            let mut body = Vec::new();
            r.by_ref().take(MAX_BODY_BYTES).read_to_end(&mut body)?;
            Ok(body)
        }
        BodyFraming::Chunked => read_chunked(r),
    }
}

fn read_line<R: BufRead>(r: &mut R) -> Result<Vec<u8>, HttpError> {
    let mut line = Vec::new();
    let n = r.by_ref().take(MAX_HEAD_BYTES as u64).read_until(b'\n', &mut line)?;
    if n == 0 || line.last() != Some(&b'\n') {
        return Err(HttpError::Closed);
    }
    while matches!(line.last(), Some(b'\n' | b'\r')) {
        line.pop();
    }
    Ok(line)
}

fn read_chunked<R: BufRead>(r: &mut R) -> Result<Vec<u8>, HttpError> {
    let mut body = Vec::new();
    loop {
        let line = read_line(r)?;
        let text = String::from_utf8_lossy(&line);
        let size_str = text.split(';').next().unwrap_or("").trim();
        let size = u64::from_str_radix(size_str, 16)
            .map_err(|_| HttpError::Malformed(format!("bad chunk size `{size_str}`")))?;
        if size == 0 {
            // trailers
            while !read_line(r)?.is_empty() {}
            return Ok(body);
        }
        if body.len() as u64 + size > MAX_BODY_BYTES {
            return Err(HttpError::Malformed("chunked body too large".into()));
        }
        let start = body.len();
        r.by_ref().take(size).read_to_end(&mut body)?;
        if (body.len() - start) as u64 != size {
            return Err(HttpError::Closed);
        }
        if !read_line(r)?.is_empty() {
            return Err(HttpError::Malformed("missing CRLF after chunk".into()));
        }
    }
}

pub fn read_request<R: BufRead>(r: &mut R) -> Result<Request, HttpError> {
    let head = read_head(r)?;
    let mut slots = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut parsed = httparse::Request::new(&mut slots);
    match parsed.parse(&head) {
        Ok(httparse::Status::Complete(_)) => {}
        Ok(httparse::Status::Partial) => return Err(HttpError::Malformed("incomplete head".into())),
        Err(e) => return Err(HttpError::Malformed(e.to_string())),
    }
    let method = parsed.method.unwrap_or_default().to_string();
    let target = parsed.path.unwrap_or_default().to_string();
    if !target.starts_with('/') {
        return Err(HttpError::Malformed(format!(
            "only origin-form targets are accepted, got `{target}`"
        )));
    }
    let headers = collect_headers(parsed.headers);
    let framing = framing(&headers, BodyFraming::None)?;
    if matches!(framing, BodyFraming::UntilEof) {
        return Err(HttpError::Malformed("unsupported transfer-encoding".into()));
    }
    let body = read_body(r, framing)?;
    Ok(Request {
        method,
        target,
        headers,
        body,
    })
}

/// Reads a response to a request made with `request_method`.
pub fn read_response<R: BufRead>(r: &mut R, request_method: &str) -> Result<Response, HttpError> {
    let head = read_head(r)?;
    let mut slots = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut parsed = httparse::Response::new(&mut slots);
    match parsed.parse(&head) {
        Ok(httparse::Status::Complete(_)) => {}
        Ok(httparse::Status::Partial) => return Err(HttpError::Malformed("incomplete head".into())),
        Err(e) => return Err(HttpError::Malformed(e.to_string())),
    }
    let status = parsed.code.unwrap_or_default();
    let reason = parsed.reason.unwrap_or_default().to_string();
    let headers = collect_headers(parsed.headers);
    let no_body = request_method == "HEAD" || (100..200).contains(&status) || status == 204 || status == 304;
    let framing = if no_body {
        BodyFraming::None
    } else {
        framing(&headers, BodyFraming::UntilEof)?
    };
    let body = read_body(r, framing)?;
    Ok(Response {
        status,
        reason,
        headers,
        body,
    })
}

/// Connects, sends one request and reads the response.
///
/// A `Host` header is added when the request has none.
pub fn send<A: ToSocketAddrs>(
    addr: A,
    host: &str,
    request: &Request,
    timeout: Duration,
) -> Result<Response, HttpError> {
    let mut last_err = None;
    let mut stream = None;
    for sa in addr.to_socket_addrs()? {
        match TcpStream::connect_timeout(&sa, timeout) {
            Ok(s) => {
                stream = Some(s);
                break;
            }
            Err(e) => last_err = Some(e),
        }
    }
    let stream = match stream {
        Some(s) => s,
        None => {
            return Err(HttpError::Io(last_err.unwrap_or_else(|| {
                io::Error::new(io::ErrorKind::NotFound, "address resolved to nothing")
            })))
        }
    };
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    stream.set_nodelay(true)?;
    let mut writer = io::BufWriter::new(&stream);
    if request.header("host").is_some() {
        request.write_to(&mut writer)?;
    } else {
        let mut with_host = request.clone();
        with_host.headers.insert(0, Header::new("Host", host));
        with_host.write_to(&mut writer)?;
    }
    drop(writer);
    let mut reader = BufReader::new(&stream);
    read_response(&mut reader, &request.method)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn parses_request_with_length() {
        let raw = b"POST /emails?x=1 HTTP/1.1\r\nHost: a\r\nContent-Length: 5\r\n\r\nhello";
        let req = read_request(&mut Cursor::new(&raw[..])).unwrap();
        assert_eq!(req.method, "POST");
        assert_eq!(req.target, "/emails?x=1");
        assert_eq!(req.path(), "/emails");
        assert_eq!(req.body, b"hello");
        assert_eq!(req.header_str("host"), Some("a"));
    }

    #[test]
    fn parses_chunked_request() {
        let raw = b"POST / HTTP/1.1\r\nTransfer-Encoding: chunked\r\n\r\n3;ext=1\r\nab\0\r\n2\r\n\r\n\r\n0\r\nX-T: 1\r\n\r\n";
        let req = read_request(&mut Cursor::new(&raw[..])).unwrap();
        assert_eq!(req.body, b"ab\0\r\n");
    }

    #[test]
    fn malformed_requests() {
        for raw in [
            &b"NOT A REQUEST\r\n\r\n"[..],
            b"GET http://abs/ HTTP/1.1\r\n\r\n",
            b"POST / HTTP/1.1\r\nContent-Length: x\r\n\r\n",
        ] {
            assert!(matches!(
                read_request(&mut Cursor::new(raw)),
                Err(HttpError::Malformed(_))
            ));
        }
        assert!(matches!(
            read_request(&mut Cursor::new(&b"POST / HTTP/1.1\r\nContent-Length: 10\r\n\r\nabc"[..])),
            Err(HttpError::Closed)
        ));
        assert!(matches!(read_request(&mut Cursor::new(&b""[..])), Err(HttpError::Closed)));
    }

    #[test]
    fn response_until_eof_and_no_body_statuses() {
        let raw = b"HTTP/1.1 200 OK\r\nX-A: b\r\n\r\nrest of stream";
        let resp = read_response(&mut Cursor::new(&raw[..]), "GET").unwrap();
        assert_eq!(resp.body, b"rest of stream");
        let raw = b"HTTP/1.1 204 No Content\r\n\r\n";
        let resp = read_response(&mut Cursor::new(&raw[..]), "GET").unwrap();
        assert!(resp.body.is_empty());
        let raw = b"HTTP/1.1 200 OK\r\nContent-Length: 4\r\n\r\n";
        let resp = read_response(&mut Cursor::new(&raw[..]), "HEAD").unwrap();
        assert!(resp.body.is_empty());
    }

    #[test]
    fn response_round_trip_reframes_body() {
        let resp = Response::new(200, vec![0u8, 1, 2, 255])
            .with_header("Content-Type", "application/octet-stream")
            .with_header("Transfer-Encoding", "chunked");
        let mut buf = Vec::new();
        resp.write_to(&mut buf).unwrap();
        let back = read_response(&mut Cursor::new(buf), "GET").unwrap();
        assert_eq!(back.status, 200);
        assert_eq!(back.body, resp.body);
        assert_eq!(back.header_str("content-length"), Some("4"));
        assert!(back.header("transfer-encoding").is_none());
    }

    #[test]
    fn hop_by_hop_stripping() {
        let headers = vec![
            Header::new("Connection", "keep-alive, X-Secret"),
            Header::new("Keep-Alive", "timeout=5"),
            Header::new("X-Secret", "1"),
            Header::new("Content-Type", "text/plain"),
            Header::new("Transfer-Encoding", "chunked"),
        ];
        let kept = strip_hop_by_hop(&headers);
        assert_eq!(kept, vec![Header::new("Content-Type", "text/plain")]);
    }
}
