//! The HTTP/1.1 subset spoken at the edge: GET and POST, bodies framed by
//! Content-Length only, keep-alive by default.

use thiserror::Error;

const MAX_HEADERS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Get,
    Post,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: Method,
    pub path: String,
    pub body: Vec<u8>,
    pub keep_alive: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HttpError {
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("unsupported method {0}")]
    Method(String),
    #[error("chunked transfer encoding is not supported")]
    Chunked,
    #[error("body of {len} bytes exceeds the {max}-byte limit")]
    Oversize { len: usize, max: usize },
}

impl HttpError {
    pub fn status(&self) -> u16 {
        match self {
            HttpError::Method(_) => 405,
            _ => 400,
        }
    }
}

/// Parses one request from the front of `buf`. Returns `Ok(None)` until
/// the whole request, body included, is buffered.
pub fn parse_request(buf: &[u8], max_body: usize) -> Result<Option<(Request, usize)>, HttpError> {
    let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut req = httparse::Request::new(&mut headers);
    let head = match req.parse(buf) {
        Ok(httparse::Status::Complete(n)) => n,
        Ok(httparse::Status::Partial) => return Ok(None),
        Err(e) => return Err(HttpError::Malformed(e.to_string())),
    };
    let method = match req.method {
        Some("GET") => Method::Get,
        Some("POST") => Method::Post,
        Some(m) => return Err(HttpError::Method(m.to_string())),
        None => return Err(HttpError::Malformed("missing method".into())),
    };
    let path = req.path.unwrap_or("/").to_string();
    let mut len = 0usize;
    let mut keep_alive = req.version == Some(1);
    for h in req.headers.iter() {
        let value = std::str::from_utf8(h.value).map_err(|_| HttpError::Malformed("header encoding".into()))?;
        if h.name.eq_ignore_ascii_case("content-length") {
            len = value
                .trim()
                .parse()
                .map_err(|_| HttpError::Malformed("bad content-length".into()))?;
        } else if h.name.eq_ignore_ascii_case("transfer-encoding") && value.to_ascii_lowercase().contains("chunked") {
            return Err(HttpError::Chunked);
        } else if h.name.eq_ignore_ascii_case("connection") {
            let v = value.to_ascii_lowercase();
            if v.contains("close") {
                keep_alive = false;
            } else if v.contains("keep-alive") {
                keep_alive = true;
            }
        }
    }
    if len > max_body {
        return Err(HttpError::Oversize { len, max: max_body });
    }
    if buf.len() < head + len {
        return Ok(None);
    }
    Ok(Some((
        Request {
            method,
            path,
            body: buf[head..head + len].to_vec(),
            keep_alive,
        },
        head + len,
    )))
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        405 => "Method Not Allowed",
        503 => "Service Unavailable",
        _ => "Error",
    }
}

/// Serializes a response with a Content-Length body.
pub fn write_response(status: u16, body: &[u8], keep_alive: bool) -> Vec<u8> {
    let mut out = format!(
        "HTTP/1.1 {status} {}\r\nContent-Length: {}\r\nConnection: {}\r\n\r\n",
        reason(status),
        body.len(),
        if keep_alive { "keep-alive" } else { "close" }
    )
    .into_bytes();
    out.extend_from_slice(body);
    out
}

/// Serializes a request; used by the built-in load clients.
pub fn write_request(method: Method, path: &str, body: &[u8], keep_alive: bool) -> Vec<u8> {
    let m = match method {
        Method::Get => "GET",
        Method::Post => "POST",
    };
    let conn = if keep_alive { "" } else { "Connection: close\r\n" };
    let mut out = format!("{m} {path} HTTP/1.1\r\nHost: ingress\r\n{conn}Content-Length: {}\r\n\r\n", body.len()).into_bytes();
    out.extend_from_slice(body);
    out
}

/// Parses one response from the front of `buf`: (status, body, consumed).
pub fn parse_response(buf: &[u8]) -> Result<Option<(u16, Vec<u8>, usize)>, HttpError> {
    let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut resp = httparse::Response::new(&mut headers);
    let head = match resp.parse(buf) {
        Ok(httparse::Status::Complete(n)) => n,
        Ok(httparse::Status::Partial) => return Ok(None),
        Err(e) => return Err(HttpError::Malformed(e.to_string())),
    };
    let status = resp.code.unwrap_or(0);
    let mut len = 0usize;
    for h in resp.headers.iter() {
        if h.name.eq_ignore_ascii_case("content-length") {
            len = std::str::from_utf8(h.value)
                .ok()
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| HttpError::Malformed("bad content-length".into()))?;
        }
    }
    if buf.len() < head + len {
        return Ok(None);
    }
    Ok(Some((status, buf[head..head + len].to_vec(), head + len)))
}
