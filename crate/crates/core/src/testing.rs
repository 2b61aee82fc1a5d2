//! A minimal in-process chat-completion server for tests and smoke
//! checks. Responses can be scripted per request; the server records
//! request bodies, counts, and the maximum number of simultaneously open
//! requests.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

/// One scripted reply. `content` is wrapped in a well-formed
/// chat-completion JSON body; `raw_body` is sent verbatim instead when
/// set (for malformed-reply tests).
#[derive(Debug, Clone)]
pub struct ScriptedResponse {
    pub status: u16,
    pub content: Option<String>,
    pub raw_body: Option<String>,
}

impl ScriptedResponse {
    pub fn ok(content: &str) -> Self {
        ScriptedResponse {
            status: 200,
            content: Some(content.to_string()),
            raw_body: None,
        }
    }

    pub fn status(status: u16) -> Self {
        ScriptedResponse {
            status,
            content: None,
            raw_body: None,
        }
    }

    pub fn raw(status: u16, body: &str) -> Self {
        ScriptedResponse {
            status,
            content: None,
            raw_body: Some(body.to_string()),
        }
    }
}

struct ServerState {
    stop: AtomicBool,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    requests: AtomicUsize,
    delay_ms: AtomicU64,
    script: Mutex<VecDeque<ScriptedResponse>>,
    default_content: Mutex<String>,
    bodies: Mutex<Vec<String>>,
    auth_headers: Mutex<Vec<Option<String>>>,
}

pub struct MockChatServer {
    addr: SocketAddr,
    state: Arc<ServerState>,
    handle: Option<JoinHandle<()>>,
}

impl MockChatServer {
    pub fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
        let addr = listener.local_addr().expect("local addr");
        let state = Arc::new(ServerState {
            stop: AtomicBool::new(false),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            requests: AtomicUsize::new(0),
            delay_ms: AtomicU64::new(0),
            script: Mutex::new(VecDeque::new()),
            default_content: Mutex::new("Yes".to_string()),
            bodies: Mutex::new(Vec::new()),
            auth_headers: Mutex::new(Vec::new()),
        });
        let accept_state = Arc::clone(&state);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if accept_state.stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let conn_state = Arc::clone(&accept_state);
                std::thread::spawn(move || handle_connection(stream, &conn_state));
            }
        });
        MockChatServer {
            addr,
            state,
            handle: Some(handle),
        }
    }

    /// Base URL to use as a backend endpoint.
    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Queues a reply; requests beyond the queue get the default content.
    pub fn push(&self, response: ScriptedResponse) {
        self.state.script.lock().unwrap().push_back(response);
    }

    pub fn set_default_content(&self, content: &str) {
        *self.state.default_content.lock().unwrap() = content.to_string();
    }

    /// Per-request artificial latency; makes concurrency observable.
    pub fn set_delay_ms(&self, ms: u64) {
        self.state.delay_ms.store(ms, Ordering::SeqCst);
    }

    pub fn request_count(&self) -> usize {
        self.state.requests.load(Ordering::SeqCst)
    }

    /// Highest number of requests that were open at the same time.
    pub fn max_in_flight(&self) -> usize {
        self.state.max_in_flight.load(Ordering::SeqCst)
    }

    /// Request bodies in arrival order.
    pub fn bodies(&self) -> Vec<String> {
        self.state.bodies.lock().unwrap().clone()
    }

    /// `Authorization` header values per request, in arrival order.
    pub fn auth_headers(&self) -> Vec<Option<String>> {
        self.state.auth_headers.lock().unwrap().clone()
    }
}

impl Drop for MockChatServer {
    fn drop(&mut self) {
        self.state.stop.store(true, Ordering::SeqCst);
        // unblock the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection(mut stream: TcpStream, state: &ServerState) {
    let Some((headers, body)) = read_request(&mut stream) else {
        return;
    };
    let current = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.max_in_flight.fetch_max(current, Ordering::SeqCst);
    state.requests.fetch_add(1, Ordering::SeqCst);
    state.bodies.lock().unwrap().push(body);
    let auth = headers.lines().find_map(|l| {
        let (name, value) = l.split_once(':')?;
        name.eq_ignore_ascii_case("authorization")
            .then(|| value.trim().to_string())
    });
    state.auth_headers.lock().unwrap().push(auth);

    let delay = state.delay_ms.load(Ordering::SeqCst);
    if delay > 0 {
        std::thread::sleep(Duration::from_millis(delay));
    }

    let response = state
        .script
        .lock()
        .unwrap()
        .pop_front()
        .unwrap_or_else(|| ScriptedResponse::ok(&state.default_content.lock().unwrap()));
    let body = match (&response.raw_body, &response.content) {
        (Some(raw), _) => raw.clone(),
        (None, Some(content)) => {
            serde_json::json!({"choices": [{"message": {"content": content}}]}).to_string()
        }
        (None, None) => String::from("error"),
    };
    let reason = match response.status {
        200 => "OK",
        401 => "Unauthorized",
        403 => "Forbidden",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    };
    let _ = write!(
        stream,
        "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        response.status,
        reason,
        body.len(),
        body
    );
    let _ = stream.flush();
    state.in_flight.fetch_sub(1, Ordering::SeqCst);
}

/// Reads one HTTP request and returns its (headers, body).
fn read_request(stream: &mut TcpStream) -> Option<(String, String)> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        let n = stream.read(&mut chunk).ok()?;
        if n == 0 {
            return None;
        }
        buf.extend_from_slice(&chunk[..n]);
        if let Some(pos) = find_crlf2(&buf) {
            break pos;
        }
        if buf.len() > 1 << 20 {
            return None;
        }
    };
    let headers = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let content_length = headers
        .lines()
        .find_map(|l| {
            let (name, value) = l.split_once(':')?;
            name.eq_ignore_ascii_case("content-length")
                .then(|| value.trim().parse::<usize>().ok())?
        })
        .unwrap_or(0);
    let body_start = header_end + 4;
    while buf.len() < body_start + content_length {
        let n = stream.read(&mut chunk).ok()?;
        if n == 0 {
            break;
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    let body = String::from_utf8_lossy(&buf[body_start..(body_start + content_length).min(buf.len())])
        .to_string();
    Some((headers, body))
}

fn find_crlf2(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}
