//! JSON request/response transport shared by every external model role.
//!
//! A request is one JSON object carrying a string `"id"`; the response must
//! echo the same id. The same schema travels either as one line per message
//! over a child process's stdin/stdout, or as the body of an HTTP POST.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;
const DEFAULT_TIMEOUT_MS: u64 = 60_000;
const DEFAULT_RETRIES: u32 = 2;

/// Why a single round trip failed.
#[derive(Debug, Clone)]
pub struct TransportFailure {
    pub message: String,
    pub payload: Option<String>,
    /// Timeouts and connection problems are worth retrying; malformed
    /// responses are not.
    pub retryable: bool,
}

impl TransportFailure {
    fn transient(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            payload: None,
            retryable: true,
        }
    }

    fn malformed(message: impl Into<String>, payload: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            payload: Some(payload.into()),
            retryable: false,
        }
    }
}

pub trait Transport: Send + Sync {
    /// Sends `request` (which already carries its id) and waits for the
    /// response with the same id.
    fn round_trip(&self, request: &Value) -> std::result::Result<Value, TransportFailure>;
}

type Pending = Arc<Mutex<HashMap<String, Sender<std::result::Result<Value, TransportFailure>>>>>;

struct Connection {
    child: Mutex<Child>,
    stdin: Mutex<ChildStdin>,
    pending: Pending,
    alive: Arc<AtomicBool>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// A child process speaking JSON Lines. Requests may be in flight
/// concurrently; a reader thread routes responses back by id.
pub struct ProcessTransport {
    command: Vec<String>,
    timeout: Duration,
    conn: Mutex<Option<Arc<Connection>>>,
}

impl ProcessTransport {
    pub fn new(command: Vec<String>, timeout: Duration) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::Config("process transport needs a command".into()));
        }
        Ok(Self {
            command,
            timeout,
            conn: Mutex::new(None),
        })
    }

    fn connection(&self) -> std::result::Result<Arc<Connection>, TransportFailure> {
        let mut guard = self.conn.lock().unwrap();
        if let Some(c) = guard.as_ref() {
            if c.alive.load(Ordering::SeqCst) {
                return Ok(Arc::clone(c));
            }
        }
        let c = Arc::new(self.spawn()?);
        *guard = Some(Arc::clone(&c));
        Ok(c)
    }

    fn spawn(&self) -> std::result::Result<Connection, TransportFailure> {
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| TransportFailure::transient(format!("spawn {:?}: {e}", self.command[0])))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let pending: Pending = Arc::default();
        let alive = Arc::new(AtomicBool::new(true));

        let reader_pending = Arc::clone(&pending);
        let reader_alive = Arc::clone(&alive);
        thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                let Ok(line) = line else { break };
                if line.trim().is_empty() {
                    continue;
                }
                route_line(&line, &reader_pending);
            }
            reader_alive.store(false, Ordering::SeqCst);
            for (_, tx) in reader_pending.lock().unwrap().drain() {
                let _ = tx.send(Err(TransportFailure::transient("process closed its output")));
            }
        });

        Ok(Connection {
            child: Mutex::new(child),
            stdin: Mutex::new(stdin),
            pending,
            alive,
        })
    }
}

fn route_line(line: &str, pending: &Pending) {
    let mut waiting = pending.lock().unwrap();
    let parsed: std::result::Result<Value, _> = serde_json::from_str(line);
    let id = parsed
        .as_ref()
        .ok()
        .and_then(|v| v.get("id"))
        .and_then(Value::as_str)
        .map(str::to_owned);
    match (parsed, id) {
        (Ok(value), Some(id)) if waiting.contains_key(&id) => {
            let tx = waiting.remove(&id).unwrap();
            let _ = tx.send(Ok(value));
        }
        (Ok(_), Some(id)) => {
            // an id nobody asked for; with a single request outstanding it
            // can only be a mis-correlated answer to that request
            if waiting.len() == 1 {
                let (_, tx) = waiting.drain().next().unwrap();
                let _ = tx.send(Err(TransportFailure::malformed(
                    format!("response id {id:?} does not match the request"),
                    line,
                )));
            }
        }
        _ => {
            for (_, tx) in waiting.drain() {
                let _ = tx.send(Err(TransportFailure::malformed(
                    "response is not a JSON object with a string id",
                    line,
                )));
            }
        }
    }
}

impl Transport for ProcessTransport {
    fn round_trip(&self, request: &Value) -> std::result::Result<Value, TransportFailure> {
        let id = request
            .get("id")
            .and_then(Value::as_str)
            .expect("requests carry an id")
            .to_owned();
        let conn = self.connection()?;
        let (tx, rx) = mpsc::channel();
        conn.pending.lock().unwrap().insert(id.clone(), tx);

        let mut line = serde_json::to_string(request).expect("json values serialize");
        line.push('\n');
        let written = {
            let mut stdin = conn.stdin.lock().unwrap();
            stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush())
        };
        if let Err(e) = written {
            conn.pending.lock().unwrap().remove(&id);
            conn.alive.store(false, Ordering::SeqCst);
            return Err(TransportFailure::transient(format!("write to process: {e}")));
        }

        match rx.recv_timeout(self.timeout) {
            Ok(result) => result,
            Err(RecvTimeoutError::Timeout) => {
                conn.pending.lock().unwrap().remove(&id);
                Err(TransportFailure::transient(format!(
                    "no response within {} ms",
                    self.timeout.as_millis()
                )))
            }
            Err(RecvTimeoutError::Disconnected) => {
                Err(TransportFailure::transient("process reader stopped"))
            }
        }
    }
}

/// An HTTP endpoint accepting the request object as a JSON POST body.
pub struct HttpTransport {
    url: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.into(),
            agent,
        }
    }
}

impl Transport for HttpTransport {
    fn round_trip(&self, request: &Value) -> std::result::Result<Value, TransportFailure> {
        let mut response = self
            .agent
            .post(&self.url)
            .send_json(request)
            .map_err(|e| TransportFailure::transient(format!("POST {}: {e}", self.url)))?;
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportFailure::transient(format!("read body: {e}")))?;
        serde_json::from_str(&body)
            .map_err(|e| TransportFailure::malformed(format!("invalid JSON: {e}"), body))
    }
}

// Counting semaphore bounding requests in flight.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// One model role reached through a transport, with request ids, retries
/// and a bound on concurrent requests.
pub struct Endpoint {
    role: &'static str,
    transport: Box<dyn Transport>,
    retries: u32,
    gate: Gate,
    next_id: AtomicU64,
    in_flight: AtomicU64,
    peak_in_flight: AtomicU64,
}

impl Endpoint {
    pub fn new(
        role: &'static str,
        transport: Box<dyn Transport>,
        retries: u32,
        max_in_flight: usize,
    ) -> Self {
        Self {
            role,
            transport,
            retries,
            gate: Gate::new(max_in_flight),
            next_id: AtomicU64::new(0),
            in_flight: AtomicU64::new(0),
            peak_in_flight: AtomicU64::new(0),
        }
    }

    pub fn role(&self) -> &'static str {
        self.role
    }

    /// Highest number of simultaneous requests observed so far.
    pub fn peak_in_flight(&self) -> u64 {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    /// Sends `fields` plus a fresh id; returns the response object after
    /// checking that it echoes the id.
    pub fn request(&self, fields: Map<String, Value>) -> Result<Map<String, Value>> {
        let _permit = self.gate.acquire();
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        let result = self.request_with_retries(fields);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }

    fn request_with_retries(&self, fields: Map<String, Value>) -> Result<Map<String, Value>> {
        let mut last = None;
        for _ in 0..=self.retries {
            let id = format!("{}-{}", self.role, self.next_id.fetch_add(1, Ordering::SeqCst));
            let mut body = fields.clone();
            body.insert("id".into(), Value::String(id.clone()));
            match self.transport.round_trip(&Value::Object(body)) {
                Ok(Value::Object(response)) => {
                    if response.get("id").and_then(Value::as_str) != Some(id.as_str()) {
                        return Err(Error::adapter_payload(
                            self.role,
                            format!("response id does not match request id {id:?}"),
                            Value::Object(response).to_string(),
                        ));
                    }
                    return Ok(response);
                }
                Ok(other) => {
                    return Err(Error::adapter_payload(
                        self.role,
                        "response is not a JSON object",
                        other.to_string(),
                    ))
                }
                Err(f) if f.retryable => last = Some(f),
                Err(f) => {
                    return Err(Error::Adapter {
                        role: self.role,
                        message: f.message,
                        payload: f.payload,
                    })
                }
            }
        }
        let f = last.expect("at least one attempt");
        Err(Error::Adapter {
            role: self.role,
            message: format!("{} (after {} attempts)", f.message, self.retries + 1),
            payload: f.payload,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    /// Child process speaking JSON Lines.
    Process,
    Http,
    /// In-process fallback (inpainter and tagger only).
    Builtin,
    /// Scene simulator (captioner and detector only).
    Simulator,
}

/// How to reach one model role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub transport: TransportKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub command: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_ms() -> u64 {
    DEFAULT_TIMEOUT_MS
}

fn default_retries() -> u32 {
    DEFAULT_RETRIES
}

fn default_max_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}

impl EndpointConfig {
    pub fn of_kind(transport: TransportKind) -> Self {
        Self {
            transport,
            command: Vec::new(),
            url: None,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            retries: DEFAULT_RETRIES,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }

    pub fn process(command: Vec<String>) -> Self {
        Self {
            command,
            ..Self::of_kind(TransportKind::Process)
        }
    }

    pub fn http(url: impl Into<String>) -> Self {
        Self {
            url: Some(url.into()),
            ..Self::of_kind(TransportKind::Http)
        }
    }

    /// Opens an endpoint for a remote transport kind.
    pub fn connect(&self, role: &'static str) -> Result<Endpoint> {
        let timeout = Duration::from_millis(self.timeout_ms);
        let transport: Box<dyn Transport> = match self.transport {
            TransportKind::Process => Box::new(ProcessTransport::new(self.command.clone(), timeout)?),
            TransportKind::Http => {
                let url = self
                    .url
                    .clone()
                    .ok_or_else(|| Error::Config(format!("{role}: http transport needs a url")))?;
                Box::new(HttpTransport::new(url, timeout))
            }
            other => {
                return Err(Error::Config(format!(
                    "{role}: {other:?} is not a remote transport"
                )))
            }
        };
        Ok(Endpoint::new(role, transport, self.retries, self.max_in_flight))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sh(script: &str) -> Vec<String> {
        vec!["sh".into(), "-c".into(), script.into()]
    }

    fn obj(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn echo_process_round_trip() {
        let ep = EndpointConfig::process(vec!["cat".into()]).connect("sut").unwrap();
        let r = ep.request(obj(json!({"text": "hello"}))).unwrap();
        assert_eq!(r["text"], "hello");
        assert!(r["id"].as_str().unwrap().starts_with("sut-"));
    }

    #[test]
    fn mismatched_id_is_rejected_with_payload() {
        let mut cfg = EndpointConfig::process(sh(
            r#"sed -u 's/"id":"[^"]*"/"id":"bogus"/'"#,
        ));
        cfg.timeout_ms = 5_000;
        let ep = cfg.connect("sut").unwrap();
        match ep.request(obj(json!({"x": 1}))).unwrap_err() {
            Error::Adapter { payload, message, .. } => {
                assert!(message.contains("does not match"), "{message}");
                assert!(payload.unwrap().contains("bogus"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn garbage_response_is_malformed() {
        let mut cfg = EndpointConfig::process(sh("while read l; do echo 'not json'; done"));
        cfg.timeout_ms = 5_000;
        let ep = cfg.connect("od").unwrap();
        match ep.request(obj(json!({}))).unwrap_err() {
            Error::Adapter { payload, role, .. } => {
                assert_eq!(role, "od");
                assert_eq!(payload.as_deref(), Some("not json"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn silent_process_times_out_after_retries() {
        let mut cfg = EndpointConfig::process(sh("cat > /dev/null"));
        cfg.timeout_ms = 100;
        cfg.retries = 2;
        let ep = cfg.connect("sut").unwrap();
        let err = ep.request(obj(json!({}))).unwrap_err();
        assert!(err.to_string().contains("after 3 attempts"), "{err}");
    }

    #[test]
    fn unreachable_endpoints_fail_after_retries() {
        let mut cfg = EndpointConfig::process(vec!["/nonexistent/model-server".into()]);
        cfg.retries = 1;
        let err = cfg.connect("sut").unwrap().request(Map::new()).unwrap_err();
        assert!(err.is_adapter_failure());
        assert!(err.to_string().contains("after 2 attempts"), "{err}");

        let mut http = EndpointConfig::http("http://127.0.0.1:9/caption");
        http.timeout_ms = 500;
        http.retries = 1;
        let err = http.connect("sut").unwrap().request(Map::new()).unwrap_err();
        assert!(err.to_string().contains("after 2 attempts"), "{err}");
    }

    #[test]
    fn concurrent_requests_are_bounded_and_correlated() {
        // answers come back in reverse order of arrival, in pairs
        let script = r#"while read a; do read b; printf '%s\n%s\n' "$b" "$a"; done"#;
        let mut cfg = EndpointConfig::process(sh(script));
        cfg.max_in_flight = 2;
        cfg.timeout_ms = 10_000;
        let ep = cfg.connect("pos").unwrap();
        thread::scope(|s| {
            let handles: Vec<_> = (0..6)
                .map(|i| {
                    let ep = &ep;
                    s.spawn(move || ep.request(obj(json!({"n": i}))).unwrap())
                })
                .collect();
            for (i, h) in handles.into_iter().enumerate() {
                assert_eq!(h.join().unwrap()["n"], i);
            }
        });
        assert!(ep.peak_in_flight() <= 2);
    }

    #[test]
    fn config_requires_url_for_http() {
        let cfg = EndpointConfig::of_kind(TransportKind::Http);
        assert!(matches!(cfg.connect("od"), Err(Error::Config(_))));
        let cfg = EndpointConfig::of_kind(TransportKind::Builtin);
        assert!(cfg.connect("pos").is_err());
    }
}
