use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::protocol::{Op, Request, Response};
use super::{check_index, BackendDescriptor, BackendKind, MlmBackend, DEFAULT_MASK_TOKEN};
use crate::dist::{ProbDist, DEFAULT_FLOOR};
use crate::error::{Error, Result};
use crate::text::TokenSequence;

const SUM_TOLERANCE: f64 = 1e-6;
const EXIT_GRACE: Duration = Duration::from_secs(2);

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl Connection {
    fn round_trip(&mut self, request: &Request) -> Result<Response> {
        let mut line = serde_json::to_string(request)?;
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::backend(format!("write to model server failed: {e}")))?;
        let mut reply = String::new();
        loop {
            reply.clear();
            let n = self
                .reader
                .read_line(&mut reply)
                .map_err(|e| Error::backend(format!("read from model server failed: {e}")))?;
            if n == 0 {
                return Err(Error::backend("model server closed the connection"));
            }
            if !reply.trim().is_empty() {
                break;
            }
        }
        let resp: Response = serde_json::from_str(reply.trim_end())
            .map_err(|e| Error::backend(format!("protocol violation: unparseable response ({e})")))?;
        if resp.id != Some(request.id) {
            return Err(Error::backend(format!(
                "protocol violation: response id {:?} does not echo request id {}",
                resp.id, request.id
            )));
        }
        Ok(resp)
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            // Closing stdin lets a well-behaved server finish and exit on EOF.
            self.writer = Box::new(std::io::sink());
            let deadline = Instant::now() + EXIT_GRACE;
            while matches!(child.try_wait(), Ok(None)) && Instant::now() < deadline {
                std::thread::sleep(Duration::from_millis(10));
            }
            if matches!(child.try_wait(), Ok(None)) {
                let _ = child.kill();
            }
            let _ = child.wait();
        }
    }
}

/// Client for an external model server speaking the line protocol.
///
/// Requests are serialized over a single connection.
pub struct RemoteBackend {
    conn: Mutex<Connection>,
    next_id: AtomicU64,
    top_k: usize,
    floor: f64,
    mask_token: String,
    vocab_size: Option<usize>,
    embeddings: Option<bool>,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("top_k", &self.top_k)
            .field("mask_token", &self.mask_token)
            .finish_non_exhaustive()
    }
}

impl RemoteBackend {
    /// Launches `command` through `sh -c` and talks to it over stdin/stdout.
    pub fn spawn(command: &str, top_k: usize) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::backend(format!("cannot launch `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::handshake(
            Connection {
                reader: Box::new(BufReader::new(stdout)),
                writer: Box::new(stdin),
                child: Some(child),
            },
            top_k,
        )
    }

    pub fn connect(addr: &str, top_k: usize) -> Result<Self> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| Error::backend(format!("cannot connect to {addr}: {e}")))?;
        let reader = stream.try_clone()?;
        Self::handshake(
            Connection {
                reader: Box::new(BufReader::new(reader)),
                writer: Box::new(stream),
                child: None,
            },
            top_k,
        )
    }

    /// Wraps an arbitrary byte stream pair.
    pub fn from_streams<R, W>(reader: R, writer: W, top_k: usize) -> Result<Self>
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        Self::handshake(
            Connection {
                reader: Box::new(reader),
                writer: Box::new(writer),
                child: None,
            },
            top_k,
        )
    }

    fn handshake(conn: Connection, top_k: usize) -> Result<Self> {
        if top_k == 0 {
            return Err(Error::invalid("top_k must be positive"));
        }
        let mut backend = Self {
            conn: Mutex::new(conn),
            next_id: AtomicU64::new(1),
            top_k,
            floor: DEFAULT_FLOOR,
            mask_token: DEFAULT_MASK_TOKEN.to_owned(),
            vocab_size: None,
            embeddings: None,
        };
        // `info` is optional; servers that reject it keep the defaults.
        let info = backend.call(Op::Info)?;
        if info.ok {
            if let Some(m) = info.mask_token {
                backend.mask_token = m;
            }
            backend.vocab_size = info.vocab_size;
            backend.embeddings = info.capabilities.map(|c| c.iter().any(|x| x == "embed"));
        }
        Ok(backend)
    }

    pub fn with_mask_token(mut self, mask: impl Into<String>) -> Self {
        self.mask_token = mask.into();
        self
    }

    fn call(&self, op: Op) -> Result<Response> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let mut conn = self
            .conn
            .lock()
            .map_err(|_| Error::backend("connection poisoned by an earlier panic"))?;
        conn.round_trip(&Request { id, op })
    }

    fn call_ok(&self, op: Op) -> Result<Response> {
        let resp = self.call(op)?;
        if resp.ok {
            Ok(resp)
        } else {
            Err(remote_error(resp.error))
        }
    }
}

fn remote_error(message: Option<String>) -> Error {
    let message = message.unwrap_or_else(|| "unspecified server error".to_owned());
    if message.starts_with("unsupported") {
        Error::Unsupported("sentence embeddings")
    } else {
        Error::backend(format!("server error: {message}"))
    }
}

impl MlmBackend for RemoteBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: BackendKind::Remote,
            vocab_size: self.vocab_size,
            top_k: self.top_k,
            mask_token: self.mask_token.clone(),
        }
    }

    fn mlm_distribution(&self, sentence: &TokenSequence, index: usize) -> Result<ProbDist> {
        check_index(sentence, index)?;
        let resp = self.call_ok(Op::FillMask {
            tokens: sentence.tokens().to_vec(),
            mask_index: index,
            top_k: self.top_k,
        })?;
        let dist = resp
            .dist
            .ok_or_else(|| Error::backend("protocol violation: fill_mask response without dist"))?;
        dist_from_wire(dist, self.floor)?.without_token(&self.mask_token)
    }

    fn sentence_embedding(&self, sentence: &TokenSequence) -> Result<Vec<f64>> {
        if self.embeddings == Some(false) {
            return Err(Error::Unsupported("sentence embeddings"));
        }
        let resp = self.call_ok(Op::Embed {
            tokens: sentence.tokens().to_vec(),
        })?;
        let v = resp
            .vector
            .ok_or_else(|| Error::backend("protocol violation: embed response without vector"))?;
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::backend("protocol violation: empty or non-finite embedding"));
        }
        Ok(v)
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let resp = self.call_ok(Op::Tokenize { text: text.to_owned() })?;
        let tokens = resp
            .tokens
            .ok_or_else(|| Error::backend("protocol violation: tokenize response without tokens"))?;
        match resp.offsets {
            Some(offsets) => TokenSequence::with_offsets(tokens, offsets),
            None => TokenSequence::new(tokens),
        }
    }
}

pub(crate) fn dist_from_wire(dist: Vec<(String, f64)>, floor: f64) -> Result<ProbDist> {
    if dist.is_empty() {
        return Err(Error::backend("protocol violation: empty distribution"));
    }
    if dist.iter().any(|(_, p)| !p.is_finite() || *p <= 0.0) {
        return Err(Error::backend("protocol violation: non-positive probability"));
    }
    let total: f64 = dist.iter().map(|(_, p)| p).sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::backend(format!(
            "protocol violation: distribution sums to {total}"
        )));
    }
    ProbDist::from_weights(dist, floor)
}
