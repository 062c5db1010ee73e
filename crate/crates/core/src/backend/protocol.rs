//! Newline-delimited JSON wire protocol between the engine and model servers.
//!
//! Each request and response is one JSON object on one line. Responses echo
//! the request id. Unknown fields are ignored in both directions.
//!
//! ```text
//! {"id":1,"op":"fill_mask","tokens":["a","b"],"mask_index":1,"top_k":4}
//! {"id":1,"ok":true,"dist":[["b",0.6],["c",0.4]]}
//! ```

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::MlmBackend;
use crate::error::{Error, Result};
use crate::text::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    FillMask {
        tokens: Vec<String>,
        mask_index: usize,
        top_k: usize,
    },
    Embed {
        tokens: Vec<String>,
    },
    Tokenize {
        text: String,
    },
    /// Optional capability query; servers may answer `ok:false`.
    Info,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    #[serde(flatten)]
    pub op: Op,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: Option<u64>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist: Option<Vec<(String, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offsets: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capabilities: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    pub fn failure(id: Option<u64>, error: impl Into<String>) -> Self {
        Self {
            id,
            ok: false,
            error: Some(error.into()),
            ..Default::default()
        }
    }

    fn success(id: u64) -> Self {
        Self {
            id: Some(id),
            ok: true,
            ..Default::default()
        }
    }
}

/// Answers one request line. Never fails: malformed input produces an
/// `ok:false` response carrying whatever id could be recovered.
pub fn handle_line<B: MlmBackend + ?Sized>(backend: &B, line: &str) -> Response {
    exchange_line(backend, line).1
}

fn exchange_line<B: MlmBackend + ?Sized>(backend: &B, line: &str) -> (Option<Request>, Response) {
    let request: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(serde_json::Value::as_u64));
            return (None, Response::failure(id, format!("malformed request: {e}")));
        }
    };
    (Some(request.clone()), handle_request(backend, request))
}

pub fn handle_request<B: MlmBackend + ?Sized>(backend: &B, request: Request) -> Response {
    let id = request.id;
    match answer(backend, request) {
        Ok(r) => r,
        Err(e) => Response::failure(Some(id), error_code(&e)),
    }
}

fn error_code(e: &Error) -> String {
    match e {
        Error::Unsupported(what) => format!("unsupported: {what}"),
        other => other.to_string(),
    }
}

fn answer<B: MlmBackend + ?Sized>(backend: &B, request: Request) -> Result<Response> {
    let mut resp = Response::success(request.id);
    match request.op {
        Op::FillMask {
            tokens,
            mask_index,
            top_k,
        } => {
            let seq = TokenSequence::new(tokens)?;
            let mask = backend.mask_token();
            let masked = seq.with_token(mask_index, mask.clone())?;
            let dist = backend.mlm_distribution(&masked, mask_index)?.without_token(&mask)?.truncated(top_k)?;
            resp.dist = Some(dist.ranked().into_iter().map(|(t, p)| (t.to_owned(), p)).collect());
        }
        Op::Embed { tokens } => {
            let seq = TokenSequence::new(tokens)?;
            resp.vector = Some(backend.sentence_embedding(&seq)?);
        }
        Op::Tokenize { text } => {
            let seq = backend.tokenize(&text)?;
            resp.offsets = seq.offsets().map(<[_]>::to_vec);
            resp.tokens = Some(seq.tokens().to_vec());
        }
        Op::Info => {
            let d = backend.descriptor();
            resp.mask_token = Some(d.mask_token);
            resp.vocab_size = d.vocab_size;
            let mut caps = vec!["fill_mask".to_owned(), "tokenize".to_owned()];
            if let Ok(seq) = TokenSequence::new(["probe"]) {
                if !matches!(backend.sentence_embedding(&seq), Err(Error::Unsupported(_))) {
                    caps.insert(1, "embed".to_owned());
                }
            }
            resp.capabilities = Some(caps);
        }
    }
    Ok(resp)
}

/// Serves `backend` over a line stream until EOF. One response line per
/// non-blank request line, in request order.
pub fn serve<B, R, W>(backend: &B, reader: R, writer: W) -> Result<()>
where
    B: MlmBackend + ?Sized,
    R: BufRead,
    W: Write,
{
    serve_observed(backend, reader, writer, |_, _| {})
}

/// Like [`serve`], calling `observe` with every well-formed request and the
/// response sent for it.
pub fn serve_observed<B, R, W, F>(backend: &B, reader: R, mut writer: W, mut observe: F) -> Result<()>
where
    B: MlmBackend + ?Sized,
    R: BufRead,
    W: Write,
    F: FnMut(&Request, &Response),
{
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (request, resp) = exchange_line(backend, &line);
        serde_json::to_writer(&mut writer, &resp)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        if let Some(request) = request {
            observe(&request, &resp);
        }
    }
    Ok(())
}
