use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::protocol::{handle_request, Op, Request, Response};
use super::remote::dist_from_wire;
use super::{check_index, BackendDescriptor, BackendKind, MlmBackend, DEFAULT_MASK_TOKEN};
use crate::dist::{ProbDist, DEFAULT_FLOOR};
use crate::error::{Error, Result};
use crate::text::TokenSequence;

/// One recorded request/response exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub request: Request,
    pub response: Response,
}

fn key(op: &Op) -> String {
    serde_json::to_string(op).expect("ops always serialize")
}

/// Replays recorded model-server answers. Any request absent from the
/// transcript is a backend error.
#[derive(Debug, Clone)]
pub struct TranscriptBackend {
    answers: HashMap<String, Response>,
    top_k: usize,
    mask_token: String,
    vocab_size: Option<usize>,
}

impl TranscriptBackend {
    pub fn from_entries(entries: impl IntoIterator<Item = TranscriptEntry>) -> Result<Self> {
        let mut answers = HashMap::new();
        let mut top_k = None;
        let mut mask_token = DEFAULT_MASK_TOKEN.to_owned();
        let mut vocab_size = None;
        for entry in entries {
            match &entry.request.op {
                Op::FillMask { top_k: k, .. } => {
                    if top_k.is_some_and(|t| t != *k) {
                        return Err(Error::invalid("transcript mixes different top_k values"));
                    }
                    top_k = Some(*k);
                }
                Op::Info if entry.response.ok => {
                    if let Some(m) = &entry.response.mask_token {
                        mask_token = m.clone();
                    }
                    vocab_size = entry.response.vocab_size;
                }
                _ => {}
            }
            answers.insert(key(&entry.request.op), entry.response);
        }
        Ok(Self {
            answers,
            top_k: top_k.unwrap_or(super::DEFAULT_TOP_K),
            mask_token,
            vocab_size,
        })
    }

    /// Reads a JSONL transcript, one [`TranscriptEntry`] per line.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Self::from_entries(entries)
    }

    fn lookup(&self, op: &Op) -> Result<&Response> {
        let resp = self
            .answers
            .get(&key(op))
            .ok_or_else(|| Error::backend(format!("request not in transcript: {}", key(op))))?;
        if resp.ok {
            Ok(resp)
        } else if resp.error.as_deref().is_some_and(|e| e.starts_with("unsupported")) {
            Err(Error::Unsupported("sentence embeddings"))
        } else {
            Err(Error::backend(format!(
                "server error: {}",
                resp.error.as_deref().unwrap_or("unspecified")
            )))
        }
    }
}

impl MlmBackend for TranscriptBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: BackendKind::Transcript,
            vocab_size: self.vocab_size,
            top_k: self.top_k,
            mask_token: self.mask_token.clone(),
        }
    }

    fn mlm_distribution(&self, sentence: &TokenSequence, index: usize) -> Result<ProbDist> {
        check_index(sentence, index)?;
        let resp = self.lookup(&Op::FillMask {
            tokens: sentence.tokens().to_vec(),
            mask_index: index,
            top_k: self.top_k,
        })?;
        let dist = resp
            .dist
            .clone()
            .ok_or_else(|| Error::backend("transcript fill_mask entry without dist"))?;
        dist_from_wire(dist, DEFAULT_FLOOR)
    }

    fn sentence_embedding(&self, sentence: &TokenSequence) -> Result<Vec<f64>> {
        self.lookup(&Op::Embed {
            tokens: sentence.tokens().to_vec(),
        })?
        .vector
        .clone()
        .ok_or_else(|| Error::backend("transcript embed entry without vector"))
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let resp = self.lookup(&Op::Tokenize { text: text.to_owned() })?;
        let tokens = resp
            .tokens
            .clone()
            .ok_or_else(|| Error::backend("transcript tokenize entry without tokens"))?;
        match resp.offsets.clone() {
            Some(o) => TokenSequence::with_offsets(tokens, o),
            None => TokenSequence::new(tokens),
        }
    }
}

/// Writes `entries` as JSONL, the format [`TranscriptBackend::load`] reads.
pub fn save_transcript(entries: &[TranscriptEntry], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Wraps a backend and records every exchange in wire form, so the recording
/// can later be replayed by [`TranscriptBackend`].
pub struct TranscriptRecorder<B> {
    inner: B,
    entries: Mutex<Vec<TranscriptEntry>>,
}

impl<B: MlmBackend> TranscriptRecorder<B> {
    pub fn new(inner: B) -> Self {
        let recorder = Self {
            inner,
            entries: Mutex::new(Vec::new()),
        };
        recorder.exchange(Op::Info);
        recorder
    }

    fn exchange(&self, op: Op) -> Response {
        let mut entries = self.entries.lock().expect("recorder lock");
        let request = Request {
            id: entries.len() as u64 + 1,
            op,
        };
        let response = handle_request(&self.inner, request.clone());
        entries.push(TranscriptEntry {
            request,
            response: response.clone(),
        });
        response
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.entries.lock().expect("recorder lock").clone()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_transcript(&self.entries(), path)
    }

    pub fn into_replay(self) -> Result<TranscriptBackend> {
        TranscriptBackend::from_entries(self.entries.into_inner().expect("recorder lock"))
    }
}

impl<B: MlmBackend> MlmBackend for TranscriptRecorder<B> {
    fn descriptor(&self) -> BackendDescriptor {
        self.inner.descriptor()
    }

    fn mlm_distribution(&self, sentence: &TokenSequence, index: usize) -> Result<ProbDist> {
        check_index(sentence, index)?;
        let resp = self.exchange(Op::FillMask {
            tokens: sentence.tokens().to_vec(),
            mask_index: index,
            top_k: self.inner.descriptor().top_k,
        });
        match (resp.ok, resp.dist) {
            (true, Some(d)) => dist_from_wire(d, DEFAULT_FLOOR),
            _ => Err(Error::backend(resp.error.unwrap_or_default())),
        }
    }

    fn sentence_embedding(&self, sentence: &TokenSequence) -> Result<Vec<f64>> {
        let resp = self.exchange(Op::Embed {
            tokens: sentence.tokens().to_vec(),
        });
        match (resp.ok, resp.vector) {
            (true, Some(v)) => Ok(v),
            _ => Err(Error::Unsupported("sentence embeddings")),
        }
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let resp = self.exchange(Op::Tokenize { text: text.to_owned() });
        match (resp.tokens, resp.offsets) {
            (Some(t), Some(o)) => TokenSequence::with_offsets(t, o),
            (Some(t), None) => TokenSequence::new(t),
            _ => Err(Error::backend(resp.error.unwrap_or_default())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ReferenceBackend;

    fn seq(s: &str) -> TokenSequence {
        TokenSequence::new(s.split_whitespace()).unwrap()
    }

    #[test]
    fn record_then_replay() {
        let reference = ReferenceBackend::from_text("a b c\nb c a", 0.5, 4).unwrap();
        let recorder = TranscriptRecorder::new(reference.clone());
        let w = seq("a b c");
        let live: Vec<_> = (0..3).map(|i| recorder.mlm_distribution(&w, i).unwrap()).collect();
        let emb = recorder.sentence_embedding(&w).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        recorder.save(&path).unwrap();
        let replay = TranscriptBackend::load(&path).unwrap();
        assert_eq!(replay.descriptor().vocab_size, Some(3));
        for (i, d) in live.iter().enumerate() {
            let r = replay.mlm_distribution(&w, i).unwrap();
            let direct = reference.mlm_distribution(&w, i).unwrap();
            for (t, p) in direct.iter() {
                assert!((r.prob(t) - p).abs() < 1e-12);
                assert!((d.prob(t) - p).abs() < 1e-12);
            }
        }
        assert_eq!(replay.sentence_embedding(&w).unwrap(), emb);
        assert!(matches!(
            replay.mlm_distribution(&seq("c c c"), 0),
            Err(Error::Backend(_))
        ));
    }
}
