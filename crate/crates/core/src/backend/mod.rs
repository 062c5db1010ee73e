//! Providers of masked-position predictive distributions and sentence
//! embeddings.
//!
//! [`ReferenceBackend`] is a deterministic count model built from a corpus;
//! [`RemoteBackend`] talks the newline-delimited JSON protocol in
//! [`protocol`] to an external model server; [`TranscriptBackend`] replays a
//! recorded conversation with such a server.

pub mod protocol;
mod reference;
mod remote;
mod transcript;

use serde::{Deserialize, Serialize};

use crate::dist::ProbDist;
use crate::error::{Error, Result};
use crate::text::TokenSequence;

pub use reference::ReferenceBackend;
pub use remote::RemoteBackend;
pub use transcript::{save_transcript, TranscriptBackend, TranscriptEntry, TranscriptRecorder};

pub const DEFAULT_TOP_K: usize = 128;
pub const DEFAULT_MASK_TOKEN: &str = "[MASK]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Reference,
    Remote,
    Transcript,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    /// Vocabulary size, when the backend reports it.
    pub vocab_size: Option<usize>,
    /// Truncation width of returned distributions.
    pub top_k: usize,
    pub mask_token: String,
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be positive"));
        }
        if let Some(c) = self.vocab_size {
            if c == 0 {
                return Err(Error::invalid("vocabulary size must be positive"));
            }
        }
        Ok(())
    }
}

/// A masked language model.
///
/// Implementations must be deterministic for a fixed input and safe to query
/// from several threads.
pub trait MlmBackend: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    /// Predictive distribution for position `index` with that token masked,
    /// truncated to the descriptor's `top_k` and renormalized.
    fn mlm_distribution(&self, sentence: &TokenSequence, index: usize) -> Result<ProbDist>;

    fn sentence_embedding(&self, _sentence: &TokenSequence) -> Result<Vec<f64>> {
        Err(Error::Unsupported("sentence embeddings"))
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        TokenSequence::from_whitespace(text)
    }

    fn mask_token(&self) -> String {
        self.descriptor().mask_token
    }
}

macro_rules! forward_backend {
    ($($ty:ty),*) => {$(
        impl<B: MlmBackend + ?Sized> MlmBackend for $ty {
            fn descriptor(&self) -> BackendDescriptor {
                (**self).descriptor()
            }
            fn mlm_distribution(&self, sentence: &TokenSequence, index: usize) -> Result<ProbDist> {
                (**self).mlm_distribution(sentence, index)
            }
            fn sentence_embedding(&self, sentence: &TokenSequence) -> Result<Vec<f64>> {
                (**self).sentence_embedding(sentence)
            }
            fn tokenize(&self, text: &str) -> Result<TokenSequence> {
                (**self).tokenize(text)
            }
            fn mask_token(&self) -> String {
                (**self).mask_token()
            }
        }
    )*};
}

forward_backend!(&B, Box<B>, std::sync::Arc<B>);

pub(crate) fn check_index(sentence: &TokenSequence, index: usize) -> Result<()> {
    if index >= sentence.len() {
        return Err(Error::invalid(format!(
            "position {index} out of range for sentence of length {}",
            sentence.len()
        )));
    }
    Ok(())
}
