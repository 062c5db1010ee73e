//! Semantics-preserving rewriting of sensitive text spans.
//!
//! Candidate rewrites of a span are scored by neighboring distribution
//! divergence (NDD): how far a masked language model's predictions at the
//! untouched positions move when the span is replaced. The candidate that
//! moves them least is kept.
//!
//! Modules:
//! - [`text`]: sentences, spans, edits and neighbor alignment
//! - [`backend`]: masked language model providers and the wire protocol
//! - [`metrics`]: perplexity, cosine similarity, divergences and NDD
//! - [`distortion`]: generative and substitutive span rewriting
//! - [`io`]: documents, phrase banks and output records
//! - [`pipeline`]: batch runs, manifests and replay
//! - [`eval`]: perturbation tests, correlation and overlap bucketing

pub mod backend;
pub mod cli;
pub mod dist;
pub mod distortion;
pub mod error;
pub mod eval;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod text;

pub use backend::{BackendDescriptor, MlmBackend, ReferenceBackend, RemoteBackend};
pub use dist::ProbDist;
pub use distortion::{
    distort_document, distort_span, CandidateResult, DistortionConfig, Mode, Phrase, PhraseBank,
};
pub use error::{Error, Result};
pub use metrics::{ndd, Divergence, NddConfig, NddReport, Weighting};
pub use text::{align_neighbors, apply_edit, NeighborAlignment, Span, SpanEdit, TokenSequence};
