//! Corpus-level distortion runs and their manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{BackendDescriptor, MlmBackend, ReferenceBackend, RemoteBackend, TranscriptBackend};
use crate::distortion::{distort_document_with_rng, seeded_rng, CandidateResult, DistortionConfig, Mode, PhraseBank};
use crate::error::{Error, Result};
use crate::io::{load_documents, load_phrase_bank, splice_text, AnnotatedDocument, InputFormat, OutputRecord};
use crate::text::Span;

pub const MANIFEST_VERSION: u32 = 1;

/// Where the model comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// In-process count model over a corpus file, one sentence per line.
    Reference { corpus: PathBuf, alpha: f64, top_k: usize },
    /// Child process speaking the line protocol on stdin/stdout.
    Command { command: String, top_k: usize },
    Tcp { address: String, top_k: usize },
    Transcript { path: PathBuf },
}

impl BackendSpec {
    pub fn connect(&self) -> Result<Arc<dyn MlmBackend>> {
        Ok(match self {
            BackendSpec::Reference { corpus, alpha, top_k } => {
                let text = std::fs::read_to_string(corpus)?;
                Arc::new(ReferenceBackend::from_text(&text, *alpha, *top_k)?)
            }
            BackendSpec::Command { command, top_k } => Arc::new(RemoteBackend::spawn(command, *top_k)?),
            BackendSpec::Tcp { address, top_k } => Arc::new(RemoteBackend::connect(address, *top_k)?),
            BackendSpec::Transcript { path } => Arc::new(TranscriptBackend::load(path)?),
        })
    }

    /// In-process backends are shared between workers; remote ones get a
    /// connection each.
    fn shareable(&self) -> bool {
        matches!(self, BackendSpec::Reference { .. } | BackendSpec::Transcript { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: PathBuf,
    pub format: InputFormat,
    pub output: PathBuf,
    pub bank: Option<PathBuf>,
    pub backend: BackendSpec,
    pub workers: usize,
    pub distortion: DistortionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanAudit {
    pub label: Option<String>,
    pub original: Vec<String>,
    /// Token span of the replacement in the distorted document.
    pub span: Span,
    pub chosen: usize,
    pub candidates: Vec<CandidateResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentAudit {
    pub id: String,
    pub spans: Vec<SpanAudit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    #[serde(default)]
    pub argv: Vec<String>,
    pub config: RunConfig,
    pub backend: BackendDescriptor,
    pub seed: u64,
    pub documents: Vec<DocumentAudit>,
    /// SHA-256 of each input file (documents, bank, corpus or transcript).
    #[serde(default)]
    pub input_sha256: BTreeMap<String, String>,
    pub output_sha256: String,
    pub elapsed_ms: u64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }
}

pub fn default_manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

/// Distorts one document. Documents without spans pass through without
/// touching the backend.
pub fn process_document(
    doc: &AnnotatedDocument,
    index: usize,
    backend: &dyn MlmBackend,
    bank: Option<&PhraseBank>,
    cfg: &DistortionConfig,
) -> Result<(OutputRecord, DocumentAudit)> {
    if doc.spans.is_empty() {
        return Ok((
            OutputRecord {
                id: doc.id.clone(),
                text: doc.text.clone(),
                spans: Vec::new(),
                audit: Vec::new(),
            },
            DocumentAudit {
                id: doc.id.clone(),
                spans: Vec::new(),
            },
        ));
    }
    let doc_err = |message: String| Error::Document {
        id: doc.id.clone(),
        message,
    };
    let tokens = backend.tokenize(&doc.text)?;
    let offsets = tokens
        .offsets()
        .ok_or_else(|| doc_err("tokenizer returned no character offsets".into()))?
        .to_vec();
    let mut token_spans = Vec::with_capacity(doc.spans.len());
    for s in &doc.spans {
        let span = tokens
            .token_span_for_chars(s.start(), s.end())
            .map_err(|e| doc_err(e.to_string()))?;
        if token_spans.last().is_some_and(|(prev, _): &(Span, _)| prev.end > span.start) {
            return Err(doc_err(format!(
                "span [{}, {}) shares a token with the previous span",
                s.start(),
                s.end()
            )));
        }
        token_spans.push((span, Some(s.label().to_owned())));
    }
    let mut rng = seeded_rng(cfg.seed, index as u64);
    let outcome = distort_document_with_rng(&tokens, &token_spans, bank, backend, cfg, &mut rng)
        .map_err(|e| match e {
            Error::InvalidArgument(m) => doc_err(m),
            other => other,
        })?;
    let spans_only: Vec<Span> = token_spans.iter().map(|(s, _)| *s).collect();
    let record = splice_text(doc, &offsets, &spans_only, &outcome)?;
    let audit = DocumentAudit {
        id: doc.id.clone(),
        spans: outcome
            .spans
            .into_iter()
            .map(|s| SpanAudit {
                label: s.label,
                original: s.original,
                span: s.span,
                chosen: s.chosen,
                candidates: s.candidates,
            })
            .collect(),
    };
    Ok((record, audit))
}

type DocResult = Result<(OutputRecord, DocumentAudit)>;

/// Distorts every document with a pool of workers. Results come back in
/// input order and do not depend on the worker count.
pub fn distort_all(
    docs: &[AnnotatedDocument],
    spec: &BackendSpec,
    primary: Arc<dyn MlmBackend>,
    bank: Option<&PhraseBank>,
    cfg: &DistortionConfig,
    workers: usize,
) -> Result<Vec<(OutputRecord, DocumentAudit)>> {
    let workers = workers.clamp(1, docs.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<DocResult>>> = Mutex::new((0..docs.len()).map(|_| None).collect());
    let first_error: Mutex<Option<Error>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for w in 0..workers {
            let primary = primary.clone();
            let (next, slots, first_error) = (&next, &slots, &first_error);
            scope.spawn(move || {
                let backend = if w == 0 || spec.shareable() {
                    primary
                } else {
                    match spec.connect() {
                        Ok(b) => b,
                        Err(e) => {
                            first_error.lock().expect("lock").get_or_insert(e);
                            return;
                        }
                    }
                };
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= docs.len() || first_error.lock().expect("lock").is_some() {
                        break;
                    }
                    let result = process_document(&docs[i], i, backend.as_ref(), bank, cfg);
                    slots.lock().expect("lock")[i] = Some(result);
                }
            });
        }
    });

    if let Some(e) = first_error.into_inner().expect("lock") {
        return Err(e);
    }
    let mut out = Vec::with_capacity(docs.len());
    for slot in slots.into_inner().expect("lock") {
        match slot {
            Some(r) => out.push(r?),
            None => return Err(Error::backend("worker stopped before finishing its documents")),
        }
    }
    Ok(out)
}

pub fn render_output(records: &[OutputRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn input_digests(config: &RunConfig) -> Result<BTreeMap<String, String>> {
    let mut paths = vec![&config.input];
    paths.extend(&config.bank);
    match &config.backend {
        BackendSpec::Reference { corpus, .. } => paths.push(corpus),
        BackendSpec::Transcript { path } => paths.push(path),
        BackendSpec::Command { .. } | BackendSpec::Tcp { .. } => {}
    }
    paths
        .into_iter()
        .map(|p| Ok((p.display().to_string(), sha256_hex(&std::fs::read(p)?))))
        .collect()
}

/// Executes a run and returns the rendered output with its manifest, without
/// writing anything.
pub fn execute(config: &RunConfig, argv: Vec<String>) -> Result<(String, RunManifest)> {
    config.distortion.validate()?;
    let started = Instant::now();
    let docs = load_documents(&config.input, config.format)?;
    let primary = config.backend.connect()?;
    let bank = match (&config.bank, config.distortion.mode) {
        (Some(path), _) => Some(load_phrase_bank(path, primary.as_ref())?),
        (None, Mode::Substitutive) => return Err(Error::EmptyBank { label: None }),
        (None, Mode::Generative) => None,
    };
    let descriptor = primary.descriptor();
    let results = distort_all(
        &docs,
        &config.backend,
        primary,
        bank.as_ref(),
        &config.distortion,
        config.workers,
    )?;
    let (records, audits): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let rendered = render_output(&records)?;
    let manifest = RunManifest {
        version: MANIFEST_VERSION,
        argv,
        config: config.clone(),
        backend: descriptor,
        seed: config.distortion.seed,
        documents: audits,
        input_sha256: input_digests(config)?,
        output_sha256: sha256_hex(rendered.as_bytes()),
        elapsed_ms: started.elapsed().as_millis() as u64,
    };
    Ok((rendered, manifest))
}

/// Runs and writes the output file and manifest.
pub fn run(config: &RunConfig, manifest_path: &Path, argv: Vec<String>) -> Result<RunManifest> {
    let (rendered, manifest) = execute(config, argv)?;
    std::fs::write(&config.output, rendered)?;
    manifest.save(manifest_path)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayOutcome {
    pub expected_sha256: String,
    pub actual_sha256: String,
    /// Input files whose digest differs from the recorded one.
    pub changed_inputs: Vec<String>,
}

impl ReplayOutcome {
    pub fn matches(&self) -> bool {
        self.expected_sha256 == self.actual_sha256
    }
}

/// Re-executes the run recorded in `manifest`, optionally writing the fresh
/// output to `output`, and compares output digests.
pub fn replay(manifest: &RunManifest, output: Option<&Path>) -> Result<ReplayOutcome> {
    let (rendered, _) = execute(&manifest.config, manifest.argv.clone())?;
    if let Some(path) = output {
        std::fs::write(path, &rendered)?;
    }
    let now = input_digests(&manifest.config)?;
    let changed_inputs = manifest
        .input_sha256
        .iter()
        .filter(|(path, digest)| now.get(*path) != Some(digest))
        .map(|(path, _)| path.clone())
        .collect();
    Ok(ReplayOutcome {
        changed_inputs,
        expected_sha256: manifest.output_sha256.clone(),
        actual_sha256: sha256_hex(rendered.as_bytes()),
    })
}
