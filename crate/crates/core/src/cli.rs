//! Command-line front end. `run_cli` returns the process exit code.

use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::backend::{protocol, save_transcript, MlmBackend, TranscriptEntry, DEFAULT_TOP_K};
use crate::distortion::{seeded_rng, DistortionConfig, Fallback, Mode, DEFAULT_CANDIDATES};
use crate::error::{Error, Result};
use crate::eval::{
    initial_test, load_sts, make_perturbation_pairs, run_benchmark, score_pairs, Lexicon, Metric,
    PerturbationKind, INITIAL_TEST_MIN_OVERLAP,
};
use crate::io::InputFormat;
use crate::metrics::{
    cosine_similarity, delta_ppl, ensemble_score, ndd, ndd_between, Divergence, NddConfig, Weighting,
    DEFAULT_ENSEMBLE_RATIO,
};
use crate::pipeline::{self, default_manifest_path, BackendSpec, RunConfig, RunManifest};
use crate::text::{Span, SpanEdit};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_DATA: i32 = 5;
pub const EXIT_REPLAY_MISMATCH: i32 = 6;

#[derive(Debug, Parser)]
#[command(name = "ndd", version, about = "Rewrite annotated text spans while keeping their context predictable")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Distort the annotated spans of every document in a corpus.
    Distort(DistortArgs),
    /// Re-run a recorded distortion and compare output digests.
    Replay(ReplayArgs),
    /// Score one edit or one sentence pair.
    Score(ScoreArgs),
    /// Correlate metrics with gold labels on sentence pairs.
    Bench(BenchArgs),
    /// Answer the line protocol with an in-process backend.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct BackendChoice {
    /// Shell command of a model server speaking the line protocol.
    #[arg(long)]
    backend_cmd: Option<String>,
    /// host:port of a model server.
    #[arg(long)]
    backend_tcp: Option<String>,
    /// Corpus file (one sentence per line) for the in-process count model.
    #[arg(long)]
    backend_reference: Option<PathBuf>,
    /// Recorded request/response transcript to replay.
    #[arg(long)]
    backend_transcript: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BackendArgs {
    #[command(flatten)]
    choice: BackendChoice,
    /// Add-alpha smoothing of the count model.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
}

impl BackendArgs {
    fn spec(&self) -> BackendSpec {
        let top_k = self.top_k;
        let c = &self.choice;
        if let Some(command) = &c.backend_cmd {
            BackendSpec::Command { command: command.clone(), top_k }
        } else if let Some(address) = &c.backend_tcp {
            BackendSpec::Tcp { address: address.clone(), top_k }
        } else if let Some(corpus) = &c.backend_reference {
            BackendSpec::Reference { corpus: corpus.clone(), alpha: self.alpha, top_k }
        } else {
            let path = c.backend_transcript.clone().expect("clap enforces one backend");
            BackendSpec::Transcript { path }
        }
    }
}

#[derive(Debug, Args)]
struct NddArgs {
    #[arg(long, value_enum, default_value_t = Divergence::Hellinger)]
    divergence: Divergence,
    /// `exponential` uses --mu; `mean` weighs all neighbors equally.
    #[arg(long, value_parser = ["mean", "exponential"], default_value = "mean")]
    weighting: String,
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    #[arg(long, default_value_t = DEFAULT_ENSEMBLE_RATIO)]
    ensemble_ratio: f64,
    /// Probability floor for tokens missing from a distribution.
    #[arg(long, default_value_t = crate::dist::DEFAULT_FLOOR)]
    epsilon: f64,
}

impl NddArgs {
    fn config(&self) -> Result<NddConfig> {
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(Error::invalid(format!("--mu must lie in (0, 1], got {}", self.mu)));
        }
        let weighting = match self.weighting.as_str() {
            "exponential" => Weighting::Exponential { mu: self.mu },
            _ => Weighting::Mean,
        };
        let cfg = NddConfig {
            divergence: self.divergence,
            weighting,
            ensemble_ratio: self.ensemble_ratio,
            epsilon: self.epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct DistortArgs {
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = InputFormat::Jsonl)]
    format: InputFormat,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    ndd: NddArgs,
    #[arg(long, value_enum, default_value_t = Mode::Generative)]
    mode: Mode,
    /// Candidates per span.
    #[arg(long, default_value_t = DEFAULT_CANDIDATES)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Phrase bank: one phrase per line, optionally `<TAB>label`.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Draw bank phrases of any label.
    #[arg(long)]
    no_label_filter: bool,
    #[arg(long)]
    include_original: bool,
    #[arg(long, value_enum, default_value_t = Fallback::None)]
    fallback: Fallback,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Defaults to `<output>.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    manifest: PathBuf,
    /// Also write the regenerated output here.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    sentence: String,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    ndd: NddArgs,
    /// Token range START:END (end exclusive) to replace.
    #[arg(long, requires = "replacement", conflicts_with = "against")]
    span: Option<String>,
    #[arg(long)]
    replacement: Option<String>,
    /// Compare against a second sentence instead of applying an edit.
    #[arg(long)]
    against: Option<String>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    ndd: NddArgs,
    /// `score<TAB>sentence1<TAB>sentence2` pairs.
    #[arg(long, conflicts_with_all = ["sentences", "lexicon", "test"])]
    sts: Option<PathBuf>,
    /// Sentences to perturb, one per line.
    #[arg(long, requires_all = ["lexicon", "test"])]
    sentences: Option<PathBuf>,
    /// JSONL lexicon for the perturbation tests.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long, value_enum)]
    test: Option<PerturbationKind>,
    /// Share of eligible words to replace; defaults depend on the test.
    #[arg(long)]
    ratio: Option<f64>,
    /// Keep only pairs with overlap ratio of at least 0.8.
    #[arg(long)]
    initial: bool,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = Metric::ALL)]
    metrics: Vec<Metric>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the scored pairs as JSONL.
    #[arg(long)]
    pairs_out: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct ServeChoice {
    #[arg(long)]
    backend_reference: Option<PathBuf>,
    #[arg(long)]
    backend_transcript: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[command(flatten)]
    choice: ServeChoice,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    /// Listen on 127.0.0.1:PORT instead of stdin/stdout; 0 picks a free port.
    #[arg(long)]
    port: Option<u16>,
    /// Save every exchange as a transcript when stdin closes.
    #[arg(long, conflicts_with = "port")]
    record: Option<PathBuf>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::InvalidSpan { .. } => EXIT_USAGE,
        Error::Backend(_) | Error::Unsupported(_) => EXIT_BACKEND,
        Error::Io(_) => EXIT_IO,
        Error::Parse { .. }
        | Error::Json(_)
        | Error::Document { .. }
        | Error::NoNeighbors
        | Error::EmptyBank { .. }
        | Error::UndefinedCorrelation(_) => EXIT_DATA,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code. Errors go to stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let recorded: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match cli.command {
        Command::Distort(a) => distort(a, recorded),
        Command::Replay(a) => replay(a),
        Command::Score(a) => score(a),
        Command::Bench(a) => bench(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn distort(a: DistortArgs, argv: Vec<String>) -> Result<i32> {
    if a.mode == Mode::Substitutive && a.bank.is_none() {
        eprintln!("error: --mode substitutive requires --bank");
        return Ok(EXIT_USAGE);
    }
    let config = RunConfig {
        input: a.input,
        format: a.format,
        output: a.output,
        bank: a.bank,
        backend: a.backend.spec(),
        workers: a.workers,
        distortion: DistortionConfig {
            mode: a.mode,
            k: a.k,
            temperature: a.temperature,
            label_filter: !a.no_label_filter,
            seed: a.seed,
            include_original: a.include_original,
            fallback: a.fallback,
            ndd: a.ndd.config()?,
        },
    };
    let manifest_path = a.manifest.unwrap_or_else(|| default_manifest_path(&config.output));
    let manifest = pipeline::run(&config, &manifest_path, argv)?;
    eprintln!(
        "distorted {} documents in {} ms; manifest {}",
        manifest.documents.len(),
        manifest.elapsed_ms,
        manifest_path.display()
    );
    Ok(EXIT_OK)
}

fn replay(a: ReplayArgs) -> Result<i32> {
    let manifest = RunManifest::load(&a.manifest)?;
    let outcome = pipeline::replay(&manifest, a.output.as_deref())?;
    for path in &outcome.changed_inputs {
        eprintln!("warning: {path} changed since the recorded run");
    }
    if outcome.matches() {
        println!("replay ok {}", outcome.actual_sha256);
        Ok(EXIT_OK)
    } else {
        println!(
            "replay mismatch: expected {} got {}",
            outcome.expected_sha256, outcome.actual_sha256
        );
        Ok(EXIT_REPLAY_MISMATCH)
    }
}

fn parse_span(s: &str) -> Result<Span> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| Error::invalid(format!("span must look like START:END, got `{s}`")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|e| Error::invalid(format!("bad span bound `{v}`: {e}")))
    };
    Span::new(parse(a)?, parse(b)?)
}

fn score(a: ScoreArgs) -> Result<i32> {
    let cfg = a.ndd.config()?;
    let backend = a.backend.spec().connect()?;
    let original = backend.tokenize(&a.sentence)?;
    let edited = match (&a.span, &a.replacement, &a.against) {
        (Some(span), Some(replacement), None) => {
            let edit = SpanEdit::new(parse_span(span)?, backend.tokenize(replacement)?.tokens().to_vec())?;
            let report = ndd(&original, &edit, backend.as_ref(), &cfg)?;
            let edited = crate::text::apply_edit(&original, &edit)?;
            (edited, report)
        }
        (None, None, Some(other)) => {
            let other = backend.tokenize(other)?;
            let report = ndd_between(&original, &other, backend.as_ref(), &cfg)?;
            (other, report)
        }
        _ => return Err(Error::invalid("give either --span with --replacement, or --against")),
    };
    let (edited, report) = edited;
    let cos = cosine_similarity(&original, &edited, backend.as_ref()).ok();
    let out = json!({
        "original": original.tokens(),
        "edited": edited.tokens(),
        "ndd": report.total,
        "per_position": report.per_position,
        "cosine": cos,
        "ensemble": cos.map(|c| ensemble_score(report.total, c, cfg.ensemble_ratio)),
        "delta_ppl": delta_ppl(&original, &edited, backend.as_ref(), cfg.epsilon)?,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(EXIT_OK)
}

fn bench(a: BenchArgs) -> Result<i32> {
    let cfg = a.ndd.config()?;
    let backend = a.backend.spec().connect()?;
    let mut pairs = if let Some(sts) = &a.sts {
        load_sts(sts, backend.as_ref())?
    } else if let (Some(sentences), Some(lexicon), Some(kind)) = (&a.sentences, &a.lexicon, a.test) {
        let lexicon = Lexicon::load(lexicon)?;
        let text = std::fs::read_to_string(sentences)?;
        let seqs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| backend.tokenize(l))
            .collect::<Result<Vec<_>>>()?;
        let ratio = a.ratio.unwrap_or(kind.default_ratio());
        make_perturbation_pairs(&seqs, &lexicon, kind, ratio, &mut seeded_rng(a.seed, 0))?
    } else {
        return Err(Error::invalid("give --sts, or --sentences with --lexicon and --test"));
    };
    if a.initial {
        pairs = initial_test(pairs, INITIAL_TEST_MIN_OVERLAP);
    }
    score_pairs(&mut pairs, &a.metrics, backend.as_ref(), &cfg)?;
    if let Some(path) = &a.pairs_out {
        let mut s = String::new();
        for p in &pairs {
            s.push_str(&serde_json::to_string(p)?);
            s.push('\n');
        }
        std::fs::write(path, s)?;
    }
    let report = serde_json::to_string_pretty(&run_benchmark(&pairs, &a.metrics))?;
    match &a.output {
        Some(path) => std::fs::write(path, report + "\n")?,
        None => println!("{report}"),
    }
    Ok(EXIT_OK)
}

fn serve(a: ServeArgs) -> Result<i32> {
    let spec = match (&a.choice.backend_reference, &a.choice.backend_transcript) {
        (Some(corpus), _) => BackendSpec::Reference {
            corpus: corpus.clone(),
            alpha: a.alpha,
            top_k: a.top_k,
        },
        (_, Some(path)) => BackendSpec::Transcript { path: path.clone() },
        _ => unreachable!("clap enforces one backend"),
    };
    let backend = spec.connect()?;
    match a.port {
        None => {
            let stdin = std::io::stdin().lock();
            let stdout = std::io::stdout().lock();
            match &a.record {
                Some(path) => {
                    let mut entries = Vec::new();
                    protocol::serve_observed(backend.as_ref(), stdin, stdout, |request, response| {
                        entries.push(TranscriptEntry {
                            request: request.clone(),
                            response: response.clone(),
                        })
                    })?;
                    save_transcript(&entries, path)?;
                }
                None => protocol::serve(backend.as_ref(), stdin, stdout)?,
            }
        }
        Some(port) => serve_tcp(backend, port)?,
    }
    Ok(EXIT_OK)
}

fn serve_tcp(backend: Arc<dyn MlmBackend>, port: u16) -> Result<()> {
    let listener = TcpListener::bind(("127.0.0.1", port))?;
    eprintln!("listening on {}", listener.local_addr()?);
    std::io::stderr().flush()?;
    for stream in listener.incoming() {
        let stream = stream?;
        let backend = backend.clone();
        std::thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(e) => {
                    eprintln!("connection error: {e}");
                    return;
                }
            };
            if let Err(e) = protocol::serve(backend.as_ref(), reader, stream) {
                eprintln!("connection error: {e}");
            }
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_parsing() {
        assert_eq!(parse_span("1:3").unwrap(), Span::new(1, 3).unwrap());
        assert!(parse_span("3:1").is_err());
        assert!(parse_span("13").is_err());
        assert!(parse_span("a:2").is_err());
    }

    #[test]
    fn defaults_match_documented_values() {
        let cli = Cli::try_parse_from(["ndd", "distort", "in.jsonl", "-o", "out.jsonl", "--backend-reference", "c.txt"])
            .unwrap();
        let Command::Distort(a) = cli.command else { panic!() };
        assert_eq!(a.k, 8);
        assert_eq!(a.ndd.ensemble_ratio, 0.0025);
        assert_eq!(a.ndd.mu, 1.0);
        assert_eq!(a.ndd.config().unwrap(), NddConfig::default());
        assert_eq!(a.mode, Mode::Generative);
    }

    #[test]
    fn usage_errors() {
        assert_eq!(run_cli(["ndd", "distort", "in.jsonl", "-o", "x"]), EXIT_USAGE);
        assert_eq!(
            run_cli([
                "ndd", "distort", "in.jsonl", "-o", "x", "--backend-reference", "c", "--backend-tcp", "h:1"
            ]),
            EXIT_USAGE
        );
        assert_eq!(
            run_cli(["ndd", "distort", "in.jsonl", "-o", "x", "--backend-reference", "c", "--mode", "substitutive"]),
            EXIT_USAGE
        );
        assert_eq!(
            run_cli([
                "ndd", "distort", "in.jsonl", "-o", "x", "--backend-reference", "c", "--weighting", "exponential",
                "--mu", "1.5"
            ]),
            EXIT_USAGE
        );
    }
}
