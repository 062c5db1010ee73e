//! Span rewriting with minimal semantic perturbance.
//!
//! A sensitive span is rewritten `k` times, either by sampling the masked
//! positions left to right from the model (generative) or by drawing phrases
//! from a phrase bank (substitutive). Every candidate is scored with NDD and
//! the lowest-scoring one is kept.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::MlmBackend;
use crate::dist::ProbDist;
use crate::error::{Error, Result};
use crate::metrics::{delta_ppl, NddConfig, NddReport, NddScorer};
use crate::text::{apply_edit, Span, SpanEdit, TokenSequence};

pub const DEFAULT_CANDIDATES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Generative,
    Substitutive,
}

/// What to do when a span covers the whole sentence and NDD is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    #[default]
    None,
    /// Score candidates by the change in pseudo-perplexity instead.
    Ppl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionConfig {
    pub mode: Mode,
    pub k: usize,
    pub temperature: f64,
    pub label_filter: bool,
    pub seed: u64,
    /// Score the untouched span as an extra first candidate.
    #[serde(default)]
    pub include_original: bool,
    #[serde(default)]
    pub fallback: Fallback,
    pub ndd: NddConfig,
}

impl Default for DistortionConfig {
    fn default() -> Self {
        Self {
            mode: Mode::default(),
            k: DEFAULT_CANDIDATES,
            temperature: 1.0,
            label_filter: true,
            seed: 0,
            include_original: false,
            fallback: Fallback::default(),
            ndd: NddConfig::default(),
        }
    }
}

impl DistortionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("candidate count k must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        self.ndd.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phrase {
    pub tokens: Vec<String>,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhraseBank {
    phrases: Vec<Phrase>,
}

impl PhraseBank {
    pub fn new(phrases: Vec<Phrase>) -> Result<Self> {
        if phrases.iter().any(|p| p.tokens.is_empty() || p.tokens.iter().any(String::is_empty)) {
            return Err(Error::invalid("every phrase needs at least one non-empty token"));
        }
        Ok(Self { phrases })
    }

    pub fn phrases(&self) -> &[Phrase] {
        &self.phrases
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// Indices of phrases usable for a span with `label`.
    pub fn eligible(&self, label: Option<&str>, filter: bool) -> Vec<usize> {
        self.phrases
            .iter()
            .enumerate()
            .filter(|(_, p)| !filter || label.is_none() || p.label.as_deref() == label)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Generated,
    Bank { index: usize },
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub replacement: Vec<String>,
    pub origin: Origin,
    /// NDD total, or the perplexity change under [`Fallback::Ppl`].
    pub score: f64,
    pub ndd: Option<NddReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanOutcome {
    /// The sentence after this span was rewritten.
    pub sentence: TokenSequence,
    /// Location of the replacement in `sentence`.
    pub span: Span,
    pub label: Option<String>,
    pub original: Vec<String>,
    /// Index of the selected candidate in `candidates`.
    pub chosen: usize,
    /// Every scored candidate, in draw order.
    pub candidates: Vec<CandidateResult>,
}

impl SpanOutcome {
    pub fn chosen(&self) -> &CandidateResult {
        &self.candidates[self.chosen]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentOutcome {
    pub sentence: TokenSequence,
    pub spans: Vec<SpanOutcome>,
}

/// Seeded stream for one unit of work; streams of the same seed are independent.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn mask_span(sentence: &TokenSequence, span: Span, length: usize, mask_token: &str) -> Result<TokenSequence> {
    if length == 0 {
        return Err(Error::invalid("mask length must be at least 1"));
    }
    let edit = SpanEdit::new(span, std::iter::repeat_n(mask_token, length))?;
    apply_edit(sentence, &edit)
}

/// Draws one token from `dist` after raising probabilities to `1/temperature`.
pub fn sample_token<R: Rng + ?Sized>(dist: &ProbDist, temperature: f64, rng: &mut R) -> Result<String> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let max_log = dist.iter().map(|(_, p)| p.ln()).fold(f64::NEG_INFINITY, f64::max);
    // Scaling in log space keeps tiny temperatures from underflowing to all zeros.
    let weights: Vec<(&str, f64)> = dist
        .iter()
        .map(|(t, p)| (t, ((p.ln() - max_log) / temperature).exp()))
        .collect();
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    let mut u = rng.gen::<f64>() * total;
    for (t, w) in &weights {
        if u < *w {
            return Ok((*t).to_owned());
        }
        u -= w;
    }
    // Rounding can leave u just above the last bucket.
    let last = weights.iter().rev().find(|(_, w)| *w > 0.0).expect("at least one positive weight");
    Ok(last.0.to_owned())
}

/// Masks `span` with `length` mask tokens and fills them left to right, each
/// sampled token written back before the next position is predicted.
pub fn generate_candidate<B, R>(
    sentence: &TokenSequence,
    span: Span,
    length: usize,
    backend: &B,
    rng: &mut R,
    temperature: f64,
) -> Result<Vec<String>>
where
    B: MlmBackend + ?Sized,
    R: Rng + ?Sized,
{
    let mask = backend.mask_token();
    let mut working = mask_span(sentence, span, length, &mask)?;
    let mut out = Vec::with_capacity(length);
    for pos in span.start..span.start + length {
        let dist = backend.mlm_distribution(&working, pos)?.without_token(&mask)?;
        let token = sample_token(&dist, temperature, rng)?;
        working = working.with_token(pos, token.clone())?;
        out.push(token);
    }
    Ok(out)
}

/// Rewrites one span, returning the lowest-scoring of the drawn candidates.
pub fn distort_span<B, R>(
    sentence: &TokenSequence,
    span: Span,
    label: Option<&str>,
    bank: Option<&PhraseBank>,
    backend: &B,
    cfg: &DistortionConfig,
    rng: &mut R,
) -> Result<SpanOutcome>
where
    B: MlmBackend + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    span.check(sentence.len())?;
    if span.covers(sentence.len()) && cfg.fallback == Fallback::None {
        return Err(Error::NoNeighbors);
    }
    let original: Vec<String> = sentence.tokens()[span.start..span.end].to_vec();

    let mut drawn: Vec<(Vec<String>, Origin)> = Vec::with_capacity(cfg.k + 1);
    if cfg.include_original {
        drawn.push((original.clone(), Origin::Original));
    }
    match cfg.mode {
        Mode::Generative => {
            for _ in 0..cfg.k {
                let tokens = generate_candidate(sentence, span, span.len(), backend, rng, cfg.temperature)?;
                drawn.push((tokens, Origin::Generated));
            }
        }
        Mode::Substitutive => {
            let bank = bank.ok_or(Error::EmptyBank { label: None })?;
            let eligible = bank.eligible(label, cfg.label_filter);
            if eligible.is_empty() {
                return Err(Error::EmptyBank {
                    label: label.map(str::to_owned),
                });
            }
            let picks = index::sample(rng, eligible.len(), cfg.k.min(eligible.len()));
            for pick in picks.iter() {
                let i = eligible[pick];
                drawn.push((bank.phrases()[i].tokens.clone(), Origin::Bank { index: i }));
            }
        }
    }

    let mut scorer = NddScorer::new(backend, sentence, cfg.ndd)?;
    let mut candidates = Vec::with_capacity(drawn.len());
    for (replacement, origin) in drawn {
        let edit = SpanEdit::new(span, replacement.iter().cloned())?;
        let (score, ndd) = if span.covers(sentence.len()) {
            let edited = apply_edit(sentence, &edit)?;
            (delta_ppl(sentence, &edited, backend, cfg.ndd.epsilon)?, None)
        } else {
            let report = scorer.score(&edit)?;
            (report.total, Some(report))
        };
        candidates.push(CandidateResult {
            replacement,
            origin,
            score,
            ndd,
        });
    }

    let chosen = argmin_first(candidates.iter().map(|c| c.score));
    let replacement = &candidates[chosen].replacement;
    let edit = SpanEdit::new(span, replacement.iter().cloned())?;
    Ok(SpanOutcome {
        sentence: apply_edit(sentence, &edit)?,
        span: Span::new(span.start, span.start + replacement.len())?,
        label: label.map(str::to_owned),
        original,
        chosen,
        candidates,
    })
}

/// Index of the smallest score; ties go to the earliest.
fn argmin_first(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, s) in scores.enumerate() {
        if i == 0 || s < best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Rewrites every span of a document left to right. Each span is scored
/// against the document as already rewritten by the spans before it.
pub fn distort_document_with_rng<B, R>(
    doc: &TokenSequence,
    spans: &[(Span, Option<String>)],
    bank: Option<&PhraseBank>,
    backend: &B,
    cfg: &DistortionConfig,
    rng: &mut R,
) -> Result<DocumentOutcome>
where
    B: MlmBackend + ?Sized,
    R: Rng + ?Sized,
{
    for (span, _) in spans {
        span.check(doc.len())?;
    }
    for w in spans.windows(2) {
        if w[1].0.start < w[0].0.end {
            return Err(Error::invalid(format!(
                "spans [{}, {}) and [{}, {}) overlap or are out of order",
                w[0].0.start, w[0].0.end, w[1].0.start, w[1].0.end
            )));
        }
    }
    let mut current = doc.clone();
    let mut shift: isize = 0;
    let mut outcomes = Vec::with_capacity(spans.len());
    for (span, label) in spans {
        let here = span.shifted(shift)?;
        let outcome = distort_span(&current, here, label.as_deref(), bank, backend, cfg, rng)?;
        shift += outcome.span.len() as isize - here.len() as isize;
        current = outcome.sentence.clone();
        outcomes.push(outcome);
    }
    Ok(DocumentOutcome {
        sentence: current,
        spans: outcomes,
    })
}

pub fn distort_document<B: MlmBackend + ?Sized>(
    doc: &TokenSequence,
    spans: &[(Span, Option<String>)],
    bank: Option<&PhraseBank>,
    backend: &B,
    cfg: &DistortionConfig,
) -> Result<DocumentOutcome> {
    let mut rng = seeded_rng(cfg.seed, 0);
    distort_document_with_rng(doc, spans, bank, backend, cfg, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ReferenceBackend;
    use crate::metrics::ndd;

    fn seq(s: &str) -> TokenSequence {
        TokenSequence::new(s.split_whitespace()).unwrap()
    }

    fn span(a: usize, b: usize) -> Span {
        Span::new(a, b).unwrap()
    }

    fn bank(lines: &[(&str, Option<&str>)]) -> PhraseBank {
        PhraseBank::new(
            lines
                .iter()
                .map(|(p, l)| Phrase {
                    tokens: p.split_whitespace().map(str::to_owned).collect(),
                    label: l.map(str::to_owned),
                })
                .collect(),
        )
        .unwrap()
    }

    fn corpus() -> ReferenceBackend {
        ReferenceBackend::from_text(
            "alice met bob in paris\nbob met alice in rome\ncarol met dave in paris\nthe cat sat on the mat",
            0.1,
            64,
        )
        .unwrap()
    }

    #[test]
    fn mask_span_examples() {
        let w = seq("a b c");
        assert_eq!(mask_span(&w, span(1, 2), 1, "M").unwrap(), seq("a M c"));
        assert_eq!(mask_span(&w, span(1, 2), 3, "M").unwrap(), seq("a M M M c"));
        assert_eq!(mask_span(&w, span(0, 3), 2, "M").unwrap(), seq("M M"));
        assert!(mask_span(&w, span(1, 2), 0, "M").is_err());
        assert!(mask_span(&w, span(2, 5), 1, "M").is_err());
    }

    #[test]
    fn greedy_generation_picks_argmax() {
        let be = ReferenceBackend::from_text("a b c", 1.0, 8).unwrap();
        let mut rng = seeded_rng(1, 0);
        let out = generate_candidate(&seq("a q c"), span(1, 2), 1, &be, &mut rng, 1e-6).unwrap();
        assert_eq!(out, ["b"]);
    }

    #[test]
    fn generation_is_seed_deterministic_and_mask_free() {
        let be = corpus();
        let w = seq("alice met bob in paris");
        let run = |seed| {
            let mut rng = seeded_rng(seed, 3);
            generate_candidate(&w, span(2, 4), 2, &be, &mut rng, 1.0).unwrap()
        };
        assert_eq!(run(5), run(5));
        for seed in 0..20 {
            assert!(run(seed).iter().all(|t| t != "[MASK]"));
        }
    }

    #[test]
    fn second_generated_position_conditions_on_first() {
        // Sample the first position, then check the second draw against a
        // manual two-step query sequence with the same RNG stream.
        let be = corpus();
        let w = seq("alice met bob in paris");
        let s = span(1, 3);
        let mut rng = seeded_rng(9, 0);
        let got = generate_candidate(&w, s, 2, &be, &mut rng, 1.0).unwrap();

        let mut rng = seeded_rng(9, 0);
        let masked = mask_span(&w, s, 2, "[MASK]").unwrap();
        let d1 = be.mlm_distribution(&masked, 1).unwrap();
        let t1 = sample_token(&d1, 1.0, &mut rng).unwrap();
        let step = masked.with_token(1, t1.clone()).unwrap();
        let d2 = be.mlm_distribution(&step, 2).unwrap();
        let t2 = sample_token(&d2, 1.0, &mut rng).unwrap();
        assert_eq!(got, vec![t1, t2]);
    }

    #[test]
    fn original_candidate_wins_with_zero() {
        let be = corpus();
        let w = seq("alice met bob in paris");
        let cfg = DistortionConfig {
            include_original: true,
            mode: Mode::Generative,
            ..Default::default()
        };
        let out = distort_span(&w, span(2, 3), None, None, &be, &cfg, &mut seeded_rng(0, 0)).unwrap();
        assert_eq!(out.chosen, 0);
        assert_eq!(out.chosen().origin, Origin::Original);
        assert_eq!(out.chosen().score, 0.0);
        assert_eq!(out.sentence, w);
        assert_eq!(out.candidates.len(), 9);
    }

    #[test]
    fn single_candidate_is_returned() {
        let be = corpus();
        let w = seq("alice met bob in paris");
        let b = bank(&[("the mat", Some("PER")), ("dave", Some("PER"))]);
        let cfg = DistortionConfig {
            mode: Mode::Substitutive,
            k: 1,
            ..Default::default()
        };
        let out = distort_span(&w, span(0, 1), Some("PER"), Some(&b), &be, &cfg, &mut seeded_rng(4, 0)).unwrap();
        assert_eq!(out.candidates.len(), 1);
        assert_eq!(out.chosen, 0);
    }

    #[test]
    fn substitutive_argmin_matches_brute_force() {
        let be = corpus();
        let w = seq("alice met bob in paris");
        let b = bank(&[("carol", None), ("the cat", None), ("dave", None), ("mat", None)]);
        let cfg = DistortionConfig {
            mode: Mode::Substitutive,
            k: 8,
            ..Default::default()
        };
        let out = distort_span(&w, span(2, 3), None, Some(&b), &be, &cfg, &mut seeded_rng(2, 0)).unwrap();
        assert_eq!(out.candidates.len(), 4);
        let brute: Vec<f64> = b
            .phrases()
            .iter()
            .map(|p| {
                ndd(&w, &SpanEdit::new(span(2, 3), p.tokens.clone()).unwrap(), &be, &cfg.ndd)
                    .unwrap()
                    .total
            })
            .collect();
        let min = brute.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(out.chosen().score, min);
        for c in &out.candidates {
            let Origin::Bank { index } = c.origin else { panic!() };
            assert_eq!(c.score, brute[index]);
            assert_eq!(c.replacement, b.phrases()[index].tokens);
        }
    }

    #[test]
    fn label_filter() {
        let be = corpus();
        let w = seq("alice met bob in paris");
        let b = bank(&[("rome", Some("LOC")), ("carol", Some("PER"))]);
        let cfg = DistortionConfig {
            mode: Mode::Substitutive,
            ..Default::default()
        };
        let out = distort_span(&w, span(4, 5), Some("LOC"), Some(&b), &be, &cfg, &mut seeded_rng(0, 0)).unwrap();
        assert_eq!(out.sentence, seq("alice met bob in rome"));
        let err = distort_span(&w, span(4, 5), Some("ORG"), Some(&b), &be, &cfg, &mut seeded_rng(0, 0)).unwrap_err();
        assert!(matches!(err, Error::EmptyBank { .. }));
        let unfiltered = DistortionConfig {
            label_filter: false,
            ..cfg.clone()
        };
        let out = distort_span(&w, span(4, 5), Some("ORG"), Some(&b), &be, &unfiltered, &mut seeded_rng(0, 0)).unwrap();
        assert_eq!(out.candidates.len(), 2);
        assert!(matches!(
            distort_span(&w, span(4, 5), None, None, &be, &cfg, &mut seeded_rng(0, 0)),
            Err(Error::EmptyBank { .. })
        ));
    }

    #[test]
    fn whole_sentence_span() {
        let be = corpus();
        let w = seq("alice met");
        let cfg = DistortionConfig::default();
        assert!(matches!(
            distort_span(&w, span(0, 2), None, None, &be, &cfg, &mut seeded_rng(0, 0)),
            Err(Error::NoNeighbors)
        ));
        let cfg = DistortionConfig {
            fallback: Fallback::Ppl,
            k: 3,
            ..Default::default()
        };
        let out = distort_span(&w, span(0, 2), None, None, &be, &cfg, &mut seeded_rng(0, 0)).unwrap();
        assert!(out.candidates.iter().all(|c| c.ndd.is_none() && c.score >= 0.0));
    }

    #[test]
    fn document_spans_are_rebased() {
        let be = corpus();
        let doc = seq("alice met bob in paris");
        let b = bank(&[("the big cat", Some("PER")), ("rome", Some("LOC"))]);
        let cfg = DistortionConfig {
            mode: Mode::Substitutive,
            ..Default::default()
        };
        let spans = vec![(span(0, 1), Some("PER".to_owned())), (span(4, 5), Some("LOC".to_owned()))];
        let out = distort_document(&doc, &spans, Some(&b), &be, &cfg).unwrap();
        assert_eq!(out.sentence, seq("the big cat met bob in rome"));
        assert_eq!(out.spans[1].span, span(6, 7));
        assert_eq!(out.spans[0].span, span(0, 3));

        let none = distort_document(&doc, &[], Some(&b), &be, &cfg).unwrap();
        assert_eq!(none.sentence, doc);

        let overlapping = vec![(span(0, 2), None), (span(1, 3), None)];
        assert!(distort_document(&doc, &overlapping, Some(&b), &be, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DistortionConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(DistortionConfig {
            temperature: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(DistortionConfig::default().k, 8);
    }

    #[test]
    fn sampling_follows_distribution() {
        let d = ProbDist::from_weights([("a", 0.8), ("b", 0.2)], 1e-8).unwrap();
        let mut rng = seeded_rng(11, 0);
        let hits = (0..4000).filter(|_| sample_token(&d, 1.0, &mut rng).unwrap() == "a").count();
        assert!((3000..3400).contains(&hits), "{hits}");
        // temperature 0.5 squares the odds: 16:1
        let hits = (0..4000).filter(|_| sample_token(&d, 0.5, &mut rng).unwrap() == "a").count();
        assert!((3650..3880).contains(&hits), "{hits}");
    }
}
