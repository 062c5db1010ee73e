//! Metric comparison harness: constructed perturbation pairs, STS-style
//! pair files, Pearson correlation, and bucketing by token overlap.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::MlmBackend;
use crate::error::{Error, Result};
use crate::metrics::{cosine_similarity, delta_ppl, ensemble_score, ndd_between, NddConfig};
use crate::text::{lcs_pairs, TokenSequence};

/// Share of the shorter sentence's tokens covered by a longest common
/// subsequence; the "initial" test keeps pairs at or above this.
pub const INITIAL_TEST_MIN_OVERLAP: f64 = 0.8;
pub const BUCKET_COUNT: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LexEntry {
    pub word: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    #[serde(default)]
    pub antonyms: Vec<String>,
    #[serde(default)]
    pub pos: Option<String>,
    #[serde(default)]
    pub lemma: Option<String>,
    /// Inflected forms of a verb (tense, person).
    #[serde(default)]
    pub terms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Lexicon {
    entries: BTreeMap<String, LexEntry>,
}

impl Lexicon {
    pub fn new(entries: impl IntoIterator<Item = LexEntry>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for e in entries {
            if e.word.is_empty() {
                return Err(Error::invalid("lexicon entry with empty word"));
            }
            if e.antonyms.contains(&e.word) {
                return Err(Error::invalid(format!("`{}` is listed as its own antonym", e.word)));
            }
            if map.insert(e.word.clone(), e).is_some() {
                return Err(Error::invalid("duplicate lexicon entry"));
            }
        }
        Ok(Self { entries: map })
    }

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
        Self::new(entries)
    }

    pub fn get(&self, word: &str) -> Option<&LexEntry> {
        self.entries.get(word)
    }

    pub fn entries(&self) -> impl Iterator<Item = &LexEntry> {
        self.entries.values()
    }

    fn lemma_of<'a>(&'a self, word: &'a str) -> &'a str {
        self.get(word).and_then(|e| e.lemma.as_deref()).unwrap_or(word)
    }
}

fn is_verb(pos: Option<&str>) -> bool {
    pos.is_some_and(|p| {
        let p = p.to_ascii_lowercase();
        p == "verb" || p == "v" || p.starts_with("vb")
    })
}

/// Replacement words with the same relation, then with the opposite one.
type Options = (Vec<String>, Vec<String>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    SynAnt,
    Pos,
    Term,
    Lemma,
}

impl PerturbationKind {
    /// Share of eligible words replaced by default: every verb for the term
    /// test, a fifth of the words otherwise.
    pub fn default_ratio(self) -> f64 {
        match self {
            PerturbationKind::Term => 1.0,
            _ => 0.2,
        }
    }

    /// Replacement options for `word`: (same-relation, opposite-relation).
    fn options(self, word: &str, lex: &Lexicon) -> Option<Options> {
        let entry = lex.get(word)?;
        let others = || lex.entries().filter(move |e| e.word != word);
        let (pos, neg): (Vec<String>, Vec<String>) = match self {
            PerturbationKind::SynAnt => (entry.synonyms.clone(), entry.antonyms.clone()),
            PerturbationKind::Pos => {
                let tag = entry.pos.as_deref()?;
                let same = others().filter(|e| e.pos.as_deref() == Some(tag)).map(|e| e.word.clone()).collect();
                let diff = others()
                    .filter(|e| e.pos.as_deref().is_some_and(|p| p != tag))
                    .map(|e| e.word.clone())
                    .collect();
                (same, diff)
            }
            PerturbationKind::Lemma => {
                let lemma = entry.lemma.as_deref()?;
                let same = others().filter(|e| e.lemma.as_deref() == Some(lemma)).map(|e| e.word.clone()).collect();
                let diff_lemma = |e: &&LexEntry| e.lemma.as_deref().is_some_and(|l| l != lemma);
                let same_pos: Vec<String> = others()
                    .filter(diff_lemma)
                    .filter(|e| entry.pos.is_some() && e.pos == entry.pos)
                    .map(|e| e.word.clone())
                    .collect();
                let diff = if same_pos.is_empty() {
                    others().filter(diff_lemma).map(|e| e.word.clone()).collect()
                } else {
                    same_pos
                };
                (same, diff)
            }
            PerturbationKind::Term => {
                if !is_verb(entry.pos.as_deref()) {
                    return None;
                }
                let lemma = lex.lemma_of(word);
                let same = entry.terms.iter().filter(|t| *t != word).cloned().collect();
                let mut diff: Vec<String> = others()
                    .filter(|e| is_verb(e.pos.as_deref()) && lex.lemma_of(&e.word) != lemma)
                    .flat_map(|e| std::iter::once(e.word.clone()).chain(e.terms.iter().cloned()))
                    .collect();
                diff.sort();
                diff.dedup();
                (same, diff)
            }
        };
        (!pos.is_empty() && !neg.is_empty()).then_some((pos, neg))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub left: TokenSequence,
    pub right: TokenSequence,
    /// 1/0 for constructed positives/negatives, 0..5 for STS files.
    pub gold: f64,
    pub overlap: f64,
    #[serde(default)]
    pub scores: BTreeMap<String, f64>,
}

impl ScoredPair {
    pub fn new(left: TokenSequence, right: TokenSequence, gold: f64) -> Self {
        let overlap = lcs_overlap_ratio(&left, &right);
        Self {
            left,
            right,
            gold,
            overlap,
            scores: BTreeMap::new(),
        }
    }
}

/// Number of words replaced out of `eligible` at `ratio`, rounded up.
pub fn replacement_count(eligible: usize, ratio: f64) -> usize {
    // the small slack keeps products like 0.7 * 10 from rounding up to 8
    ((ratio * eligible as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Builds a positive and a negative pair per sentence by replacing the same
/// sampled positions with same-relation and opposite-relation words.
/// Replacement words are drawn in proportion to their corpus frequency
/// (plus one). Sentences with no eligible word are skipped.
pub fn make_perturbation_pairs<R: Rng + ?Sized>(
    sentences: &[TokenSequence],
    lexicon: &Lexicon,
    kind: PerturbationKind,
    ratio: f64,
    rng: &mut R,
) -> Result<Vec<ScoredPair>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("ratio must lie in (0, 1], got {ratio}")));
    }
    if !lexicon.entries().any(|e| kind.options(&e.word, lexicon).is_some()) {
        return Err(Error::invalid(format!("lexicon has no entries usable for the {kind:?} test")));
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for s in sentences {
        for t in s.tokens() {
            *freq.entry(t.as_str()).or_default() += 1;
        }
    }
    let pick = |options: &[String], rng: &mut R| -> String {
        let weights: Vec<u64> = options.iter().map(|o| freq.get(o.as_str()).copied().unwrap_or(0) + 1).collect();
        let dist = WeightedIndex::new(&weights).expect("weights are positive");
        options[dist.sample(rng)].clone()
    };

    let mut pairs = Vec::new();
    for sentence in sentences {
        let eligible: Vec<(usize, Options)> = sentence
            .tokens()
            .iter()
            .enumerate()
            .filter_map(|(i, w)| kind.options(w, lexicon).map(|o| (i, o)))
            .collect();
        if eligible.is_empty() {
            continue;
        }
        let count = replacement_count(eligible.len(), ratio).clamp(1, eligible.len());
        let mut chosen: Vec<usize> = index::sample(rng, eligible.len(), count).into_vec();
        chosen.sort_unstable();
        let mut positive = sentence.tokens().to_vec();
        let mut negative = sentence.tokens().to_vec();
        for c in chosen {
            let (i, (same, opposite)) = &eligible[c];
            positive[*i] = pick(same, rng);
            negative[*i] = pick(opposite, rng);
        }
        let base = TokenSequence::new(sentence.tokens().to_vec())?;
        pairs.push(ScoredPair::new(base.clone(), TokenSequence::new(positive)?, 1.0));
        pairs.push(ScoredPair::new(base, TokenSequence::new(negative)?, 0.0));
    }
    Ok(pairs)
}

pub fn lcs_overlap_ratio(x: &TokenSequence, y: &TokenSequence) -> f64 {
    let common = lcs_pairs(x.tokens(), y.tokens()).len();
    common as f64 / x.len().min(y.len()) as f64
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ndd,
    Cosine,
    DeltaPpl,
    /// NDD plus the weighted cosine dissimilarity.
    NddCosine,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Ndd, Metric::Cosine, Metric::DeltaPpl, Metric::NddCosine];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ndd => "ndd",
            Metric::Cosine => "cosine",
            Metric::DeltaPpl => "delta_ppl",
            Metric::NddCosine => "ndd+cosine",
        }
    }

    /// Dissimilarities are negated before correlating with similarity gold.
    pub fn is_dissimilarity(self) -> bool {
        !matches!(self, Metric::Cosine)
    }
}

/// Fills `pair.scores` with raw metric values. Pairs where a metric is
/// undefined (no shared token for NDD) get no entry for it.
pub fn score_pairs<B: MlmBackend + ?Sized>(
    pairs: &mut [ScoredPair],
    metrics: &[Metric],
    backend: &B,
    cfg: &NddConfig,
) -> Result<()> {
    for pair in pairs.iter_mut() {
        let needs = |m: Metric| metrics.contains(&m);
        let ndd_value = if needs(Metric::Ndd) || needs(Metric::NddCosine) {
            match ndd_between(&pair.left, &pair.right, backend, cfg) {
                Ok(r) => Some(r.total),
                Err(Error::NoNeighbors) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let cos = if needs(Metric::Cosine) || needs(Metric::NddCosine) {
            Some(cosine_similarity(&pair.left, &pair.right, backend)?)
        } else {
            None
        };
        for &m in metrics {
            let value = match m {
                Metric::Ndd => ndd_value,
                Metric::Cosine => cos,
                Metric::DeltaPpl => Some(delta_ppl(&pair.left, &pair.right, backend, cfg.epsilon)?),
                Metric::NddCosine => ndd_value.zip(cos).map(|(n, c)| ensemble_score(n, c, cfg.ensemble_ratio)),
            };
            if let Some(v) = value {
                pair.scores.insert(m.name().to_owned(), v);
            }
        }
    }
    Ok(())
}

/// Bucket of an overlap ratio: `[0.0, 0.1), ..., [0.8, 0.9), [0.9, 1.0]`.
pub fn bucket_index(overlap: f64) -> usize {
    ((overlap * BUCKET_COUNT as f64 + 1e-9).floor().max(0.0) as usize).min(BUCKET_COUNT - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub pearson: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub scored: usize,
    pub overall: Option<f64>,
    pub buckets: Vec<BucketReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub pairs: usize,
    pub bucket_counts: Vec<usize>,
    pub metrics: Vec<MetricReport>,
}

/// Correlates each metric with gold overall and per overlap bucket. Buckets
/// with fewer than two scored pairs, or constant values, report `null`.
pub fn run_benchmark(pairs: &[ScoredPair], metrics: &[Metric]) -> BenchmarkReport {
    let mut bucket_counts = vec![0; BUCKET_COUNT];
    for p in pairs {
        bucket_counts[bucket_index(p.overlap)] += 1;
    }
    let reports = metrics
        .iter()
        .map(|&m| {
            let sign = if m.is_dissimilarity() { -1.0 } else { 1.0 };
            let scored: Vec<(usize, f64, f64)> = pairs
                .iter()
                .filter_map(|p| p.scores.get(m.name()).map(|s| (bucket_index(p.overlap), sign * s, p.gold)))
                .collect();
            let corr = |rows: &[&(usize, f64, f64)]| {
                let xs: Vec<f64> = rows.iter().map(|r| r.1).collect();
                let ys: Vec<f64> = rows.iter().map(|r| r.2).collect();
                pearson(&xs, &ys).ok()
            };
            let all: Vec<_> = scored.iter().collect();
            let buckets = (0..BUCKET_COUNT)
                .map(|b| {
                    let rows: Vec<_> = scored.iter().filter(|r| r.0 == b).collect();
                    BucketReport {
                        lo: b as f64 / BUCKET_COUNT as f64,
                        hi: (b + 1) as f64 / BUCKET_COUNT as f64,
                        count: rows.len(),
                        pearson: corr(&rows),
                    }
                })
                .collect();
            MetricReport {
                metric: m.name().to_owned(),
                scored: scored.len(),
                overall: corr(&all),
                buckets,
            }
        })
        .collect();
    BenchmarkReport {
        pairs: pairs.len(),
        bucket_counts,
        metrics: reports,
    }
}

/// Reads `score<TAB>sentence1<TAB>sentence2` lines, tokenizing with `backend`.
pub fn load_sts<B: MlmBackend + ?Sized>(path: &Path, backend: &B) -> Result<Vec<ScoredPair>> {
    let file = std::fs::File::open(path)?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(err(format!("expected 3 tab-separated columns, got {}", cols.len())));
        }
        let gold: f64 = cols[0].trim().parse().map_err(|e| err(format!("bad score: {e}")))?;
        let left = backend.tokenize(cols[1]).map_err(|e| err(e.to_string()))?;
        let right = backend.tokenize(cols[2]).map_err(|e| err(e.to_string()))?;
        pairs.push(ScoredPair::new(left, right, gold));
    }
    Ok(pairs)
}

/// Keeps pairs whose overlap ratio is at least `min_overlap`.
pub fn initial_test(pairs: Vec<ScoredPair>, min_overlap: f64) -> Vec<ScoredPair> {
    pairs.into_iter().filter(|p| p.overlap >= min_overlap).collect()
}
