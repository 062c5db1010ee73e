use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{check_index, BackendDescriptor, BackendKind, MlmBackend, DEFAULT_MASK_TOKEN};
use crate::dist::{ProbDist, DEFAULT_FLOOR};
use crate::error::{Error, Result};
use crate::text::TokenSequence;

type Counts = BTreeMap<String, u64>;

/// Count-based stand-in for a masked language model.
///
/// The prediction for position `i` depends only on the immediate neighbors
/// `W[i-1]` and `W[i+1]`: counts of tokens seen between that pair in the
/// corpus, backing off to the sum of the left and right bigram counts when
/// the pair was never seen, and to unigram counts after that. Edge positions
/// use the single available bigram. Counts are Laplace-smoothed with `alpha`
/// over the whole vocabulary, then truncated to `top_k`.
///
/// Sentence embeddings are the L2-normalized mean of per-token vectors, each
/// the smoothed, normalized counts of that token's adjacent neighbors.
#[derive(Debug, Clone)]
pub struct ReferenceBackend {
    vocab: Vec<String>,
    alpha: f64,
    top_k: usize,
    floor: f64,
    mask_token: String,
    between: HashMap<(String, String), Counts>,
    after: HashMap<String, Counts>,
    before: HashMap<String, Counts>,
    unigram: Counts,
    neighbors: HashMap<String, Counts>,
}

impl ReferenceBackend {
    pub fn new(corpus: &[TokenSequence], alpha: f64, top_k: usize) -> Result<Self> {
        Self::with_mask_token(corpus, alpha, top_k, DEFAULT_MASK_TOKEN)
    }

    pub fn with_mask_token(
        corpus: &[TokenSequence],
        alpha: f64,
        top_k: usize,
        mask_token: &str,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("reference corpus is empty"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("smoothing must be positive, got {alpha}")));
        }
        if top_k == 0 {
            return Err(Error::invalid("top_k must be positive"));
        }
        let mut vocab = BTreeSet::new();
        let mut between: HashMap<(String, String), Counts> = HashMap::new();
        let mut after: HashMap<String, Counts> = HashMap::new();
        let mut before: HashMap<String, Counts> = HashMap::new();
        let mut unigram = Counts::new();
        let mut neighbors: HashMap<String, Counts> = HashMap::new();

        for sentence in corpus {
            let t = sentence.tokens();
            for (i, tok) in t.iter().enumerate() {
                if tok == mask_token {
                    continue;
                }
                vocab.insert(tok.clone());
                *unigram.entry(tok.clone()).or_default() += 1;
                if i > 0 {
                    *after.entry(t[i - 1].clone()).or_default().entry(tok.clone()).or_default() += 1;
                    *neighbors.entry(tok.clone()).or_default().entry(t[i - 1].clone()).or_default() += 1;
                }
                if i + 1 < t.len() {
                    *before.entry(t[i + 1].clone()).or_default().entry(tok.clone()).or_default() += 1;
                    *neighbors.entry(tok.clone()).or_default().entry(t[i + 1].clone()).or_default() += 1;
                }
                if i > 0 && i + 1 < t.len() {
                    *between
                        .entry((t[i - 1].clone(), t[i + 1].clone()))
                        .or_default()
                        .entry(tok.clone())
                        .or_default() += 1;
                }
            }
        }
        if vocab.is_empty() {
            return Err(Error::invalid("reference corpus has no tokens besides the mask token"));
        }
        Ok(Self {
            vocab: vocab.into_iter().collect(),
            alpha,
            top_k,
            floor: DEFAULT_FLOOR,
            mask_token: mask_token.to_owned(),
            between,
            after,
            before,
            unigram,
            neighbors,
        })
    }

    /// One sentence per non-blank line, whitespace-tokenized.
    pub fn from_text(corpus: &str, alpha: f64, top_k: usize) -> Result<Self> {
        let sentences = corpus
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(TokenSequence::from_whitespace)
            .collect::<Result<Vec<_>>>()?;
        Self::new(&sentences, alpha, top_k)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Raw context counts used for position `index`, before smoothing.
    pub fn context_counts(&self, sentence: &TokenSequence, index: usize) -> Result<Counts> {
        check_index(sentence, index)?;
        let t = sentence.tokens();
        let left = index.checked_sub(1).map(|j| &t[j]);
        let right = t.get(index + 1);
        let bigrams = |left: Option<&String>, right: Option<&String>| {
            let mut c = Counts::new();
            for (tok, n) in left.and_then(|l| self.after.get(l)).into_iter().flatten() {
                *c.entry(tok.clone()).or_default() += n;
            }
            for (tok, n) in right.and_then(|r| self.before.get(r)).into_iter().flatten() {
                *c.entry(tok.clone()).or_default() += n;
            }
            c
        };
        let counts = match (left, right) {
            (Some(l), Some(r)) => match self.between.get(&(l.clone(), r.clone())) {
                Some(c) => c.clone(),
                None => bigrams(Some(l), Some(r)),
            },
            (l, r) => bigrams(l, r),
        };
        Ok(if counts.is_empty() { self.unigram.clone() } else { counts })
    }

    /// Full smoothed distribution over the vocabulary, without truncation.
    pub fn smoothed_distribution(&self, sentence: &TokenSequence, index: usize) -> Result<ProbDist> {
        let counts = self.context_counts(sentence, index)?;
        ProbDist::from_weights(
            self.vocab
                .iter()
                .map(|v| (v.clone(), counts.get(v).copied().unwrap_or(0) as f64 + self.alpha)),
            self.floor,
        )
    }

    /// Smoothed, normalized neighbor-count vector for one token.
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let counts = self.neighbors.get(token);
        let raw: Vec<f64> = self
            .vocab
            .iter()
            .map(|v| counts.and_then(|c| c.get(v)).copied().unwrap_or(0) as f64 + self.alpha)
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / total).collect()
    }
}

impl MlmBackend for ReferenceBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: BackendKind::Reference,
            vocab_size: Some(self.vocab.len()),
            top_k: self.top_k.min(self.vocab.len()),
            mask_token: self.mask_token.clone(),
        }
    }

    fn mlm_distribution(&self, sentence: &TokenSequence, index: usize) -> Result<ProbDist> {
        self.smoothed_distribution(sentence, index)?.truncated(self.top_k)
    }

    fn sentence_embedding(&self, sentence: &TokenSequence) -> Result<Vec<f64>> {
        let mut mean = vec![0.0; self.vocab.len()];
        for tok in sentence.tokens() {
            for (m, x) in mean.iter_mut().zip(self.token_vector(tok)) {
                *m += x;
            }
        }
        let n = sentence.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            mean.iter_mut().for_each(|m| *m /= norm);
        }
        Ok(mean)
    }
}
