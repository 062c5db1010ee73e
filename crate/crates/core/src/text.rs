//! Sentences, spans, edits and neighbor alignment.
//!
//! All spans are half-open token ranges `[start, end)`. Character offsets are
//! counted in Unicode scalar values, not bytes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A tokenized sentence, optionally carrying per-token character offsets into
/// the text it was cut from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    offsets: Option<Vec<(usize, usize)>>,
}

impl TokenSequence {
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        validate_tokens(&tokens)?;
        Ok(Self {
            tokens,
            offsets: None,
        })
    }

    pub fn with_offsets(tokens: Vec<String>, offsets: Vec<(usize, usize)>) -> Result<Self> {
        validate_tokens(&tokens)?;
        if offsets.len() != tokens.len() {
            return Err(Error::invalid(format!(
                "{} offsets for {} tokens",
                offsets.len(),
                tokens.len()
            )));
        }
        let mut prev_end = 0;
        for &(s, e) in &offsets {
            if e <= s || s < prev_end {
                return Err(Error::invalid(format!(
                    "token offsets ({s}, {e}) overlap or are empty"
                )));
            }
            prev_end = e;
        }
        Ok(Self {
            tokens,
            offsets: Some(offsets),
        })
    }

    /// Splits on Unicode whitespace, recording character offsets.
    pub fn from_whitespace(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut offsets = Vec::new();
        let mut current = String::new();
        let mut start = 0;
        let mut idx = 0;
        for ch in text.chars() {
            if ch.is_whitespace() {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                    offsets.push((start, idx));
                }
            } else {
                if current.is_empty() {
                    start = idx;
                }
                current.push(ch);
            }
            idx += 1;
        }
        if !current.is_empty() {
            tokens.push(current);
            offsets.push((start, idx));
        }
        Self::with_offsets(tokens, offsets)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn offsets(&self) -> Option<&[(usize, usize)]> {
        self.offsets.as_deref()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Always false; kept for API symmetry with slices.
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&str> {
        self.tokens.get(i).map(String::as_str)
    }

    /// Returns a copy with token `i` replaced. Offsets are dropped since they no
    /// longer describe the source text.
    pub fn with_token(&self, i: usize, token: impl Into<String>) -> Result<Self> {
        if i >= self.len() {
            return Err(Error::invalid(format!(
                "index {i} out of range for sentence of length {}",
                self.len()
            )));
        }
        let mut tokens = self.tokens.clone();
        tokens[i] = token.into();
        Self::new(tokens)
    }

    /// Minimal token range covering the character range `[char_start, char_end)`.
    /// Tokens that only partially overlap are included whole.
    pub fn token_span_for_chars(&self, char_start: usize, char_end: usize) -> Result<Span> {
        let offsets = self
            .offsets
            .as_ref()
            .ok_or_else(|| Error::invalid("sentence has no character offsets"))?;
        if char_end <= char_start {
            return Err(Error::invalid(format!(
                "empty character range [{char_start}, {char_end})"
            )));
        }
        let mut first = None;
        let mut last = None;
        for (i, &(s, e)) in offsets.iter().enumerate() {
            if s < char_end && e > char_start {
                first.get_or_insert(i);
                last = Some(i);
            }
        }
        match (first, last) {
            (Some(f), Some(l)) => Span::new(f, l + 1),
            _ => Err(Error::invalid(format!(
                "character range [{char_start}, {char_end}) covers no token"
            ))),
        }
    }
}

impl std::fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

fn validate_tokens(tokens: &[String]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::invalid("sentence must contain at least one token"));
    }
    if tokens.iter().any(String::is_empty) {
        return Err(Error::invalid("tokens must be non-empty strings"));
    }
    Ok(())
}

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(Error::InvalidSpan {
                start,
                end,
                len: end,
            });
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Index of the last token inside the span.
    pub fn last(&self) -> usize {
        self.end - 1
    }

    pub fn check(&self, len: usize) -> Result<()> {
        if self.start < self.end && self.end <= len {
            Ok(())
        } else {
            Err(Error::InvalidSpan {
                start: self.start,
                end: self.end,
                len,
            })
        }
    }

    pub fn covers(&self, len: usize) -> bool {
        self.start == 0 && self.end == len
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn shifted(&self, delta: isize) -> Result<Span> {
        let start = self.start as isize + delta;
        let end = self.end as isize + delta;
        if start < 0 {
            return Err(Error::invalid("span shifted before sentence start"));
        }
        Span::new(start as usize, end as usize)
    }
}

/// Replaces `span` with `replacement`. An empty replacement is a deletion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanEdit {
    pub span: Span,
    pub replacement: Vec<String>,
}

impl SpanEdit {
    pub fn new<I, S>(span: Span, replacement: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let replacement: Vec<String> = replacement.into_iter().map(Into::into).collect();
        if replacement.iter().any(String::is_empty) {
            return Err(Error::invalid("replacement tokens must be non-empty"));
        }
        Ok(Self { span, replacement })
    }

    /// Change in sentence length caused by the edit.
    pub fn length_delta(&self) -> isize {
        self.replacement.len() as isize - self.span.len() as isize
    }
}

/// Position pairs `(index in W, index in W')` for every token outside the
/// edited span, in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NeighborAlignment {
    pub pairs: Vec<(usize, usize)>,
}

impl NeighborAlignment {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn apply_edit(sentence: &TokenSequence, edit: &SpanEdit) -> Result<TokenSequence> {
    edit.span.check(sentence.len())?;
    let tokens = sentence.tokens();
    let mut out = Vec::with_capacity((tokens.len() as isize + edit.length_delta()) as usize);
    out.extend_from_slice(&tokens[..edit.span.start]);
    out.extend(edit.replacement.iter().cloned());
    out.extend_from_slice(&tokens[edit.span.end..]);
    TokenSequence::new(out)
}

pub fn align_neighbors(sentence: &TokenSequence, edit: &SpanEdit) -> Result<NeighborAlignment> {
    let n = sentence.len();
    edit.span.check(n)?;
    let delta = edit.length_delta();
    let before = (0..edit.span.start).map(|a| (a, a));
    let after = (edit.span.end..n).map(|a| (a, (a as isize + delta) as usize));
    Ok(NeighborAlignment {
        pairs: before.chain(after).collect(),
    })
}

/// Index pairs of one longest common subsequence of `a` and `b`, ascending.
/// Among equally long alignments, matches are taken as early as possible.
pub fn lcs_pairs<T: PartialEq>(a: &[T], b: &[T]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    // suffix[i][j] = LCS length of a[i..] and b[j..]
    let mut suffix = vec![vec![0u32; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            suffix[i][j] = if a[i] == b[j] {
                suffix[i + 1][j + 1] + 1
            } else {
                suffix[i + 1][j].max(suffix[i][j + 1])
            };
        }
    }
    let mut pairs = Vec::with_capacity(suffix[0][0] as usize);
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] && suffix[i][j] == suffix[i + 1][j + 1] + 1 {
            pairs.push((i, j));
            i += 1;
            j += 1;
        } else if suffix[i + 1][j] >= suffix[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    pairs
}
