use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FLOOR: f64 = 1e-8;

/// Sparse, normalized distribution over vocabulary tokens.
///
/// Tokens absent from the stored support read back as `floor`, so lookups
/// never return zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbDist {
    entries: BTreeMap<String, f64>,
    floor: f64,
}

impl ProbDist {
    /// Normalizes non-negative weights into a distribution. Zero weights are
    /// dropped; duplicate tokens accumulate.
    pub fn from_weights<I, S>(weights: I, floor: f64) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(Error::invalid(format!("floor must be positive, got {floor}")));
        }
        let mut entries = BTreeMap::new();
        for (tok, w) in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(format!("weight {w} is not a finite non-negative value")));
            }
            if w > 0.0 {
                *entries.entry(tok.into()).or_insert(0.0) += w;
            }
        }
        let total: f64 = entries.values().sum();
        if entries.is_empty() || total <= 0.0 {
            return Err(Error::invalid("distribution has no positive mass"));
        }
        for v in entries.values_mut() {
            *v /= total;
        }
        Ok(Self { entries, floor })
    }

    /// Point mass on a single token.
    pub fn point(token: impl Into<String>, floor: f64) -> Result<Self> {
        Self::from_weights([(token.into(), 1.0)], floor)
    }

    /// Keeps the `k` most probable entries (ties broken by token order) and
    /// renormalizes.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("top_k must be positive"));
        }
        if self.entries.len() <= k {
            return Ok(self.clone());
        }
        Self::from_weights(self.ranked().into_iter().take(k).map(|(t, p)| (t.to_owned(), p)), self.floor)
    }

    pub fn with_floor(mut self, floor: f64) -> Result<Self> {
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(Error::invalid(format!("floor must be positive, got {floor}")));
        }
        self.floor = floor;
        Ok(self)
    }

    /// Probability of `token`, or the floor if it is outside the support.
    pub fn prob(&self, token: &str) -> f64 {
        self.entries.get(token).copied().unwrap_or(self.floor)
    }

    /// Probability of `token` with an explicit floor for absent tokens.
    pub fn prob_or(&self, token: &str, floor: f64) -> f64 {
        self.entries.get(token).copied().unwrap_or(floor)
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn support_len(&self) -> usize {
        self.entries.len()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.entries.contains_key(token)
    }

    /// Stored entries in token order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(t, &p)| (t.as_str(), p))
    }

    /// Stored entries by descending probability, ties by token order.
    pub fn ranked(&self) -> Vec<(&str, f64)> {
        let mut v: Vec<_> = self.iter().collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v
    }

    pub fn argmax(&self) -> &str {
        self.ranked()[0].0
    }

    /// Sorted union of the stored supports of two distributions.
    pub fn union_support<'a>(&'a self, other: &'a ProbDist) -> Vec<&'a str> {
        let mut keys: Vec<&str> = self.entries.keys().map(String::as_str).collect();
        keys.extend(other.entries.keys().map(String::as_str).filter(|k| !self.entries.contains_key(*k)));
        keys.sort_unstable();
        keys
    }

    /// Drops `token` from the support and renormalizes.
    pub fn without_token(&self, token: &str) -> Result<Self> {
        if !self.contains(token) {
            return Ok(self.clone());
        }
        Self::from_weights(self.iter().filter(|(t, _)| *t != token).map(|(t, p)| (t.to_owned(), p)), self.floor)
    }
}
