//! Sentence-level metrics: pseudo-perplexity, embedding cosine similarity,
//! divergences between predictive distributions, and neighboring
//! distribution divergence (NDD).
//!
//! NDD scores an edit by how much it disturbs the model's predictions at the
//! positions it did not touch. For every unedited token the masked prediction
//! in the original sentence `d` is compared with the one in the edited
//! sentence `d'`, and the per-position divergences are summed with distance
//! weights.

use serde::{Deserialize, Serialize};

use crate::backend::MlmBackend;
use crate::dist::{ProbDist, DEFAULT_FLOOR};
use crate::error::{Error, Result};
use crate::text::{align_neighbors, apply_edit, lcs_pairs, NeighborAlignment, Span, SpanEdit, TokenSequence};

/// Weight of `1 - cosine` relative to NDD in the ensemble score.
pub const DEFAULT_ENSEMBLE_RATIO: f64 = 0.0025;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    Kl,
    #[default]
    Hellinger,
}

impl Divergence {
    /// Divergence of the edited-sentence prediction from the original one.
    pub fn between(self, edited: &ProbDist, original: &ProbDist, epsilon: f64) -> f64 {
        match self {
            Divergence::Kl => kl_divergence(edited, original, epsilon),
            Divergence::Hellinger => hellinger(original, edited, epsilon),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Weighting {
    /// `mu^d` where `d` is the distance to the nearest span boundary.
    Exponential { mu: f64 },
    /// Uniform `1/|neighbors|`.
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NddConfig {
    pub divergence: Divergence,
    pub weighting: Weighting,
    /// 0 disables the cosine term of [`ensemble_score`].
    pub ensemble_ratio: f64,
    pub epsilon: f64,
}

impl Default for NddConfig {
    fn default() -> Self {
        Self {
            divergence: Divergence::default(),
            weighting: Weighting::default(),
            ensemble_ratio: DEFAULT_ENSEMBLE_RATIO,
            epsilon: DEFAULT_FLOOR,
        }
    }
}

impl NddConfig {
    pub fn validate(&self) -> Result<()> {
        if let Weighting::Exponential { mu } = self.weighting {
            if !(mu > 0.0 && mu <= 1.0) {
                return Err(Error::invalid(format!("mu must lie in (0, 1], got {mu}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.ensemble_ratio >= 0.0 && self.ensemble_ratio.is_finite()) {
            return Err(Error::invalid(format!(
                "ensemble ratio must be non-negative, got {}",
                self.ensemble_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionScore {
    /// Neighbor index in the original sentence.
    pub index: usize,
    pub divergence: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NddReport {
    pub total: f64,
    pub per_position: Vec<PositionScore>,
}

impl NddReport {
    fn from_positions(per_position: Vec<PositionScore>) -> Self {
        let total = weighted_sum(&per_position);
        Self { total, per_position }
    }

    /// Sum of `weight * divergence` in ascending neighbor order.
    pub fn recompute_total(&self) -> f64 {
        weighted_sum(&self.per_position)
    }
}

fn weighted_sum(positions: &[PositionScore]) -> f64 {
    positions.iter().fold(0.0, |acc, p| acc + p.weight * p.divergence)
}

/// `D_KL(d' || d)` over the union of both stored supports, with absent tokens
/// read as `epsilon`. Clamped at zero.
pub fn kl_divergence(d_prime: &ProbDist, d: &ProbDist, epsilon: f64) -> f64 {
    let total: f64 = d_prime
        .union_support(d)
        .into_iter()
        .map(|t| {
            let p = d_prime.prob_or(t, epsilon);
            let q = d.prob_or(t, epsilon);
            p * (p / q).ln()
        })
        .sum();
    total.max(0.0)
}

/// Hellinger distance `sqrt(sum (sqrt q - sqrt q')^2) / sqrt 2` over the union
/// of stored supports, clamped to `[0, 1]`.
pub fn hellinger(q: &ProbDist, q_prime: &ProbDist, epsilon: f64) -> f64 {
    let sq: f64 = q
        .union_support(q_prime)
        .into_iter()
        .map(|t| {
            let diff = q.prob_or(t, epsilon).sqrt() - q_prime.prob_or(t, epsilon).sqrt();
            diff * diff
        })
        .sum();
    (sq.sqrt() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Per-neighbor weights for an edit of `span`, in alignment order.
pub fn distance_weights(alignment: &NeighborAlignment, span: Span, cfg: &NddConfig) -> Vec<f64> {
    if alignment.is_empty() {
        return Vec::new();
    }
    match cfg.weighting {
        Weighting::Mean => vec![1.0 / alignment.len() as f64; alignment.len()],
        Weighting::Exponential { mu } => alignment
            .pairs
            .iter()
            .map(|&(k, _)| {
                let d = k.abs_diff(span.start).min(k.abs_diff(span.last()));
                mu.powi(d as i32)
            })
            .collect(),
    }
}

/// Caches the original sentence's predictions so that several candidate
/// edits of the same sentence only query the edited sentences.
pub struct NddScorer<'a, B: MlmBackend + ?Sized> {
    backend: &'a B,
    sentence: &'a TokenSequence,
    cfg: NddConfig,
    original: Vec<Option<ProbDist>>,
}

impl<'a, B: MlmBackend + ?Sized> NddScorer<'a, B> {
    pub fn new(backend: &'a B, sentence: &'a TokenSequence, cfg: NddConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            backend,
            sentence,
            cfg,
            original: vec![None; sentence.len()],
        })
    }

    fn original_at(&mut self, index: usize) -> Result<&ProbDist> {
        if self.original[index].is_none() {
            self.original[index] = Some(self.backend.mlm_distribution(self.sentence, index)?);
        }
        Ok(self.original[index].as_ref().expect("just filled"))
    }

    pub fn score(&mut self, edit: &SpanEdit) -> Result<NddReport> {
        let alignment = align_neighbors(self.sentence, edit)?;
        if alignment.is_empty() {
            return Err(Error::NoNeighbors);
        }
        let edited = apply_edit(self.sentence, edit)?;
        let weights = distance_weights(&alignment, edit.span, &self.cfg);
        let mut per_position = Vec::with_capacity(alignment.len());
        for (&(a, b), weight) in alignment.pairs.iter().zip(weights) {
            let d_prime = self.backend.mlm_distribution(&edited, b)?;
            let (divergence, epsilon) = (self.cfg.divergence, self.cfg.epsilon);
            let d = self.original_at(a)?;
            per_position.push(PositionScore {
                index: a,
                divergence: divergence.between(&d_prime, d, epsilon),
                weight,
            });
        }
        Ok(NddReport::from_positions(per_position))
    }
}

/// Neighboring distribution divergence of applying `edit` to `sentence`.
pub fn ndd<B: MlmBackend + ?Sized>(
    sentence: &TokenSequence,
    edit: &SpanEdit,
    backend: &B,
    cfg: &NddConfig,
) -> Result<NddReport> {
    NddScorer::new(backend, sentence, *cfg)?.score(edit)
}

/// NDD between two arbitrary sentences. Unedited positions are the tokens of
/// one longest common subsequence; the distance for exponential weighting is
/// measured to the nearest unmatched token of `original`.
pub fn ndd_between<B: MlmBackend + ?Sized>(
    original: &TokenSequence,
    edited: &TokenSequence,
    backend: &B,
    cfg: &NddConfig,
) -> Result<NddReport> {
    cfg.validate()?;
    let pairs = lcs_pairs(original.tokens(), edited.tokens());
    if pairs.is_empty() {
        return Err(Error::NoNeighbors);
    }
    let matched: Vec<bool> = {
        let mut m = vec![false; original.len()];
        pairs.iter().for_each(|&(a, _)| m[a] = true);
        m
    };
    let unmatched: Vec<usize> = (0..original.len()).filter(|&i| !matched[i]).collect();
    let mut per_position = Vec::with_capacity(pairs.len());
    for &(a, b) in &pairs {
        let weight = match cfg.weighting {
            Weighting::Mean => 1.0 / pairs.len() as f64,
            Weighting::Exponential { mu } => unmatched
                .iter()
                .map(|&u| u.abs_diff(a))
                .min()
                .map_or(1.0, |d| mu.powi(d as i32)),
        };
        let d = backend.mlm_distribution(original, a)?;
        let d_prime = backend.mlm_distribution(edited, b)?;
        per_position.push(PositionScore {
            index: a,
            divergence: cfg.divergence.between(&d_prime, &d, cfg.epsilon),
            weight,
        });
    }
    Ok(NddReport::from_positions(per_position))
}

/// Pseudo-perplexity: mean negative log probability of each token when it is
/// masked, with absent tokens read as `epsilon`.
pub fn perplexity<B: MlmBackend + ?Sized>(sentence: &TokenSequence, backend: &B, epsilon: f64) -> Result<f64> {
    let mut total = 0.0;
    for (i, tok) in sentence.tokens().iter().enumerate() {
        let d = backend.mlm_distribution(sentence, i)?;
        total -= d.prob_or(tok, epsilon).ln();
    }
    Ok(total / sentence.len() as f64)
}

pub fn delta_ppl<B: MlmBackend + ?Sized>(
    original: &TokenSequence,
    edited: &TokenSequence,
    backend: &B,
    epsilon: f64,
) -> Result<f64> {
    Ok((perplexity(edited, backend, epsilon)? - perplexity(original, backend, epsilon)?).abs())
}

/// Cosine of two vectors; 0 when either has zero norm.
pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "embedding dimensions differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

pub fn cosine_similarity<B: MlmBackend + ?Sized>(x: &TokenSequence, y: &TokenSequence, backend: &B) -> Result<f64> {
    cosine(&backend.sentence_embedding(x)?, &backend.sentence_embedding(y)?)
}

/// Combined dissimilarity `ndd + ratio * (1 - cos)`.
pub fn ensemble_score(ndd_total: f64, cos_sim: f64, ratio: f64) -> f64 {
    ndd_total + ratio * (1.0 - cos_sim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ReferenceBackend;

    fn dist(pairs: &[(&str, f64)]) -> ProbDist {
        ProbDist::from_weights(pairs.iter().map(|&(t, p)| (t, p)), DEFAULT_FLOOR).unwrap()
    }

    fn seq(s: &str) -> TokenSequence {
        TokenSequence::new(s.split_whitespace()).unwrap()
    }

    #[test]
    fn kl_examples() {
        let d = dist(&[("a", 0.5), ("b", 0.5)]);
        assert_eq!(kl_divergence(&d, &d, 1e-8), 0.0);
        let p = dist(&[("a", 1.0)]);
        // the floored b term contributes 1e-8 * ln(2e-8), about -1.8e-7
        assert!((kl_divergence(&p, &d, 1e-8) - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn hellinger_examples() {
        let q = dist(&[("a", 0.3), ("b", 0.7)]);
        let r = dist(&[("b", 0.2), ("c", 0.8)]);
        assert_eq!(hellinger(&q, &q, 1e-8), 0.0);
        assert_eq!(hellinger(&q, &r, 1e-8), hellinger(&r, &q, 1e-8));
        let h = hellinger(&dist(&[("a", 1.0)]), &dist(&[("b", 1.0)]), 1e-8);
        assert!((h - 1.0).abs() < 1e-3, "{h}");
    }

    #[test]
    fn weights() {
        let w = seq("a b c d e f g");
        let e = SpanEdit::new(Span::new(3, 4).unwrap(), ["x"]).unwrap();
        let al = align_neighbors(&w, &e).unwrap();
        let cfg = |weighting| NddConfig {
            weighting,
            ..Default::default()
        };
        assert_eq!(
            distance_weights(&al, e.span, &cfg(Weighting::Exponential { mu: 1.0 })),
            vec![1.0; 6]
        );
        assert_eq!(
            distance_weights(&al, e.span, &cfg(Weighting::Exponential { mu: 0.5 })),
            vec![0.125, 0.25, 0.5, 0.5, 0.25, 0.125]
        );
        let al4 = align_neighbors(&seq("a b c d e"), &SpanEdit::new(Span::new(2, 3).unwrap(), ["q"]).unwrap()).unwrap();
        assert_eq!(distance_weights(&al4, Span::new(2, 3).unwrap(), &cfg(Weighting::Mean)), vec![0.25; 4]);
        assert!(distance_weights(&NeighborAlignment::default(), e.span, &cfg(Weighting::Mean)).is_empty());
    }

    #[test]
    fn exponential_weight_uses_nearest_boundary_of_long_span() {
        let w = seq("a b c d e f g h");
        let e = SpanEdit::new(Span::new(2, 5).unwrap(), ["x"]).unwrap();
        let al = align_neighbors(&w, &e).unwrap();
        let cfg = NddConfig {
            weighting: Weighting::Exponential { mu: 0.5 },
            ..Default::default()
        };
        // neighbors 0,1 | 5,6,7 ; boundaries 2 and 4
        assert_eq!(distance_weights(&al, e.span, &cfg), vec![0.25, 0.5, 0.5, 0.25, 0.125]);
    }

    #[test]
    fn config_validation() {
        let bad_mu = NddConfig {
            weighting: Weighting::Exponential { mu: 1.5 },
            ..Default::default()
        };
        assert!(bad_mu.validate().is_err());
        let zero_mu = NddConfig {
            weighting: Weighting::Exponential { mu: 0.0 },
            ..Default::default()
        };
        assert!(zero_mu.validate().is_err());
        assert!(NddConfig {
            epsilon: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(NddConfig {
            ensemble_ratio: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let d = NddConfig::default();
        assert_eq!(d.ensemble_ratio, 0.0025);
        assert_eq!(d.divergence, Divergence::Hellinger);
        assert_eq!(d.weighting, Weighting::Mean);
    }

    #[test]
    fn identity_edit_scores_zero() {
        let be = ReferenceBackend::from_text("a b c d\nb c d a", 0.5, 8).unwrap();
        let w = seq("a b c d");
        let e = SpanEdit::new(Span::new(1, 3).unwrap(), ["b", "c"]).unwrap();
        for divergence in [Divergence::Kl, Divergence::Hellinger] {
            let r = ndd(&w, &e, &be, &NddConfig { divergence, ..Default::default() }).unwrap();
            assert_eq!(r.total, 0.0);
            assert_eq!(r.per_position.len(), 2);
        }
    }

    #[test]
    fn whole_sentence_edit_has_no_neighbors() {
        let be = ReferenceBackend::from_text("a b", 0.5, 8).unwrap();
        let e = SpanEdit::new(Span::new(0, 2).unwrap(), ["x"]).unwrap();
        assert!(matches!(
            ndd(&seq("a b"), &e, &be, &NddConfig::default()),
            Err(Error::NoNeighbors)
        ));
    }

    #[test]
    fn ensemble_examples() {
        assert_eq!(ensemble_score(1.7, 0.3, 0.0), 1.7);
        assert_eq!(ensemble_score(0.0, 1.0, 0.0025), 0.0);
        assert!((ensemble_score(2.0, 0.6, 0.0025) - 2.001).abs() < 1e-15);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ndd_between_matches_span_ndd_for_single_swap() {
        let be = ReferenceBackend::from_text("a b c d\na x c d\nb c d a", 0.5, 8).unwrap();
        let w = seq("a b c d");
        let e = SpanEdit::new(Span::new(1, 2).unwrap(), ["x"]).unwrap();
        for weighting in [Weighting::Mean, Weighting::Exponential { mu: 0.5 }] {
            let cfg = NddConfig { weighting, ..Default::default() };
            let by_span = ndd(&w, &e, &be, &cfg).unwrap();
            let by_lcs = ndd_between(&w, &seq("a x c d"), &be, &cfg).unwrap();
            assert_eq!(by_span, by_lcs);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn sparse() -> impl Strategy<Value = ProbDist> {
            proptest::collection::btree_map("[a-h]", 1e-6f64..10.0, 1..6)
                .prop_map(|m| ProbDist::from_weights(m, DEFAULT_FLOOR).unwrap())
        }

        proptest! {
            #[test]
            fn divergences_are_bounded(p in sparse(), q in sparse()) {
                let kl = kl_divergence(&p, &q, 1e-8);
                let h = hellinger(&p, &q, 1e-8);
                prop_assert!(kl >= 0.0);
                prop_assert!((0.0..=1.0).contains(&h));
                prop_assert_eq!(hellinger(&p, &p, 1e-8), 0.0);
                prop_assert_eq!(kl_divergence(&q, &q, 1e-8), 0.0);
            }

            #[test]
            fn smaller_mu_never_increases_total(
                divs in proptest::collection::vec(0.0f64..3.0, 1..8),
                mu1 in 0.01f64..1.0,
                bump in 0.0f64..1.0,
            ) {
                let mu2 = mu1 + (1.0 - mu1) * bump;
                let n = divs.len() + 1;
                let w = TokenSequence::new((0..n).map(|i| format!("t{i}"))).unwrap();
                let span = Span::new(n / 2, n / 2 + 1).unwrap();
                let al = align_neighbors(&w, &SpanEdit::new(span, ["z"]).unwrap()).unwrap();
                let total = |mu| {
                    let cfg = NddConfig { weighting: Weighting::Exponential { mu }, ..Default::default() };
                    distance_weights(&al, span, &cfg).iter().zip(&divs).map(|(w, d)| w * d).sum::<f64>()
                };
                prop_assert!(total(mu1) <= total(mu2) + 1e-15);
            }
        }
    }
}
