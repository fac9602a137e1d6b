//! Next-token distributions and the contrastive transform.
//!
//! Everything here is a pure function over immutable values. The central
//! operation is [`apply_cid`], which reweights the original distribution `p`
//! by `exp(lambda * (p(w) - p'(w)))` on the top-K support of `p` and
//! renormalizes in the log domain.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into a model vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(id: u32) -> Self {
        TokenId(id)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Tolerance used when a distribution claims to be normalized.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistributionError {
    #[error("vocabulary size mismatch: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },
    #[error("probability for token {token} is invalid: {value}")]
    InvalidProbability { token: u32, value: f64 },
    #[error("token {token} is outside a vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("distribution is empty")]
    Empty,
    #[error("all probability mass inside the top-{top_k} mask is zero")]
    ZeroMass { top_k: usize },
    #[error("distribution sums to {sum}, expected 1")]
    NotNormalized { sum: f64 },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// A probability vector over a vocabulary.
///
/// Stored densely. Sparse inputs (for example a top-N response from a remote
/// server) are expanded with zeros; [`ProbDist::support`] iterates only the
/// nonzero entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbDist {
    probs: Vec<f64>,
}

impl ProbDist {
    /// Builds a distribution from dense probabilities without renormalizing.
    pub fn new(probs: Vec<f64>) -> Result<Self, DistributionError> {
        if probs.is_empty() {
            return Err(DistributionError::Empty);
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(DistributionError::InvalidProbability { token: i as u32, value: p });
            }
        }
        Ok(Self { probs })
    }

    /// Like [`ProbDist::new`] but also requires the entries to sum to one.
    pub fn normalized(probs: Vec<f64>) -> Result<Self, DistributionError> {
        let dist = Self::new(probs)?;
        let sum = dist.total_mass();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(DistributionError::NotNormalized { sum });
        }
        Ok(dist)
    }

    /// Uniform distribution over `vocab_size` tokens.
    pub fn uniform(vocab_size: usize) -> Result<Self, DistributionError> {
        if vocab_size == 0 {
            return Err(DistributionError::Empty);
        }
        Ok(Self { probs: vec![1.0 / vocab_size as f64; vocab_size] })
    }

    /// Expands `(token, probability)` pairs into a dense vector; missing
    /// tokens get probability zero.
    pub fn from_sparse(
        vocab_size: usize,
        entries: impl IntoIterator<Item = (TokenId, f64)>,
    ) -> Result<Self, DistributionError> {
        if vocab_size == 0 {
            return Err(DistributionError::Empty);
        }
        let mut probs = vec![0.0; vocab_size];
        for (token, p) in entries {
            let slot = probs
                .get_mut(token.index())
                .ok_or(DistributionError::TokenOutOfRange { token: token.0, vocab_size })?;
            *slot = p;
        }
        Self::new(probs)
    }

    /// Exponentiates log-probabilities. No renormalization is applied, so a
    /// truncated (top-N) response keeps its exact probabilities.
    pub fn from_logprobs(logprobs: &[f64]) -> Result<Self, DistributionError> {
        Self::new(logprobs.iter().map(|lp| lp.exp()).collect())
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs.get(token.index()).copied().unwrap_or(0.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn is_normalized(&self) -> bool {
        (self.total_mass() - 1.0).abs() <= NORMALIZATION_TOLERANCE
    }

    /// Nonzero entries in token order.
    pub fn support(&self) -> impl Iterator<Item = (TokenId, f64)> + '_ {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, &p)| (TokenId(i as u32), p))
    }

    fn check_same_vocab(&self, other: &ProbDist) -> Result<(), DistributionError> {
        if self.vocab_size() != other.vocab_size() {
            return Err(DistributionError::VocabMismatch {
                left: self.vocab_size(),
                right: other.vocab_size(),
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for ProbDist {
    type Error = DistributionError;

    fn try_from(probs: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(probs)
    }
}

impl From<ProbDist> for Vec<f64> {
    fn from(dist: ProbDist) -> Self {
        dist.probs
    }
}

/// Per-token difference `p(w) - p'(w)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaVector {
    values: Vec<f64>,
}

impl DeltaVector {
    pub fn get(&self, token: TokenId) -> f64 {
        self.values.get(token.index()).copied().unwrap_or(0.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Contrast strength and truncation width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CidParams {
    pub lambda: f64,
    pub top_k: usize,
}

impl CidParams {
    pub const DEFAULT_TOP_K: usize = 50;

    pub fn new(lambda: f64, top_k: usize) -> Result<Self, DistributionError> {
        let params = Self { lambda, top_k };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), DistributionError> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(DistributionError::InvalidParams(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.top_k == 0 {
            return Err(DistributionError::InvalidParams("top_k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_lambda(self, lambda: f64) -> Self {
        Self { lambda, ..self }
    }
}

impl Default for CidParams {
    fn default() -> Self {
        Self { lambda: 0.0, top_k: Self::DEFAULT_TOP_K }
    }
}

pub fn delta(p: &ProbDist, p_contrast: &ProbDist) -> Result<DeltaVector, DistributionError> {
    p.check_same_vocab(p_contrast)?;
    let values = p.probs.iter().zip(&p_contrast.probs).map(|(a, b)| a - b).collect();
    Ok(DeltaVector { values })
}

/// The scaling function `exp(lambda * v)`.
#[inline]
pub fn alpha(v: f64, lambda: f64) -> f64 {
    (lambda * v).exp()
}

/// Number of evenly spaced `v` samples in [`alpha_curve`].
pub const ALPHA_CURVE_SAMPLES: usize = 201;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub lambda: f64,
    pub v: f64,
    pub alpha: f64,
}

/// [`alpha`] sampled at `v = -1, -0.99, ..., 1` for each lambda.
pub fn alpha_curve(lambdas: &[f64]) -> Vec<AlphaPoint> {
    let half = (ALPHA_CURVE_SAMPLES / 2) as f64;
    lambdas
        .iter()
        .flat_map(|&lambda| {
            (0..ALPHA_CURVE_SAMPLES).map(move |i| {
                let v = (i as f64 - half) / half;
                AlphaPoint { lambda, v, alpha: alpha(v, lambda) }
            })
        })
        .collect()
}

/// The `k` most probable tokens of `p`, most probable first. Ties go to the
/// lower token id.
pub fn top_k_mask(p: &ProbDist, k: usize) -> Vec<TokenId> {
    let mut ids: Vec<usize> = (0..p.vocab_size()).collect();
    let by_rank = |&a: &usize, &b: &usize| p.probs[b].total_cmp(&p.probs[a]).then(a.cmp(&b));
    if k < ids.len() {
        ids.select_nth_unstable_by(k, by_rank);
        ids.truncate(k);
    }
    ids.sort_unstable_by(by_rank);
    ids.into_iter().map(|i| TokenId(i as u32)).collect()
}

/// Output of [`apply_cid_detailed`]: the reweighted distribution plus the log
/// normalizer, so that any single entry can be recomputed as
/// `exp(ln p(w) + lambda * delta(w) - log_normalizer)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CidOutput {
    pub dist: ProbDist,
    pub log_normalizer: f64,
}

/// Contrastive reweighting of `p` against `p_contrast`.
///
/// The support is the top-K of `p`; `p_contrast` is only looked up on those
/// tokens. Tokens outside the mask, or with `p(w) = 0`, end up with exactly 0.
pub fn apply_cid(
    p: &ProbDist,
    p_contrast: &ProbDist,
    params: CidParams,
) -> Result<ProbDist, DistributionError> {
    apply_cid_detailed(p, p_contrast, params).map(|out| out.dist)
}

pub fn apply_cid_detailed(
    p: &ProbDist,
    p_contrast: &ProbDist,
    params: CidParams,
) -> Result<CidOutput, DistributionError> {
    params.validate()?;
    p.check_same_vocab(p_contrast)?;

    let mask = top_k_mask(p, params.top_k);
    let mut scores: Vec<(usize, f64)> = Vec::with_capacity(mask.len());
    for token in mask {
        let i = token.index();
        let pw = p.probs[i];
        if pw > 0.0 {
            let d = pw - p_contrast.probs[i];
            scores.push((i, pw.ln() + params.lambda * d));
        }
    }
    if scores.is_empty() {
        return Err(DistributionError::ZeroMass { top_k: params.top_k });
    }

    let max = scores.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|&(_, s)| (s - max).exp()).sum();
    let log_normalizer = max + sum.ln();

    let mut probs = vec![0.0; p.vocab_size()];
    for (i, s) in scores {
        probs[i] = (s - log_normalizer).exp();
    }
    Ok(CidOutput { dist: ProbDist { probs }, log_normalizer })
}

/// Most probable token; ties go to the lowest id.
pub fn argmax_token(p: &ProbDist) -> Result<TokenId, DistributionError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in p.probs.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| TokenId(i as u32)).ok_or(DistributionError::Empty)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(v: &[f64]) -> ProbDist {
        ProbDist::new(v.to_vec()).unwrap()
    }

    #[test]
    fn delta_examples() {
        let p = dist(&[0.5, 0.3, 0.2]);
        assert_eq!(delta(&p, &p).unwrap().as_slice(), &[0.0, 0.0, 0.0]);

        let q = dist(&[0.2, 0.3, 0.5]);
        let d = delta(&p, &q).unwrap();
        let expected = [0.3, 0.0, -0.3];
        for (a, b) in d.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn delta_rejects_vocab_mismatch() {
        let err = delta(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0, 0.0])).unwrap_err();
        assert_eq!(err, DistributionError::VocabMismatch { left: 2, right: 3 });
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(alpha(0.0, 10.0), 1.0);
        assert!((alpha(1.0, 5.0) - 148.413_159_102_576_6).abs() < 1e-9);
        assert!((alpha(-1.0, 5.0) - 0.006_737_946_999_085_467).abs() < 1e-15);
    }

    #[test]
    fn top_k_examples() {
        let p = dist(&[0.5, 0.3, 0.2]);
        assert_eq!(top_k_mask(&p, 2), vec![TokenId(0), TokenId(1)]);
        assert_eq!(top_k_mask(&p, 3), vec![TokenId(0), TokenId(1), TokenId(2)]);
        assert_eq!(top_k_mask(&p, 10).len(), 3);
        assert_eq!(top_k_mask(&dist(&[0.4, 0.4, 0.2]), 1), vec![TokenId(0)]);
        assert_eq!(top_k_mask(&dist(&[0.2, 0.4, 0.4]), 1), vec![TokenId(1)]);
    }

    #[test]
    fn apply_cid_worked_example() {
        let p = dist(&[0.5, 0.3, 0.2]);
        let q = dist(&[0.2, 0.3, 0.5]);
        let out = apply_cid(&p, &q, CidParams::new(1.0, 3).unwrap()).unwrap();
        // Frozen from a direct linear-space evaluation: unnormalized
        // (0.5e^0.3, 0.3, 0.2e^-0.3), Z = 1.1230930479.
        for (a, b) in out.as_slice().iter().zip([0.600_955_912, 0.267_119_448, 0.131_924_640]) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }

        let out = apply_cid(&p, &q, CidParams::new(1.0, 2).unwrap()).unwrap();
        for (a, b) in out.as_slice().iter().zip([0.692_285_41, 0.307_714_59, 0.0]) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(out.as_slice()[2], 0.0);
    }

    #[test]
    fn apply_cid_lambda_zero_is_identity() {
        let p = dist(&[0.1, 0.6, 0.3]);
        let q = dist(&[0.7, 0.2, 0.1]);
        let out = apply_cid(&p, &q, CidParams::new(0.0, 3).unwrap()).unwrap();
        for (a, b) in out.as_slice().iter().zip(p.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(argmax_token(&out).unwrap(), argmax_token(&p).unwrap());
    }

    #[test]
    fn apply_cid_zero_mass_errors() {
        let p = ProbDist::new(vec![0.0, 0.0, 0.0]).unwrap();
        let err = apply_cid(&p, &p, CidParams::new(1.0, 2).unwrap()).unwrap_err();
        assert_eq!(err, DistributionError::ZeroMass { top_k: 2 });
    }

    #[test]
    fn apply_cid_excludes_zero_probability_tokens() {
        let p = dist(&[0.0, 1.0, 0.0]);
        let q = dist(&[1.0, 0.0, 0.0]);
        let out = apply_cid(&p, &q, CidParams::new(100.0, 3).unwrap()).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn params_validation() {
        assert!(CidParams::new(-1.0, 5).is_err());
        assert!(CidParams::new(f64::NAN, 5).is_err());
        assert!(CidParams::new(1.0, 0).is_err());
        assert_eq!(CidParams::default().top_k, 50);
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_token(&dist(&[0.1, 0.7, 0.2])).unwrap(), TokenId(1));
        assert_eq!(argmax_token(&dist(&[0.4, 0.4, 0.2])).unwrap(), TokenId(0));
    }

    #[test]
    fn probdist_constructors() {
        assert!(ProbDist::new(vec![]).is_err());
        assert!(ProbDist::new(vec![0.5, -0.1]).is_err());
        assert!(ProbDist::normalized(vec![0.5, 0.4]).is_err());
        let sparse = ProbDist::from_sparse(4, [(TokenId(2), 0.75), (TokenId(0), 0.25)]).unwrap();
        assert_eq!(sparse.as_slice(), &[0.25, 0.0, 0.75, 0.0]);
        assert_eq!(sparse.support().count(), 2);
        assert!(ProbDist::from_sparse(2, [(TokenId(5), 1.0)]).is_err());
    }

    #[test]
    fn alpha_curve_samples() {
        let curve = alpha_curve(&[0.0, 2.0, 5.0]);
        assert_eq!(curve.len(), 3 * ALPHA_CURVE_SAMPLES);
        assert!(curve[..ALPHA_CURVE_SAMPLES].iter().all(|p| p.alpha == 1.0));
        let at = |lambda: f64, v: f64| curve.iter().find(|p| p.lambda == lambda && p.v == v).unwrap().alpha;
        assert!((at(5.0, 1.0) - 148.413_159).abs() < 1e-6);
        assert!((at(2.0, -1.0) - 0.135_335).abs() < 1e-6);
        assert_eq!(at(5.0, 0.0), 1.0);
    }
}
