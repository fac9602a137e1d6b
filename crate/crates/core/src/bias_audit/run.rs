use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AuditError, NameGroup, Template};
use crate::backend::{cached, ModelBackend, DEFAULT_CACHE_CAPACITY};
use crate::distribution::CidParams;
use crate::engine::{cid_decode, DecodeJob, DecodeLimits};

/// Continuation counts for one `(lambda, direction)` cell.
///
/// `group` is the group whose prompt was decoded, `contrast_group` the group
/// it was contrasted against (unknown when read back from a tally CSV).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditTally {
    pub lambda: f64,
    pub group: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast_group: Option<String>,
    pub counts: BTreeMap<String, usize>,
}

impl AuditTally {
    pub fn new(lambda: f64, group: impl Into<String>) -> Self {
        Self { lambda, group: group.into(), contrast_group: None, counts: BTreeMap::new() }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn add(&mut self, continuation: impl Into<String>, n: usize) {
        *self.counts.entry(continuation.into()).or_insert(0) += n;
    }

    /// Adds `other`'s counts into `self`.
    pub fn merge(&mut self, other: &AuditTally) {
        for (text, &n) in &other.counts {
            self.add(text.clone(), n);
        }
    }
}

/// A name pair whose decode failed and was left out of its tally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub lambda: f64,
    pub group: String,
    pub name: String,
    pub contrast_name: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// Ordered by lambda, then A-direction before B-direction.
    pub tallies: Vec<AuditTally>,
    pub skipped: Vec<SkippedPair>,
}

impl AuditReport {
    /// True when pairs were skipped and nothing decoded.
    pub fn all_failed(&self) -> bool {
        !self.skipped.is_empty() && self.tallies.iter().all(|t| t.total() == 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditOptions {
    pub top_k: usize,
    pub limits: DecodeLimits,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self { top_k: CidParams::DEFAULT_TOP_K, limits: DecodeLimits::default() }
    }
}

struct Job<'a> {
    lambda_index: usize,
    a_direction: bool,
    name: &'a str,
    contrast_name: &'a str,
    input: String,
    contrast: String,
}

/// Decodes every name pair in both directions at every lambda.
///
/// For `(a, b)` in `A x B`, the A-direction tally counts `CID(x_a; x_b)` and
/// the B-direction tally counts `CID(x_b; x_a)`. Continuations are trimmed of
/// surrounding whitespace. Failed decodes are reported in
/// [`AuditReport::skipped`] and do not stop the run.
pub fn run_pairwise_audit<B: ModelBackend + ?Sized>(
    group_a: &NameGroup,
    group_b: &NameGroup,
    template: &Template,
    lambdas: &[f64],
    backend: &B,
    options: AuditOptions,
) -> Result<AuditReport, AuditError> {
    group_a.validate()?;
    group_b.validate()?;
    if lambdas.is_empty() {
        return Err(AuditError::InvalidLambdas("no lambda values given".into()));
    }
    if let Some(bad) = lambdas.iter().find(|l| !l.is_finite() || **l < 0.0) {
        return Err(AuditError::InvalidLambdas(format!("lambda must be finite and >= 0, got {bad}")));
    }
    if options.limits.max_new_tokens == 0 {
        return Err(AuditError::InvalidLambdas("max_new_tokens must be >= 1".into()));
    }
    CidParams::new(0.0, options.top_k).map_err(|e| AuditError::InvalidLambdas(e.to_string()))?;

    let prompts = |g: &NameGroup| -> Result<Vec<String>, AuditError> {
        g.names.iter().map(|n| template.expand(n, g.gender)).collect()
    };
    let (xa, xb) = (prompts(group_a)?, prompts(group_b)?);

    let mut jobs = Vec::new();
    for (lambda_index, _) in lambdas.iter().enumerate() {
        for (i, a) in group_a.names.iter().enumerate() {
            for (j, b) in group_b.names.iter().enumerate() {
                jobs.push(Job {
                    lambda_index,
                    a_direction: true,
                    name: a,
                    contrast_name: b,
                    input: xa[i].clone(),
                    contrast: xb[j].clone(),
                });
                jobs.push(Job {
                    lambda_index,
                    a_direction: false,
                    name: b,
                    contrast_name: a,
                    input: xb[j].clone(),
                    contrast: xa[i].clone(),
                });
            }
        }
    }

    let shared = cached(backend, DEFAULT_CACHE_CAPACITY);
    let outcomes: Vec<Result<String, String>> = jobs
        .par_iter()
        .map(|job| {
            let params = CidParams { lambda: lambdas[job.lambda_index], top_k: options.top_k };
            let decode = DecodeJob::new(job.input.as_str(), job.contrast.as_str(), params).with_limits(options.limits);
            cid_decode(&shared, &decode).map(|r| r.generated_text.trim().to_string()).map_err(|e| e.to_string())
        })
        .collect();

    let mut tallies = Vec::with_capacity(lambdas.len() * 2);
    for &lambda in lambdas {
        for (group, contrast) in [(group_a, group_b), (group_b, group_a)] {
            let mut t = AuditTally::new(lambda, group.label.clone());
            t.contrast_group = Some(contrast.label.clone());
            tallies.push(t);
        }
    }
    let mut skipped = Vec::new();
    for (job, outcome) in jobs.iter().zip(outcomes) {
        let slot = job.lambda_index * 2 + usize::from(!job.a_direction);
        match outcome {
            Ok(text) => tallies[slot].add(text, 1),
            Err(error) => skipped.push(SkippedPair {
                lambda: lambdas[job.lambda_index],
                group: tallies[slot].group.clone(),
                name: job.name.to_string(),
                contrast_name: job.contrast_name.to_string(),
                error,
            }),
        }
    }
    Ok(AuditReport { tallies, skipped })
}
