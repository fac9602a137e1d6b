//! Measuring how strongly an input perturbation changes model behaviour.
//!
//! For a pair `(x, x')` the contrast strength `lambda` is swept over a grid;
//! at each value both directions `CID(x; x', lambda)` and `CID(x'; x, lambda)`
//! are decoded and the two continuations (each prefixed with `x`) are scored
//! with a [`SimilarityProvider`]. The perturbation's strength `lambda*` is the
//! smallest grid value at which the similarity falls below a threshold `tau`:
//! small values mean the perturbation matters a lot, `lambda* = 0` means plain
//! greedy decoding already diverges, and [`LambdaStar::NotReached`] means the
//! grid was not enough to pull the continuations apart.

mod aggregate;
mod perturb;
mod similarity;
mod sweep;

use thiserror::Error;

use crate::engine::DecodeError;

pub use aggregate::{
    aggregate_by_type, quantile, read_curve_csv, read_results_jsonl, read_summary_csv, write_curve_csv,
    write_results_jsonl, write_summary_csv, TypeSummary,
};
pub use perturb::{perturb, PerturbationTables, PerturbationType, PerturbedPair};
pub use similarity::{EmbeddingService, SimilarityConfig, SimilarityError, SimilarityProvider, TokenOverlap};
pub use sweep::{
    lambda_star, lambda_sweep, mean_curve_from_results, mean_similarity_curve, read_pairs_jsonl, sweep_pairs,
    ContinuationPair, CurvePoint, LambdaGrid, LambdaStar, LambdaStarResult, PrefixMode, SweepOptions,
    DEFAULT_GRID, DEFAULT_TAU,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabError {
    #[error("text is empty")]
    EmptyText,
    #[error("no eligible site for a {kind} perturbation in {text:?}")]
    NotApplicable { kind: PerturbationType, text: String },
    #[error("unknown perturbation type {0:?}")]
    UnknownType(String),
    #[error("original and perturbed text are identical: {0:?}")]
    IdenticalPair(String),
    #[error("invalid lambda grid: {0}")]
    InvalidGrid(String),
    #[error("invalid threshold tau = {0}")]
    InvalidTau(f64),
    #[error("sweep record has {sims} similarities for {grid} grid points")]
    SimsLength { sims: usize, grid: usize },
    #[error("decoding failed at lambda = {lambda}: {source}")]
    Decode {
        lambda: f64,
        #[source]
        source: DecodeError,
    },
    #[error("similarity failed at lambda = {lambda}: {source}")]
    Similarity {
        lambda: f64,
        #[source]
        source: SimilarityError,
    },
    #[error("pair {index}: {source}")]
    Pair {
        index: usize,
        #[source]
        source: Box<LabError>,
    },
    #[error("no pairs given")]
    NoPairs,
    #[error("malformed input: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}
