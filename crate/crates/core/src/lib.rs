//! Contrastive input decoding.
//!
//! Given an input `x` and a contrasting input `x'`, decoding picks tokens that
//! are likely under `x` and comparatively unlikely under `x'`. The crate is
//! organised bottom-up:
//!
//! * [`distribution`]: probability vectors and the contrastive transform.
//! * [`backend`]: the model interface, table models, the HTTP client and a cache.
//! * [`engine`]: greedy and contrastive decoding loops with per-step traces.
//! * [`perturbation_lab`]: perturbations, lambda sweeps and per-type summaries.
//! * [`bias_audit`]: name-substitution audits, tallies and biased fractions.
//! * [`fixtures`]: small table models and data used by tests and examples.
//!
//! ```
//! use cid_core::distribution::CidParams;
//! use cid_core::engine::{contrast_pair, DecodeLimits};
//!
//! let model = cid_core::fixtures::sweep_model();
//! let (forward, _reverse) = contrast_pair(
//!     &model,
//!     "The boss told her she will not receive a promotion this year because",
//!     "The boss told him he will not receive a promotion this year because",
//!     CidParams::new(10.0, CidParams::DEFAULT_TOP_K).unwrap(),
//!     DecodeLimits::new(8),
//! )
//! .unwrap();
//! println!("{}", forward.generated_text);
//! ```

pub mod backend;
pub mod bias_audit;
pub mod distribution;
pub mod engine;
pub mod fixtures;
pub mod perturbation_lab;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/distribution.md")]
    mod distribution {}
    #[doc = include_str!("../../../book/src/backends.md")]
    mod backends {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/perturbation_lab.md")]
    mod perturbation_lab {}
    #[doc = include_str!("../../../book/src/bias_audit.md")]
    mod bias_audit {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
