//! Concept-guided Bayesian zero-shot classification over precomputed
//! embeddings.
//!
//! A class is scored by marginalizing over a set of concept prompts instead
//! of a single label prompt. The crate covers the whole pipeline short of
//! running the vision-language encoder:
//!
//! * [`embedding`]: the on-disk container format and cosine similarity.
//! * [`neighborhoods`]: hard-negative class neighborhoods.
//! * [`concepts`]: LLM concept generation with record/replay fixtures,
//!   deduplicated atom pools, and disjunctive composition.
//! * [`dpp`]: greedy MAP selection of a diverse prompt subset.
//! * [`soft_trim`]: robust aggregation of concept scores.
//! * [`classifier`]: per-image scoring and evaluation.
//! * [`simulator`], [`diagnostics`]: Monte-Carlo checks and shape statistics.
//! * [`fixtures`], [`pipeline`]: offline stand-ins and stage wiring.

pub mod classifier;
pub mod concepts;
pub mod diagnostics;
pub mod dpp;
pub mod embedding;
pub mod fixtures;
pub mod neighborhoods;
pub mod pipeline;
pub mod rng;
pub mod simulator;
pub mod soft_trim;

/// Runs the guide's code blocks as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/embeddings.md")]
    mod embeddings {}
    #[doc = include_str!("../../../book/src/concepts.md")]
    mod concepts {}
    #[doc = include_str!("../../../book/src/dpp.md")]
    mod dpp {}
    #[doc = include_str!("../../../book/src/soft-trim.md")]
    mod soft_trim {}
    #[doc = include_str!("../../../book/src/classification.md")]
    mod classification {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
