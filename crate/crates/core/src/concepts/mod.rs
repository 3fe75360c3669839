//! Concept synthesis: contrastive LLM prompting, deduplicated atom pools, and
//! disjunctive composition of atoms into prompt-sized concepts.

mod compose;
pub mod llm;
mod pool;
pub mod prompts;

use thiserror::Error;

pub use compose::{binomial, compose, CompositeConcept, Composition, CONNECTIVE};
pub use llm::{LlmClient, LlmClientConfig, LlmError, LlmMode};
pub use pool::{
    dedup_insert, generate_atoms, ConceptPool, GenerateOptions, InsertOutcome, PoolExport,
    PromptStyle, DEFAULT_CAPACITY, DEFAULT_DEDUP_THRESHOLD,
};
pub use prompts::{
    parse_concepts, render_contrastive_prompt, render_descriptive_prompt, render_prompt,
    RenderedPrompt,
};

#[derive(Debug, Error)]
pub enum ConceptError {
    #[error("class name is empty")]
    EmptyClassName,
    #[error("class {0:?} has no neighbors to contrast against")]
    NoNeighbors(String),
    #[error("reply has no concept block: {raw:?}")]
    Parse { raw: String },
    #[error("concept block is empty: {raw:?}")]
    NoConcepts { raw: String },
    #[error("too many unparseable replies ({0})")]
    TooManyParseFailures(usize),
    #[error("embedding {text:?} failed: {message}")]
    Embed { text: String, message: String },
    #[error("dedup threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("cannot draw {atoms_per} atoms from a pool of {pool}")]
    PoolTooSmall { atoms_per: usize, pool: usize },
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// Text-to-embedding provider used for deduplication and prompt encoding.
///
/// Implementations must return unit-norm vectors of length [`dim`](Self::dim).
pub trait ConceptEmbedder: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>, ConceptError>;
}
