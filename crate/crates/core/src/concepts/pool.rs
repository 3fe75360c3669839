use serde::{Deserialize, Serialize};

use super::llm::{CallRecord, LlmClient};
use super::prompts::{parse_concepts, render_contrastive_prompt_n, render_descriptive_prompt_n};
use super::{ConceptEmbedder, ConceptError};
use crate::embedding::dot;
use crate::rng::derive_seed;

/// Target number of atoms per class.
pub const DEFAULT_CAPACITY: usize = 50;
/// Candidates more similar than this to a retained atom are pruned.
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.9;

/// Atomic concepts gathered for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptPool {
    pub class_name: String,
    pub atoms: Vec<String>,
    pub capacity: usize,
    pub call_log: Vec<CallRecord>,
    embeddings: Vec<Vec<f32>>,
}

/// On-disk form of a pool: `{class, atoms}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolExport {
    pub class: String,
    pub atoms: Vec<String>,
}

impl From<PoolExport> for ConceptPool {
    fn from(e: PoolExport) -> Self {
        ConceptPool::from_atoms(e.class, e.atoms)
    }
}

impl ConceptPool {
    pub fn new(class_name: impl Into<String>, capacity: usize) -> Self {
        Self {
            class_name: class_name.into(),
            atoms: Vec::new(),
            capacity,
            call_log: Vec::new(),
            embeddings: Vec::new(),
        }
    }

    /// A pool with fixed atoms, e.g. read back from an export.
    pub fn from_atoms(class_name: impl Into<String>, atoms: Vec<String>) -> Self {
        let capacity = atoms.len();
        Self {
            atoms,
            capacity,
            ..Self::new(class_name, capacity)
        }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.atoms.len() >= self.capacity
    }

    pub fn export(&self) -> PoolExport {
        PoolExport {
            class: self.class_name.clone(),
            atoms: self.atoms.clone(),
        }
    }
}

/// What happened to one candidate in [`dedup_insert`].
#[derive(Debug, Clone, PartialEq)]
pub enum InsertOutcome {
    Inserted,
    /// Too similar to the retained atom at `of`.
    Duplicate {
        of: usize,
        similarity: f64,
    },
    Capacity,
    Empty,
}

/// Embeds each candidate and keeps it when its maximum cosine similarity to
/// the retained atoms is at most `threshold` and the pool has room.
pub fn dedup_insert(
    pool: &mut ConceptPool,
    candidates: &[String],
    embedder: &dyn ConceptEmbedder,
    threshold: f64,
) -> Result<Vec<InsertOutcome>, ConceptError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(ConceptError::InvalidThreshold(threshold));
    }
    if pool.embeddings.len() != pool.atoms.len() {
        pool.embeddings = pool
            .atoms
            .iter()
            .map(|a| embedder.embed(a))
            .collect::<Result<_, _>>()?;
    }
    let mut outcomes = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let text = cand.trim();
        if text.is_empty() {
            outcomes.push(InsertOutcome::Empty);
            continue;
        }
        if pool.is_full() {
            outcomes.push(InsertOutcome::Capacity);
            continue;
        }
        let v = embedder.embed(text)?;
        let nearest = pool
            .embeddings
            .iter()
            .enumerate()
            .map(|(i, e)| (i, dot(&v, e)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match nearest {
            Some((of, similarity)) if similarity > threshold => {
                outcomes.push(InsertOutcome::Duplicate { of, similarity });
            }
            _ => {
                pool.atoms.push(text.to_string());
                pool.embeddings.push(v);
                outcomes.push(InsertOutcome::Inserted);
            }
        }
    }
    Ok(outcomes)
}

/// Which request template drives generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptStyle {
    /// Contrast the class against its hard-negative neighbors.
    Contrastive { neighbors: Vec<String> },
    /// Describe the class alone.
    Descriptive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub capacity: usize,
    pub max_calls: usize,
    pub per_call: usize,
    pub threshold: f64,
    pub seed: u64,
    /// Unparseable replies tolerated before giving up.
    pub max_parse_failures: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            capacity: DEFAULT_CAPACITY,
            max_calls: 20,
            per_call: super::prompts::DEFAULT_PER_CALL,
            threshold: DEFAULT_DEDUP_THRESHOLD,
            seed: 0,
            max_parse_failures: 3,
        }
    }
}

/// Calls the LLM until the pool reaches capacity or the call budget runs out.
///
/// Every call lands in the pool's call log. Unparseable replies are skipped
/// until `max_parse_failures` is exceeded.
pub fn generate_atoms(
    class_name: &str,
    style: &PromptStyle,
    llm: &LlmClient,
    embedder: &dyn ConceptEmbedder,
    opts: &GenerateOptions,
) -> Result<ConceptPool, ConceptError> {
    if opts.capacity == 0 || opts.max_calls == 0 || opts.per_call == 0 {
        return Err(ConceptError::InvalidOption(
            "capacity, max_calls and per_call must be positive".into(),
        ));
    }
    let prompt = match style {
        PromptStyle::Contrastive { neighbors } => {
            render_contrastive_prompt_n(class_name, neighbors, opts.per_call)?
        }
        PromptStyle::Descriptive => render_descriptive_prompt_n(class_name, opts.per_call)?,
    };
    let mut pool = ConceptPool::new(class_name, opts.capacity);
    let mut parse_failures = 0;
    for call in 0..opts.max_calls {
        if pool.is_full() {
            break;
        }
        let seed = derive_seed(opts.seed, &[call as u64]);
        let record = llm.complete(&prompt.system, &prompt.user, Some(seed))?;
        let parsed = parse_concepts(&record.response);
        pool.call_log.push(record);
        match parsed {
            Ok(candidates) => {
                dedup_insert(&mut pool, &candidates, embedder, opts.threshold)?;
            }
            Err(err) => {
                parse_failures += 1;
                log::warn!("{class_name}: skipping unparseable reply ({err})");
                if parse_failures > opts.max_parse_failures {
                    return Err(ConceptError::TooManyParseFailures(parse_failures));
                }
            }
        }
    }
    if !pool.is_full() {
        log::warn!(
            "{class_name}: capacity not reached ({} of {} atoms after {} calls)",
            pool.len(),
            pool.capacity,
            pool.call_log.len()
        );
    }
    Ok(pool)
}
