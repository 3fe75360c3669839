//! Run configuration and the stage functions that chain the modules:
//! neighborhoods → concept generation → composition → selection → scoring.
//!
//! Every stage takes its inputs explicitly and returns plain data, so the
//! command-line tool and the tests drive exactly the same code.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassPromptSet, ClassifierError, ProbMode};
use crate::concepts::prompts::render_prompt;
use crate::concepts::{
    compose, generate_atoms, Composition, ConceptEmbedder, ConceptError, ConceptPool,
    GenerateOptions, LlmClient, LlmClientConfig, PromptStyle, DEFAULT_DEDUP_THRESHOLD,
};
use crate::dpp::{build_kernel_with_jitter, greedy_map, DppError, SelectionReport, DEFAULT_JITTER};
use crate::embedding::{load_container, EmbeddingContainer, EmbeddingError, Role};
use crate::fixtures::{HashEmbedder, LookupEmbedder};
use crate::neighborhoods::{build_neighborhoods, NeighborhoodError, NeighborhoodTable};
use crate::rng::derive_seed;
use crate::soft_trim::{
    default_slope, AggregatorConfig, AggregatorMode, DEFAULT_CAUCHY_GAMMA, DEFAULT_HUBER_DELTA,
    DEFAULT_LAMBDA,
};

const STREAM_GENERATE: u64 = 1;
const STREAM_COMPOSE: u64 = 2;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Neighborhood(#[from] NeighborhoodError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error(transparent)]
    Dpp(#[from] DppError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

/// Which text embedder the run uses for deduplication and prompt encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EmbedderConfig {
    /// Built-in token-hash embedder.
    Hash { dim: usize, seed: u64 },
    /// Precomputed container whose row names are the texts.
    Lookup { path: PathBuf },
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hash { dim: 64, seed: 0 }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Box<dyn ConceptEmbedder>, PipelineError> {
        Ok(match self {
            EmbedderConfig::Hash { dim, seed } => {
                if *dim == 0 {
                    return Err(PipelineError::Config(
                        "embedder dim must be positive".into(),
                    ));
                }
                Box::new(HashEmbedder::new(*dim, *seed))
            }
            EmbedderConfig::Lookup { path } => {
                Box::new(LookupEmbedder::new(load_container(path)?)?)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyleKind {
    #[default]
    Contrastive,
    Descriptive,
}

/// Input and output locations. Relative paths resolve against the config
/// file's directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelinePaths {
    pub classes: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Directory of per-class prompt containers; defaults to `<out>/prompts`.
    pub prompts: Option<PathBuf>,
    pub out: PathBuf,
}

/// One run's settings, read from JSON with every field optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub top_h: usize,
    pub atoms: usize,
    pub per_call: usize,
    pub max_calls: usize,
    pub max_parse_failures: usize,
    pub dedup_threshold: f64,
    pub prompt_style: PromptStyleKind,
    pub atoms_per_prompt: usize,
    pub num_combos: usize,
    pub select_size: usize,
    pub dpp: bool,
    pub dpp_jitter: f64,
    pub aggregator: AggregatorMode,
    pub lambda: f64,
    pub slope: f64,
    pub huber_delta: f64,
    pub cauchy_gamma: f64,
    pub prob_mode: ProbMode,
    pub logit_scale: f64,
    pub embedder: EmbedderConfig,
    pub llm: LlmClientConfig,
    pub paths: PipelinePaths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            top_h: crate::neighborhoods::DEFAULT_NEIGHBORS,
            atoms: crate::concepts::DEFAULT_CAPACITY,
            per_call: crate::concepts::prompts::DEFAULT_PER_CALL,
            max_calls: 20,
            max_parse_failures: 3,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            prompt_style: PromptStyleKind::Contrastive,
            atoms_per_prompt: 3,
            num_combos: 500,
            select_size: 16,
            dpp: true,
            dpp_jitter: DEFAULT_JITTER,
            aggregator: AggregatorMode::SoftTrim,
            lambda: DEFAULT_LAMBDA,
            slope: default_slope(),
            huber_delta: DEFAULT_HUBER_DELTA,
            cauchy_gamma: DEFAULT_CAUCHY_GAMMA,
            prob_mode: ProbMode::Affine,
            logit_scale: default_slope(),
            embedder: EmbedderConfig::default(),
            llm: LlmClientConfig::default(),
            paths: PipelinePaths {
                out: PathBuf::from("out"),
                ..PipelinePaths::default()
            },
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        for p in [
            &mut paths.classes,
            &mut paths.images,
            &mut paths.labels,
            &mut paths.prompts,
            &mut self.llm.fixture_path,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut paths.out);
        if let EmbedderConfig::Lookup { path } = &mut self.embedder {
            fix(path);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let counts = [
            ("top_h", self.top_h),
            ("atoms", self.atoms),
            ("per_call", self.per_call),
            ("max_calls", self.max_calls),
            ("atoms_per_prompt", self.atoms_per_prompt),
            ("num_combos", self.num_combos),
            ("select_size", self.select_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(PipelineError::Config(format!("{name} must be positive")));
            }
        }
        if self.select_size > self.num_combos {
            return Err(PipelineError::Config(format!(
                "select_size {} exceeds num_combos {}",
                self.select_size, self.num_combos
            )));
        }
        if !(self.dedup_threshold > 0.0 && self.dedup_threshold <= 1.0) {
            return Err(PipelineError::Config(
                "dedup_threshold must lie in (0, 1]".into(),
            ));
        }
        if self.dpp_jitter.is_nan()
            || self.dpp_jitter < 0.0
            || self.logit_scale.is_nan()
            || self.logit_scale <= 0.0
        {
            return Err(PipelineError::Config(
                "dpp_jitter must be non-negative and logit_scale positive".into(),
            ));
        }
        self.aggregator_config()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn aggregator_config(&self) -> AggregatorConfig {
        AggregatorConfig {
            mode: self.aggregator,
            lambda: self.lambda,
            slope: self.slope,
            huber_delta: self.huber_delta,
            cauchy_gamma: self.cauchy_gamma,
        }
    }

    /// LLM settings with the run's `per_call` applied.
    pub fn llm_config(&self) -> LlmClientConfig {
        LlmClientConfig {
            per_call: self.per_call,
            ..self.llm.clone()
        }
    }

    pub fn prompts_dir(&self) -> PathBuf {
        self.paths
            .prompts
            .clone()
            .unwrap_or_else(|| self.paths.out.join("prompts"))
    }
}

pub fn neighbors(
    cfg: &PipelineConfig,
    classes: &EmbeddingContainer,
) -> Result<NeighborhoodTable, PipelineError> {
    Ok(build_neighborhoods(classes, cfg.top_h)?)
}

/// Generates one atom pool per class, in class order.
pub fn generate_pools(
    cfg: &PipelineConfig,
    table: &NeighborhoodTable,
    llm: &LlmClient,
    embedder: &dyn ConceptEmbedder,
) -> Result<Vec<ConceptPool>, PipelineError> {
    (0..table.len())
        .map(|i| {
            let style = match cfg.prompt_style {
                PromptStyleKind::Contrastive => PromptStyle::Contrastive {
                    neighbors: table.neighbor_names(i),
                },
                PromptStyleKind::Descriptive => PromptStyle::Descriptive,
            };
            let opts = GenerateOptions {
                capacity: cfg.atoms,
                max_calls: cfg.max_calls,
                per_call: cfg.per_call,
                threshold: cfg.dedup_threshold,
                seed: derive_seed(cfg.seed, &[STREAM_GENERATE, i as u64]),
                max_parse_failures: cfg.max_parse_failures,
            };
            Ok(generate_atoms(
                &table.class_names[i],
                &style,
                llm,
                embedder,
                &opts,
            )?)
        })
        .collect()
}

pub fn compose_pools(
    cfg: &PipelineConfig,
    pools: &[ConceptPool],
) -> Result<Vec<Composition>, PipelineError> {
    pools
        .iter()
        .enumerate()
        .map(|(i, pool)| {
            let seed = derive_seed(cfg.seed, &[STREAM_COMPOSE, i as u64]);
            Ok(compose(pool, cfg.atoms_per_prompt, cfg.num_combos, seed)?)
        })
        .collect()
}

/// Embeds every composite prompt of one class; row names are the concept texts.
pub fn embed_prompts(
    class_name: &str,
    texts: &[String],
    embedder: &dyn ConceptEmbedder,
) -> Result<EmbeddingContainer, PipelineError> {
    let rows = texts
        .iter()
        .map(|t| embedder.embed(&render_prompt(class_name, t)))
        .collect::<Result<Vec<_>, _>>()?;
    if rows.is_empty() {
        return Ok(EmbeddingContainer::empty(embedder.dim(), Role::Prompt)?);
    }
    Ok(EmbeddingContainer::from_rows(
        Role::Prompt,
        texts.to_vec(),
        rows,
        true,
    )?)
}

/// Picks `select_size` prompts per class, by greedy DPP or in sampling order.
///
/// Returns the selection reports and the selected prompt embeddings.
pub fn select_prompts(
    cfg: &PipelineConfig,
    compositions: &[Composition],
    embedder: &dyn ConceptEmbedder,
) -> Result<(Vec<SelectionReport>, Vec<EmbeddingContainer>), PipelineError> {
    let mut reports = Vec::with_capacity(compositions.len());
    let mut containers = Vec::with_capacity(compositions.len());
    for comp in compositions {
        let class = comp
            .composites
            .first()
            .map(|c| c.class_name.clone())
            .ok_or_else(|| PipelineError::Config("composition without composites".into()))?;
        let texts: Vec<String> = comp.composites.iter().map(|c| c.text.clone()).collect();
        let take = cfg.select_size.min(texts.len());
        if take < cfg.select_size {
            log::warn!(
                "{class}: only {} composites for {} slots",
                texts.len(),
                cfg.select_size
            );
        }
        let (report, chosen) = if cfg.dpp {
            let all = embed_prompts(&class, &texts, embedder)?;
            let sel = greedy_map(&build_kernel_with_jitter(&all, cfg.dpp_jitter)?, take)?;
            if sel.stopped_early {
                log::warn!(
                    "{class}: DPP stopped after {} near-duplicate prompts",
                    sel.indices.len()
                );
            }
            let report = SelectionReport::from_selection(&class, cfg.select_size, &sel, &texts);
            (report, all.select(&sel.indices)?)
        } else {
            let report = SelectionReport::first_n(&class, cfg.select_size, &texts);
            (report, embed_prompts(&class, &texts[..take], embedder)?)
        };
        reports.push(report);
        containers.push(chosen);
    }
    Ok((reports, containers))
}

/// Pairs class names with their prompt containers.
pub fn prompt_set(
    class_names: Vec<String>,
    prompts: Vec<EmbeddingContainer>,
) -> Result<ClassPromptSet, PipelineError> {
    Ok(ClassPromptSet::new(class_names, prompts)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.select_size, 16);
        assert_eq!(cfg.num_combos, 500);
        assert_eq!(cfg.aggregator_config(), AggregatorConfig::default());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: PipelineConfig =
            serde_json::from_str(r#"{"seed": 5, "aggregator": "median_only", "dpp": false}"#)
                .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.aggregator, AggregatorMode::MedianOnly);
        assert!(!cfg.dpp);
        assert_eq!(cfg.top_h, 10);
    }

    #[test]
    fn schema_violations_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"top_h": "ten"}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"topH": 3}"#).is_err());
    }

    #[test]
    fn invariants() {
        let bad = PipelineConfig {
            select_size: 600,
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
        let zero = PipelineConfig {
            atoms: 0,
            ..PipelineConfig::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn relative_paths_resolve_against_base() {
        let mut cfg = PipelineConfig::default();
        cfg.paths.classes = Some("c.manifest.json".into());
        cfg.paths.out = "/abs/out".into();
        cfg.resolve_paths(Path::new("/runs/a"));
        assert_eq!(
            cfg.paths.classes.unwrap(),
            Path::new("/runs/a/c.manifest.json")
        );
        assert_eq!(cfg.paths.out, Path::new("/abs/out"));
    }
}
