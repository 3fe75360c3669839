//! Concept-marginalized zero-shot classification.
//!
//! Each class owns a set of concept prompt embeddings. An image's similarity
//! to every prompt of a class forms that class's score set; the configured
//! aggregator turns it into the class score, and the prediction is the argmax
//! with ties going to the lowest class index.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{dot, sim_to_prob, EmbeddingContainer, EmbeddingError};
use crate::soft_trim::{aggregate, AggregatorConfig, ScoreSet, SoftTrimError, SoftTrimEstimate};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("dimension mismatch: image {image}, prompts {prompts}")]
    DimMismatch { image: usize, prompts: usize },
    #[error("class {0} has no prompts")]
    NoPrompts(usize),
    #[error("{names} class names for {sets} prompt sets")]
    ClassCount { names: usize, sets: usize },
    #[error("label {label} out of range for {classes} classes (image {image})")]
    LabelOutOfRange {
        image: usize,
        label: usize,
        classes: usize,
    },
    #[error("{labels} labels for {images} images")]
    LabelCount { labels: usize, images: usize },
    #[error("prompt set {0} is not normalized")]
    Unnormalized(usize),
    #[error("labels file {path}: {message}")]
    Labels { path: PathBuf, message: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Aggregate(#[from] SoftTrimError),
}

/// How per-prompt similarities become class probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbMode {
    /// Map each similarity with `(s + 1) / 2`, then aggregate.
    #[default]
    Affine,
    /// Aggregate raw similarities per class, then softmax across classes
    /// with the logit scale.
    SoftmaxOverClasses,
}

impl std::str::FromStr for ProbMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "affine" => Ok(ProbMode::Affine),
            "softmax_over_classes" | "softmax" => Ok(ProbMode::SoftmaxOverClasses),
            other => Err(format!("unknown prob mode {other:?}")),
        }
    }
}

/// Per-class concept prompt embeddings. Prompt counts may differ by class.
#[derive(Debug, Clone)]
pub struct ClassPromptSet {
    class_names: Vec<String>,
    prompts: Vec<EmbeddingContainer>,
}

impl ClassPromptSet {
    pub fn new(
        class_names: Vec<String>,
        prompts: Vec<EmbeddingContainer>,
    ) -> Result<Self, ClassifierError> {
        if class_names.len() != prompts.len() {
            return Err(ClassifierError::ClassCount {
                names: class_names.len(),
                sets: prompts.len(),
            });
        }
        let dim = prompts.first().map(EmbeddingContainer::dim).unwrap_or(0);
        for (i, p) in prompts.iter().enumerate() {
            if p.is_empty() {
                return Err(ClassifierError::NoPrompts(i));
            }
            if p.dim() != dim {
                return Err(ClassifierError::DimMismatch {
                    image: dim,
                    prompts: p.dim(),
                });
            }
            if !p.is_normalized() {
                return Err(ClassifierError::Unnormalized(i));
            }
        }
        Ok(Self {
            class_names,
            prompts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn prompts(&self, class: usize) -> &EmbeddingContainer {
        &self.prompts[class]
    }

    /// Concept texts of one class (the prompt container's row names).
    pub fn concept_texts(&self, class: usize) -> &[String] {
        self.prompts[class].names()
    }

    pub fn dim(&self) -> usize {
        self.prompts
            .first()
            .map(EmbeddingContainer::dim)
            .unwrap_or(0)
    }

    /// Raw cosine similarities of one image to every prompt, per class.
    pub fn similarities(&self, image: &[f32]) -> Result<Vec<Vec<f64>>, ClassifierError> {
        if image.len() != self.dim() {
            return Err(ClassifierError::DimMismatch {
                image: image.len(),
                prompts: self.dim(),
            });
        }
        Ok(self
            .prompts
            .iter()
            .map(|p| p.rows().map(|row| dot(image, row)).collect())
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub image_name: String,
    pub class_scores: Vec<f64>,
    pub predicted: usize,
    pub per_class_rho: Vec<f64>,
    pub per_class_median: Vec<f64>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax(values: &[f64], scale: f64) -> Vec<f64> {
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| ((v - top) * scale).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Aggregates already-computed per-class score sets.
pub fn aggregate_classes(
    per_class: &[Vec<f64>],
    cfg: &AggregatorConfig,
) -> Result<Vec<SoftTrimEstimate>, ClassifierError> {
    per_class
        .iter()
        .map(|s| Ok(aggregate(&ScoreSet::new(s.clone())?, cfg)?))
        .collect()
}

/// Scores one image against every class.
pub fn score_image(
    image_name: &str,
    image: &[f32],
    prompts: &ClassPromptSet,
    cfg: &AggregatorConfig,
    prob_mode: ProbMode,
    logit_scale: f64,
) -> Result<ClassificationRecord, ClassifierError> {
    let (record, _) =
        score_image_detailed(image_name, image, prompts, cfg, prob_mode, logit_scale)?;
    Ok(record)
}

/// Like [`score_image`], also returning each class's full estimate.
pub fn score_image_detailed(
    image_name: &str,
    image: &[f32],
    prompts: &ClassPromptSet,
    cfg: &AggregatorConfig,
    prob_mode: ProbMode,
    logit_scale: f64,
) -> Result<(ClassificationRecord, Vec<SoftTrimEstimate>), ClassifierError> {
    let mut sims = prompts.similarities(image)?;
    if prob_mode == ProbMode::Affine {
        for class in &mut sims {
            for s in class.iter_mut() {
                *s = sim_to_prob(*s);
            }
        }
    }
    let estimates = aggregate_classes(&sims, cfg)?;
    let aggregated: Vec<f64> = estimates.iter().map(|e| e.mu_hat).collect();
    let class_scores = match prob_mode {
        ProbMode::Affine => aggregated,
        ProbMode::SoftmaxOverClasses => softmax(&aggregated, logit_scale),
    };
    let record = ClassificationRecord {
        image_name: image_name.to_string(),
        predicted: argmax(&class_scores),
        class_scores,
        per_class_rho: estimates.iter().map(|e| e.rho_raw).collect(),
        per_class_median: estimates.iter().map(|e| e.median).collect(),
    };
    Ok((record, estimates))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub top1_accuracy: f64,
    pub correct: usize,
    pub n_images: usize,
    /// Accuracy per true class; 0 for classes without images.
    pub per_class_accuracy: Vec<f64>,
    pub per_class_support: Vec<usize>,
    /// Contamination estimate averaged over every (image, class) pair.
    pub mean_rho: f64,
}

/// Classifies every image in parallel; records keep input order.
pub fn classify_all(
    images: &EmbeddingContainer,
    prompts: &ClassPromptSet,
    cfg: &AggregatorConfig,
    prob_mode: ProbMode,
    logit_scale: f64,
) -> Result<Vec<ClassificationRecord>, ClassifierError> {
    if images.dim() != prompts.dim() {
        return Err(ClassifierError::DimMismatch {
            image: images.dim(),
            prompts: prompts.dim(),
        });
    }
    (0..images.count())
        .into_par_iter()
        .map(|i| {
            score_image(
                &images.names()[i],
                images.row(i),
                prompts,
                cfg,
                prob_mode,
                logit_scale,
            )
        })
        .collect()
}

/// Builds the report from finished records.
pub fn summarize(
    records: &[ClassificationRecord],
    labels: &[usize],
    num_classes: usize,
) -> Result<EvaluationReport, ClassifierError> {
    if labels.len() != records.len() {
        return Err(ClassifierError::LabelCount {
            labels: labels.len(),
            images: records.len(),
        });
    }
    let mut hits = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    let mut rho_sum = 0.0;
    let mut rho_n = 0usize;
    for (i, (r, &label)) in records.iter().zip(labels).enumerate() {
        if label >= num_classes {
            return Err(ClassifierError::LabelOutOfRange {
                image: i,
                label,
                classes: num_classes,
            });
        }
        support[label] += 1;
        if r.predicted == label {
            hits[label] += 1;
        }
        rho_sum += r.per_class_rho.iter().sum::<f64>();
        rho_n += r.per_class_rho.len();
    }
    let correct: usize = hits.iter().sum();
    let n = records.len();
    Ok(EvaluationReport {
        top1_accuracy: if n == 0 {
            0.0
        } else {
            correct as f64 / n as f64
        },
        correct,
        n_images: n,
        per_class_accuracy: hits
            .iter()
            .zip(&support)
            .map(|(&h, &s)| if s == 0 { 0.0 } else { h as f64 / s as f64 })
            .collect(),
        per_class_support: support,
        mean_rho: if rho_n == 0 {
            0.0
        } else {
            rho_sum / rho_n as f64
        },
    })
}

/// Scores every image and summarizes top-1 accuracy against `labels`.
pub fn evaluate(
    images: &EmbeddingContainer,
    labels: &[usize],
    prompts: &ClassPromptSet,
    cfg: &AggregatorConfig,
    prob_mode: ProbMode,
    logit_scale: f64,
) -> Result<(Vec<ClassificationRecord>, EvaluationReport), ClassifierError> {
    if labels.len() != images.count() {
        return Err(ClassifierError::LabelCount {
            labels: labels.len(),
            images: images.count(),
        });
    }
    if let Some((image, &label)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l >= prompts.num_classes())
    {
        return Err(ClassifierError::LabelOutOfRange {
            image,
            label,
            classes: prompts.num_classes(),
        });
    }
    let records = classify_all(images, prompts, cfg, prob_mode, logit_scale)?;
    let report = summarize(&records, labels, prompts.num_classes())?;
    Ok((records, report))
}

/// Writes `{image_name: class_index}` as JSON.
pub fn write_labels(
    path: impl AsRef<Path>,
    images: &EmbeddingContainer,
    labels: &[usize],
) -> Result<(), ClassifierError> {
    let path = path.as_ref();
    let err = |message: String| ClassifierError::Labels {
        path: path.to_path_buf(),
        message,
    };
    if labels.len() != images.count() {
        return Err(ClassifierError::LabelCount {
            labels: labels.len(),
            images: images.count(),
        });
    }
    let map: BTreeMap<&str, usize> = images
        .names()
        .iter()
        .map(String::as_str)
        .zip(labels.iter().copied())
        .collect();
    let json = serde_json::to_string_pretty(&map).map_err(|e| err(e.to_string()))?;
    fs::write(path, json + "\n").map_err(|e| err(e.to_string()))
}

/// Reads a labels JSON and orders it by the image container's rows.
pub fn read_labels(
    path: impl AsRef<Path>,
    images: &EmbeddingContainer,
) -> Result<Vec<usize>, ClassifierError> {
    let path = path.as_ref();
    let err = |message: String| ClassifierError::Labels {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let map: BTreeMap<String, usize> =
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    images
        .names()
        .iter()
        .map(|n| {
            map.get(n)
                .copied()
                .ok_or_else(|| err(format!("no label for image {n:?}")))
        })
        .collect()
}
