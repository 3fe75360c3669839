//! Diverse subset selection with a determinantal point process.
//!
//! The kernel is the Gram matrix of unit-norm concept embeddings plus a small
//! diagonal jitter. Selection is greedy MAP inference: each step adds the item
//! with the largest log-determinant gain, computed with incremental Cholesky
//! updates so a run costs `O(n·M²)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{dot, EmbeddingContainer};

/// Diagonal jitter added by [`build_kernel`].
pub const DEFAULT_JITTER: f64 = 1e-8;

/// Tolerance for negative Cholesky pivots caused by rounding.
const PIVOT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DppError {
    #[error("kernel has no items")]
    Empty,
    #[error("items are not normalized")]
    Unnormalized,
    #[error("requested {requested} items from {available}")]
    TooMany { requested: usize, available: usize },
    #[error("index {index} out of range for {n} items")]
    OutOfRange { index: usize, n: usize },
    #[error("index {0} repeated in subset")]
    Repeated(usize),
    #[error("kernel is not positive semi-definite (pivot {pivot} at item {index})")]
    NotPsd { index: usize, pivot: f64 },
    #[error("gram matrix has {found} entries, expected {expected}")]
    Shape { expected: usize, found: usize },
    #[error("gram matrix is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
}

/// Symmetric PSD similarity kernel over `n` items.
#[derive(Debug, Clone, PartialEq)]
pub struct DppKernel {
    n: usize,
    gram: Vec<f64>,
    jitter: f64,
}

impl DppKernel {
    /// Wraps an explicit row-major matrix; `jitter` is added to the diagonal.
    pub fn from_gram(n: usize, mut gram: Vec<f64>, jitter: f64) -> Result<Self, DppError> {
        if n == 0 {
            return Err(DppError::Empty);
        }
        if gram.len() != n * n {
            return Err(DppError::Shape {
                expected: n * n,
                found: gram.len(),
            });
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (gram[i * n + j] - gram[j * n + i]).abs() > 1e-6 {
                    return Err(DppError::Asymmetric(i, j));
                }
            }
            gram[i * n + i] += jitter;
        }
        Ok(Self { n, gram, jitter })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.n + j]
    }
}

/// Gram kernel `K[i][j] = <φ_i, φ_j>` of normalized items, plus jitter.
pub fn build_kernel(items: &EmbeddingContainer) -> Result<DppKernel, DppError> {
    build_kernel_with_jitter(items, DEFAULT_JITTER)
}

pub fn build_kernel_with_jitter(
    items: &EmbeddingContainer,
    jitter: f64,
) -> Result<DppKernel, DppError> {
    if !items.is_normalized() {
        return Err(DppError::Unnormalized);
    }
    let n = items.count();
    if n == 0 {
        return Err(DppError::Empty);
    }
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = dot(items.row(i), items.row(j));
            gram[i * n + j] = v;
            gram[j * n + i] = v;
        }
    }
    DppKernel::from_gram(n, gram, jitter)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DppSelection {
    /// Selected item indices in selection order.
    pub indices: Vec<usize>,
    /// Log-determinant gain of each step.
    pub marginal_gains: Vec<f64>,
    /// Selection ended before the requested size because every remaining
    /// gain fell below the jitter scale.
    pub stopped_early: bool,
}

impl DppSelection {
    /// Log-determinant of the selected principal submatrix.
    pub fn log_det(&self) -> f64 {
        self.marginal_gains.iter().sum()
    }
}

/// Greedy MAP selection of up to `m` items.
///
/// Ties go to the lowest index. Selection stops early once the best remaining
/// conditional variance is at or below ten times the kernel jitter, which is
/// where duplicates of already selected items sit.
pub fn greedy_map(kernel: &DppKernel, m: usize) -> Result<DppSelection, DppError> {
    let n = kernel.n;
    if m > n {
        return Err(DppError::TooMany {
            requested: m,
            available: n,
        });
    }
    let stop_below = 10.0 * kernel.jitter.max(f64::EPSILON);
    // Conditional variance of each item given the current selection, and the
    // rows of the incremental Cholesky factor.
    let mut residual: Vec<f64> = (0..n).map(|i| kernel.get(i, i)).collect();
    let mut factor: Vec<Vec<f64>> = vec![Vec::with_capacity(m); n];
    let mut taken = vec![false; n];
    let mut indices = Vec::with_capacity(m);
    let mut gains = Vec::with_capacity(m);
    let mut stopped_early = false;

    while indices.len() < m {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            if residual[i] < -PIVOT_TOLERANCE {
                return Err(DppError::NotPsd {
                    index: i,
                    pivot: residual[i],
                });
            }
            if best.is_none_or(|b| residual[i] > residual[b]) {
                best = Some(i);
            }
        }
        let Some(j) = best else { break };
        let pivot = residual[j];
        if pivot <= stop_below {
            log::warn!(
                "greedy DPP stopped at {} of {m} items: remaining gains vanish",
                indices.len()
            );
            stopped_early = true;
            break;
        }
        taken[j] = true;
        indices.push(j);
        gains.push(pivot.ln());

        let d = pivot.sqrt();
        let cj = factor[j].clone();
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let proj: f64 = cj.iter().zip(&factor[i]).map(|(a, b)| a * b).sum();
            let e = (kernel.get(j, i) - proj) / d;
            factor[i].push(e);
            residual[i] -= e * e;
        }
    }

    Ok(DppSelection {
        indices,
        marginal_gains: gains,
        stopped_early,
    })
}

/// Log-determinant of the principal submatrix on `subset`, via Cholesky.
///
/// Returns `-inf` when a pivot is not positive. The empty subset has log-det 0.
pub fn log_det(kernel: &DppKernel, subset: &[usize]) -> Result<f64, DppError> {
    let n = kernel.n;
    for (pos, &i) in subset.iter().enumerate() {
        if i >= n {
            return Err(DppError::OutOfRange { index: i, n });
        }
        if subset[..pos].contains(&i) {
            return Err(DppError::Repeated(i));
        }
    }
    let k = subset.len();
    let mut l = vec![0.0; k * k];
    let mut total = 0.0;
    for a in 0..k {
        for b in 0..=a {
            let mut s = kernel.get(subset[a], subset[b]);
            for c in 0..b {
                s -= l[a * k + c] * l[b * k + c];
            }
            if a == b {
                if s <= 0.0 {
                    return Ok(f64::NEG_INFINITY);
                }
                let d = s.sqrt();
                l[a * k + a] = d;
                total += s.ln();
            } else {
                l[a * k + b] = s / l[b * k + b];
            }
        }
    }
    Ok(total)
}

/// Selection report entry for one chosen concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedConcept {
    pub index: usize,
    pub concept_text: String,
    pub marginal_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub class: String,
    pub requested: usize,
    pub selected: Vec<SelectedConcept>,
}

impl SelectionReport {
    pub fn from_selection(
        class: &str,
        requested: usize,
        sel: &DppSelection,
        texts: &[String],
    ) -> Self {
        Self {
            class: class.to_string(),
            requested,
            selected: sel
                .indices
                .iter()
                .zip(&sel.marginal_gains)
                .map(|(&index, &marginal_gain)| SelectedConcept {
                    index,
                    concept_text: texts[index].clone(),
                    marginal_gain,
                })
                .collect(),
        }
    }

    /// The ablation control: the first `requested` items in sampling order.
    pub fn first_n(class: &str, requested: usize, texts: &[String]) -> Self {
        Self {
            class: class.to_string(),
            requested,
            selected: texts
                .iter()
                .take(requested)
                .enumerate()
                .map(|(index, t)| SelectedConcept {
                    index,
                    concept_text: t.clone(),
                    marginal_gain: 0.0,
                })
                .collect(),
        }
    }
}
