//! Hard-negative neighborhoods: for each class, the most similar other
//! classes by class-name embedding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_sim, EmbeddingContainer, EmbeddingError};

/// Neighborhood size used when none is configured.
pub const DEFAULT_NEIGHBORS: usize = 10;

#[derive(Debug, Error)]
pub enum NeighborhoodError {
    #[error("need at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("neighborhood size must be at least 1")]
    ZeroSize,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodTable {
    pub class_names: Vec<String>,
    /// Per class, neighbor indices ordered by decreasing similarity.
    pub neighbors: Vec<Vec<usize>>,
    pub similarities: Vec<Vec<f32>>,
    /// Set when the requested size exceeded `K - 1`.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborEntry {
    pub name: String,
    pub cosine: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborReport {
    pub class: String,
    pub neighbors: Vec<NeighborEntry>,
}

impl NeighborhoodTable {
    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    /// Neighbor class names of class `i`, most similar first.
    pub fn neighbor_names(&self, i: usize) -> Vec<String> {
        self.neighbors[i]
            .iter()
            .map(|&j| self.class_names[j].clone())
            .collect()
    }

    pub fn report(&self) -> Vec<NeighborReport> {
        (0..self.len())
            .map(|i| NeighborReport {
                class: self.class_names[i].clone(),
                neighbors: self.neighbors[i]
                    .iter()
                    .zip(&self.similarities[i])
                    .map(|(&j, &cosine)| NeighborEntry {
                        name: self.class_names[j].clone(),
                        cosine,
                    })
                    .collect(),
            })
            .collect()
    }

    /// Rebuilds a table from its JSON report.
    pub fn from_report(report: &[NeighborReport]) -> Option<Self> {
        let class_names: Vec<String> = report.iter().map(|r| r.class.clone()).collect();
        let mut neighbors = Vec::with_capacity(report.len());
        let mut similarities = Vec::with_capacity(report.len());
        for r in report {
            let idx: Option<Vec<usize>> = r
                .neighbors
                .iter()
                .map(|n| class_names.iter().position(|c| *c == n.name))
                .collect();
            neighbors.push(idx?);
            similarities.push(r.neighbors.iter().map(|n| n.cosine).collect());
        }
        Some(Self {
            class_names,
            neighbors,
            similarities,
            clamped: false,
        })
    }
}

/// Finds the `h` most similar other classes for every class.
///
/// Ties are broken by lower class index. If `h > K - 1` every other class is
/// returned and the table is marked `clamped`.
pub fn build_neighborhoods(
    classes: &EmbeddingContainer,
    h: usize,
) -> Result<NeighborhoodTable, NeighborhoodError> {
    let k = classes.count();
    if k < 2 {
        return Err(NeighborhoodError::TooFewClasses(k));
    }
    if h == 0 {
        return Err(NeighborhoodError::ZeroSize);
    }
    let clamped = h > k - 1;
    if clamped {
        log::warn!(
            "neighborhood size {h} exceeds {} other classes; using all",
            k - 1
        );
    }
    let take = h.min(k - 1);
    let sims = cosine_sim(classes, classes)?;

    let mut neighbors = Vec::with_capacity(k);
    let mut similarities = Vec::with_capacity(k);
    for i in 0..k {
        let row = sims.row(i);
        let mut order: Vec<usize> = (0..k).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order.truncate(take);
        similarities.push(order.iter().map(|&j| row[j]).collect());
        neighbors.push(order);
    }
    Ok(NeighborhoodTable {
        class_names: classes.names().to_vec(),
        neighbors,
        similarities,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Role;

    fn container(rows: Vec<Vec<f32>>) -> EmbeddingContainer {
        let names = (0..rows.len()).map(|i| format!("c{i}")).collect();
        let rows = rows
            .into_iter()
            .map(|mut r| {
                crate::embedding::normalize_in_place(&mut r);
                r
            })
            .collect();
        EmbeddingContainer::from_rows(Role::Class, names, rows, true).unwrap()
    }

    #[test]
    fn nearest_is_most_similar() {
        let c = container(vec![vec![1.0, 0.0], vec![0.9, 0.436], vec![0.0, 1.0]]);
        let t = build_neighborhoods(&c, 1).unwrap();
        assert_eq!(t.neighbors[0], vec![1]);
        assert!(!t.clamped);
    }

    #[test]
    fn two_classes_pair_up() {
        let c = container(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let t = build_neighborhoods(&c, 1).unwrap();
        assert_eq!(t.neighbors, vec![vec![1], vec![0]]);
    }

    #[test]
    fn oversize_request_is_clamped() {
        let c = container(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
            vec![0.0, 1.0, 1.0],
        ]);
        let t = build_neighborhoods(&c, 10).unwrap();
        assert!(t.clamped);
        assert!(t.neighbors.iter().all(|n| n.len() == 4));
    }

    #[test]
    fn ties_prefer_lower_index() {
        let c = container(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]);
        let t = build_neighborhoods(&c, 1).unwrap();
        assert_eq!(t.neighbors[0], vec![1]);
    }

    #[test]
    fn errors() {
        let one = container(vec![vec![1.0, 0.0]]);
        assert!(matches!(
            build_neighborhoods(&one, 1),
            Err(NeighborhoodError::TooFewClasses(1))
        ));
        let two = container(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(
            build_neighborhoods(&two, 0),
            Err(NeighborhoodError::ZeroSize)
        ));
    }

    #[test]
    fn report_round_trip() {
        let c = container(vec![vec![1.0, 0.0], vec![0.9, 0.436], vec![0.0, 1.0]]);
        let t = build_neighborhoods(&c, 2).unwrap();
        let back = NeighborhoodTable::from_report(&t.report()).unwrap();
        assert_eq!(back.neighbors, t.neighbors);
        assert_eq!(back.similarities, t.similarities);
    }
}
