use std::collections::HashSet;

use itertools::Itertools;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{ConceptError, ConceptPool};
use crate::rng;

/// Joins the atoms of one composite.
pub const CONNECTIVE: &str = " or ";

/// A disjunction of distinct atoms from one pool.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompositeConcept {
    #[serde(rename = "class")]
    pub class_name: String,
    /// Ascending, distinct pool indices.
    pub atom_indices: Vec<usize>,
    pub text: String,
}

/// Output of [`compose`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub composites: Vec<CompositeConcept>,
    /// Every possible combination was used before reaching the request.
    pub exhausted: bool,
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

fn make(pool: &ConceptPool, mut idx: Vec<usize>) -> CompositeConcept {
    idx.sort_unstable();
    let text = idx.iter().map(|&i| pool.atoms[i].as_str()).join(CONNECTIVE);
    CompositeConcept {
        class_name: pool.class_name.clone(),
        atom_indices: idx,
        text,
    }
}

/// Samples `num_combos` distinct combinations of `atoms_per` distinct atoms.
///
/// Combinations are drawn uniformly and redrawn on repeats. When the request
/// covers every possible combination, all of them are returned in shuffled
/// order and `exhausted` is set. Output order is the sampling order and is
/// fixed by `seed`.
pub fn compose(
    pool: &ConceptPool,
    atoms_per: usize,
    num_combos: usize,
    seed: u64,
) -> Result<Composition, ConceptError> {
    let n = pool.len();
    if atoms_per == 0 || num_combos == 0 {
        return Err(ConceptError::InvalidOption(
            "atoms_per and num_combos must be positive".into(),
        ));
    }
    if atoms_per > n {
        return Err(ConceptError::PoolTooSmall { atoms_per, pool: n });
    }
    let total = binomial(n, atoms_per);
    let mut rng = rng::stream(seed, &[]);

    // Dense requests: enumerate and shuffle instead of rejection sampling.
    if total <= 4 * num_combos as u128 {
        let mut all: Vec<Vec<usize>> = (0..n).combinations(atoms_per).collect();
        all.shuffle(&mut rng);
        let exhausted = total <= num_combos as u128;
        if exhausted {
            log::warn!(
                "{}: only {total} combinations of {atoms_per} atoms exist; returning all",
                pool.class_name
            );
        }
        all.truncate(num_combos);
        return Ok(Composition {
            composites: all.into_iter().map(|idx| make(pool, idx)).collect(),
            exhausted,
        });
    }

    let mut seen = HashSet::with_capacity(num_combos);
    let mut composites = Vec::with_capacity(num_combos);
    while composites.len() < num_combos {
        let mut idx = index::sample(&mut rng, n, atoms_per).into_vec();
        idx.sort_unstable();
        if seen.insert(idx.clone()) {
            composites.push(make(pool, idx));
        }
    }
    Ok(Composition {
        composites,
        exhausted: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n: usize) -> ConceptPool {
        ConceptPool::from_atoms("beagle", (0..n).map(|i| format!("atom{i}")).collect())
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(50, 3), 19600);
        assert_eq!(binomial(3, 3), 1);
        assert_eq!(binomial(2, 3), 0);
        assert_eq!(binomial(5, 0), 1);
    }

    #[test]
    fn five_hundred_distinct_triples() {
        let c = compose(&pool(50), 3, 500, 9).unwrap();
        assert_eq!(c.composites.len(), 500);
        assert!(!c.exhausted);
        let sets: HashSet<_> = c
            .composites
            .iter()
            .map(|c| c.atom_indices.clone())
            .collect();
        assert_eq!(sets.len(), 500);
        for comp in &c.composites {
            assert_eq!(comp.atom_indices.len(), 3);
            assert!(comp.atom_indices.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn exhaustion() {
        let c = compose(&pool(3), 3, 10, 1).unwrap();
        assert_eq!(c.composites.len(), 1);
        assert!(c.exhausted);
        assert_eq!(c.composites[0].text, "atom0 or atom1 or atom2");
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            compose(&pool(20), 3, 40, 5).unwrap(),
            compose(&pool(20), 3, 40, 5).unwrap()
        );
        assert_ne!(
            compose(&pool(20), 3, 40, 5).unwrap(),
            compose(&pool(20), 3, 40, 6).unwrap()
        );
    }

    #[test]
    fn single_atom_has_no_connective() {
        let c = compose(&pool(4), 1, 2, 0).unwrap();
        assert!(c.composites.iter().all(|c| !c.text.contains(" or ")));
    }

    #[test]
    fn too_many_atoms_per() {
        assert!(matches!(
            compose(&pool(2), 3, 1, 0),
            Err(ConceptError::PoolTooSmall { .. })
        ));
    }
}
