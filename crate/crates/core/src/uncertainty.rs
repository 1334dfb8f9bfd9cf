//! Consistency-based uncertainty over repeated multi-label responses.
//!
//! A prompt is executed `k` times; each run yields a set of labels. The
//! uncertainty of the prompt is the mean Jaccard distance over all
//! `k(k-1)/2` unordered pairs of runs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::LinkResult;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UncertaintyError {
    #[error("insufficient samples: uncertainty needs at least 2 runs, got {0}")]
    InsufficientSamples(usize),
}

/// What the labels in a family denote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UniverseKind {
    Indicator,
    Variable,
    Link,
}

/// The `k` label sets produced for one prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSetFamily<T: Ord> {
    pub sets: Vec<BTreeSet<T>>,
    pub universe_kind: UniverseKind,
}

impl<T: Ord> LabelSetFamily<T> {
    pub fn new(universe_kind: UniverseKind, sets: Vec<BTreeSet<T>>) -> Self {
        Self { sets, universe_kind }
    }

    pub fn k(&self) -> usize {
        self.sets.len()
    }

    pub fn score(&self) -> Result<f64, UncertaintyError> {
        uncertainty_score(&self.sets)
    }
}

/// Jaccard distance `(|A ∪ B| - |A ∩ B|) / |A ∪ B|`, with `J(∅, ∅) = 0`.
pub fn jaccard_distance<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return 0.0;
    }
    (union - inter) as f64 / union as f64
}

/// Mean pairwise Jaccard distance over the `k` runs.
pub fn uncertainty_score<T: Ord>(sets: &[BTreeSet<T>]) -> Result<f64, UncertaintyError> {
    let k = sets.len();
    if k < 2 {
        return Err(UncertaintyError::InsufficientSamples(k));
    }
    let mut total = 0.0;
    for (i, a) in sets.iter().enumerate() {
        for b in &sets[i + 1..] {
            total += jaccard_distance(a, b);
        }
    }
    let pairs = (k * (k - 1) / 2) as f64;
    Ok(total / pairs)
}

/// Like [`uncertainty_score`], but a single run counts as fully consistent.
pub fn uncertainty_or_zero<T: Ord>(sets: &[BTreeSet<T>]) -> f64 {
    uncertainty_score(sets).unwrap_or(0.0)
}

/// Identity of a link for matching across runs: the ordered (source, target)
/// pair. The relationship text is ignored.
pub fn link_key(link: &LinkResult) -> (String, String) {
    (link.source.key(), link.target.key())
}
