//! k-fold partitions.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Record id to fold index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_count: usize,
    pub assignments: BTreeMap<String, usize>,
}

/// Sorts the ids, shuffles them with `seed` and deals them round-robin, so
/// fold sizes differ by at most one.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || ids.len() < k {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} records into {k} folds",
            ids.len()
        )));
    }
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        let mut seen = BTreeSet::new();
        let dup = ids.iter().find(|id| !seen.insert(*id)).expect("duplicate exists");
        return Err(Error::DuplicateId(dup.clone()));
    }
    let mut order: Vec<&String> = unique.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignments = order
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i % k))
        .collect();
    Ok(FoldPlan {
        fold_count: k,
        assignments,
    })
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    pub fn heldout_ids(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn train_ids(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.fold_count];
        for &f in self.assignments.values() {
            s[f] += 1;
        }
        s
    }
}
