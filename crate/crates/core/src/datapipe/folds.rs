use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

/// Disjoint video-id folds for cross-validation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub seed: u64,
    pub folds: Vec<Vec<String>>,
}

/// Sorts the ids, shuffles them with `seed` and deals them round-robin into
/// `k` folds, so fold sizes differ by at most one.
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<FoldSpec, DataError> {
    if k < 2 || ids.len() < k {
        return Err(DataError::Invalid(format!("cannot split {} ids into {k} folds", ids.len())));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(DataError::Invalid(format!("duplicate video id {}", w[0])));
    }
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in sorted.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    folds.iter_mut().for_each(|f| f.sort());
    Ok(FoldSpec { seed, folds })
}

impl FoldSpec {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Training ids (all other folds) and test ids (fold `i`).
    pub fn train_test(&self, i: usize) -> Result<(Vec<String>, Vec<String>), DataError> {
        let test = self
            .folds
            .get(i)
            .ok_or_else(|| DataError::Invalid(format!("fold {i} out of range for {} folds", self.k())))?
            .clone();
        let mut train: Vec<String> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        train.sort();
        Ok((train, test))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("fold spec serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self, DataError> {
        let spec: Self = toml::from_str(s).map_err(|e| DataError::Manifest(e.to_string()))?;
        let mut all: Vec<&String> = spec.folds.iter().flatten().collect();
        let n = all.len();
        all.sort();
        all.dedup();
        if all.len() != n {
            return Err(DataError::Manifest("folds are not disjoint".into()));
        }
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_toml()).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?)
    }
}
