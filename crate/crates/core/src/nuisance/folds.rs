use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TateError};
use crate::model::{Dataset, TreatmentId, TrialId};
use crate::scalar::Scalar;

/// Stratified K-fold assignment: every (trial, arm) cell of size `m` puts
/// `⌊m/K⌋` or `⌈m/K⌉` members in each fold. Deterministic given `seed`.
pub fn assign_folds<T: Scalar>(dataset: &Dataset<T>, n_folds: usize, seed: u64) -> Result<Vec<usize>> {
    if n_folds < 2 {
        return Err(TateError::Config(format!("n_folds = {n_folds}, need at least 2")));
    }
    let mut cells: BTreeMap<(TrialId, TreatmentId), Vec<usize>> = BTreeMap::new();
    for (i, o) in dataset.observations.iter().enumerate() {
        cells.entry((o.s, o.a)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0; dataset.n()];
    for ((k, a), mut members) in cells {
        if members.len() < n_folds {
            return Err(TateError::Config(format!(
                "cell (trial {k}, arm {a}) has {} observations, fewer than {n_folds} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for (pos, i) in members.into_iter().enumerate() {
            fold_of[i] = pos % n_folds;
        }
    }
    Ok(fold_of)
}
