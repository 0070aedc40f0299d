//! Scan-level k-fold splits.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::Candidate;

pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl FoldSplit {
    pub fn train_candidates<'a>(&self, candidates: &'a [Candidate]) -> Vec<&'a Candidate> {
        candidates.iter().filter(|c| self.train.contains(&c.series_id)).collect()
    }

    pub fn test_candidates<'a>(&self, candidates: &'a [Candidate]) -> Vec<&'a Candidate> {
        candidates.iter().filter(|c| self.test.contains(&c.series_id)).collect()
    }
}

/// Per-fold train/test partitions of the series set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<FoldSplit>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Fails if any series contributes candidates to both sides of a fold,
    /// or if the test sets do not partition the series.
    pub fn check_no_leakage(&self, candidates: &[Candidate]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, f) in self.folds.iter().enumerate() {
            if let Some(s) = f.train.intersection(&f.test).next() {
                return Err(Error::InvalidArgument(format!("fold {i}: series `{s}` in train and test")));
            }
            let train: BTreeSet<&str> = f.train_candidates(candidates).iter().map(|c| c.series_id.as_str()).collect();
            let test: BTreeSet<&str> = f.test_candidates(candidates).iter().map(|c| c.series_id.as_str()).collect();
            if let Some(s) = train.intersection(&test).next() {
                return Err(Error::InvalidArgument(format!("fold {i}: candidates of `{s}` leak across the split")));
            }
            for s in &f.test {
                if !seen.insert(s.clone()) {
                    return Err(Error::InvalidArgument(format!("series `{s}` is tested in more than one fold")));
                }
            }
        }
        Ok(())
    }
}

/// Shuffles the series with `seed` and cuts them into `k` test sets whose
/// sizes differ by at most one; each fold trains on the rest.
pub fn make_folds(series_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    let unique: BTreeSet<&String> = series_ids.iter().collect();
    if k == 0 || k > unique.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot make {k} folds from {} series",
            unique.len()
        )));
    }
    let mut ids: Vec<String> = unique.into_iter().cloned().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let test: BTreeSet<String> = ids[start..start + len].iter().cloned().collect();
        let train = ids.iter().filter(|s| !test.contains(*s)).cloned().collect();
        folds.push(FoldSplit { train, test });
        start += len;
    }
    Ok(FoldPlan { folds })
}
