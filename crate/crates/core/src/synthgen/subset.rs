//! Imbalanced train/test subsets with an exact negative:positive ratio.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{DatasetManifest, SplitTag};
use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetSpec {
    /// Negatives per positive.
    pub ratio: usize,
    pub positive_count: usize,
    pub seed: u64,
    pub train_fraction: f64,
}

impl SubsetSpec {
    pub fn new(ratio: usize, positive_count: usize, seed: u64) -> Self {
        Self {
            ratio,
            positive_count,
            seed,
            train_fraction: 0.8,
        }
    }

    /// Few positives against the largest whole-ratio share of the negative
    /// pool available.
    pub fn capped(positive_cap: usize, available_negatives: usize, seed: u64) -> Result<Self> {
        if positive_cap == 0 {
            bail!(Config, "positive cap must be at least 1");
        }
        let ratio = available_negatives / positive_cap;
        Ok(Self::new(ratio, positive_cap, seed))
    }

    pub fn negative_count(&self) -> usize {
        self.ratio * self.positive_count
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio < 1 {
            bail!(Config, "ratio must be at least 1");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            bail!(
                Config,
                "train fraction {} must lie in (0, 1)",
                self.train_fraction
            );
        }
        Ok(())
    }

    fn train_share(&self, n: usize) -> usize {
        (n as f64 * self.train_fraction).round() as usize
    }
}

/// Pool indices of the selected train and test items, each sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Selects positives and `ratio * positives` negatives without replacement
/// and splits each stratum separately.
pub fn select_subset(is_positive: &[bool], spec: &SubsetSpec) -> Result<SubsetIndices> {
    spec.validate()?;
    let mut pos: Vec<usize> = (0..is_positive.len()).filter(|i| is_positive[*i]).collect();
    let mut neg: Vec<usize> = (0..is_positive.len()).filter(|i| !is_positive[*i]).collect();
    let need_neg = spec.negative_count();
    if pos.len() < spec.positive_count || neg.len() < need_neg {
        bail!(
            Data,
            "pool too small: need {} positives and {} negatives, have {} and {} (short by {} and {})",
            spec.positive_count,
            need_neg,
            pos.len(),
            neg.len(),
            spec.positive_count.saturating_sub(pos.len()),
            need_neg.saturating_sub(neg.len())
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    pos.truncate(spec.positive_count);
    neg.truncate(need_neg);

    let (pt, nt) = (spec.train_share(pos.len()), spec.train_share(neg.len()));
    let mut train: Vec<usize> = pos[..pt].iter().chain(&neg[..nt]).copied().collect();
    let mut test: Vec<usize> = pos[pt..].iter().chain(&neg[nt..]).copied().collect();
    train.sort_unstable();
    test.sort_unstable();
    Ok(SubsetIndices { train, test })
}

/// Builds the train and test manifests of one subset.
pub fn build_subsets(
    pool: &DatasetManifest,
    spec: &SubsetSpec,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let flags: Vec<bool> = pool.entries.iter().map(|e| e.is_positive()).collect();
    let idx = select_subset(&flags, spec)?;
    let take = |ids: &[usize], split: SplitTag| {
        let entries = ids
            .iter()
            .map(|i| {
                let mut e = pool.entries[*i].clone();
                e.split = split;
                e
            })
            .collect();
        DatasetManifest::new(entries, split, spec.seed)
    };
    Ok((
        take(&idx.train, SplitTag::Train),
        take(&idx.test, SplitTag::Test),
    ))
}
