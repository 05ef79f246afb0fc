use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use super::{ViewBatch, ViewSource};
use crate::error::{Error, Result};
use crate::seed;

/// Seeded order of the train split for one epoch, cut into consecutive
/// batches of `batch_size`. The last batch may be short.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    order: Vec<usize>,
    batch_size: usize,
}

impl EpochPlan {
    pub fn new(train: &[usize], batch_size: usize, epoch_seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > train.len() {
            return Err(Error::invalid(format!(
                "batch size {batch_size} must be in 1..={} (train split size)",
                train.len()
            )));
        }
        let mut order = train.to_vec();
        order.shuffle(&mut seed::stream(epoch_seed, "epoch", 0));
        Ok(EpochPlan { order, batch_size })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Ids of batch `t`, or `None` once the epoch is exhausted.
    pub fn batch_ids(&self, t: usize) -> Option<&[usize]> {
        let start = t.checked_mul(self.batch_size)?;
        if start >= self.order.len() {
            return None;
        }
        Some(&self.order[start..(start + self.batch_size).min(self.order.len())])
    }
}

/// Batch `t` of the epoch identified by `epoch_seed`; `Ok(None)` marks epoch end.
/// Augmenting sources get a per-batch seed derived from `(epoch_seed, t)`.
pub fn next_batch(source: &dyn ViewSource, t: usize, batch_size: usize, epoch_seed: u64) -> Result<Option<ViewBatch>> {
    let plan = EpochPlan::new(&source.split().train, batch_size, epoch_seed)?;
    match plan.batch_ids(t) {
        None => Ok(None),
        Some(ids) => source
            .views(ids, Some(seed::derive_seed(epoch_seed, "batch-augment", t as u64)))
            .map(Some),
    }
}

/// Hex SHA-256 of the batch's sample ids, used to show that runs saw identical batches.
pub fn batch_hash(ids: &[usize]) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update((*id as u64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_multiview, SyntheticConfig};

    #[test]
    fn full_batch_holds_every_train_id_once() {
        let d = gen_synthetic_multiview(&SyntheticConfig::default()).unwrap();
        let n = d.split.train.len();
        let b = next_batch(&d, 0, n, 3).unwrap().unwrap();
        let mut ids = b.ids.clone();
        ids.sort_unstable();
        assert_eq!(ids, d.split.train);
        assert!(next_batch(&d, 1, n, 3).unwrap().is_none());
    }

    #[test]
    fn batches_partition_the_train_split() {
        let train: Vec<usize> = (100..170).collect();
        let plan = EpochPlan::new(&train, 16, 9).unwrap();
        assert_eq!(plan.num_batches(), 5);
        let mut seen: Vec<usize> = (0..).map_while(|t| plan.batch_ids(t)).flatten().copied().collect();
        assert_eq!(seen.len(), 70);
        seen.sort_unstable();
        assert_eq!(seen, train);
        assert_eq!(plan.batch_ids(4).unwrap().len(), 6);
    }

    #[test]
    fn fixed_seed_replays_and_different_seed_reshuffles() {
        let train: Vec<usize> = (0..50).collect();
        let a = EpochPlan::new(&train, 10, 1).unwrap();
        assert_eq!(a, EpochPlan::new(&train, 10, 1).unwrap());
        assert_ne!(a, EpochPlan::new(&train, 10, 2).unwrap());
    }

    #[test]
    fn oversized_batch_is_rejected() {
        assert!(EpochPlan::new(&[1, 2, 3], 4, 0).is_err());
        assert!(EpochPlan::new(&[1, 2, 3], 0, 0).is_err());
    }

    #[test]
    fn hash_depends_on_order() {
        assert_eq!(batch_hash(&[1, 2]), batch_hash(&[1, 2]));
        assert_ne!(batch_hash(&[1, 2]), batch_hash(&[2, 1]));
        assert_eq!(batch_hash(&[]).len(), 64);
    }
}
