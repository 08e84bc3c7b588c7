use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::triplet::DataKind;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, Stream};

/// Input resolution and batch size used for one data kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchGroup {
    pub kind: DataKind,
    /// `(height, width)`.
    pub resolution: (usize, usize),
    pub batch_size: usize,
}

impl BatchGroup {
    pub fn validate(&self, max_stride: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{} batch_size must be >= 1", self.kind)));
        }
        let (h, w) = self.resolution;
        if h == 0 || w == 0 || h % max_stride != 0 || w % max_stride != 0 {
            return Err(Error::Config(format!(
                "{} resolution {h}x{w} is not divisible by stride {max_stride}",
                self.kind
            )));
        }
        Ok(())
    }
}

/// One iteration: all sample indices come from the same kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledBatch {
    pub kind: DataKind,
    pub indices: Vec<usize>,
}

/// Interleaved single-kind batches covering every sample of every kind once.
pub fn make_batch_schedule(
    groups: &[BatchGroup],
    epoch_counts: &BTreeMap<DataKind, usize>,
    rng_seed: u64,
) -> Result<Vec<ScheduledBatch>> {
    make_batch_schedule_with_repeats(groups, epoch_counts, &BTreeMap::new(), rng_seed)
}

/// Like [`make_batch_schedule`], but each kind's data is visited
/// `repeats[kind]` times (default 1) per epoch, shifting the mix of
/// iteration types.
///
/// Sample order within a kind is shuffled; the order of kinds across
/// iterations is a seeded shuffle of the multiset of iteration labels, so each
/// kind's share of iterations is proportional to its batch count.
pub fn make_batch_schedule_with_repeats(
    groups: &[BatchGroup],
    epoch_counts: &BTreeMap<DataKind, usize>,
    repeats: &BTreeMap<DataKind, usize>,
    rng_seed: u64,
) -> Result<Vec<ScheduledBatch>> {
    let mut per_kind: BTreeMap<DataKind, std::vec::IntoIter<Vec<usize>>> = BTreeMap::new();
    let mut labels = Vec::new();
    for (&kind, &count) in epoch_counts {
        let group = groups
            .iter()
            .find(|g| g.kind == kind)
            .ok_or_else(|| Error::Config(format!("no batch group configured for {kind}")))?;
        if group.batch_size == 0 {
            return Err(Error::Config(format!("{kind} batch_size must be >= 1")));
        }
        let reps = repeats.get(&kind).copied().unwrap_or(1);
        let mut rng = stream_rng(rng_seed, Stream::Schedule, derive_seed(&[kind as u64]));
        let mut order = Vec::with_capacity(count * reps);
        for _ in 0..reps {
            let mut idx: Vec<usize> = (0..count).collect();
            idx.shuffle(&mut rng);
            order.extend(idx);
        }
        let batches: Vec<Vec<usize>> = order.chunks(group.batch_size).map(<[usize]>::to_vec).collect();
        labels.extend(std::iter::repeat_n(kind, batches.len()));
        per_kind.insert(kind, batches.into_iter());
    }
    let mut rng = stream_rng(rng_seed, Stream::Schedule, u64::MAX);
    labels.shuffle(&mut rng);
    Ok(labels
        .into_iter()
        .map(|kind| ScheduledBatch {
            kind,
            indices: per_kind
                .get_mut(&kind)
                .and_then(Iterator::next)
                .expect("one batch per label"),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn groups() -> Vec<BatchGroup> {
        vec![
            BatchGroup { kind: DataKind::Detection, resolution: (64, 64), batch_size: 2 },
            BatchGroup { kind: DataKind::ImageText, resolution: (32, 32), batch_size: 4 },
        ]
    }

    #[test]
    fn two_kinds_interleave_by_count() {
        let counts = BTreeMap::from([(DataKind::Detection, 4), (DataKind::ImageText, 8)]);
        let s = make_batch_schedule(&groups(), &counts, 5).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.iter().filter(|b| b.kind == DataKind::Detection).count(), 2);
        assert_eq!(s.iter().filter(|b| b.kind == DataKind::ImageText).count(), 2);
        assert_eq!(s, make_batch_schedule(&groups(), &counts, 5).unwrap());
    }

    #[test]
    fn single_kind_is_contiguous() {
        let counts = BTreeMap::from([(DataKind::Detection, 5)]);
        let s = make_batch_schedule(&groups(), &counts, 0).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.last().unwrap().indices.len(), 1);
    }

    #[test]
    fn missing_group_is_an_error() {
        let counts = BTreeMap::from([(DataKind::Grounding, 3)]);
        assert!(make_batch_schedule(&groups(), &counts, 0).is_err());
    }

    #[test]
    fn repeats_multiply_coverage() {
        let counts = BTreeMap::from([(DataKind::Detection, 4)]);
        let reps = BTreeMap::from([(DataKind::Detection, 3)]);
        let s = make_batch_schedule_with_repeats(&groups(), &counts, &reps, 0).unwrap();
        let mut seen = vec![0; 4];
        s.iter().flat_map(|b| &b.indices).for_each(|i| seen[*i] += 1);
        assert_eq!(seen, vec![3; 4]);
    }

    #[test]
    fn group_validation() {
        let g = BatchGroup { kind: DataKind::Detection, resolution: (60, 64), batch_size: 2 };
        assert!(g.validate(16).is_err());
        assert!(groups()[0].validate(16).is_ok());
    }

    proptest! {
        #[test]
        fn every_sample_appears_once(det in 0usize..30, pairs in 0usize..50, seed in 0u64..100) {
            let counts = BTreeMap::from([(DataKind::Detection, det), (DataKind::ImageText, pairs)]);
            let s = make_batch_schedule(&groups(), &counts, seed).unwrap();
            for (kind, n) in [(DataKind::Detection, det), (DataKind::ImageText, pairs)] {
                let mut idx: Vec<usize> = s.iter().filter(|b| b.kind == kind).flat_map(|b| b.indices.clone()).collect();
                idx.sort();
                prop_assert_eq!(idx, (0..n).collect::<Vec<_>>());
            }
        }
    }
}
