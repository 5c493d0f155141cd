use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetBundle, RowRole};
use crate::error::{Error, Result};
use crate::numkernel::{gather_rows, Matrix};

/// Per-epoch partition of the seen classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceTargetSplit {
    pub source_classes: Vec<u32>,
    pub target_classes: Vec<u32>,
    pub seed: u64,
}

/// Picks `n_target` seen classes uniformly at random as targets.
pub fn split_source_target(bundle: &DatasetBundle, n_target: usize, seed: u64) -> Result<SourceTargetSplit> {
    let s = bundle.seen_classes.len();
    if n_target == 0 || n_target >= s {
        return Err(Error::Config(format!("n_target = {n_target} must be in 1..{s}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, s, n_target).into_vec();
    picked.sort_unstable();
    let target_classes: Vec<u32> = picked.iter().map(|&i| bundle.seen_classes[i]).collect();
    let source_classes = bundle
        .seen_classes
        .iter()
        .copied()
        .filter(|c| !target_classes.contains(c))
        .collect();
    Ok(SourceTargetSplit {
        source_classes,
        target_classes,
        seed,
    })
}

/// Keeps exactly `k` training rows per seen class; test rows are untouched.
pub fn subsample_fszu(bundle: &DatasetBundle, k: usize, seed: u64) -> Result<DatasetBundle> {
    if k == 0 {
        return Err(Error::Config("few-shot subsampling needs k ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; bundle.num_rows()];
    for (r, slot) in keep.iter_mut().enumerate() {
        *slot = bundle.role(r) == RowRole::Test;
    }
    for &c in &bundle.seen_classes {
        let rows = bundle.train_rows(&[c]);
        if rows.len() < k {
            return Err(Error::Data(format!(
                "class {c} has {} training rows, fewer than k = {k}",
                rows.len()
            )));
        }
        let mut chosen = sample(&mut rng, rows.len(), k).into_vec();
        chosen.sort_unstable();
        for i in chosen {
            keep[rows[i]] = true;
        }
    }
    let rows: Vec<usize> = (0..bundle.num_rows()).filter(|&r| keep[r]).collect();
    Ok(bundle.retain_rows(&rows, Some(k)))
}

/// One minibatch of training rows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub rows: Vec<usize>,
    pub features: Matrix<f32>,
    pub labels: Vec<u32>,
}

/// Shuffled pass over the training rows of some classes; the final short
/// batch is dropped.
#[derive(Debug)]
pub struct BatchIter<'a> {
    bundle: &'a DatasetBundle,
    order: Vec<usize>,
    batch_size: usize,
    at: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let end = self.at + self.batch_size;
        if end > self.order.len() {
            return None;
        }
        let rows = self.order[self.at..end].to_vec();
        self.at = end;
        Some(Batch {
            features: gather_rows(&self.bundle.features, &rows),
            labels: rows.iter().map(|&r| self.bundle.labels[r]).collect(),
            rows,
        })
    }
}

pub fn batches<'a>(
    bundle: &'a DatasetBundle,
    class_filter: &[u32],
    batch_size: usize,
    seed: u64,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be ≥ 1".into()));
    }
    if class_filter.is_empty() {
        return Err(Error::Data("batch class filter is empty".into()));
    }
    let mut order = bundle.train_rows(class_filter);
    if order.is_empty() {
        return Err(Error::Data(format!("no training rows for classes {class_filter:?}")));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(BatchIter {
        bundle,
        order,
        batch_size,
        at: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use std::collections::HashSet;

    fn bundle() -> DatasetBundle {
        generate_synthetic(&SynthConfig {
            samples_per_class: 30,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn single_target() {
        let b = bundle();
        let split = split_source_target(&b, 1, 4).unwrap();
        assert_eq!(split.target_classes.len(), 1);
        assert_eq!(split.source_classes.len(), 11);
        assert!(split.source_classes.iter().all(|c| !split.target_classes.contains(c)));
    }

    #[test]
    fn too_many_targets() {
        let b = bundle();
        assert!(matches!(split_source_target(&b, 12, 0), Err(Error::Config(_))));
        assert!(matches!(split_source_target(&b, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn every_class_becomes_a_target() {
        let b = bundle();
        let mut seen = HashSet::new();
        for epoch in 0..1000 {
            let split = split_source_target(&b, 1, epoch).unwrap();
            seen.extend(split.target_classes);
        }
        assert_eq!(seen.len(), 12);
    }

    #[test]
    fn fszu_keeps_k_train_rows() {
        let b = bundle();
        for k in [10, 5, 2] {
            let f = subsample_fszu(&b, k, 1).unwrap();
            for &c in &f.seen_classes {
                assert_eq!(f.train_rows(&[c]).len(), k);
            }
            assert_eq!(f.n_seen(), k * 12);
            assert_eq!(f.n_fszu(), Some(k * 12));
            assert_eq!(f.test_rows().len(), b.test_rows().len());
            assert_eq!(f.n_unseen(), b.n_unseen());
        }
    }

    #[test]
    fn fszu_full_class_is_noop() {
        let b = bundle();
        let k = b.train_rows(&[0]).len();
        let f = subsample_fszu(&b, k, 3).unwrap();
        assert_eq!(f.features, b.features);
        assert!(matches!(subsample_fszu(&b, k + 1, 3), Err(Error::Data(_))));
    }

    #[test]
    fn fszu_is_deterministic() {
        let b = bundle();
        assert_eq!(subsample_fszu(&b, 5, 8).unwrap(), subsample_fszu(&b, 5, 8).unwrap());
    }

    #[test]
    fn batch_audit() {
        let b = bundle();
        let filter = [0u32, 3, 7];
        let mut seen_rows = HashSet::new();
        for batch in batches(&b, &filter, 8, 5).unwrap() {
            assert_eq!(batch.labels.len(), 8);
            assert!(batch.labels.iter().all(|l| filter.contains(l)));
            for r in batch.rows {
                assert_eq!(b.role(r), RowRole::Train);
                assert!(seen_rows.insert(r), "row {r} repeated within the pass");
            }
        }
        let available = b.train_rows(&filter).len();
        assert_eq!(seen_rows.len(), available / 8 * 8);
        assert!(matches!(batches(&b, &[], 8, 0), Err(Error::Data(_))));
    }
}
