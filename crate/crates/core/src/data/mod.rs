//! Datasets: the bundle model, a synthetic confounded-feature generator,
//! file I/O, class splits, few-shot subsampling and batching.

pub(crate) mod io;
mod split;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{gather_rows, Matrix};

pub use io::{load_bundle, load_csv, read_bundle, save_bundle, write_bundle, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use split::{batches, split_source_target, subsample_fszu, Batch, BatchIter, SourceTargetSplit};
pub use synth::{generate_synthetic, generate_synthetic_with_factors, SynthConfig, SynthFactors};

/// Whether a row is available for training or held out for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowRole {
    Train,
    Test,
}

/// How seen-class rows are divided into training and test rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutSpec {
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for HoldoutSpec {
    fn default() -> Self {
        Self {
            test_frac: 0.2,
            seed: 0x5eed,
        }
    }
}

/// Visual features, labels and class semantics with the seen/unseen registry.
///
/// Unseen-class rows are always test rows. Seen-class rows are divided by a
/// [`HoldoutSpec`]; the division is a pure function of the bundle contents,
/// so a bundle reloaded from disk gets the same roles back.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub features: Matrix<f32>,
    pub labels: Vec<u32>,
    /// One row per class id.
    pub semantics: Matrix<f32>,
    pub seen_classes: Vec<u32>,
    pub unseen_classes: Vec<u32>,
    roles: Vec<RowRole>,
    shots: Option<usize>,
}

impl DatasetBundle {
    pub fn new(
        features: Matrix<f32>,
        labels: Vec<u32>,
        semantics: Matrix<f32>,
        seen_classes: Vec<u32>,
        unseen_classes: Vec<u32>,
    ) -> Result<Self> {
        let mut bundle = Self {
            roles: vec![RowRole::Test; labels.len()],
            features,
            labels,
            semantics,
            seen_classes,
            unseen_classes,
            shots: None,
        };
        bundle.validate()?;
        bundle.assign_roles(HoldoutSpec::default())?;
        Ok(bundle)
    }

    fn validate(&self) -> Result<()> {
        if self.features.nrows() != self.labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} labels",
                self.features.nrows(),
                self.labels.len()
            )));
        }
        let n_classes = self.num_classes();
        if self.semantics.nrows() != n_classes {
            return Err(Error::Data(format!(
                "{} semantic rows for {} seen + {} unseen classes",
                self.semantics.nrows(),
                self.seen_classes.len(),
                self.unseen_classes.len()
            )));
        }
        let mut registered = vec![0u8; n_classes];
        for &c in self.seen_classes.iter().chain(&self.unseen_classes) {
            let slot = registered
                .get_mut(c as usize)
                .ok_or_else(|| Error::Data(format!("class id {c} has no semantic row")))?;
            *slot += 1;
            if *slot > 1 {
                return Err(Error::Data(format!("class {c} is registered as both seen and unseen")));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::Data(format!("label {bad} is neither seen nor unseen")));
        }
        for (k, row) in self.semantics.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("semantic row {k} is not finite")));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::Data(format!("semantic row {k} is all zero")));
            }
        }
        if self.seen_classes.is_empty() {
            return Err(Error::Data("no seen classes".into()));
        }
        Ok(())
    }

    /// Recomputes which seen-class rows are held out for testing.
    pub fn assign_roles(&mut self, spec: HoldoutSpec) -> Result<()> {
        if !(0.0..1.0).contains(&spec.test_frac) {
            return Err(Error::Config(format!("test_frac {} outside [0, 1)", spec.test_frac)));
        }
        let mut roles = vec![RowRole::Test; self.labels.len()];
        for &c in &self.seen_classes {
            let mut rows = self.rows_of_class(c);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (u64::from(c) << 32));
            rows.shuffle(&mut rng);
            let n_test = if rows.len() >= 2 {
                ((rows.len() as f64 * spec.test_frac).ceil() as usize).clamp(1, rows.len() - 1)
            } else {
                0
            };
            for (i, &r) in rows.iter().enumerate() {
                roles[r] = if i < n_test { RowRole::Test } else { RowRole::Train };
            }
        }
        self.roles = roles;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.seen_classes.len() + self.unseen_classes.len()
    }

    pub fn num_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn semantic_dim(&self) -> usize {
        self.semantics.ncols()
    }

    pub fn role(&self, row: usize) -> RowRole {
        self.roles[row]
    }

    pub fn is_seen(&self, class: u32) -> bool {
        self.seen_classes.contains(&class)
    }

    pub fn rows_of_class(&self, class: u32) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Training rows (always seen classes) whose label is in `classes`.
    pub fn train_rows(&self, classes: &[u32]) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.roles[i] == RowRole::Train && classes.contains(&self.labels[i]))
            .collect()
    }

    pub fn test_rows(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.roles[i] == RowRole::Test).collect()
    }

    /// `N^s`: training rows of seen classes.
    pub fn n_seen(&self) -> usize {
        self.roles.iter().filter(|&&r| r == RowRole::Train).count()
    }

    /// `N^u`: rows of unseen classes.
    pub fn n_unseen(&self) -> usize {
        self.labels.iter().filter(|&&l| !self.is_seen(l)).count()
    }

    /// `N^f`: training rows after few-shot subsampling, if it happened.
    pub fn n_fszu(&self) -> Option<usize> {
        self.shots.map(|k| k * self.seen_classes.len())
    }

    pub fn shots(&self) -> Option<usize> {
        self.shots
    }

    /// Semantic rows for `classes`, in order.
    pub fn semantics_of(&self, classes: &[u32]) -> Matrix<f32> {
        let idx: Vec<usize> = classes.iter().map(|&c| c as usize).collect();
        gather_rows(&self.semantics, &idx)
    }

    /// Read access restricted to seen-class rows.
    pub fn seen_view(&self) -> SeenView<'_> {
        SeenView { bundle: self }
    }

    /// Keeps only `rows` (in the given order), preserving roles.
    pub(crate) fn retain_rows(&self, rows: &[usize], shots: Option<usize>) -> Self {
        Self {
            features: gather_rows(&self.features, rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            semantics: self.semantics.clone(),
            seen_classes: self.seen_classes.clone(),
            unseen_classes: self.unseen_classes.clone(),
            roles: rows.iter().map(|&r| self.roles[r]).collect(),
            shots,
        }
    }
}

/// Feature access that refuses to touch unseen-class rows.
#[derive(Debug, Clone, Copy)]
pub struct SeenView<'a> {
    bundle: &'a DatasetBundle,
}

impl<'a> SeenView<'a> {
    pub fn bundle(&self) -> &'a DatasetBundle {
        self.bundle
    }

    pub fn features(&self, rows: &[usize]) -> Result<Matrix<f32>> {
        for &r in rows {
            let label = *self
                .bundle
                .labels
                .get(r)
                .ok_or_else(|| Error::Range(format!("row {r} out of range")))?;
            if !self.bundle.is_seen(label) {
                return Err(Error::Leakage(format!("row {r} belongs to unseen class {label}")));
            }
        }
        Ok(gather_rows(&self.bundle.features, rows))
    }

    pub fn labels(&self, rows: &[usize]) -> Vec<u32> {
        rows.iter().map(|&r| self.bundle.labels[r]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn tiny() -> DatasetBundle {
        let features = Array2::from_shape_fn((6, 2), |(i, j)| (i * 2 + j) as f32);
        DatasetBundle::new(
            features,
            vec![0, 0, 0, 1, 1, 2],
            array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            vec![0, 1],
            vec![2],
        )
        .unwrap()
    }

    #[test]
    fn overlapping_registry_is_rejected() {
        let err = DatasetBundle::new(
            Array2::zeros((1, 1)),
            vec![0],
            array![[1.0], [1.0]],
            vec![0, 1],
            vec![1],
        );
        assert!(err.is_err());
    }

    #[test]
    fn zero_semantic_row_is_rejected() {
        let err = DatasetBundle::new(Array2::zeros((1, 1)), vec![0], array![[1.0], [0.0]], vec![0], vec![1]);
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn unseen_rows_are_test_only() {
        let b = tiny();
        assert_eq!(b.role(5), RowRole::Test);
        assert!(b.train_rows(&[2]).is_empty());
        assert_eq!(b.n_unseen(), 1);
        // every seen class with ≥ 2 rows keeps at least one of each role
        for c in [0, 1] {
            let rows = b.rows_of_class(c);
            assert!(rows.iter().any(|&r| b.role(r) == RowRole::Train));
            assert!(rows.iter().any(|&r| b.role(r) == RowRole::Test));
        }
    }

    #[test]
    fn seen_view_refuses_unseen_rows() {
        let b = tiny();
        let view = b.seen_view();
        assert!(view.features(&[0, 3]).is_ok());
        assert!(matches!(view.features(&[5]), Err(Error::Leakage(_))));
    }
}
