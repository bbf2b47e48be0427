//! Labeled tabular data: the evolving training set, its balanced view,
//! splitting, trimming, and synthetic generators.

mod io;
mod standardize;
mod synth;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use io::{load_dataset, parse_dataset, parse_rows, save_dataset, write_dataset, LoadOptions};
pub use standardize::Standardizer;
pub use synth::{
    sine_curve_point, sine_margin, synth_gaussian_clusters, synth_sine_toy, GaussianClusterSpec,
    SINE_T_RANGE, SINE_Y_RANGE,
};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    /// Canonical `{-1, +1}` encoding.
    pub fn sign(self) -> i8 {
        match self {
            Label::Normal => -1,
            Label::Anomalous => 1,
        }
    }

    /// Binary target for cross-entropy: normal 0, anomalous 1.
    pub fn target(self) -> f64 {
        match self {
            Label::Normal => 0.0,
            Label::Anomalous => 1.0,
        }
    }

    pub fn from_sign(v: f64) -> Option<Label> {
        if v == -1.0 || v == 0.0 {
            Some(Label::Normal)
        } else if v == 1.0 {
            Some(Label::Anomalous)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Original,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Label,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: Label) -> Self {
        Self { features, label }
    }
}

/// Ordered labeled samples sharing one feature dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<Sample>,
    provenance: Vec<Provenance>,
    feature_dim: usize,
    n_anomalous: usize,
}

impl Dataset {
    pub fn empty(feature_dim: usize) -> Self {
        Self {
            samples: Vec::new(),
            provenance: Vec::new(),
            feature_dim,
            n_anomalous: 0,
        }
    }

    /// All samples are marked [`Provenance::Original`].
    pub fn from_samples(feature_dim: usize, samples: Vec<Sample>) -> Result<Self> {
        let n = samples.len();
        Self::with_provenance(feature_dim, samples, vec![Provenance::Original; n])
    }

    pub fn with_provenance(
        feature_dim: usize,
        samples: Vec<Sample>,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        if samples.len() != provenance.len() {
            return Err(Error::Shape("one provenance flag per sample required".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(Error::Shape(format!(
                    "sample {i} has {} features, expected {feature_dim}",
                    s.features.len()
                )));
            }
            if let Some(j) = s.features.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} feature {j} is not finite"
                )));
            }
        }
        let n_anomalous = samples.iter().filter(|s| s.label == Label::Anomalous).count();
        Ok(Self {
            samples,
            provenance,
            feature_dim,
            n_anomalous,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn count(&self, label: Label) -> usize {
        match label {
            Label::Anomalous => self.n_anomalous,
            Label::Normal => self.samples.len() - self.n_anomalous,
        }
    }

    pub fn n_normal(&self) -> usize {
        self.count(Label::Normal)
    }

    pub fn n_anomalous(&self) -> usize {
        self.count(Label::Anomalous)
    }

    pub fn indices_of(&self, label: Label) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.samples[i].label == label)
            .collect()
    }

    /// Indices of samples appended by [`Dataset::append_generated`].
    pub fn generated_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.provenance[i] == Provenance::Generated)
            .collect()
    }

    pub fn features_of(&self, label: Label) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .filter(|s| s.label == label)
            .map(|s| s.features.clone())
            .collect()
    }

    /// Feature matrix (`len × feature_dim`).
    pub fn feature_matrix(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * self.feature_dim);
        for s in &self.samples {
            data.extend_from_slice(&s.features);
        }
        Tensor::from_vec(self.len(), self.feature_dim, data)
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Samples at `idx`, in that order, keeping provenance.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let samples = idx.iter().map(|&i| self.samples[i].clone()).collect();
        let provenance = idx.iter().map(|&i| self.provenance[i]).collect();
        Dataset::with_provenance(self.feature_dim, samples, provenance)
            .expect("subset of a valid dataset is valid")
    }

    /// Concatenation preserving provenance flags.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if other.feature_dim != self.feature_dim {
            return Err(Error::Shape(format!(
                "cannot concatenate {}-d and {}-d datasets",
                self.feature_dim, other.feature_dim
            )));
        }
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        let mut provenance = self.provenance.clone();
        provenance.extend(other.provenance.iter().copied());
        Dataset::with_provenance(self.feature_dim, samples, provenance)
    }

    /// Returns a new dataset with `new_samples` appended as generated anomalies.
    ///
    /// Appended labels are forced to anomalous regardless of their input label.
    pub fn append_generated(&self, new_samples: Vec<Sample>) -> Result<Dataset> {
        for (i, s) in new_samples.iter().enumerate() {
            if s.features.len() != self.feature_dim {
                return Err(Error::Shape(format!(
                    "generated sample {i} has {} features, expected {}",
                    s.features.len(),
                    self.feature_dim
                )));
            }
        }
        let mut samples = self.samples.clone();
        let mut provenance = self.provenance.clone();
        for s in new_samples {
            samples.push(Sample::new(s.features, Label::Anomalous));
            provenance.push(Provenance::Generated);
        }
        Dataset::with_provenance(self.feature_dim, samples, provenance)
    }

    /// Stratified split: each class is shuffled with `seed` and its first
    /// `floor(n · train_fraction)` members go to the training part. Both parts
    /// keep the input order.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "train fraction {train_fraction} outside (0, 1)"
            )));
        }
        let mut rng = rng::seeded(seed);
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for label in [Label::Normal, Label::Anomalous] {
            let mut idx = self.indices_of(label);
            if idx.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "class {label:?} has {} members; at least 2 required to split",
                    idx.len()
                )));
            }
            idx.shuffle(&mut rng);
            let n_train = (idx.len() as f64 * train_fraction).floor() as usize;
            train_idx.extend_from_slice(&idx[..n_train]);
            test_idx.extend_from_slice(&idx[n_train..]);
        }
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        Ok((self.subset(&train_idx), self.subset(&test_idx)))
    }
}

/// A dataset with equally many normal and anomalous samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedDataset {
    data: Dataset,
    balance_count: usize,
}

impl BalancedDataset {
    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn into_dataset(self) -> Dataset {
        self.data
    }

    /// Per-class count `j`.
    pub fn balance_count(&self) -> usize {
        self.balance_count
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Keeps the whole minority class and a seeded uniform subset of the majority
/// class of the same size. Original and generated samples are treated alike.
pub fn trim_balance(ds: &Dataset, seed: u64) -> Result<BalancedDataset> {
    let n_norm = ds.n_normal();
    let n_anom = ds.n_anomalous();
    if n_norm == 0 {
        return Err(Error::EmptyClass("normal"));
    }
    if n_anom == 0 {
        return Err(Error::EmptyClass("anomalous"));
    }
    let j = n_norm.min(n_anom);
    if n_norm == n_anom {
        return Ok(BalancedDataset {
            data: ds.clone(),
            balance_count: j,
        });
    }
    let (majority, minority) = if n_norm > n_anom {
        (Label::Normal, Label::Anomalous)
    } else {
        (Label::Anomalous, Label::Normal)
    };
    let mut keep = ds.indices_of(minority);
    let mut pool = ds.indices_of(majority);
    let mut rng = rng::seeded(seed);
    pool.shuffle(&mut rng);
    keep.extend_from_slice(&pool[..j]);
    keep.sort_unstable();
    Ok(BalancedDataset {
        data: ds.subset(&keep),
        balance_count: j,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn toy(n_norm: usize, n_anom: usize) -> Dataset {
        let mut samples = Vec::new();
        for i in 0..n_norm {
            samples.push(Sample::new(vec![i as f64, 0.5], Label::Normal));
        }
        for i in 0..n_anom {
            samples.push(Sample::new(vec![-(i as f64), 3.0], Label::Anomalous));
        }
        Dataset::from_samples(2, samples).unwrap()
    }

    #[test]
    fn stratified_split_counts() {
        let ds = toy(100, 10);
        let (train, test) = ds.split(0.4, 7).unwrap();
        assert_eq!((train.n_normal(), train.n_anomalous()), (40, 4));
        assert_eq!((test.n_normal(), test.n_anomalous()), (60, 6));
        let again = ds.split(0.4, 7).unwrap();
        assert_eq!(again.0, train);
        assert_eq!(again.1, test);
    }

    #[test]
    fn split_rejects_bad_fraction_and_tiny_class() {
        let ds = toy(10, 5);
        assert!(ds.split(0.0, 1).is_err());
        assert!(ds.split(1.0, 1).is_err());
        assert!(toy(10, 1).split(0.5, 1).is_err());
    }

    #[test]
    fn trim_keeps_minority_and_subsets_majority() {
        let ds = toy(100, 30);
        let bal = trim_balance(&ds, 3).unwrap();
        assert_eq!(bal.balance_count(), 30);
        assert_eq!(bal.dataset().n_normal(), 30);
        assert_eq!(bal.dataset().n_anomalous(), 30);
        let originals: Vec<_> = ds.samples().to_vec();
        for s in bal.dataset().samples() {
            assert!(originals.contains(s));
        }
        assert_eq!(trim_balance(&ds, 3).unwrap(), bal);
    }

    #[test]
    fn trim_on_balanced_is_identity() {
        let ds = toy(50, 50);
        assert_eq!(trim_balance(&ds, 9).unwrap().dataset(), &ds);
    }

    #[test]
    fn trim_rejects_empty_class() {
        assert!(matches!(trim_balance(&toy(5, 0), 0), Err(Error::EmptyClass(_))));
    }

    #[test]
    fn trim_can_drop_generated_anomalies() {
        let ds = toy(3, 2)
            .append_generated(vec![Sample::new(vec![9.0, 9.0], Label::Normal); 4])
            .unwrap();
        let bal = trim_balance(&ds, 1).unwrap();
        assert_eq!(bal.dataset().n_anomalous(), 3);
        assert_eq!(bal.dataset().n_normal(), 3);
    }

    #[test]
    fn append_generated_bookkeeping() {
        let ds = toy(7, 3);
        assert_eq!(ds.append_generated(vec![]).unwrap(), ds);
        let new: Vec<_> = (0..5)
            .map(|i| Sample::new(vec![i as f64, 1.0], Label::Normal))
            .collect();
        let grown = ds.append_generated(new).unwrap();
        assert_eq!(grown.len(), 15);
        assert_eq!(grown.n_anomalous(), 8);
        assert_eq!(grown.generated_indices(), (10..15).collect::<Vec<_>>());
        assert!(ds
            .append_generated(vec![Sample::new(vec![1.0], Label::Anomalous)])
            .is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n_norm in 2usize..60, n_anom in 2usize..20, f in 0.05f64..0.95, seed: u64) {
            let ds = toy(n_norm, n_anom);
            let (a, b) = ds.split(f, seed).unwrap();
            let mut all: Vec<String> = a.samples().iter().chain(b.samples()).map(|s| format!("{s:?}")).collect();
            let mut orig: Vec<String> = ds.samples().iter().map(|s| format!("{s:?}")).collect();
            all.sort();
            orig.sort();
            prop_assert_eq!(all, orig);
            prop_assert_eq!(a.len() + b.len(), ds.len());
        }

        #[test]
        fn trim_is_idempotent(n_norm in 1usize..40, n_anom in 1usize..40, seed: u64) {
            let ds = toy(n_norm, n_anom);
            let once = trim_balance(&ds, seed).unwrap();
            let twice = trim_balance(once.dataset(), seed ^ 1).unwrap();
            prop_assert_eq!(once.dataset(), twice.dataset());
        }
    }
}
