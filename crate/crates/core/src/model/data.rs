use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::Matrix;
use crate::{Error, Result};

/// Flattened samples with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    dim: usize,
    features: Vec<f32>,
    labels: Vec<u32>,
}

impl Split {
    pub fn new(dim: usize, features: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDataset("sample dimension is zero".into()));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} feature values do not fit {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            dim,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Gathers the listed samples into a batch matrix.
    ///
    /// # Panics
    /// Panics if `indices` is empty or out of range.
    pub fn batch(&self, indices: &[usize]) -> (Matrix, Vec<u32>) {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        let m = Matrix::from_vec(indices.len(), self.dim, data).expect("non-empty batch");
        (m, labels)
    }

    /// Contiguous batch `[start, end)`.
    pub fn range(&self, start: usize, end: usize) -> (Matrix, &[u32]) {
        let m = Matrix::from_vec(
            end - start,
            self.dim,
            self.features[start * self.dim..end * self.dim].to_vec(),
        )
        .expect("non-empty range");
        (m, &self.labels[start..end])
    }

    pub fn subset(&self, indices: &[usize]) -> Split {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Split {
            dim: self.dim,
            features,
            labels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub validation: Split,
    pub test: Split,
    input_shape: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(
        train: Split,
        validation: Split,
        test: Split,
        input_shape: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        let dim: usize = input_shape.iter().product();
        if class_count < 2 {
            return Err(Error::InvalidDataset(format!(
                "need at least 2 classes, got {class_count}"
            )));
        }
        for (name, split) in [("train", &train), ("validation", &validation), ("test", &test)] {
            if split.dim != dim {
                return Err(Error::InvalidDataset(format!(
                    "{name} samples have dimension {}, input shape {:?} needs {dim}",
                    split.dim, input_shape
                )));
            }
            if let Some(&label) = split.labels.iter().find(|&&l| l as usize >= class_count) {
                return Err(Error::LabelOutOfRange { label, class_count });
            }
        }
        Ok(Self {
            train,
            validation,
            test,
            input_shape,
            class_count,
        })
    }

    /// Holds out `validation_fraction` of `train_all` (rounded down) as the
    /// validation split, chosen by a seeded shuffle.
    pub fn with_validation_split(
        train_all: Split,
        test: Split,
        input_shape: Vec<usize>,
        class_count: usize,
        validation_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(Error::InvalidDataset(format!(
                "validation fraction {validation_fraction} outside [0, 1)"
            )));
        }
        let mut order: Vec<usize> = (0..train_all.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (train_all.len() as f64 * validation_fraction) as usize;
        let (val_idx, train_idx) = order.split_at(n_val);
        let mut val_idx = val_idx.to_vec();
        let mut train_idx = train_idx.to_vec();
        val_idx.sort_unstable();
        train_idx.sort_unstable();
        Self::new(
            train_all.subset(&train_idx),
            train_all.subset(&val_idx),
            test,
            input_shape,
            class_count,
        )
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }
}
