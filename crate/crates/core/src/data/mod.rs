//! Datasets, configuration files, metric tables and image dumps.

pub mod config;
pub mod idx;
pub mod image;
pub mod metrics;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Batch, Labels, Tensor};

/// Labelled samples with inputs in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// Shape `[N, ...]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Real-valued targets `[N, k]`; when present batches carry these
    /// instead of the class labels.
    pub targets: Option<Tensor>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        inputs: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let shape = inputs.shape();
        if shape.len() < 2 {
            return Err(Error::shape(
                "dataset inputs need a sample axis and per-sample extents",
            ));
        }
        if labels.len() != shape[0] {
            return Err(Error::shape(format!(
                "{} samples but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some(v) = inputs.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::config(format!("dataset value {v} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::config(format!(
                "label {l} not below the class count {num_classes}"
            )));
        }
        Ok(Self {
            name: name.into(),
            inputs,
            labels,
            num_classes,
            targets: None,
        })
    }

    /// A dataset with real-valued targets of shape `[N, k]`.
    pub fn regression(name: impl Into<String>, inputs: Tensor, targets: Tensor) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if targets.shape().len() != 2 || targets.shape()[0] != n || !targets.is_finite() {
            return Err(Error::shape(format!(
                "targets {:?} do not match {n} samples",
                targets.shape()
            )));
        }
        let mut ds = Dataset::new(name, inputs, vec![0; n], 1)?;
        ds.targets = Some(targets);
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn sample_dim(&self) -> usize {
        self.inputs.len() / self.len()
    }

    /// The first `n` samples.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let b = self.batch(&idx)?;
        match b.labels {
            Labels::Targets(t) => Dataset::regression(self.name.clone(), b.inputs, t),
            Labels::Classes(labels) => {
                Dataset::new(self.name.clone(), b.inputs, labels, self.num_classes)
            }
            Labels::None => unreachable!(),
        }
    }

    /// Samples at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::config("empty batch requested"));
        }
        let d = self.sample_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::config(format!(
                    "sample {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.inputs.data()[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        let labels = match &self.targets {
            Some(t) => {
                let k = t.shape()[1];
                let mut rows = Vec::with_capacity(indices.len() * k);
                for &i in indices {
                    rows.extend_from_slice(&t.data()[i * k..(i + 1) * k]);
                }
                Labels::Targets(Tensor::new(vec![indices.len(), k], rows)?)
            }
            None => Labels::Classes(labels),
        };
        Batch::new(Tensor::new(shape, data)?, labels)
    }

    /// A seeded permutation of the sample indices.
    pub fn shuffled_indices<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx
    }
}

/// Gaussian blobs around uniformly drawn class centers, clamped to `[0, 1]`.
/// Sample `i` belongs to class `i mod classes`.
pub fn synth_blobs<R: Rng + ?Sized>(
    sample_shape: &[usize],
    classes: usize,
    n: usize,
    spread: f64,
    rng: &mut R,
) -> Result<Dataset> {
    let m: usize = sample_shape.iter().product();
    if m == 0 || classes == 0 || n == 0 {
        return Err(Error::config(
            "synthetic data needs positive dimension, class count and size",
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::config(format!(
            "spread must be non-negative, got {spread}"
        )));
    }
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..m).map(|_| rng.gen::<f64>()).collect())
        .collect();
    let mut data = Vec::with_capacity(n * m);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for &mu in &centers[c] {
            let z: f64 = rng.sample(StandardNormal);
            data.push((mu + spread * z).clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    let mut shape = vec![n];
    shape.extend_from_slice(sample_shape);
    Dataset::new("synth-blobs", Tensor::new(shape, data)?, labels, classes)
}
