//! Datasets, image codecs, synthetic data, checkpoints and map export.

pub mod checkpoint;
pub mod export;
pub mod manifest;
pub mod pnm;
pub mod synth;

pub use checkpoint::Checkpoint;
pub use manifest::{load_dataset, DatasetManifest};
pub use synth::{Placement, SyntheticSpec};

use crate::error::{Result, TensorError};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Decoded images held as channel-first floats in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// N × channels × height × width.
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn new(
        pixels: Vec<f32>,
        labels: Vec<usize>,
        classes: usize,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(TensorError::DataLength {
                op: "dataset",
                shape: vec![labels.len(), channels, height, width],
                len: pixels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange {
                op: "dataset",
                label,
                classes,
            });
        }
        Ok(Self {
            pixels,
            labels,
            classes,
            channels,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.channels * self.height * self.width;
        &self.pixels[i * per..][..per]
    }

    /// Stacks the selected images into a [B, C, H, W] tensor.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.height * self.width);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::of(v as f64)));
        }
        Tensor::new(&[indices.len(), self.channels, self.height, self.width], data)
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let per = self.channels * self.height * self.width;
        Dataset {
            pixels: self.pixels[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            pixels: Vec::new(),
            labels: Vec::new(),
            classes: self.classes,
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }
}
