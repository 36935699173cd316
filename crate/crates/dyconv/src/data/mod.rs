//! Datasets for the desk-scale harness: the four XOR points, a synthetic
//! glyph corpus ("blobs"), and MNIST in its original IDX files. All three
//! surface the same [`Dataset`] type: a flat sample store that hands out
//! batches as [N, C, H, W] tensors.

pub mod blobs;
pub mod idx;
pub mod xor;

pub use blobs::BlobsConfig;
pub use idx::load_mnist_idx;
pub use xor::xor_dataset;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug)]
pub struct Dataset<E: Element> {
    name: String,
    sample_shape: [usize; 3],
    data: Vec<E>,
    labels: Vec<usize>,
    classes: usize,
}

impl<E: Element> Dataset<E> {
    pub fn new(
        name: impl Into<String>,
        sample_shape: [usize; 3],
        data: Vec<E>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let elems: usize = sample_shape.iter().product();
        if elems == 0 {
            return Err(Error::Data("sample shape has a zero dimension".into()));
        }
        if data.len() != labels.len() * elems {
            return Err(Error::Data(format!(
                "{} values cannot hold {} samples of {} elements",
                data.len(),
                labels.len(),
                elems
            )));
        }
        if classes < 2 {
            return Err(Error::Data("need at least two classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!(
                "label {bad} outside class range 0..{classes}"
            )));
        }
        Ok(Dataset {
            name: name.into(),
            sample_shape,
            data,
            labels,
            classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Per-sample shape [channels, height, width].
    pub fn sample_shape(&self) -> [usize; 3] {
        self.sample_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn sample_elems(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Gathers the given samples into a [B, C, H, W] tensor plus labels.
    pub fn batch(&self, idxs: &[usize]) -> Result<(Tensor<E>, Vec<usize>)> {
        if idxs.is_empty() {
            return Err(Error::Data("empty batch requested".into()));
        }
        let elems = self.sample_elems();
        let mut data = Vec::with_capacity(idxs.len() * elems);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            if i >= self.len() {
                return Err(Error::Data(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.data[i * elems..(i + 1) * elems]);
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.sample_shape;
        let t = Tensor::new(&[idxs.len(), c, h, w], data, false)?;
        Ok((t, labels))
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Which dataset to load and from where. Tagged so run configs stay
/// self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// The four XOR points. Train and test are the same four points; the
    /// demonstration reports training accuracy.
    Xor,
    Blobs(BlobsConfig),
    MnistIdx(MnistConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Optional cap on samples per split, for desk-scale runs.
    #[serde(default)]
    pub limit: Option<usize>,
}

impl DatasetConfig {
    pub fn train_split<E: Element>(&self) -> Result<Dataset<E>> {
        match self {
            DatasetConfig::Xor => Ok(xor_dataset()),
            DatasetConfig::Blobs(cfg) => cfg.train_split(),
            DatasetConfig::MnistIdx(cfg) => {
                let d = load_mnist_idx(&cfg.train_images, &cfg.train_labels)?;
                truncate(d, cfg.limit)
            }
        }
    }

    pub fn test_split<E: Element>(&self) -> Result<Dataset<E>> {
        match self {
            DatasetConfig::Xor => Ok(xor_dataset()),
            DatasetConfig::Blobs(cfg) => cfg.test_split(),
            DatasetConfig::MnistIdx(cfg) => {
                let d = load_mnist_idx(&cfg.test_images, &cfg.test_labels)?;
                truncate(d, cfg.limit)
            }
        }
    }
}

fn truncate<E: Element>(d: Dataset<E>, limit: Option<usize>) -> Result<Dataset<E>> {
    match limit {
        None => Ok(d),
        Some(n) if n >= d.len() => Ok(d),
        Some(n) => {
            let elems = d.sample_elems();
            Dataset::new(
                d.name.clone(),
                d.sample_shape,
                d.data[..n * elems].to_vec(),
                d.labels[..n].to_vec(),
                d.classes,
            )
        }
    }
}
