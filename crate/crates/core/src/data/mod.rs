//! Multi-view datasets, image views, augmentation and minibatching.

mod augment;
mod batch;
mod color;
mod image_source;
mod manifest;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use augment::{augment_view, AugmentKind, AugmentOp, Image};
pub use batch::{batch_hash, next_batch, EpochPlan};
pub use color::{lab_to_rgb, rgb_to_lab_split, AB_SCALE};
pub use image_source::{ImageDataset, ImageOptions};
pub use manifest::{load_manifest, write_manifest, Dtype, LoadOptions, Loaded, Manifest};
pub use synthetic::{gen_synthetic_multiview, SyntheticConfig};

use crate::diff::Mat;
use crate::error::{Error, Result};

/// One sample: `views[j]` is the flattened `j`-th view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub label: usize,
    pub views: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl Split {
    /// Seeded shuffle of `0..n` cut into train/val/test by the given fractions.
    pub fn random(n: usize, train_frac: f64, val_frac: f64, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut crate::seed::stream(seed, "split", 0));
        let n_train = ((n as f64) * train_frac).round() as usize;
        let n_val = (((n as f64) * val_frac).round() as usize).min(n - n_train.min(n));
        let n_train = n_train.min(n);
        let mut train = ids[..n_train].to_vec();
        let mut val = ids[n_train..n_train + n_val].to_vec();
        let mut test = ids[n_train + n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Split { train, val, test }
    }

    pub fn get(&self, which: SplitName) -> &[usize] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Aligned views of a minibatch. `views[j]` is `n x dim_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub views: Vec<Mat>,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Anything that can materialize aligned view batches for sample ids.
pub trait ViewSource: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn view_dims(&self) -> Vec<usize>;

    fn num_views(&self) -> usize {
        self.view_dims().len()
    }

    fn split(&self) -> &Split;

    fn labels(&self) -> Vec<usize>;

    fn num_classes(&self) -> usize {
        self.labels().iter().max().map_or(0, |m| m + 1)
    }

    /// Views for `ids`. `augment_seed = None` produces the clean
    /// (evaluation) views; `Some(seed)` applies the source's augmentations.
    fn views(&self, ids: &[usize], augment_seed: Option<u64>) -> Result<ViewBatch>;

    /// Image geometry `(channels, height, width)` of each view, if image-shaped.
    fn view_geometry(&self) -> Option<Vec<(usize, usize, usize)>> {
        None
    }
}

/// An in-memory multi-view dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub view_dims: Vec<usize>,
    pub split: Split,
    pub provenance: serde_json::Value,
    #[serde(default)]
    pub geometry: Option<Vec<(usize, usize, usize)>>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, view_dims: Vec<usize>, split: Split, provenance: serde_json::Value) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.id != i {
                return Err(Error::invalid(format!("sample at position {i} has id {}", s.id)));
            }
            if s.views.len() != view_dims.len() {
                return Err(Error::invalid(format!(
                    "sample {i} has {} views, expected {}",
                    s.views.len(),
                    view_dims.len()
                )));
            }
            for (j, (v, &d)) in s.views.iter().zip(&view_dims).enumerate() {
                if v.len() != d {
                    return Err(Error::invalid(format!("sample {i} view {j} has {} values, expected {d}", v.len())));
                }
            }
        }
        let mut covered: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
        covered.sort_unstable();
        if covered != (0..samples.len()).collect::<Vec<_>>() {
            return Err(Error::invalid("splits must be disjoint and cover every sample id"));
        }
        Ok(Dataset {
            samples,
            view_dims,
            split,
            provenance,
            geometry: None,
        })
    }

    /// Concatenation of all views per sample, `N x sum(dims)`.
    pub fn concatenated(&self, ids: &[usize]) -> Mat {
        let total: usize = self.view_dims.iter().sum();
        let mut out = Mat::zeros((ids.len(), total));
        for (r, &id) in ids.iter().enumerate() {
            let mut c = 0;
            for v in &self.samples[id].views {
                for &x in v {
                    out[[r, c]] = x;
                    c += 1;
                }
            }
        }
        out
    }
}

impl ViewSource for Dataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn view_dims(&self) -> Vec<usize> {
        self.view_dims.clone()
    }

    fn split(&self) -> &Split {
        &self.split
    }

    fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    fn views(&self, ids: &[usize], _augment_seed: Option<u64>) -> Result<ViewBatch> {
        let mut views: Vec<Mat> = self.view_dims.iter().map(|&d| Mat::zeros((ids.len(), d))).collect();
        let mut labels = Vec::with_capacity(ids.len());
        for (r, &id) in ids.iter().enumerate() {
            let sample = self
                .samples
                .get(id)
                .ok_or_else(|| Error::invalid(format!("sample id {id} out of range")))?;
            labels.push(sample.label);
            for (j, v) in sample.views.iter().enumerate() {
                for (c, &x) in v.iter().enumerate() {
                    views[j][[r, c]] = x;
                }
            }
        }
        Ok(ViewBatch {
            ids: ids.to_vec(),
            labels,
            views,
        })
    }

    fn view_geometry(&self) -> Option<Vec<(usize, usize, usize)>> {
        self.geometry.clone()
    }
}
