use rand::Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment_view, AugmentKind, AugmentOp, Image};
use super::color::rgb_to_lab_split;
use super::{Split, ViewBatch, ViewSource};
use crate::diff::Mat;
use crate::error::{Error, Result};
use crate::seed;

/// RGB images served as Lab views: view 0 is L, view 1 is ab, and with
/// `include_rgb` view 2 is the (augmented) RGB image itself. Every view is
/// flattened channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub augment: Vec<AugmentKind>,
    pub include_rgb: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageOptions {
    pub augment: Vec<AugmentKind>,
    pub include_rgb: bool,
}

impl ImageDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, split: Split, options: ImageOptions) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::invalid("image dataset is empty"))?;
        let (h, w) = (first.height, first.width);
        if let Some(i) = images.iter().position(|im| (im.height, im.width, im.channels) != (h, w, 3)) {
            return Err(Error::invalid(format!("image {i} is not {h}x{w}x3")));
        }
        if labels.len() != images.len() {
            return Err(Error::invalid(format!("{} labels for {} images", labels.len(), images.len())));
        }
        let mut covered: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
        covered.sort_unstable();
        if covered != (0..images.len()).collect::<Vec<_>>() {
            return Err(Error::invalid("splits must be disjoint and cover every sample id"));
        }
        let ds = ImageDataset {
            images,
            labels,
            split,
            augment: options.augment,
            include_rgb: options.include_rgb,
        };
        // Reject unusable recipes (e.g. rotate90 on a non-square image) up front.
        ds.views(&[0], Some(0))?;
        Ok(ds)
    }

    fn shape(&self) -> (usize, usize) {
        (self.images[0].height, self.images[0].width)
    }

    fn augmented(&self, id: usize, batch: &[usize], seed: u64) -> Result<Image> {
        let mut rng = seed::stream(seed, "image-recipe", id as u64);
        let mut ops = Vec::with_capacity(self.augment.len());
        for kind in &self.augment {
            match *kind {
                AugmentKind::HorizontalFlip { p } => {
                    if rng.gen::<f64>() < p {
                        ops.push(AugmentOp::HorizontalFlip);
                    }
                }
                AugmentKind::Rotate90 { p } => {
                    if rng.gen::<f64>() < p {
                        ops.push(AugmentOp::Rotate90);
                    }
                }
                AugmentKind::RandomCrop { pad } => ops.push(AugmentOp::RandomCrop { pad }),
                AugmentKind::RandomGrey { p } => ops.push(AugmentOp::RandomGrey { p }),
                AugmentKind::ColorJitter { strength } => ops.push(AugmentOp::ColorJitter { strength }),
                AugmentKind::Mixup { lambda } => {
                    let partner = batch[rng.gen_range(0..batch.len())];
                    ops.push(AugmentOp::Mixup {
                        lambda,
                        partner: &self.images[partner],
                    });
                }
            }
        }
        augment_view(&self.images[id], &ops, seed::derive_seed(seed, "image-ops", id as u64))
    }
}

impl ViewSource for ImageDataset {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn view_dims(&self) -> Vec<usize> {
        self.view_geometry()
            .unwrap_or_default()
            .into_iter()
            .map(|(c, h, w)| c * h * w)
            .collect()
    }

    fn split(&self) -> &Split {
        &self.split
    }

    fn labels(&self) -> Vec<usize> {
        self.labels.clone()
    }

    fn views(&self, ids: &[usize], augment_seed: Option<u64>) -> Result<ViewBatch> {
        let dims = self.view_dims();
        let mut views: Vec<Mat> = dims.iter().map(|&d| Mat::zeros((ids.len(), d))).collect();
        let mut labels = Vec::with_capacity(ids.len());
        for (r, &id) in ids.iter().enumerate() {
            if id >= self.images.len() {
                return Err(Error::invalid(format!("sample id {id} out of range")));
            }
            labels.push(self.labels[id]);
            let img = match augment_seed {
                Some(s) => self.augmented(id, ids, s)?,
                None => self.images[id].clone(),
            };
            if (img.height, img.width) != self.shape() {
                return Err(Error::invalid("augmentation changed the image size"));
            }
            let (l, ab) = rgb_to_lab_split(&img)?;
            let mut parts = vec![l.to_chw(), ab.to_chw()];
            if self.include_rgb {
                parts.push(img.to_chw());
            }
            for (j, part) in parts.into_iter().enumerate() {
                for (c, x) in part.into_iter().enumerate() {
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
        let (h, w) = self.shape();
        let mut g = vec![(1, h, w), (2, h, w)];
        if self.include_rgb {
            g.push((3, h, w));
        }
        Some(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::color::lab_to_rgb;

    fn toy(n: usize, options: ImageOptions) -> ImageDataset {
        let images = (0..n)
            .map(|i| {
                let data = (0..4 * 4 * 3).map(|k| ((k * 7 + i * 13) % 17) as f64 / 16.0).collect();
                Image::new(4, 4, 3, data).unwrap()
            })
            .collect();
        let split = Split {
            train: (0..n).collect(),
            ..Split::default()
        };
        ImageDataset::new(images, (0..n).map(|i| i % 2).collect(), split, options).unwrap()
    }

    #[test]
    fn lab_views_have_declared_geometry() {
        let ds = toy(3, ImageOptions::default());
        assert_eq!(ds.view_dims(), vec![16, 32]);
        let b = ds.views(&[0, 2], None).unwrap();
        assert_eq!(b.views[0].dim(), (2, 16));
        assert_eq!(b.views[1].dim(), (2, 32));
        let rgb = toy(
            3,
            ImageOptions {
                include_rgb: true,
                ..ImageOptions::default()
            },
        );
        assert_eq!(rgb.num_views(), 3);
    }

    #[test]
    fn views_round_trip_to_rgb() {
        let ds = toy(2, ImageOptions::default());
        let b = ds.views(&[1], None).unwrap();
        let l = Image::new(1, 16, 1, b.views[0].row(0).to_vec()).unwrap();
        // ab is channel-major; re-interleave to HWC.
        let ab_chw = b.views[1].row(0).to_vec();
        let ab_hwc: Vec<f64> = (0..16).flat_map(|p| [ab_chw[p], ab_chw[16 + p]]).collect();
        let ab = Image::new(1, 16, 2, ab_hwc).unwrap();
        let back = lab_to_rgb(&l, &ab).unwrap();
        for (a, b) in back.data.iter().zip(&ds.images[1].data) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn augmentation_is_seeded() {
        let ds = toy(
            4,
            ImageOptions {
                augment: vec![
                    AugmentKind::HorizontalFlip { p: 0.5 },
                    AugmentKind::RandomCrop { pad: 1 },
                    AugmentKind::ColorJitter { strength: 0.4 },
                ],
                include_rgb: false,
            },
        );
        let a = ds.views(&[0, 1, 2, 3], Some(5)).unwrap();
        assert_eq!(a, ds.views(&[0, 1, 2, 3], Some(5)).unwrap());
        assert_ne!(a, ds.views(&[0, 1, 2, 3], Some(6)).unwrap());
        assert_ne!(a, ds.views(&[0, 1, 2, 3], None).unwrap());
    }
}
