use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Row-major `height x width x channels` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "image data has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Channel-major (`C x H x W`) flattening, the layout conv encoders read.
    pub fn to_chw(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.push(self.at(y, x, c));
                }
            }
        }
        out
    }

    fn map_pixels(&self, height: usize, width: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Image {
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in 0..height {
            for x in 0..width {
                let (sy, sx) = src(y, x);
                for c in 0..self.channels {
                    data.push(self.at(sy, sx, c));
                }
            }
        }
        Image {
            height,
            width,
            channels: self.channels,
            data,
        }
    }
}

/// A concrete augmentation step.
#[derive(Debug, Clone, Copy)]
pub enum AugmentOp<'a> {
    HorizontalFlip,
    /// Quarter turn clockwise.
    Rotate90,
    /// Reflect-pad by `pad` pixels, then crop back at a seeded offset.
    RandomCrop {
        pad: usize,
    },
    /// Convert to luma with probability `p`.
    RandomGrey {
        p: f64,
    },
    /// Scale each channel by `1 + strength * u`, `u ~ U(-1, 1)`, then clip to [0, 1].
    ColorJitter {
        strength: f64,
    },
    /// `lambda * view + (1 - lambda) * partner`.
    Mixup {
        lambda: f64,
        partner: &'a Image,
    },
}

/// Serializable augmentation recipe for image pipelines. Each step fires with
/// probability `p`; mixup partners are drawn from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentKind {
    HorizontalFlip { p: f64 },
    Rotate90 { p: f64 },
    RandomCrop { pad: usize },
    RandomGrey { p: f64 },
    ColorJitter { strength: f64 },
    Mixup { lambda: f64 },
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Apply `ops` in order. Step `i` draws from its own stream derived from
/// `(seed, i)`, so results depend only on `(view, ops, seed)`.
pub fn augment_view(view: &Image, ops: &[AugmentOp<'_>], seed: u64) -> Result<Image> {
    let mut img = view.clone();
    for (i, op) in ops.iter().enumerate() {
        let mut rng = seed::stream(seed, "augment", i as u64);
        img = match *op {
            AugmentOp::HorizontalFlip => {
                let w = img.width;
                img.map_pixels(img.height, w, |y, x| (y, w - 1 - x))
            }
            AugmentOp::Rotate90 => {
                let h = img.height;
                img.map_pixels(img.width, img.height, |y, x| (h - 1 - x, y))
            }
            AugmentOp::RandomCrop { pad } => {
                let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
                let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
                let (h, w) = (img.height, img.width);
                img.map_pixels(h, w, |y, x| (reflect(y as isize + dy, h), reflect(x as isize + dx, w)))
            }
            AugmentOp::RandomGrey { p } => {
                require_color(&img, "random_grey")?;
                if rng.gen::<f64>() < p {
                    let mut data = img.data.clone();
                    for px in data.chunks_exact_mut(3) {
                        let luma = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
                        px.fill(luma);
                    }
                    Image { data, ..img }
                } else {
                    img
                }
            }
            AugmentOp::ColorJitter { strength } => {
                require_color(&img, "color_jitter")?;
                let factors: [f64; 3] = std::array::from_fn(|_| 1.0 + strength * rng.gen_range(-1.0..=1.0));
                let mut data = img.data.clone();
                for px in data.chunks_exact_mut(3) {
                    for (v, f) in px.iter_mut().zip(factors) {
                        *v = (*v * f).clamp(0.0, 1.0);
                    }
                }
                Image { data, ..img }
            }
            AugmentOp::Mixup { lambda, partner } => {
                if (partner.height, partner.width, partner.channels) != (img.height, img.width, img.channels) {
                    return Err(Error::invalid("mixup partner shape differs from the view"));
                }
                let data = img
                    .data
                    .iter()
                    .zip(&partner.data)
                    .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
                    .collect();
                Image { data, ..img }
            }
        };
    }
    Ok(img)
}

fn require_color(img: &Image, op: &str) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::invalid(format!(
            "{op} needs a 3-channel view, got {} channel(s)",
            img.channels
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        Image::new(h, w, c, (0..h * w * c).map(|v| v as f64 / (h * w * c) as f64).collect()).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp(3, 4, 3);
        let twice = augment_view(&img, &[AugmentOp::HorizontalFlip, AugmentOp::HorizontalFlip], 11).unwrap();
        assert_eq!(twice, img);
        let once = augment_view(&img, &[AugmentOp::HorizontalFlip], 11).unwrap();
        assert_ne!(once, img);
    }

    #[test]
    fn four_rotations_are_identity() {
        let img = ramp(3, 5, 1);
        let r = augment_view(&img, &[AugmentOp::Rotate90; 4], 0).unwrap();
        assert_eq!(r, img);
        let once = augment_view(&img, &[AugmentOp::Rotate90], 0).unwrap();
        assert_eq!((once.height, once.width), (5, 3));
    }

    #[test]
    fn mixup_endpoint_is_identity() {
        let img = ramp(2, 2, 3);
        let partner = Image::new(2, 2, 3, vec![0.9; 12]).unwrap();
        let out = augment_view(
            &img,
            &[AugmentOp::Mixup {
                lambda: 1.0,
                partner: &partner,
            }],
            3,
        )
        .unwrap();
        assert_eq!(out, img);
        let half = augment_view(
            &img,
            &[AugmentOp::Mixup {
                lambda: 0.5,
                partner: &partner,
            }],
            3,
        )
        .unwrap();
        assert!((half.data[0] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn color_jitter_replays_seeded_factors() {
        let img = Image::new(2, 3, 3, [0.2, 0.5, 0.4].repeat(6)).unwrap();
        let out = augment_view(&img, &[AugmentOp::ColorJitter { strength: 0.4 }], 7).unwrap();
        let mut rng = seed::stream(7, "augment", 0);
        let factors: Vec<f64> = (0..3).map(|_| 1.0 + 0.4 * rng.gen_range(-1.0..=1.0)).collect();
        for px in out.data.chunks_exact(3) {
            for ((v, base), f) in px.iter().zip([0.2, 0.5, 0.4]).zip(&factors) {
                assert_eq!(*v, (base * f).clamp(0.0, 1.0));
            }
        }
    }

    #[test]
    fn color_ops_reject_single_channel() {
        let img = ramp(2, 2, 1);
        assert!(augment_view(&img, &[AugmentOp::ColorJitter { strength: 0.1 }], 0).is_err());
        assert!(augment_view(&img, &[AugmentOp::RandomGrey { p: 1.0 }], 0).is_err());
    }

    #[test]
    fn crop_is_deterministic_and_shape_preserving() {
        let img = ramp(6, 6, 3);
        let a = augment_view(&img, &[AugmentOp::RandomCrop { pad: 2 }], 5).unwrap();
        let b = augment_view(&img, &[AugmentOp::RandomCrop { pad: 2 }], 5).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height, a.width, a.channels), (6, 6, 3));
        let zero = augment_view(&img, &[AugmentOp::RandomCrop { pad: 0 }], 5).unwrap();
        assert_eq!(zero, img);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(-2, 4), 2);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(2, 4), 2);
    }
}
