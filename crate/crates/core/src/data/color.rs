//! sRGB <-> CIELAB (D65) and the L / ab channel split.

use super::Image;
use crate::error::{Error, Result};

// Linear sRGB -> XYZ (D65).
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];
const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];
// The white point is taken as the matrix row sums (0.95047, 1.0000001, 1.08883)
// so that every neutral grey lands on a = b = 0.
const WHITE: [f64; 3] = [row_sum(0), row_sum(1), row_sum(2)];

const fn row_sum(k: usize) -> f64 {
    RGB_TO_XYZ[k][0] + RGB_TO_XYZ[k][1] + RGB_TO_XYZ[k][2]
}

/// a*, b* are divided by this so the sRGB gamut lands inside [-1, 1] with 0 fixed.
pub const AB_SCALE: f64 = 110.0;

const DELTA: f64 = 6.0 / 29.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn f(t: f64) -> f64 {
    if t > DELTA.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// CIELAB of one sRGB pixel: `L in [0, 100]`, `a, b` unscaled.
pub(crate) fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let mut xyz = [0.0; 3];
    for (k, row) in RGB_TO_XYZ.iter().enumerate() {
        xyz[k] = (row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2]) / WHITE[k];
    }
    let [fx, fy, fz] = xyz.map(f);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub(crate) fn lab_to_rgb_pixel(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [f_inv(fx) * WHITE[0], f_inv(fy) * WHITE[1], f_inv(fz) * WHITE[2]];
    let mut rgb = [0.0; 3];
    for (k, row) in XYZ_TO_RGB.iter().enumerate() {
        rgb[k] = linear_to_srgb(row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2]);
    }
    rgb
}

/// Split an RGB image into `L` (1 channel) and `ab` (2 channels), each
/// rescaled to [-1, 1].
pub fn rgb_to_lab_split(image: &Image) -> Result<(Image, Image)> {
    if image.channels != 3 {
        return Err(Error::invalid(format!("Lab conversion needs 3 channels, got {}", image.channels)));
    }
    if let Some(bad) = image.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("RGB value {bad} outside [0, 1]")));
    }
    let n = image.height * image.width;
    let mut l = Vec::with_capacity(n);
    let mut ab = Vec::with_capacity(2 * n);
    for px in image.data.chunks_exact(3) {
        let [lv, a, b] = rgb_to_lab([px[0], px[1], px[2]]);
        l.push(lv / 50.0 - 1.0);
        ab.push(a / AB_SCALE);
        ab.push(b / AB_SCALE);
    }
    Ok((
        Image::new(image.height, image.width, 1, l)?,
        Image::new(image.height, image.width, 2, ab)?,
    ))
}

/// Inverse of [`rgb_to_lab_split`].
pub fn lab_to_rgb(l: &Image, ab: &Image) -> Result<Image> {
    if l.channels != 1 || ab.channels != 2 || l.height != ab.height || l.width != ab.width {
        return Err(Error::invalid("expected matching 1-channel L and 2-channel ab images"));
    }
    let mut data = Vec::with_capacity(l.data.len() * 3);
    for (lv, abv) in l.data.iter().zip(ab.data.chunks_exact(2)) {
        let rgb = lab_to_rgb_pixel([(lv + 1.0) * 50.0, abv[0] * AB_SCALE, abv[1] * AB_SCALE]);
        data.extend_from_slice(&rgb);
    }
    Image::new(l.height, l.width, 3, data)
}
