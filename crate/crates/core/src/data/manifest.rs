//! On-disk datasets: a JSON manifest next to raw little-endian label and tensor files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::augment::Image;
use super::image_source::{ImageDataset, ImageOptions};
use super::{Dataset, Sample, Split, ViewSource};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }
}

/// `labels_path` holds `n` little-endian u32. `tensors_path` holds, per sample,
/// each view row-major in `view_shapes` order. u8 values are scaled to [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub n: usize,
    pub m_views: usize,
    pub view_shapes: Vec<Vec<usize>>,
    pub labels_path: PathBuf,
    pub tensors_path: PathBuf,
    pub dtype: Dtype,
}

/// How a manifest is turned into a training source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadOptions {
    pub split_seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub image: ImageOptions,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            split_seed: 0,
            train_frac: 0.7,
            val_frac: 0.1,
            image: ImageOptions::default(),
        }
    }
}

/// A single `[H, W, 3]` view loads as an RGB image set (split into Lab views);
/// anything else loads as plain flattened multi-view data.
#[derive(Debug, Clone)]
pub enum Loaded {
    Views(Dataset),
    Images(ImageDataset),
}

impl Loaded {
    pub fn into_source(self) -> Box<dyn ViewSource> {
        match self {
            Loaded::Views(d) => Box::new(d),
            Loaded::Images(d) => Box::new(d),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path, options: &LoadOptions) -> Result<Loaded> {
    let manifest: Manifest = serde_json::from_slice(&read(path)?)?;
    if manifest.view_shapes.len() != manifest.m_views {
        return Err(Error::invalid(format!(
            "manifest lists {} view shapes for m_views = {}",
            manifest.view_shapes.len(),
            manifest.m_views
        )));
    }
    if manifest.view_shapes.iter().any(|s| s.is_empty() || s.contains(&0)) {
        return Err(Error::invalid("view shapes must be non-empty and positive"));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let n = manifest.n;

    let label_bytes = read(&base.join(&manifest.labels_path))?;
    if label_bytes.len() != 4 * n {
        return Err(Error::invalid(format!(
            "labels file has {} bytes, expected {}",
            label_bytes.len(),
            4 * n
        )));
    }
    let labels: Vec<usize> = label_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();

    let dims: Vec<usize> = manifest.view_shapes.iter().map(|s| s.iter().product()).collect();
    let per_sample: usize = dims.iter().sum();
    let tensor_bytes = read(&base.join(&manifest.tensors_path))?;
    let expected = n * per_sample * manifest.dtype.width();
    if tensor_bytes.len() != expected {
        return Err(Error::invalid(format!(
            "tensor file has {} bytes, expected {expected}",
            tensor_bytes.len()
        )));
    }
    let values: Vec<f64> = match manifest.dtype {
        Dtype::U8 => tensor_bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        Dtype::F32 => tensor_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    };
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite tensor value at index {i}")));
    }

    let split = Split::random(n, options.train_frac, options.val_frac, options.split_seed);
    let provenance = serde_json::json!({ "manifest": path, "options": options });

    if manifest.m_views == 1 && manifest.view_shapes[0].len() == 3 && manifest.view_shapes[0][2] == 3 {
        let (h, w) = (manifest.view_shapes[0][0], manifest.view_shapes[0][1]);
        let images = values
            .chunks_exact(per_sample)
            .map(|px| Image::new(h, w, 3, px.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        return ImageDataset::new(images, labels, split, options.image.clone()).map(Loaded::Images);
    }

    let samples = values
        .chunks_exact(per_sample.max(1))
        .zip(labels)
        .enumerate()
        .map(|(id, (row, label))| {
            let mut views = Vec::with_capacity(dims.len());
            let mut off = 0;
            for &d in &dims {
                views.push(row[off..off + d].to_vec());
                off += d;
            }
            Sample { id, label, views }
        })
        .collect();
    let mut ds = Dataset::new(samples, dims, split, provenance)?;
    if manifest.view_shapes.iter().all(|s| s.len() == 3) {
        // [H, W, C] shapes are stored HWC; geometry is reported for conv encoders
        // only when the data is already channel-major, i.e. C == 1.
        if manifest.view_shapes.iter().all(|s| s[2] == 1) {
            ds.geometry = Some(manifest.view_shapes.iter().map(|s| (1, s[0], s[1])).collect());
        }
    }
    Ok(Loaded::Views(ds))
}

/// Write `samples` (label, per-view flat values) in manifest format under `dir`.
pub fn write_manifest(dir: &Path, view_shapes: &[Vec<usize>], dtype: Dtype, samples: &[(usize, Vec<Vec<f64>>)]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut labels = Vec::with_capacity(samples.len() * 4);
    let mut tensors = Vec::new();
    for (label, views) in samples {
        labels.extend_from_slice(&(*label as u32).to_le_bytes());
        if views.len() != view_shapes.len() {
            return Err(Error::invalid("sample view count differs from view_shapes"));
        }
        for (v, shape) in views.iter().zip(view_shapes) {
            if v.len() != shape.iter().product::<usize>() {
                return Err(Error::invalid("sample view size differs from its shape"));
            }
            for &x in v {
                match dtype {
                    Dtype::U8 => tensors.push((x.clamp(0.0, 1.0) * 255.0).round() as u8),
                    Dtype::F32 => tensors.extend_from_slice(&(x as f32).to_le_bytes()),
                }
            }
        }
    }
    let manifest = Manifest {
        n: samples.len(),
        m_views: view_shapes.len(),
        view_shapes: view_shapes.to_vec(),
        labels_path: "labels.bin".into(),
        tensors_path: "tensors.bin".into(),
        dtype,
    };
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write("labels.bin", &labels)?;
    write("tensors.bin", &tensors)?;
    let path = dir.join("manifest.json");
    write("manifest.json", &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_views_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<(usize, Vec<Vec<f64>>)> = (0..10).map(|i| (i % 3, vec![vec![i as f64, 0.5], vec![-(i as f64); 3]])).collect();
        let path = write_manifest(dir.path(), &[vec![2], vec![3]], Dtype::F32, &samples).unwrap();
        let Loaded::Views(ds) = load_manifest(&path, &LoadOptions::default()).unwrap() else {
            panic!("expected flat views");
        };
        assert_eq!(ds.view_dims, vec![2, 3]);
        assert_eq!(ds.samples[7].views, samples[7].1);
        assert_eq!(ds.samples[7].label, 1);
    }

    #[test]
    fn rgb_manifest_becomes_lab_views() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<(usize, Vec<Vec<f64>>)> = (0..6).map(|i| (i % 2, vec![vec![(i as f64) / 6.0; 2 * 2 * 3]])).collect();
        let path = write_manifest(dir.path(), &[vec![2, 2, 3]], Dtype::U8, &samples).unwrap();
        let src = load_manifest(&path, &LoadOptions::default()).unwrap().into_source();
        assert_eq!(src.view_dims(), vec![4, 8]);
        assert_eq!(src.view_geometry(), Some(vec![(1, 2, 2), (2, 2, 2)]));
    }

    #[test]
    fn truncated_tensor_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![(0, vec![vec![1.0], vec![2.0]]); 3];
        let path = write_manifest(dir.path(), &[vec![1], vec![1]], Dtype::F32, &samples).unwrap();
        fs::write(dir.path().join("tensors.bin"), [0u8; 5]).unwrap();
        assert!(load_manifest(&path, &LoadOptions::default()).is_err());
        assert!(matches!(
            load_manifest(&dir.path().join("absent.json"), &LoadOptions::default()),
            Err(Error::MissingArtifact(_))
        ));
    }
}
