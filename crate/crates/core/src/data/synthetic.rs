use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::seed;

/// Gaussian clusters on the unit sphere seen through fixed random linear views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_classes: usize,
    pub n_per_class: usize,
    pub latent_dim: usize,
    pub m_views: usize,
    pub view_dims: Vec<usize>,
    pub noise_sigma: f64,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            n_classes: 4,
            n_per_class: 100,
            latent_dim: 8,
            m_views: 2,
            view_dims: vec![16, 16],
            noise_sigma: 0.05,
            train_frac: 0.7,
            val_frac: 0.1,
        }
    }
}

const MIN_CENTER_DISTANCE: f64 = 0.5;

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gen_synthetic_multiview(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.n_classes < 2 {
        return Err(Error::invalid("n_classes must be >= 2"));
    }
    if cfg.m_views < 2 {
        return Err(Error::invalid("at least two views are required"));
    }
    if cfg.view_dims.len() != cfg.m_views {
        return Err(Error::invalid(format!(
            "view_dims has {} entries but m_views = {}",
            cfg.view_dims.len(),
            cfg.m_views
        )));
    }
    if !(cfg.noise_sigma >= 0.0) {
        return Err(Error::invalid("noise_sigma must be >= 0"));
    }
    if cfg.latent_dim == 0 || cfg.view_dims.iter().any(|&d| d == 0) || cfg.n_per_class == 0 {
        return Err(Error::invalid("dimensions and class sizes must be positive"));
    }

    let mut rng = seed::stream(cfg.seed, "synthetic", 0);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_classes);
    let mut attempts = 0;
    while centers.len() < cfg.n_classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::invalid(format!(
                "could not place {} centers {MIN_CENTER_DISTANCE} apart in {} dimensions",
                cfg.n_classes, cfg.latent_dim
            )));
        }
        let raw: Vec<f64> = (0..cfg.latent_dim).map(|_| gaussian(&mut rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let c: Vec<f64> = raw.iter().map(|v| v / norm).collect();
        let far = centers
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= MIN_CENTER_DISTANCE);
        if far {
            centers.push(c);
        }
    }

    let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
    let maps: Vec<Vec<Vec<f64>>> = cfg
        .view_dims
        .iter()
        .map(|&d| {
            (0..d)
                .map(|_| (0..cfg.latent_dim).map(|_| gaussian(&mut rng) * scale).collect())
                .collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(cfg.n_classes * cfg.n_per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..cfg.n_per_class {
            let latent: Vec<f64> = center.iter().map(|c| c + cfg.noise_sigma * gaussian(&mut rng)).collect();
            let views = maps
                .iter()
                .map(|a| {
                    a.iter()
                        .map(|row| {
                            let clean: f64 = row.iter().zip(&latent).map(|(w, x)| w * x).sum();
                            clean + cfg.noise_sigma * gaussian(&mut rng)
                        })
                        .collect()
                })
                .collect();
            samples.push(Sample {
                id: samples.len(),
                label,
                views,
            });
        }
    }

    let split = Split::random(
        samples.len(),
        cfg.train_frac,
        cfg.val_frac,
        seed::derive_seed(cfg.seed, "synthetic-split", 0),
    );
    let provenance = serde_json::json!({ "generator": "synthetic_multiview", "config": cfg });
    Dataset::new(samples, cfg.view_dims.clone(), split, provenance)
}
