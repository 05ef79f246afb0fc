//! Frozen-encoder evaluation: linear probes, similarity histograms and
//! collapse diagnostics.

mod report;

use nalgebra::DMatrix;
use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use report::{export_histogram_csv, export_reports, import_reports, EvalReport, ReportFormat};

use crate::data::{SplitName, ViewSource};
use crate::diff::{Graph, Mat};
use crate::error::{Error, Result};
use crate::losses::similarity_unchecked;
use crate::model::{ModelSpec, ParamGroup, Trainable};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Encoder outputs `h`.
    RepresentationH,
    /// Unit projections `z`.
    ProjectedZ,
    /// `z` with the generator outputs `ẑ` appended.
    ProjectedPlusAugmented,
}

impl FeatureSource {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "h" => Some(FeatureSource::RepresentationH),
            "z" => Some(FeatureSource::ProjectedZ),
            "z+aug" => Some(FeatureSource::ProjectedPlusAugmented),
            _ => None,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            FeatureSource::RepresentationH => "h",
            FeatureSource::ProjectedZ => "z",
            FeatureSource::ProjectedPlusAugmented => "z+aug",
        }
    }
}

/// Per-view features of a set of samples, computed without gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewFeatures {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub h: Vec<Mat>,
    pub z: Vec<Mat>,
    pub z_aug: Vec<Mat>,
}

const CHUNK: usize = 256;

fn stack_rows(parts: &[Mat]) -> Mat {
    let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("matching widths")
}

fn stack_cols(parts: &[Mat]) -> Mat {
    let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
    ndarray::concatenate(ndarray::Axis(1), &views).expect("matching heights")
}

/// Clean-view features of `ids` under frozen `params`.
pub fn extract_features(spec: &ModelSpec, params: &ParamGroup, source: &dyn ViewSource, ids: &[usize]) -> Result<ViewFeatures> {
    params.check(spec)?;
    let m = spec.num_views();
    let (mut h, mut z, mut za) = (vec![Vec::new(); m], vec![Vec::new(); m], vec![Vec::new(); m]);
    let mut labels = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(CHUNK) {
        let batch = source.views(chunk, None)?;
        labels.extend_from_slice(&batch.labels);
        let g = Graph::new();
        let bound = params.bind(&g, Trainable::NONE);
        let fwd = spec.forward(&bound, &batch.views, true)?;
        for j in 0..m {
            h[j].push((*fwd.h[j].value()).clone());
            z[j].push((*fwd.z[j].value()).clone());
            za[j].push((*fwd.z_aug[j].value()).clone());
        }
    }
    let join = |parts: Vec<Vec<Mat>>| parts.iter().map(|p| stack_rows(p)).collect();
    Ok(ViewFeatures {
        ids: ids.to_vec(),
        labels,
        h: join(h),
        z: join(z),
        z_aug: join(za),
    })
}

impl ViewFeatures {
    /// Per-view features of `source`, concatenated column-wise across views.
    pub fn matrix(&self, source: FeatureSource) -> Mat {
        match source {
            FeatureSource::RepresentationH => stack_cols(&self.h),
            FeatureSource::ProjectedZ => stack_cols(&self.z),
            FeatureSource::ProjectedPlusAugmented => {
                let all: Vec<Mat> = self.z.iter().chain(&self.z_aug).cloned().collect();
                stack_cols(&all)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { steps: 500, lr: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub source: FeatureSource,
    pub accuracy: f64,
    /// Test accuracy per class; `None` for classes absent from the test split.
    pub per_class: Vec<Option<f64>>,
    pub class_counts: Vec<usize>,
    pub config: ProbeConfig,
}

fn standardize(train: &Mat, test: &Mat) -> (Mat, Mat) {
    let mean = train.mean_axis(ndarray::Axis(0)).expect("non-empty train split");
    let std = train.std_axis(ndarray::Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    ((train - &mean) / &std, (test - &mean) / &std)
}

/// Softmax regression by full-batch gradient descent from zero weights,
/// on features standardized with train-split statistics.
pub fn linear_probe_features(
    train_x: &Mat,
    train_y: &[usize],
    test_x: &Mat,
    test_y: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<(f64, Vec<Option<f64>>, Vec<usize>)> {
    if train_x.nrows() == 0 || test_x.nrows() == 0 {
        return Err(Error::invalid("probe needs non-empty train and test splits"));
    }
    if train_x.nrows() != train_y.len() || test_x.nrows() != test_y.len() || train_x.ncols() != test_x.ncols() {
        return Err(Error::invalid("probe features and labels disagree in shape"));
    }
    if let Some(&y) = train_y.iter().chain(test_y).find(|&&y| y >= n_classes) {
        return Err(Error::invalid(format!("label {y} out of range for {n_classes} classes")));
    }
    let (xtr, xte) = standardize(train_x, test_x);
    let (n, d) = xtr.dim();
    let mut w = Mat::zeros((d, n_classes));
    let mut b = ndarray::Array1::<f64>::zeros(n_classes);
    let mut onehot = Mat::zeros((n, n_classes));
    for (i, &y) in train_y.iter().enumerate() {
        onehot[[i, y]] = 1.0;
    }
    for _ in 0..cfg.steps {
        let mut p = xtr.dot(&w) + &b;
        for mut row in p.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let err = (p - &onehot) / n as f64;
        w.scaled_add(-cfg.lr, &xtr.t().dot(&err));
        b.scaled_add(-cfg.lr, &err.sum_axis(ndarray::Axis(0)));
    }
    let scores = xte.dot(&w) + &b;
    let mut hits = vec![0usize; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (row, &y) in scores.rows().into_iter().zip(test_y) {
        let pred = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &s)| if s > best.1 { (k, s) } else { best })
            .0;
        counts[y] += 1;
        hits[y] += usize::from(pred == y);
    }
    let accuracy = hits.iter().sum::<usize>() as f64 / test_y.len() as f64;
    let per_class = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
        .collect();
    Ok((accuracy, per_class, counts))
}

/// Train a linear probe on frozen train-split features and score it on the test split.
pub fn linear_probe(
    spec: &ModelSpec,
    params: &ParamGroup,
    source: &dyn ViewSource,
    feature: FeatureSource,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let split = source.split();
    let train = extract_features(spec, params, source, split.get(SplitName::Train))?;
    let test = extract_features(spec, params, source, split.get(SplitName::Test))?;
    probe_from_features(&train, &test, source.num_classes(), feature, cfg)
}

pub fn probe_from_features(
    train: &ViewFeatures,
    test: &ViewFeatures,
    n_classes: usize,
    feature: FeatureSource,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if n_classes < 2 {
        return Err(Error::invalid("linear probe needs a labelled dataset with at least two classes"));
    }
    let (accuracy, per_class, class_counts) = linear_probe_features(
        &train.matrix(feature),
        &train.labels,
        &test.matrix(feature),
        &test.labels,
        n_classes,
        cfg,
    )?;
    Ok(ProbeReport {
        source: feature,
        accuracy,
        per_class,
        class_counts,
        config: *cfg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    /// `z_i^j` against `z_k^j'`, `j < j'`.
    OriginalsOnly,
    /// `z_i^j` against `ẑ_k^j'`, every `j, j'`.
    AugmentedVsOriginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub population: Population,
    /// `bins + 1` edges over [0, 1].
    pub edges: Vec<f64>,
    pub count_same: Vec<u64>,
    pub count_diff: Vec<u64>,
    pub pairs_same: u64,
    pub pairs_diff: u64,
    pub mean_same: Option<f64>,
    pub mean_diff: Option<f64>,
}

pub const DEFAULT_BINS: usize = 50;
pub const MAX_DIFF_PAIRS: usize = 100_000;

fn bin_of(d: f64, bins: usize) -> usize {
    ((d.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Binned `d` over every same-sample pair and at most [`MAX_DIFF_PAIRS`]
/// different-sample pairs (uniformly drawn with `seed` when there are more).
pub fn similarity_histograms(features: &ViewFeatures, population: Population, bins: usize, seed: u64) -> Result<HistogramReport> {
    if bins < 10 {
        return Err(Error::invalid(format!("at least 10 bins are required, got {bins}")));
    }
    let m = features.z.len();
    let families: Vec<(&Mat, &Mat)> = match population {
        Population::OriginalsOnly => (0..m)
            .flat_map(|j| (j + 1..m).map(move |jp| (j, jp)))
            .map(|(j, jp)| (&features.z[j], &features.z[jp]))
            .collect(),
        Population::AugmentedVsOriginal => {
            if features.z_aug.len() != m {
                return Err(Error::invalid("augmented features are not available"));
            }
            (0..m)
                .flat_map(|j| (0..m).map(move |jp| (j, jp)))
                .map(|(j, jp)| (&features.z[j], &features.z_aug[jp]))
                .collect()
        }
    };
    let n = features.ids.len();
    let d = |(a, b): (&Mat, &Mat), i: usize, k: usize| {
        similarity_unchecked(a.row(i).as_slice().expect("row-major"), b.row(k).as_slice().expect("row-major"))
    };
    let mut count_same = vec![0u64; bins];
    let mut count_diff = vec![0u64; bins];
    let (mut sum_same, mut sum_diff) = (0.0, 0.0);
    for &fam in &families {
        for i in 0..n {
            let v = d(fam, i, i);
            sum_same += v;
            count_same[bin_of(v, bins)] += 1;
        }
    }
    let per_family = n * n.saturating_sub(1);
    let total = per_family * families.len();
    let mut visit = |flat: usize| {
        let (fam, r) = (flat / per_family, flat % per_family);
        let (i, k) = (r / (n - 1), r % (n - 1));
        let k = if k >= i { k + 1 } else { k };
        let v = d(families[fam], i, k);
        sum_diff += v;
        count_diff[bin_of(v, bins)] += 1;
    };
    if total <= MAX_DIFF_PAIRS {
        (0..total).for_each(&mut visit);
    } else {
        let mut rng = seed::stream(seed, "histogram-pairs", 0);
        let mut picks = index::sample(&mut rng, total, MAX_DIFF_PAIRS).into_vec();
        picks.sort_unstable();
        picks.into_iter().for_each(&mut visit);
    }
    let pairs_same = count_same.iter().sum::<u64>();
    let pairs_diff = count_diff.iter().sum::<u64>();
    Ok(HistogramReport {
        population,
        edges: (0..=bins).map(|b| b as f64 / bins as f64).collect(),
        count_same,
        count_diff,
        pairs_same,
        pairs_diff,
        mean_same: (pairs_same > 0).then(|| sum_same / pairs_same as f64),
        mean_diff: (pairs_diff > 0).then(|| sum_diff / pairs_diff as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseMetrics {
    pub mean_pairwise_sim: f64,
    pub per_dim_std: Vec<f64>,
    pub effective_rank: f64,
}

/// Collapse diagnostics of the rows of `features`. Rows are compared by `d`
/// after unit normalization.
pub fn collapse_metrics(features: &Mat) -> Result<CollapseMetrics> {
    let (n, dim) = features.dim();
    if n < 2 {
        return Err(Error::invalid(format!("collapse metrics need at least 2 rows, got {n}")));
    }
    let unit: Vec<Vec<f64>> = features
        .rows()
        .into_iter()
        .map(|r| {
            let norm = r.dot(&r).sqrt();
            r.iter().map(|x| if norm > 0.0 { x / norm } else { 0.0 }).collect()
        })
        .collect();
    let mut sum = 0.0;
    for i in 0..n {
        for k in i + 1..n {
            sum += similarity_unchecked(&unit[i], &unit[k]);
        }
    }
    let mean_pairwise_sim = sum / (n * (n - 1) / 2) as f64;
    let per_dim_std = features.std_axis(ndarray::Axis(0), 0.0).to_vec();
    let mean = features.mean_axis(ndarray::Axis(0)).expect("n >= 2");
    let centered = features - &mean;
    let svd = DMatrix::from_fn(n, dim, |i, k| centered[[i, k]]).singular_values();
    let total: f64 = svd.iter().sum();
    let effective_rank = if total <= 1e-12 * (n * dim) as f64 {
        1.0
    } else {
        let entropy: f64 = svd.iter().map(|s| s / total).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum();
        entropy.exp()
    };
    Ok(CollapseMetrics {
        mean_pairwise_sim,
        per_dim_std,
        effective_rank,
    })
}

/// Probe, collapse metrics and both histogram populations for one checkpoint.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ParamGroup,
    source: &dyn ViewSource,
    feature: FeatureSource,
    probe: &ProbeConfig,
    bins: usize,
    seed: u64,
) -> Result<EvalReport> {
    let split = source.split();
    let train = extract_features(spec, params, source, split.get(SplitName::Train))?;
    let test = extract_features(spec, params, source, split.get(SplitName::Test))?;
    let probe = probe_from_features(&train, &test, source.num_classes(), feature, probe)?;
    let collapse = collapse_metrics(&test.matrix(feature))?;
    let histograms = [Population::OriginalsOnly, Population::AugmentedVsOriginal]
        .into_iter()
        .map(|p| similarity_histograms(&test, p, bins, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        probe,
        collapse,
        histograms,
    })
}
