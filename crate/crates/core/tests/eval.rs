use metaug::data::{gen_synthetic_multiview, Dataset, SyntheticConfig, ViewSource};
use metaug::diff::Mat;
use metaug::eval::{
    collapse_metrics, evaluate, export_histogram_csv, export_reports, extract_features, import_reports, linear_probe_features,
    similarity_histograms, FeatureSource, Population, ProbeConfig, ReportFormat, ViewFeatures,
};
use metaug::losses::similarity_unchecked;
use metaug::trainer::{TrainConfig, Trainer};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn dataset() -> Dataset {
    gen_synthetic_multiview(&SyntheticConfig::default()).unwrap()
}

fn raw(data: &Dataset, ids: &[usize]) -> (Mat, Vec<usize>) {
    let labels = data.labels();
    (data.concatenated(ids), ids.iter().map(|&i| labels[i]).collect())
}

/// Ridge regression onto one-hot targets, solved in closed form.
fn ridge_accuracy(train_x: &Mat, train_y: &[usize], test_x: &Mat, test_y: &[usize], classes: usize) -> f64 {
    let aug = |x: &Mat| DMatrix::from_fn(x.nrows(), x.ncols() + 1, |i, k| if k == x.ncols() { 1.0 } else { x[[i, k]] });
    let (a, t) = (aug(train_x), aug(test_x));
    let y = DMatrix::from_fn(train_y.len(), classes, |i, c| f64::from(train_y[i] == c));
    let gram = a.transpose() * &a + DMatrix::identity(a.ncols(), a.ncols()) * 1e-3;
    let w = gram.cholesky().unwrap().solve(&(a.transpose() * y));
    let scores = t * w;
    let hits = (0..test_y.len())
        .filter(|&i| scores.row(i).transpose().argmax().0 == test_y[i])
        .count();
    hits as f64 / test_y.len() as f64
}

fn entropy_rank_oracle(m: &Mat) -> f64 {
    let (n, d) = m.dim();
    let mean = m.mean_axis(ndarray::Axis(0)).unwrap();
    let c = DMatrix::from_fn(n, d, |i, k| m[[i, k]] - mean[k]);
    let eig = (c.transpose() * c).symmetric_eigen();
    let s: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    let total: f64 = s.iter().sum();
    let h: f64 = s.iter().map(|x| x / total).filter(|&p| p > 1e-15).map(|p| -p * p.ln()).sum();
    h.exp()
}

#[test]
fn raw_synthetic_views_are_linearly_separable_and_match_a_ridge_oracle() {
    let data = dataset();
    let (xtr, ytr) = raw(&data, &data.split.train);
    let (xte, yte) = raw(&data, &data.split.test);
    let (acc, per_class, counts) = linear_probe_features(&xtr, &ytr, &xte, &yte, 4, &ProbeConfig::default()).unwrap();
    let oracle = ridge_accuracy(&xtr, &ytr, &xte, &yte, 4);
    assert!(acc >= 0.95, "probe accuracy {acc}");
    assert!(oracle >= 0.95, "oracle accuracy {oracle}");
    assert!((acc - oracle).abs() <= 0.02, "probe {acc} vs oracle {oracle}");
    assert_eq!(counts.iter().sum::<usize>(), yte.len());
    assert!(per_class.iter().all(|p| p.is_some()));
}

#[test]
fn shuffled_labels_probe_at_chance() {
    let data = dataset();
    let (xtr, ytr) = raw(&data, &data.split.train);
    let (xte, yte) = raw(&data, &data.split.test);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut total = 0.0;
    for _ in 0..10 {
        let mut shuffled = ytr.clone();
        shuffled.shuffle(&mut rng);
        total += linear_probe_features(&xtr, &shuffled, &xte, &yte, 4, &ProbeConfig::default())
            .unwrap()
            .0;
    }
    let mean = total / 10.0;
    assert!((mean - 0.25).abs() <= 0.05, "mean shuffled accuracy {mean}");
}

#[test]
fn probe_rejects_unlabelled_or_mismatched_input() {
    let x = Mat::zeros((4, 2));
    assert!(linear_probe_features(&x, &[0, 1, 0], &x, &[0, 1, 0, 1], 2, &ProbeConfig::default()).is_err());
    assert!(linear_probe_features(&x, &[0, 1, 0, 2], &x, &[0, 1, 0, 1], 2, &ProbeConfig::default()).is_err());
    assert!(linear_probe_features(&Mat::zeros((0, 2)), &[], &x, &[0, 1, 0, 1], 2, &ProbeConfig::default()).is_err());
}

#[test]
fn orthonormal_rows_have_effective_rank_one_below_their_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = DMatrix::from_fn(8, 8, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = a.qr().q();
    let m = Mat::from_shape_fn((8, 8), |(i, k)| q[(i, k)]);
    let got = collapse_metrics(&m).unwrap().effective_rank;
    assert!((got - entropy_rank_oracle(&m)).abs() < 1e-9);
    // Centering removes one direction and leaves seven equal singular values.
    assert!((got - 7.0).abs() < 1e-9, "{got}");
}

#[test]
fn gaussian_features_have_high_effective_rank() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Mat::from_shape_fn((64, 16), |_| rng.sample(StandardNormal));
        let r = collapse_metrics(&m).unwrap();
        assert!((12.0..=16.0).contains(&r.effective_rank), "seed {seed}: {}", r.effective_rank);
        assert!((r.effective_rank - entropy_rank_oracle(&m)).abs() < 1e-8);
    }
}

#[test]
fn collapsed_features_have_rank_one_and_unit_similarity() {
    let m = Mat::from_shape_fn((10, 4), |(_, k)| k as f64 + 1.0);
    let r = collapse_metrics(&m).unwrap();
    assert_eq!(r.effective_rank, 1.0);
    assert!((r.mean_pairwise_sim - 1.0).abs() < 1e-12);
    assert!(r.per_dim_std.iter().all(|&s| s == 0.0));
    assert!(collapse_metrics(&Mat::zeros((1, 4))).is_err());
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Mat {
    let mut m = Mat::from_shape_fn((n, d), |_| rng.sample(StandardNormal));
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|x| x / norm);
    }
    m
}

#[test]
fn histogram_counts_match_a_brute_force_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, m, bins) = (12, 3, 20);
    let features = ViewFeatures {
        ids: (0..n).collect(),
        labels: vec![0; n],
        h: vec![],
        z: (0..m).map(|_| random_unit(&mut rng, n, 6)).collect(),
        z_aug: (0..m).map(|_| random_unit(&mut rng, n, 6)).collect(),
    };
    let bin = |d: f64| ((d * bins as f64) as usize).min(bins - 1);
    for population in [Population::OriginalsOnly, Population::AugmentedVsOriginal] {
        let mut same = vec![0u64; bins];
        let mut diff = vec![0u64; bins];
        for j in 0..m {
            for jp in 0..m {
                let (a, b) = match population {
                    Population::OriginalsOnly if j < jp => (&features.z[j], &features.z[jp]),
                    Population::OriginalsOnly => continue,
                    Population::AugmentedVsOriginal => (&features.z[j], &features.z_aug[jp]),
                };
                for i in 0..n {
                    for k in 0..n {
                        let d = similarity_unchecked(a.row(i).as_slice().unwrap(), b.row(k).as_slice().unwrap());
                        if i == k {
                            same[bin(d)] += 1
                        } else {
                            diff[bin(d)] += 1
                        }
                    }
                }
            }
        }
        let h = similarity_histograms(&features, population, bins, 0).unwrap();
        assert_eq!(h.count_same, same, "{population:?}");
        assert_eq!(h.count_diff, diff, "{population:?}");
        assert_eq!(h.edges.len(), bins + 1);
        assert_eq!((h.edges[0], h.edges[bins]), (0.0, 1.0));
    }
    assert!(similarity_histograms(&features, Population::OriginalsOnly, 9, 0).is_err());
}

#[test]
fn different_sample_pairs_are_capped() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 260;
    let features = ViewFeatures {
        ids: (0..n).collect(),
        labels: vec![0; n],
        h: vec![],
        z: (0..2).map(|_| random_unit(&mut rng, n, 4)).collect(),
        z_aug: (0..2).map(|_| random_unit(&mut rng, n, 4)).collect(),
    };
    let h = similarity_histograms(&features, Population::AugmentedVsOriginal, 50, 1).unwrap();
    assert_eq!(h.pairs_same, 4 * n as u64);
    assert_eq!(h.pairs_diff, 100_000);
    assert_eq!(h, similarity_histograms(&features, Population::AugmentedVsOriginal, 50, 1).unwrap());
}

#[test]
fn reports_round_trip_and_histogram_csv_sums_to_pair_counts() {
    let data = gen_synthetic_multiview(&SyntheticConfig {
        n_per_class: 20,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let trainer = Trainer::new(
        TrainConfig {
            batch_size: 16,
            ..TrainConfig::default()
        },
        &data,
    )
    .unwrap();
    let before = trainer.params.clone();
    let reports: Vec<_> = [FeatureSource::RepresentationH, FeatureSource::ProjectedPlusAugmented]
        .into_iter()
        .map(|f| evaluate(&trainer.spec, &trainer.params, &data, f, &ProbeConfig::default(), 50, 0).unwrap())
        .collect();
    assert_eq!(trainer.params, before, "evaluation must not touch parameters");

    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("r.json");
    export_reports(&reports, &json, ReportFormat::Json).unwrap();
    assert_eq!(import_reports(&json).unwrap(), reports);

    let csv = dir.path().join("r.csv");
    export_reports(&reports, &csv, ReportFormat::Csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "source,accuracy,mean_pairwise_sim,mean_dim_std,effective_rank");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("z+aug,"));
    export_reports(&[], &csv, ReportFormat::Csv).unwrap();
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1);

    for h in &reports[0].histograms {
        let path = dir.path().join("h.csv");
        export_histogram_csv(h, &path).unwrap();
        let (mut same, mut diff) = (0u64, 0u64);
        for line in std::fs::read_to_string(&path).unwrap().lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            same += cols[2].parse::<u64>().unwrap();
            diff += cols[3].parse::<u64>().unwrap();
        }
        assert_eq!((same, diff), (h.pairs_same, h.pairs_diff));
    }
}

#[test]
fn untrained_generators_leave_features_unchanged() {
    let data = gen_synthetic_multiview(&SyntheticConfig {
        n_per_class: 10,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let trainer = Trainer::new(
        TrainConfig {
            batch_size: 8,
            ..TrainConfig::default()
        },
        &data,
    )
    .unwrap();
    let f = extract_features(&trainer.spec, &trainer.params, &data, &data.split.test).unwrap();
    assert_eq!(f.z, f.z_aug);
    let h = similarity_histograms(&f, Population::AugmentedVsOriginal, 50, 0).unwrap();
    // The j = j' same-sample pairs sit exactly at 1.
    assert!(h.count_same[49] >= 2 * f.ids.len() as u64);
}
