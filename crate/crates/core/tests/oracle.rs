use d2l::features::{compute_features, FeatureVector};
use d2l::generator::{FrozenGenerator, GeneratorDims};
use d2l::nn::{Mlp, OutputActivation};
use d2l::oracle::{
    fixed_stop, label_trajectories, select_features, should_stop, split_by_trajectory, train_oracle, windows_for,
    LabelConfig, LabeledWindow, OracleNet, OracleTrainConfig, StopRule, TrajectoryPoint, TrajectoryWindow, WINDOW_DIM,
};
use d2l::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fv(ssim: f64, feature_dot: f64, quality: f64, feature_std: f64) -> FeatureVector {
    FeatureVector {
        ssim,
        feature_dot,
        quality,
        feature_std,
    }
}

#[test]
fn n_of_k_truth_table() {
    for bits in 0u32..8 {
        let history: Vec<f64> = (0..3).map(|i| if bits >> i & 1 == 1 { 0.9 } else { 0.1 }).collect();
        let expected = bits.count_ones() >= 2;
        assert_eq!(should_stop(&history, StopRule::default(), 0.5), expected, "{history:?}");
        let mut longer = vec![0.9, 0.9, 0.9];
        longer.extend(&history);
        assert_eq!(should_stop(&longer, StopRule::default(), 0.5), expected);
    }
    assert!(!should_stop(&[0.9, 0.9], StopRule::default(), 0.5));
    assert!(should_stop(&[0.1, 0.5, 0.5], StopRule::default(), 0.5));
    assert!(!should_stop(&[0.9, 0.9, 0.8], StopRule::Consecutive { n: 3 }, 0.85));
}

#[test]
fn fixed_rule_truth_table() {
    let target = 3;
    for bits in 0u32..16 {
        let history: Vec<usize> = (0..4).map(|i| if bits >> i & 1 == 1 { target } else { 7 }).collect();
        assert_eq!(fixed_stop(&history, target), bits == 15, "{history:?}");
    }
    assert!(!fixed_stop(&[3, 3, 3], 3));
    assert!(fixed_stop(&[1, 3, 3, 3, 3], 3));
}

fn point(p: f64, quality: f64, spread: f64) -> TrajectoryPoint {
    TrajectoryPoint {
        target_prob: p,
        features: fv(0.5, 1.0, quality, spread),
    }
}

#[test]
fn band_entry_sets_the_label() {
    let probs = [0.0, 0.01, 0.02, 0.04, 0.07, 0.1, 0.15, 0.25, 0.5, 0.8, 0.95];
    let traj: Vec<TrajectoryPoint> = probs.iter().map(|&p| point(p, 0.9, 1.0)).collect();
    // Enters the band on quality alone, later.
    let mut late = traj.clone();
    late[7].features.quality = 0.3;
    // Never satisfies diversity inside the band.
    let mut flat: Vec<TrajectoryPoint> = probs.iter().map(|&p| point(p, 0.9, 0.01)).collect();
    flat[0].features.feature_std = 1.0;

    let set = label_trajectories(&[traj, late, flat], &LabelConfig::default()).unwrap();
    assert_eq!(set.labels, vec![Some(7), Some(8), None]);
    assert_eq!(set.discarded, 1);
    assert!((set.diversity_floor - 0.25).abs() < 1e-15);

    let first: Vec<&LabeledWindow> = set.windows.iter().filter(|w| w.trajectory == 0).collect();
    assert_eq!(first.len(), probs.len() - 2);
    for w in first {
        assert_eq!(w.label, w.iteration >= 7);
    }
}

#[test]
fn labels_are_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let len = rng.random_range(3..30);
        let feats: Vec<FeatureVector> = (0..len)
            .map(|_| fv(rng.random(), rng.random(), rng.random(), rng.random()))
            .collect();
        let label = rng.random_range(0..len);
        let w = windows_for(0, &feats, label);
        assert_eq!(w.len(), len - 2);
        assert!(w.windows(2).all(|p| p[0].label <= p[1].label));
        assert_eq!(w.iter().filter(|x| x.label).count(), len - label.max(2));
    }
}

#[test]
fn all_discarded_is_an_error() {
    let traj = vec![point(0.0, 0.9, 1.0), point(0.9, 0.9, 1.0)];
    assert!(matches!(
        label_trajectories(&[traj], &LabelConfig::default()),
        Err(Error::NoLabeledTrajectories)
    ));
}

#[test]
fn windows_are_relative_to_the_start() {
    let feats = [
        fv(0.5, 4.0, 0.8, 2.0),
        fv(0.4, 2.0, 0.7, 1.0),
        fv(0.3, 8.0, 0.6, 3.0),
        fv(0.2, 1.0, 0.5, 0.5),
    ];
    assert!(TrajectoryWindow::ending_at(&feats, 1).is_none());
    assert!(TrajectoryWindow::ending_at(&feats, 4).is_none());
    let w = TrajectoryWindow::ending_at(&feats, 3).unwrap().flatten();
    let expected = [0.8, 0.5, 0.7, 0.5, 0.6, 2.0, 0.6, 1.5, 0.4, 0.25, 0.5, 0.25];
    for (a, b) in w.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{w:?}");
    }
}

fn separable(n: usize, rng: &mut ChaCha8Rng) -> Vec<LabeledWindow> {
    (0..n)
        .map(|i| {
            let label = rng.random_bool(0.5);
            let mut features = [0.0; WINDOW_DIM];
            for f in features.iter_mut() {
                *f = rng.random_range(-1.0..1.0);
            }
            features[5] = if label { 2.0 } else { -2.0 } + rng.random_range(-0.5..0.5);
            LabeledWindow {
                trajectory: i / 4,
                iteration: 2 + i % 4,
                features,
                label,
            }
        })
        .collect()
}

#[test]
fn oracle_learns_separable_windows() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let windows = separable(800, &mut rng);
    let (train, val) = split_by_trajectory(&windows, 0.2, 1);
    let mut ids: Vec<usize> = val.iter().map(|w| w.trajectory).collect();
    ids.dedup();
    assert!(train.iter().all(|w| !ids.contains(&w.trajectory)));
    let (oracle, report) = train_oracle(&train, &val, &OracleTrainConfig::default()).unwrap();
    assert!(report.val_accuracy >= 0.95, "{report:?}");
    let p = oracle.predict(&val[0].features).unwrap();
    assert!(p > 0.0 && p < 1.0);

    let dir = tempfile::tempdir().unwrap();
    oracle.save(dir.path(), &report).unwrap();
    let (back, manifest) = OracleNet::load(dir.path()).unwrap();
    assert_eq!(back.hash(), oracle.hash());
    assert_eq!(manifest.report, report);
}

#[test]
fn single_class_training_is_refused() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut windows = separable(40, &mut rng);
    windows.iter_mut().for_each(|w| w.label = true);
    assert!(matches!(
        train_oracle(&windows, &windows, &OracleTrainConfig::default()),
        Err(Error::SingleClassLabels)
    ));
}

#[test]
fn ranking_prefers_the_label() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let labels: Vec<bool> = (0..400).map(|_| rng.random_bool(0.5)).collect();
    let rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| {
            let y = f64::from(u8::from(l));
            vec![rng.random_range(-1.0..1.0), y, y + rng.random_range(-0.8..0.8)]
        })
        .collect();
    let ranking = select_features(&["noise", "label", "blurred"], &rows, &labels, 0).unwrap();
    let names: Vec<&str> = ranking.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["label", "blurred", "noise"]);
    assert!(ranking[2].1.abs() < 0.05 * ranking[0].1, "{ranking:?}");
}

/// Mean SSIM written over gathered windows.
fn ssim_reference(a: &[f64], b: &[f64], grid: usize) -> f64 {
    let (c1, c2) = (1e-4, 9e-4);
    let mut scores = Vec::new();
    for r0 in (0..=grid - 4).step_by(2) {
        for c0 in (0..=grid - 4).step_by(2) {
            let idx: Vec<usize> = (r0..r0 + 4)
                .flat_map(|r| (c0..c0 + 4).map(move |c| r * grid + c))
                .collect();
            let xa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
            let xb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
            let n = 16.0;
            let ma = xa.iter().sum::<f64>() / n;
            let mb = xb.iter().sum::<f64>() / n;
            let va = xa.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
            let vb = xb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
            let cov = xa.iter().zip(&xb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
            scores.push((2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[test]
fn features_match_a_direct_computation() {
    let dims = GeneratorDims {
        pixels: 36,
        embed: 5,
        soft: 3,
        text: 3,
        noise: 2,
        enc_hidden: 8,
        dec_hidden: 8,
    };
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Mlp::new(&[36, 8, 5], OutputActivation::Identity, &mut rng);
        let dec = Mlp::new(&[5 + 3 + 3 + 2, 8, 36], OutputActivation::Sigmoid, &mut rng);
        let gen = FrozenGenerator::from_parts(enc, dec, dims, 3.0).unwrap();
        let net = Mlp::new(&[36, 10, 7, 4], OutputActivation::Identity, &mut rng);
        let g = Tensor::from_shape_simple_fn((5, 36), || rng.random::<f64>());
        let x = Tensor::from_shape_simple_fn((5, 36), || rng.random::<f64>());

        let got = compute_features(&g, &x, &net, &gen).unwrap();

        let ssim = (0..5)
            .map(|i| ssim_reference(g.row(i).as_slice().unwrap(), x.row(i).as_slice().unwrap(), 6))
            .sum::<f64>()
            / 5.0;
        let (_, fg) = net.forward(&g).unwrap();
        let (_, fx) = net.forward(&x).unwrap();
        let dot = (&fg * &fx).sum() / 5.0;
        let spread = fg.std_axis(ndarray::Axis(0), 0.0).mean().unwrap();
        let recon = gen.reconstruct(&g).unwrap();
        let quality = ((&g - &recon).mapv(|d| d * d).mean_axis(ndarray::Axis(1)).unwrap())
            .mapv(|e| (-3.0 * e).exp())
            .mean()
            .unwrap();

        for (a, b) in got.to_array().iter().zip([ssim, dot, quality, spread]) {
            assert!(
                (a - b).abs() <= 1e-10 * b.abs().max(1.0),
                "{got:?} vs {:?}",
                [ssim, dot, quality, spread]
            );
        }
    }
}

#[test]
fn feature_shape_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dims = GeneratorDims {
        pixels: 36,
        embed: 5,
        soft: 3,
        text: 3,
        noise: 2,
        enc_hidden: 8,
        dec_hidden: 8,
    };
    let enc = Mlp::new(&[36, 8, 5], OutputActivation::Identity, &mut rng);
    let dec = Mlp::new(&[13, 8, 36], OutputActivation::Sigmoid, &mut rng);
    let gen = FrozenGenerator::from_parts(enc, dec, dims, 1.0).unwrap();
    let net = Mlp::new(&[36, 10, 4], OutputActivation::Identity, &mut rng);
    let a = Tensor::zeros((2, 36));
    let b = Tensor::zeros((3, 36));
    assert!(compute_features(&a, &b, &net, &gen).is_err());
    assert!(compute_features(&Tensor::zeros((0, 36)), &Tensor::zeros((0, 36)), &net, &gen).is_err());
}
