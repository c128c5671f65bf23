use d2l::metrics::{
    aggregate, count_leaks, evaluate_classes, random_baseline, table_through, train_joint_classifier, AccuracyMatrix,
    MeanStd, Replacement, ResultRow,
};
use d2l::nn::{classifier, DEFAULT_CLASSIFIER_HIDDEN};
use d2l::synth::{make_benchmark, BenchmarkSpec, TaskStream};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bench() -> TaskStream {
    make_benchmark(&BenchmarkSpec::default()).unwrap()
}

#[test]
fn faa_union_equals_weighted_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let t = rng.random_range(2..8);
        let totals: Vec<usize> = (0..t).map(|_| rng.random_range(1..500)).collect();
        let mut m = AccuracyMatrix::new(totals.clone());
        for (i, &n) in totals.iter().enumerate() {
            m.set(i, t, rng.random_range(0..=n)).unwrap();
        }
        assert!((m.faa() - m.faa_weighted()).abs() <= 1e-12);
    }
}

#[test]
fn faa_examples() {
    let mut m = AccuracyMatrix::new(vec![20, 20]);
    m.set(0, 2, 10).unwrap();
    m.set(1, 2, 6).unwrap();
    assert!((m.faa() - 0.4).abs() < 1e-15);
    m.set(0, 2, 20).unwrap();
    m.set(1, 2, 20).unwrap();
    assert_eq!(m.faa(), 1.0);
}

#[test]
fn random_networks_sit_at_chance() {
    let stream = bench();
    let all = stream.all_test();
    let classes: Vec<usize> = (0..stream.num_classes()).collect();
    let table = table_through(&stream, stream.tasks.len() - 1, stream.num_classes()).unwrap();
    let acc: Vec<f64> = (0..40)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = classifier(
                stream.pixels(),
                &DEFAULT_CLASSIFIER_HIDDEN,
                stream.num_classes(),
                &mut rng,
            );
            let (c, n) = evaluate_classes(&net, &table, &all, &classes).unwrap();
            c as f64 / n as f64
        })
        .collect();
    let s = MeanStd::of(&acc);
    let chance = 1.0 / stream.num_classes() as f64;
    assert!(
        (s.mean - chance).abs() <= 3.0 * s.std / (s.n as f64).sqrt(),
        "{s} vs {chance}"
    );
}

#[test]
fn fwt_of_untrained_model_is_zero() {
    let stream = bench();
    let width = stream.num_classes();
    let seed = 77;
    let baseline = random_baseline(&stream, width, &[seed]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = classifier(stream.pixels(), &DEFAULT_CLASSIFIER_HIDDEN, width, &mut rng);
    let mut m = AccuracyMatrix::new(stream.tasks.iter().map(|t| t.test.len()).collect());
    for (t, task) in stream.tasks.iter().enumerate() {
        let table = table_through(&stream, t, width).unwrap();
        let (c, _) = evaluate_classes(&net, &table, &task.test, &task.classes).unwrap();
        m.set(t, t, c).unwrap();
    }
    assert_eq!(m.fwt(&baseline).unwrap(), 0.0);
}

#[test]
fn fwt_arithmetic() {
    let mut m = AccuracyMatrix::new(vec![10, 10, 20]);
    m.set(1, 1, 4).unwrap();
    m.set(2, 2, 6).unwrap();
    let v = m.fwt(&[0.0, 0.2, 0.25]).unwrap();
    assert!((v - 0.125).abs() < 1e-15);
    assert!(m.fwt(&[0.0, 0.2]).is_err());
}

#[test]
fn constructed_leak_is_detected() {
    let stream = bench();
    let joint = train_joint_classifier(&stream, 5, 3).unwrap();
    let test = stream.all_test();
    let copies = |class: usize| test.filter(|l| l == class).images;
    let replacement = |class: usize, source: usize| Replacement {
        task: 1,
        class,
        head: 0,
        dream_id: 0,
        dream_source: source,
        stop_samples: copies(source),
    };
    let none = count_leaks(&[], &joint).unwrap();
    assert_eq!((none.leaks, none.fraction), (0, 0.0));

    let leak = count_leaks(&[replacement(9, 9)], &joint).unwrap();
    assert_eq!((leak.leaks, leak.fraction), (1, 1.0));

    let mixed = count_leaks(&[replacement(9, 9), replacement(9, 2), replacement(12, 3)], &joint).unwrap();
    assert_eq!(mixed.leaks, 1);
    assert!((0.0..=1.0).contains(&mixed.fraction));
}

#[test]
fn aggregation_uses_sample_std() {
    let row = |method: &str, seed, faa| ResultRow {
        method: method.into(),
        buffer: 200,
        seed,
        faa,
        fwt: 0.0,
        leaks: 0,
        leak_fraction: 0.0,
    };
    let rows = [row("er", 0, 0.5), row("er", 1, 0.7), row("er-ace", 0, 0.9)];
    let s = aggregate(&rows);
    assert_eq!(s.len(), 2);
    assert!((s[0].faa.mean - 0.6).abs() < 1e-15);
    assert!((s[0].faa.std - 0.02f64.sqrt()).abs() < 1e-15);
    assert_eq!(s[1].faa.n, 1);
}
