mod common;

use common::inclusion_counts;
use d2l::replay::{Offer, ReplayBuffer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn inclusion_is_uniform() {
    let (capacity, stream, trials) = (100, 1000, 10_000);
    let counts = inclusion_counts(capacity, stream, trials, 0);
    let p = capacity as f64 / stream as f64;
    let sigma = (p * (1.0 - p) / trials as f64).sqrt();
    let outside: Vec<(usize, f64)> = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (i, c as f64 / trials as f64))
        .filter(|(_, f)| (f - p).abs() > 3.0 * sigma)
        .collect();
    assert_eq!(counts.iter().map(|&c| c as usize).sum::<usize>(), capacity * trials);
    assert!(outside.is_empty(), "items outside ±3σ of {p}: {outside:?}");
}

#[test]
fn under_capacity_keeps_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut buf = ReplayBuffer::new(100, 1);
    for i in 0..60 {
        assert_eq!(
            buf.reservoir_insert(Offer::real(&[i as f64], i), &mut rng).unwrap(),
            Some(i)
        );
    }
    assert_eq!(buf.labels(), (0..60).collect::<Vec<_>>().as_slice());
    assert_eq!(buf.seen_count(), 60);
}

#[test]
fn counts_disperse_like_binomials() {
    let (capacity, stream, trials) = (100, 1000, 10_000);
    let counts = inclusion_counts(capacity, stream, trials, 0);
    let p = capacity as f64 / stream as f64;
    let var = trials as f64 * p * (1.0 - p);
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - trials as f64 * p).powi(2) / var)
        .sum();
    let df = (stream - 1) as f64;
    let spread = (2.0 * df).sqrt();
    assert!(
        (chi2 - df).abs() < 4.0 * spread,
        "chi-square {chi2:.1} on {df} degrees of freedom"
    );
}
