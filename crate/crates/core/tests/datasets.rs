//! Oracles for the synthetic generators, SF noise, and dataset I/O.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slicekit::datasets::{
    gen_perturbed_boundary, gen_random_slices, noisy_sf_from_truth, stratified_split, Dataset, SynthSpec,
    DEFAULT_N, DEFAULT_SLICE_RADIUS,
};
use slicekit::metrics::f1;

/// Linear soft-margin SVM by Pegasos subgradient steps; returns (w1, w2, b).
fn max_margin(points: &[[f64; 2]], labels: &[u8], seed: u64) -> [f64; 3] {
    let lambda = 1e-4;
    let mut w = [0.0f64; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..points.len()).collect();
    let mut t = 0.0;
    for _ in 0..60 {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1.0;
            let eta = 1.0 / (lambda * t);
            let y = if labels[i] == 1 { 1.0 } else { -1.0 };
            let x = [points[i][0], points[i][1], 1.0];
            let margin = y * (w[0] * x[0] + w[1] * x[1] + w[2]);
            w[0] *= 1.0 - eta * lambda;
            w[1] *= 1.0 - eta * lambda;
            if margin < 1.0 {
                for j in 0..3 {
                    w[j] += eta * y * x[j];
                }
            }
        }
    }
    w
}

fn linear_preds(w: [f64; 3], points: &[[f64; 2]]) -> Vec<u8> {
    points
        .iter()
        .map(|p| u8::from(w[0] * p[0] + w[1] * p[1] + w[2] > 0.0))
        .collect()
}

fn points(ds: &Dataset) -> Vec<[f64; 2]> {
    (0..ds.len()).map(|i| ds.point(i)).collect()
}

#[test]
fn linear_model_misses_the_slices() {
    for seed in 0..3 {
        let ds = gen_perturbed_boundary(&SynthSpec::perturbed_boundary(
            DEFAULT_N,
            DEFAULT_SLICE_RADIUS,
            seed,
        ))
        .unwrap();
        let pts = points(&ds);
        let preds = linear_preds(max_margin(&pts, ds.labels(), seed), &pts);
        let overall = f1(&preds, ds.labels()).unwrap();
        assert!(overall >= 90.0, "seed {seed}: overall F1 {overall}");
        for s in 0..ds.num_slices() {
            let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.slice(s)[i]).collect();
            let p: Vec<u8> = idx.iter().map(|&i| preds[i]).collect();
            let l: Vec<u8> = idx.iter().map(|&i| ds.labels()[i]).collect();
            let sf1 = f1(&p, &l).unwrap();
            assert!(sf1 < 60.0, "seed {seed} slice {s}: F1 {sf1}");
        }
    }
}

#[test]
fn perceptron_separates_data_outside_slices() {
    let ds =
        gen_perturbed_boundary(&SynthSpec::perturbed_boundary(DEFAULT_N, DEFAULT_SLICE_RADIUS, 4)).unwrap();
    let keep: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.slices().iter().all(|s| !s[i]))
        .collect();
    let pts: Vec<[f64; 2]> = keep.iter().map(|&i| ds.point(i)).collect();
    let labels: Vec<u8> = keep.iter().map(|&i| ds.labels()[i]).collect();
    let mut w = [0.0f64; 3];
    let mut converged = false;
    for _ in 0..10_000 {
        let mut mistakes = 0;
        for (p, &l) in pts.iter().zip(&labels) {
            let y = if l == 1 { 1.0 } else { -1.0 };
            if y * (w[0] * p[0] + w[1] * p[1] + w[2]) <= 0.0 {
                w[0] += y * p[0];
                w[1] += y * p[1];
                w[2] += y;
                mistakes += 1;
            }
        }
        if mistakes == 0 {
            converged = true;
            break;
        }
    }
    assert!(converged, "perceptron did not separate the non-slice data");
    assert_eq!(linear_preds(w, &pts), labels);
}

#[test]
fn sf_noise_flip_fraction_is_binomial() {
    let ds =
        gen_perturbed_boundary(&SynthSpec::perturbed_boundary(DEFAULT_N, DEFAULT_SLICE_RADIUS, 9)).unwrap();
    let n = ds.len() as f64;
    let sigma = (n * 0.4 * 0.6).sqrt();
    for seed in 0..5 {
        let noisy = noisy_sf_from_truth(&ds, 0, 0.4, seed).unwrap();
        let flips = noisy
            .iter()
            .zip(ds.slice(0))
            .filter(|(&v, &t)| (v == 1) != t)
            .count() as f64;
        assert!(
            (flips - 0.4 * n).abs() <= 3.0 * sigma,
            "seed {seed}: {flips} flips"
        );
    }
    let exact = noisy_sf_from_truth(&ds, 1, 0.0, 0).unwrap();
    assert!(exact.iter().zip(ds.slice(1)).all(|(&v, &t)| (v == 1) == t));
    let flipped = noisy_sf_from_truth(&ds, 1, 1.0, 0).unwrap();
    assert!(flipped.iter().zip(ds.slice(1)).all(|(&v, &t)| (v == 1) != t));
    assert!(noisy_sf_from_truth(&ds, 0, 1.5, 0).is_err());
}

#[test]
fn csv_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in [0, rng.gen_range(1..1000)] {
        let ds = gen_random_slices(&SynthSpec::random_slices(1500, 4, seed)).unwrap();
        let ds = stratified_split(&ds, [0.7, 0.15, 0.15], seed).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.slices(), ds.slices());
        assert_eq!(back.splits(), ds.splits());
        for (a, b) in back.features().data().iter().zip(ds.features().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn split_keeps_class_balance() {
    for seed in 0..5 {
        let ds = gen_perturbed_boundary(&SynthSpec::perturbed_boundary(
            DEFAULT_N,
            DEFAULT_SLICE_RADIUS,
            seed,
        ))
        .unwrap();
        let ds = stratified_split(&ds, [0.7, 0.15, 0.15], seed).unwrap();
        let overall = ds.positive_rate();
        for split in slicekit::datasets::Split::ALL {
            let rate = ds.subset(split).positive_rate();
            assert!(
                (rate - overall).abs() <= 0.05,
                "seed {seed} {split:?}: {rate} vs {overall}"
            );
        }
    }
}
