#![allow(dead_code)]

use otfp::{Cost, DiscreteMeasure, FeatureSystem, Point, Problem};
use rand::Rng;

pub fn line(xs: &[f64]) -> DiscreteMeasure {
    DiscreteMeasure::uniform(xs.iter().map(|&x| Point::scalar(x).unwrap()).collect()).unwrap()
}

pub fn random_weights<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

pub fn random_measure<R: Rng>(rng: &mut R, k: usize, dim: usize) -> DiscreteMeasure {
    let pts = (0..k)
        .map(|_| Point::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    DiscreteMeasure::new(pts, random_weights(rng, k)).unwrap()
}

/// Smooth random features `f_k(y) = sin(a_k·y + b_k)`, or `y` itself for the first `dim`.
pub fn random_features<R: Rng>(rng: &mut R, dim: usize, m: usize) -> FeatureSystem {
    let coeffs: Vec<(Vec<f64>, f64)> = (0..m)
        .map(|_| ((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(), rng.random_range(-1.0..1.0)))
        .collect();
    FeatureSystem::custom(m, vec![0.0; m], move |y| {
        coeffs
            .iter()
            .map(|(a, b)| (a.iter().zip(y).map(|(u, v)| u * v).sum::<f64>() + b).sin())
            .collect()
    })
    .unwrap()
}

/// Random instance whose targets are the moments of a random measure with
/// full support on the target atoms, so the moment class has interior points.
pub fn random_problem<R: Rng>(rng: &mut R, dim: usize, m: usize, k1: usize, k2: usize) -> Problem {
    let mu1 = random_measure(rng, k1, dim);
    let mu2 = random_measure(rng, k2, dim);
    let feats = random_features(rng, dim, m);
    let p = Problem::new(mu1, mu2, Cost::HalfSquaredEuclidean, &feats).unwrap();
    let w = random_weights(rng, k2);
    let mut r = vec![0.0; m];
    for (j, wj) in w.iter().enumerate() {
        for (a, f) in r.iter_mut().zip(p.feature(j)) {
            *a += wj * f;
        }
    }
    p.with_targets(r).unwrap()
}
