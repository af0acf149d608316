#![allow(dead_code)]

use cellshap::LocationScatter;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `A A' / p + 0.1 I` with standard normal `A`, rescaled to random variances.
pub fn random_sigma<R: Rng>(rng: &mut R, p: usize) -> DMatrix<f64> {
    let a = DMatrix::<f64>::from_fn(p, p, |_, _| rng.sample(StandardNormal));
    let mut s = &a * a.transpose() / p as f64 + DMatrix::<f64>::identity(p, p) * 0.1;
    let scale: Vec<f64> = (0..p).map(|_| rng.random_range(0.5..2.0)).collect();
    for i in 0..p {
        for j in 0..p {
            s[(i, j)] *= scale[i] * scale[j];
        }
    }
    // exact symmetry
    (&s + s.transpose()) * 0.5
}

pub fn random_vec<R: Rng>(rng: &mut R, p: usize, scale: f64) -> Vec<f64> {
    (0..p)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn random_model<R: Rng>(rng: &mut R, p: usize) -> LocationScatter {
    let mu = random_vec(rng, p, 1.0);
    LocationScatter::new(&mu, &random_sigma(rng, p)).expect("well-conditioned random model")
}

/// Random subset of `0..p` of size `k`, ascending.
pub fn random_subset<R: Rng>(rng: &mut R, p: usize, k: usize) -> Vec<usize> {
    let mut s = rand::seq::index::sample(rng, p, k).into_vec();
    s.sort_unstable();
    s
}

/// Zero location, unit variances, correlation 0.9.
pub fn example_model() -> LocationScatter {
    let sigma = DMatrix::from_fn(5, 5, |i, j| if i == j { 1.0 } else { 0.9 });
    LocationScatter::new(&[0.0; 5], &sigma).unwrap()
}

pub const WORKED_X: [f64; 5] = [0.0, 1.0, 2.0, 2.2, 2.5];
/// Worked observation with the fourth coordinate raised to 2.3.
pub const SHIFTED_X: [f64; 5] = [0.0, 1.0, 2.0, 2.3, 2.5];

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
