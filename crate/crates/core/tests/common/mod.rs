#![allow(dead_code)]

pub mod oracle;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcl_dispatch_core::EnsembleSpec;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Column-stochastic matrix with entries bounded away from zero on a random
/// support (the diagonal is always kept).
pub fn random_target(rng: &mut ChaCha8Rng, n: usize, sparsity: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for b in 0..n {
        for a in 0..n {
            if a == b || rng.random::<f64>() >= sparsity {
                m[(a, b)] = rng.random_range(0.2..1.0);
            }
        }
        let s: f64 = m.column(b).sum();
        m.column_mut(b).scale_mut(1.0 / s);
    }
    m
}

pub fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| rng.random_range(0.05..1.0));
    let s = v.sum();
    v / s
}

/// Small ensemble with random target, penalties, costs and initial state.
/// `uniform` selects a single scalar penalty on the whole support.
pub fn random_ensemble(rng: &mut ChaCha8Rng, n: usize, horizon: usize, uniform: bool) -> EnsembleSpec {
    let target = random_target(rng, n, 0.3);
    let gamma = if uniform {
        let g = rng.random_range(0.5..2.0);
        DMatrix::from_element(n, n, g)
    } else {
        DMatrix::from_fn(n, n, |_, _| rng.random_range(0.5..2.0))
    };
    EnsembleSpec {
        p: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        q: (0..n).map(|_| rng.random_range(0.0..0.5)).collect(),
        target,
        gamma: vec![gamma],
        energy_cost: DMatrix::from_fn(horizon, n, |_, _| rng.random_range(-1.0..1.0)),
        rho_in: random_distribution(rng, n),
    }
}

/// Cyclic target: from each state, stay / advance one / advance two with
/// the given probabilities.
pub fn circulant(n: usize, weights: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for b in 0..n {
        for (k, w) in weights.iter().enumerate() {
            m[((b + k) % n, b)] += w;
        }
    }
    m
}
