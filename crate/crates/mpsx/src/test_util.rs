//! Shared helpers for unit tests.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::matrix_sets::MatrixSet;
use crate::numerics::{c, cr, inverse, CMat};

pub fn mat(dim: usize, entries: &[f64]) -> CMat {
    CMat::from_shape_vec((dim, dim), entries.iter().map(|&x| cr(x)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CMat {
    CMat::from_shape_fn((rows, cols), |_| {
        c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
    })
}

pub fn random_set(rng: &mut ChaCha8Rng, d: usize, dim: usize) -> MatrixSet {
    MatrixSet::new((0..d).map(|_| random_mat(rng, dim, dim)).collect()).unwrap()
}

pub fn random_invertible(rng: &mut ChaCha8Rng, n: usize) -> CMat {
    loop {
        let m = random_mat(rng, n, n);
        if inverse(&m, 1e-6).is_ok() {
            return m;
        }
    }
}

pub fn w_tensor() -> MatrixSet {
    MatrixSet::new(vec![mat(2, &[1.0, 0.0, 0.0, 1.0]), mat(2, &[0.0, 1.0, 0.0, 0.0])]).unwrap()
}

pub fn jordan_set() -> MatrixSet {
    MatrixSet::new(vec![mat(2, &[1.0, 1.0, 0.0, 1.0])]).unwrap()
}

pub fn irrational_phase_set() -> MatrixSet {
    let phase = c(
        ((2.0f64).sqrt() * std::f64::consts::PI).cos(),
        ((2.0f64).sqrt() * std::f64::consts::PI).sin(),
    );
    let m = CMat::from_shape_vec((2, 2), vec![cr(1.0), cr(0.0), cr(0.0), phase]).unwrap();
    MatrixSet::new(vec![m]).unwrap()
}
