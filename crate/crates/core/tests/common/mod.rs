#![allow(dead_code)]

use icpo_core::{History, TeacherConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

pub fn normal_vector(rng: &mut ChaCha8Rng, k: usize) -> DVector<f64> {
    DVector::from_fn(k, |_, _| rng.sample(StandardNormal))
}

pub fn random_history(rng: &mut ChaCha8Rng, k: usize, t: usize) -> History {
    let mut h = History::new(k);
    for _ in 0..t {
        let a = rng.random_range(0..k);
        h.push(a, rng.sample(StandardNormal)).unwrap();
    }
    h
}

/// Random symmetric positive-definite matrix `AAᵀ/K + I/2`.
pub fn random_spd(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    let a = normal_matrix(rng, k, k);
    &a * a.transpose() / k as f64 + DMatrix::identity(k, k) * 0.5
}

pub fn random_config(rng: &mut ChaCha8Rng, k: usize, general_h: bool) -> TeacherConfig {
    let c = rng.random_range(0.1..2.0);
    let gamma = rng.random_range(0.05..0.9);
    let lambda = rng.random_range(0.0..1.0);
    let tau_w = rng.random_range(0.2..1.5);
    let sigma = rng.random_range(0.0..0.8);
    if general_h {
        TeacherConfig::new(k, c, gamma, lambda, random_spd(rng, k), tau_w, sigma).unwrap()
    } else {
        TeacherConfig::with_identity(k, c, gamma, lambda, tau_w, sigma).unwrap()
    }
}
