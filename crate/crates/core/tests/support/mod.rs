#![allow(dead_code)]

pub mod grads;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tdcss::disentangler::mine_loss;
use tdcss::numkernel::{Activation, AdamConfig, AdamState, Matrix, Mlp};

/// `n` draws of a standard bivariate Gaussian with correlation `rho`, as two
/// single-column matrices.
pub fn gaussian_pairs(n: usize, rho: f64, seed: u64) -> (Matrix<f64>, Matrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, 1));
    let mut y = Array2::zeros((n, 1));
    let k = (1.0 - rho * rho).sqrt();
    for i in 0..n {
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        x[[i, 0]] = a;
        y[[i, 0]] = rho * a + k * b;
    }
    (x, y)
}

pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

pub const MINE_HIDDEN: usize = 256;
pub const MINE_BATCH: usize = 500;
pub const MINE_LR: f64 = 1e-3;

/// Trains a fresh statistics network for `steps` ascent steps on random
/// minibatches of `(x, y)` and returns the bound evaluated on the full sample.
pub fn mine_estimate(x: &Matrix<f64>, y: &Matrix<f64>, steps: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = x.ncols() + y.ncols();
    let mut net = Mlp::<f64>::glorot(&[width, MINE_HIDDEN, 1], Activation::LeakyRelu, Activation::Identity, &mut rng);
    let mut adam = AdamState::for_mlp(AdamConfig::with_lr(MINE_LR), &net);
    let mut ema = None;
    let n = x.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut at = n;
    for _ in 0..steps {
        if at + MINE_BATCH > n {
            order.shuffle(&mut rng);
            at = 0;
        }
        let rows = &order[at..at + MINE_BATCH];
        at += MINE_BATCH;
        let xb = x.select(ndarray::Axis(0), rows);
        let yb = y.select(ndarray::Axis(0), rows);
        let mut perm: Vec<usize> = (0..MINE_BATCH).collect();
        perm.shuffle(&mut rng);
        let mut out = mine_loss(&xb, &yb, &net, &perm, Some(&mut ema)).expect("finite bound");
        out.t.scale(-1.0);
        adam.step_mlp(&mut net, &out.t).expect("adam step");
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    mine_loss(x, y, &net, &perm, None).expect("finite bound").estimate
}
