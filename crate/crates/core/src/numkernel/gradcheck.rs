use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Above this many coordinates a seeded random subset of this size is checked.
    pub max_coords: usize,
    pub seed: u64,
    /// Floor for the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: 10_000,
            seed: 0,
            floor: 1e-6,
        }
    }
}

/// Compares `analytic` against central differences of `loss` around `params`
/// and returns the maximum relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(mut loss: F, params: &[f64], analytic: &[f64], cfg: GradCheckConfig) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::shape("grad_check", params.len(), analytic.len()));
    }
    let coords: Vec<usize> = if params.len() > cfg.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = sample(&mut rng, params.len(), cfg.max_coords).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..params.len()).collect()
    };
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for i in coords {
        let orig = work[i];
        work[i] = orig + cfg.eps;
        let up = loss(&work)?;
        work[i] = orig - cfg.eps;
        let down = loss(&work)?;
        work[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numeric("grad_check", format!("non-finite loss at coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * cfg.eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}
