use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DatasetBundle;
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// Parameters of the synthetic confounded-feature testbed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Seen classes.
    pub s: usize,
    /// Unseen classes.
    pub u: usize,
    pub d_a: usize,
    pub d_x: usize,
    pub samples_per_class: usize,
    pub task_signal_dim: usize,
    pub nuisance_dim: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            s: 12,
            u: 4,
            d_a: 16,
            d_x: 64,
            samples_per_class: 200,
            task_signal_dim: 24,
            nuisance_dim: 24,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("s", self.s),
            ("u", self.u),
            ("d_a", self.d_a),
            ("d_x", self.d_x),
            ("samples_per_class", self.samples_per_class),
            ("task_signal_dim", self.task_signal_dim),
            ("nuisance_dim", self.nuisance_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.task_signal_dim + self.nuisance_dim > self.d_x {
            return Err(Error::Config(format!(
                "task_signal_dim + nuisance_dim = {} exceeds d_x = {}",
                self.task_signal_dim + self.nuisance_dim,
                self.d_x
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std {} must be finite and ≥ 0", self.noise_std)));
        }
        Ok(())
    }
}

/// The generator's latent factors, one row per bundle row.
#[derive(Debug, Clone)]
pub struct SynthFactors {
    pub task: Matrix<f32>,
    pub nuisance: Matrix<f32>,
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<DatasetBundle> {
    generate_synthetic_with_factors(cfg).map(|(b, _)| b)
}

/// Classes `0..s` are seen and `s..s+u` unseen. Each sample is
/// `M_mix · [M_a·a_k + noise ; nuisance]` with class-independent nuisance.
pub fn generate_synthetic_with_factors(cfg: &SynthConfig) -> Result<(DatasetBundle, SynthFactors)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_classes = cfg.s + cfg.u;
    let semantics = Array2::from_shape_simple_fn((n_classes, cfg.d_a), || rng.random::<f64>());

    let scale = 1.0 / (cfg.d_a as f64).sqrt();
    let to_task: Array2<f64> = Array2::from_shape_simple_fn((cfg.d_a, cfg.task_signal_dim), || {
        rng.sample::<f64, _>(StandardNormal) * scale
    });
    let mix = orthonormal_columns(cfg.d_x, cfg.task_signal_dim + cfg.nuisance_dim, &mut rng);
    let class_signal = semantics.dot(&to_task);

    let n = n_classes * cfg.samples_per_class;
    let mut task = Array2::<f64>::zeros((n, cfg.task_signal_dim));
    let mut nuisance = Array2::<f64>::zeros((n, cfg.nuisance_dim));
    let mut labels = Vec::with_capacity(n);
    for k in 0..n_classes {
        for i in 0..cfg.samples_per_class {
            let row = k * cfg.samples_per_class + i;
            for j in 0..cfg.task_signal_dim {
                let eps: f64 = rng.sample(StandardNormal);
                task[[row, j]] = class_signal[[k, j]] + cfg.noise_std * eps;
            }
            for j in 0..cfg.nuisance_dim {
                nuisance[[row, j]] = rng.sample(StandardNormal);
            }
            labels.push(k as u32);
        }
    }
    let latent = ndarray::concatenate(ndarray::Axis(1), &[task.view(), nuisance.view()])
        .expect("row counts agree");
    let features = latent.dot(&mix.t());

    let bundle = DatasetBundle::new(
        features.mapv(|v| v as f32),
        labels,
        semantics.mapv(|v| v as f32),
        (0..cfg.s as u32).collect(),
        (cfg.s as u32..n_classes as u32).collect(),
    )?;
    Ok((
        bundle,
        SynthFactors {
            task: task.mapv(|v| v as f32),
            nuisance: nuisance.mapv(|v| v as f32),
        },
    ))
}

/// `rows × cols` matrix with orthonormal columns (Gram–Schmidt on a Gaussian draw).
fn orthonormal_columns<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let mut m = Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal));
    for j in 0..cols {
        for k in 0..j {
            let proj = m.column(j).dot(&m.column(k));
            let prev = m.column(k).to_owned();
            m.slice_mut(s![.., j]).scaled_add(-proj, &prev);
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        m.column_mut(j).mapv_inplace(|v| v / norm);
    }
    m
}
