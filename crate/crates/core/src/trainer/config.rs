use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compat::SoftLabelMode;
use crate::disentangler::DisentangleDims;
use crate::error::{Error, Result};
use crate::model::ModelDims;

/// Everything that shapes a training run. Width fields set to 0 are derived
/// from the feature dimension (see [`TrainConfig::model_dims`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Stage-2 rate; `lr / 10` when absent.
    pub lr_stage2: Option<f64>,
    pub epochs: usize,
    pub batches_stage1: usize,
    pub batches_stage2: usize,
    pub n_b: usize,
    pub n_target: usize,
    /// Reuse one source/target split for every epoch.
    pub fixed_split: bool,
    pub edge_nets: usize,
    pub eps_edge: f64,
    pub t_soft: f64,
    pub soft_label_mode: SoftLabelMode,
    pub lambda_rec: f64,
    pub lambda_mine: f64,
    pub lambda_adv: f64,
    pub lambda_trans: f64,
    pub lambda_di: f64,
    pub no_tfd: bool,
    pub no_eps: bool,
    pub no_cps: bool,
    pub seed: u64,
    /// Validation cadence in epochs; 0 disables validation and best tracking.
    pub eval_every: usize,
    /// Fraction of each seen class's training rows held out for validation.
    pub val_frac: f64,
    /// Also score the test rows at every validation epoch.
    pub report_test: bool,
    /// Train `W` to classify `h_ind` in the classification step as well,
    /// which gives the entropy step an opponent.
    pub classify_ind: bool,
    /// Let the reconstruction loss update the encoders.
    pub rec_updates_encoders: bool,
    pub mine_ema: bool,
    pub bilinear: bool,
    pub d_h: usize,
    pub e_hidden: usize,
    pub e_out: usize,
    pub enc_hidden: usize,
    pub w_hidden: (usize, usize),
    pub c_hidden: (usize, usize),
    pub r_hidden: (usize, usize),
    pub di_hidden: usize,
    pub mine_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            lr_stage2: None,
            epochs: 200,
            batches_stage1: 30,
            batches_stage2: 10,
            n_b: 64,
            n_target: 1,
            fixed_split: false,
            edge_nets: 2,
            eps_edge: 0.5,
            t_soft: 1.0,
            soft_label_mode: SoftLabelMode::Softmax,
            lambda_rec: 1.0,
            lambda_mine: 1.0,
            lambda_adv: 1.0,
            lambda_trans: 1.0,
            lambda_di: 1.0,
            no_tfd: false,
            no_eps: false,
            no_cps: false,
            seed: 0,
            eval_every: 10,
            val_frac: 0.1,
            report_test: true,
            classify_ind: true,
            rec_updates_encoders: true,
            mine_ema: true,
            bilinear: false,
            d_h: 0,
            e_hidden: 0,
            e_out: 0,
            enc_hidden: 0,
            w_hidden: (0, 0),
            c_hidden: (0, 0),
            r_hidden: (0, 0),
            di_hidden: 0,
            mine_hidden: 256,
        }
    }
}

/// Which component an ablation removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Tfd,
    Eps,
    Cps,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tfd" => Ok(Self::Tfd),
            "eps" => Ok(Self::Eps),
            "cps" => Ok(Self::Cps),
            other => Err(Error::Config(format!("unknown ablation {other:?} (tfd|eps|cps)"))),
        }
    }
}

impl TrainConfig {
    /// Full-size widths and epoch count for 2048-D features.
    pub fn paper_scale() -> Self {
        Self {
            epochs: 1500,
            d_h: 1024,
            e_hidden: 1800,
            e_out: 1800,
            enc_hidden: 1024,
            w_hidden: (1024, 512),
            c_hidden: (1024, 512),
            r_hidden: (1024, 512),
            di_hidden: 1024,
            ..Self::default()
        }
    }

    pub fn ablate(mut self, which: Ablation) -> Self {
        match which {
            Ablation::Tfd => self.no_tfd = true,
            Ablation::Eps => self.no_eps = true,
            Ablation::Cps => self.no_cps = true,
        }
        self
    }

    pub fn stage2_lr(&self) -> f64 {
        self.lr_stage2.unwrap_or(self.lr / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("lr_stage2", self.stage2_lr())?;
        positive("t_soft", self.t_soft)?;
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_mine", self.lambda_mine),
            ("lambda_adv", self.lambda_adv),
            ("lambda_trans", self.lambda_trans),
            ("lambda_di", self.lambda_di),
            ("eps_edge", self.eps_edge),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        for (name, v) in [
            ("batches_stage1", self.batches_stage1),
            ("batches_stage2", self.batches_stage2),
            ("n_b", self.n_b),
            ("n_target", self.n_target),
            ("edge_nets", self.edge_nets),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return Err(Error::Config(format!("val_frac {} outside [0, 1)", self.val_frac)));
        }
        Ok(())
    }

    /// Resolves zero widths against the data dimensions.
    pub fn model_dims(&self, d_x: usize, d_a: usize) -> ModelDims {
        let or = |v: usize, auto: usize| if v == 0 { auto } else { v };
        let d_h = or(self.d_h, d_x);
        let e_out = if self.no_tfd { 2 * d_h } else { or(self.e_out, 2 * d_h) };
        let pair = |(a, b): (usize, usize), auto: (usize, usize)| (or(a, auto.0), or(b, auto.1));
        ModelDims {
            disentangle: DisentangleDims {
                d_x,
                e_hidden: or(self.e_hidden, e_out),
                e_out,
                enc_hidden: or(self.enc_hidden, d_h),
                d_h,
                r_hidden: pair(self.r_hidden, (e_out, d_h)),
                mine_hidden: or(self.mine_hidden, 2 * d_h),
            },
            d_a,
            w_hidden: pair(self.w_hidden, (d_h, (d_h / 2).max(1))),
            c_hidden: pair(self.c_hidden, (d_h, d_h)),
            di_hidden: or(self.di_hidden, d_h),
            edge_nets: self.edge_nets,
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        config_hash(&serde_json::to_string(self).expect("config serialises"))
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}
