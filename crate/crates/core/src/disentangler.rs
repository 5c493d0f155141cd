//! Encoders `E`, `E_cor`, `E_ind`, the reconstructor `R` and the MINE
//! statistics network, with the losses that pull `h_cor` and `h_ind` apart.

use ndarray::Array1;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numkernel::{
    ensure_scalar_finite, entropy_loss, hconcat, hsplit, Activation, Matrix, Mlp, MlpGrads, MlpTape, Real,
};

/// Widths of the disentanglement networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DisentangleDims {
    pub d_x: usize,
    pub e_hidden: usize,
    pub e_out: usize,
    pub enc_hidden: usize,
    pub d_h: usize,
    pub r_hidden: (usize, usize),
    pub mine_hidden: usize,
}

/// A batch of disentangled latents.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair<T> {
    pub h_cor: Matrix<T>,
    pub h_ind: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct DisentangleNets<T> {
    pub e: Mlp<T>,
    pub e_cor: Mlp<T>,
    pub e_ind: Mlp<T>,
    pub r: Mlp<T>,
    pub t_mine: Mlp<T>,
    /// When set, `E_cor`/`E_ind` are bypassed and `E`'s output is split in
    /// half (the no-disentanglement ablation).
    pub split_output: bool,
}

#[derive(Debug, Clone)]
pub struct EncodeTape<T> {
    e: MlpTape<T>,
    cor: Option<MlpTape<T>>,
    ind: Option<MlpTape<T>>,
}

/// Parameter gradients for the three encoders.
#[derive(Debug, Clone)]
pub struct EncoderGrads<T> {
    pub e: MlpGrads<T>,
    pub e_cor: MlpGrads<T>,
    pub e_ind: MlpGrads<T>,
}

impl<T: Real> DisentangleNets<T> {
    pub fn new<R: Rng + ?Sized>(dims: DisentangleDims, split_output: bool, rng: &mut R) -> Result<Self> {
        if split_output && dims.e_out != 2 * dims.d_h {
            return Err(Error::Config(format!(
                "split-output encoder needs e_out = 2·d_h, got e_out={} d_h={}",
                dims.e_out, dims.d_h
            )));
        }
        let relu = Activation::Relu;
        Ok(Self {
            e: Mlp::glorot(&[dims.d_x, dims.e_hidden, dims.e_out], relu, relu, rng),
            e_cor: Mlp::glorot(&[dims.e_out, dims.enc_hidden, dims.d_h], relu, relu, rng),
            e_ind: Mlp::glorot(&[dims.e_out, dims.enc_hidden, dims.d_h], relu, relu, rng),
            r: Mlp::glorot(
                &[2 * dims.d_h, dims.r_hidden.0, dims.r_hidden.1, dims.d_x],
                relu,
                Activation::Identity,
                rng,
            ),
            t_mine: Mlp::glorot(&[2 * dims.d_h, dims.mine_hidden, 1], relu, Activation::Identity, rng),
            split_output,
        })
    }

    pub fn d_h(&self) -> usize {
        if self.split_output {
            self.e.out_dim() / 2
        } else {
            self.e_cor.out_dim()
        }
    }

    /// `h_cor = E_cor(E(x))`, `h_ind = E_ind(E(x))`.
    pub fn encode(&self, x: &Matrix<T>) -> Result<LatentPair<T>> {
        let z = self.e.infer(x)?;
        if self.split_output {
            let (h_cor, h_ind) = hsplit(&z, z.ncols() / 2);
            return Ok(LatentPair { h_cor, h_ind });
        }
        Ok(LatentPair {
            h_cor: self.e_cor.infer(&z)?,
            h_ind: self.e_ind.infer(&z)?,
        })
    }

    /// Only the task-correlated factor.
    pub fn encode_cor(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let z = self.e.infer(x)?;
        if self.split_output {
            return Ok(hsplit(&z, z.ncols() / 2).0);
        }
        self.e_cor.infer(&z)
    }

    pub fn encode_train(&self, x: &Matrix<T>) -> Result<(LatentPair<T>, EncodeTape<T>)> {
        let (z, e) = self.e.forward(x)?;
        if self.split_output {
            let (h_cor, h_ind) = hsplit(&z, z.ncols() / 2);
            return Ok((LatentPair { h_cor, h_ind }, EncodeTape { e, cor: None, ind: None }));
        }
        let (h_cor, cor) = self.e_cor.forward(&z)?;
        let (h_ind, ind) = self.e_ind.forward(&z)?;
        Ok((
            LatentPair { h_cor, h_ind },
            EncodeTape {
                e,
                cor: Some(cor),
                ind: Some(ind),
            },
        ))
    }

    /// Backpropagates latent gradients into all three encoders. A missing
    /// gradient is treated as zero.
    pub fn encode_backward(
        &self,
        tape: &EncodeTape<T>,
        n: usize,
        g_cor: Option<&Matrix<T>>,
        g_ind: Option<&Matrix<T>>,
    ) -> Result<EncoderGrads<T>> {
        let d_h = self.d_h();
        let zeros = || Matrix::<T>::zeros((n, d_h));
        let mut out = EncoderGrads {
            e: MlpGrads::zeros_like(&self.e),
            e_cor: MlpGrads::zeros_like(&self.e_cor),
            e_ind: MlpGrads::zeros_like(&self.e_ind),
        };
        let g_z = if self.split_output {
            let gc = g_cor.cloned().unwrap_or_else(zeros);
            let gi = g_ind.cloned().unwrap_or_else(zeros);
            hconcat(&gc, &gi)?
        } else {
            let mut g_z = Matrix::<T>::zeros((n, self.e.out_dim()));
            if let (Some(g), Some(t)) = (g_cor, &tape.cor) {
                let (gz, grads) = self.e_cor.backward(t, g)?;
                g_z += &gz;
                out.e_cor = grads;
            }
            if let (Some(g), Some(t)) = (g_ind, &tape.ind) {
                let (gz, grads) = self.e_ind.backward(t, g)?;
                g_z += &gz;
                out.e_ind = grads;
            }
            g_z
        };
        out.e = self.e.backward(&tape.e, &g_z)?.1;
        Ok(out)
    }
}

/// Output of [`reconstruction_loss`].
#[derive(Debug, Clone)]
pub struct RecOutput<T> {
    pub loss: T,
    pub r: MlpGrads<T>,
    pub g_cor: Matrix<T>,
    pub g_ind: Matrix<T>,
}

/// Squared reconstruction error `‖R(h_cor ⧺ h_ind) − x‖²`, averaged over the batch.
pub fn reconstruction_loss<T: Real>(x: &Matrix<T>, latents: &LatentPair<T>, r: &Mlp<T>) -> Result<RecOutput<T>> {
    let joint = hconcat(&latents.h_cor, &latents.h_ind)?;
    if joint.ncols() != r.in_dim() || x.ncols() != r.out_dim() {
        return Err(Error::shape(
            "reconstruction_loss",
            (joint.ncols(), x.ncols()),
            (r.in_dim(), r.out_dim()),
        ));
    }
    let (x_hat, tape) = r.forward(&joint)?;
    let n = T::from_usize(x.nrows()).unwrap();
    let resid = &x_hat - x;
    let loss = ensure_scalar_finite("reconstruction_loss", resid.iter().map(|&v| v * v).sum::<T>() / n)?;
    let g_out = resid.mapv(|v| v * T::lit(2.0) / n);
    let (g_joint, grads) = r.backward(&tape, &g_out)?;
    let (g_cor, g_ind) = hsplit(&g_joint, latents.h_cor.ncols());
    Ok(RecOutput {
        loss,
        r: grads,
        g_cor,
        g_ind,
    })
}

/// Output of [`mine_loss`]. All gradients are of the estimate itself
/// (ascent direction for the statistics network).
#[derive(Debug, Clone)]
pub struct MineOutput<T> {
    pub estimate: T,
    pub t: MlpGrads<T>,
    pub g_cor: Matrix<T>,
    pub g_ind: Matrix<T>,
}

/// Smallest batch for which in-batch shuffling gives a usable marginal.
pub const MINE_MIN_BATCH: usize = 8;

/// Donsker–Varadhan lower bound on `I(h_cor; h_ind)`:
/// `mean T(joint) − ln mean exp T(marginal)`, where the marginal pairs each
/// `h_cor` row `i` with `h_ind` row `perm[i]`.
///
/// With `ema` the log-term gradient is divided by a moving average of the
/// partition term (momentum 0.99) instead of the batch value, which removes
/// the small-batch bias; `ema` is updated in place. Without it the gradient
/// is the exact gradient of the returned estimate.
pub fn mine_loss<T: Real>(
    h_cor: &Matrix<T>,
    h_ind: &Matrix<T>,
    t_net: &Mlp<T>,
    perm: &[usize],
    ema: Option<&mut Option<T>>,
) -> Result<MineOutput<T>> {
    let n = h_cor.nrows();
    if n < MINE_MIN_BATCH {
        return Err(Error::Usage(format!("MINE needs a batch of at least {MINE_MIN_BATCH}, got {n}")));
    }
    if h_ind.dim() != h_cor.dim() {
        return Err(Error::shape("mine_loss", h_cor.dim(), h_ind.dim()));
    }
    if perm.len() != n || perm.iter().any(|&p| p >= n) {
        return Err(Error::Usage("marginal permutation does not match the batch".into()));
    }
    let d_h = h_cor.ncols();
    let nf = T::from_usize(n).unwrap();
    let joint = hconcat(h_cor, h_ind)?;
    let shuffled = h_ind.select(ndarray::Axis(0), perm);
    let marginal = hconcat(h_cor, &shuffled)?;
    let (t_joint, tape_j) = t_net.forward(&joint)?;
    let (t_marg, tape_m) = t_net.forward(&marginal)?;

    let tj: Array1<T> = t_joint.column(0).to_owned();
    let tm: Array1<T> = t_marg.column(0).to_owned();
    let max = tm.fold(T::neg_infinity(), |m, &v| m.max(v));
    let sum_shift: T = tm.iter().map(|&v| (v - max).exp()).sum();
    let log_mean_exp = max + (sum_shift / nf).ln();
    let estimate = ensure_scalar_finite("mine_loss", tj.sum() / nf - log_mean_exp)?;

    // d/dt_m_i of −ln mean exp = −exp(t_m_i) / (n · mean exp)
    let weights: Array1<T> = match ema {
        Some(slot) => {
            let batch_mean = (sum_shift / nf).ln() + max; // ln of batch partition term
            let batch_partition = batch_mean.exp();
            let updated = match *slot {
                Some(prev) => T::lit(0.99) * prev + T::lit(0.01) * batch_partition,
                None => batch_partition,
            };
            *slot = Some(updated);
            let denom = updated.max(T::min_positive_value());
            tm.mapv(|v| v.exp() / (nf * denom))
        }
        None => tm.mapv(|v| (v - max).exp() / sum_shift),
    };
    let g_joint_out = Matrix::from_elem((n, 1), T::one() / nf);
    let g_marg_out = weights.mapv(|w| -w).insert_axis(ndarray::Axis(1));
    let (g_joint_in, mut grads) = t_net.backward(&tape_j, &g_joint_out)?;
    let (g_marg_in, grads_m) = t_net.backward(&tape_m, &g_marg_out)?;
    grads.add_assign(&grads_m);

    let (mut g_cor, mut g_ind) = hsplit(&g_joint_in, d_h);
    let (gm_cor, gm_ind) = hsplit(&g_marg_in, d_h);
    g_cor += &gm_cor;
    for (i, &p) in perm.iter().enumerate() {
        let mut row = g_ind.row_mut(p);
        row += &gm_ind.row(i);
    }
    Ok(MineOutput {
        estimate,
        t: grads,
        g_cor,
        g_ind,
    })
}

/// Mean negative entropy of `softmax(scores)` and its gradient with respect
/// to the scores. Minimising it drives the predicted class distribution of
/// `h_ind` towards uniform.
pub fn adversarial_entropy_loss<T: Real>(scores: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    entropy_loss(scores)
}
