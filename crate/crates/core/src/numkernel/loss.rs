use ndarray::{Array1, Axis};

use super::{ensure_finite, ensure_scalar_finite, Matrix, Real};
use crate::error::{Error, Result};

/// Classification target for [`softmax_ce`].
#[derive(Debug, Clone, Copy)]
pub enum Target<'a, T> {
    /// One class index per row.
    Hard(&'a [usize]),
    /// One probability distribution per row.
    Soft(&'a Matrix<T>),
}

/// Numerically stable row-wise log-softmax.
pub fn log_softmax_rows<T: Real>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax_rows<T: Real>(logits: &Matrix<T>) -> Matrix<T> {
    log_softmax_rows(logits).mapv(T::exp)
}

/// Mean cross-entropy over rows; gradient is `(softmax − target) / n`.
pub fn softmax_ce<T: Real>(logits: &Matrix<T>, target: Target<'_, T>) -> Result<(T, Matrix<T>)> {
    let (n, c) = logits.dim();
    if n == 0 {
        return Err(Error::Usage("softmax_ce on an empty batch".into()));
    }
    let logp = log_softmax_rows(logits);
    let mut grad = logp.mapv(T::exp);
    let mut total = T::zero();
    match target {
        Target::Hard(labels) => {
            if labels.len() != n {
                return Err(Error::shape("softmax_ce", (n, c), labels.len()));
            }
            for (i, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(Error::Range(format!("label {y} out of range for {c} classes")));
                }
                total -= logp[[i, y]];
                grad[[i, y]] -= T::one();
            }
        }
        Target::Soft(dist) => {
            if dist.dim() != (n, c) {
                return Err(Error::shape("softmax_ce", (n, c), dist.dim()));
            }
            let tol = T::lit(1e-6).max(T::epsilon() * T::lit(64.0));
            for (i, row) in dist.rows().into_iter().enumerate() {
                let s: T = row.sum();
                if (s - T::one()).abs() > tol || row.iter().any(|&p| p < T::zero()) {
                    return Err(Error::Usage(format!(
                        "soft target row {i} is not a distribution (sums to {s})"
                    )));
                }
            }
            ndarray::Zip::from(&logp).and(dist).for_each(|&lp, &p| {
                if p > T::zero() {
                    total -= p * lp;
                }
            });
            grad -= dist;
        }
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    grad.mapv_inplace(|g| g * inv_n);
    let loss = ensure_scalar_finite("softmax_ce", total * inv_n)?;
    ensure_finite("softmax_ce", grad.iter())?;
    Ok((loss, grad))
}

/// Mean negative entropy `Σ p ln p` of the row softmaxes and its gradient
/// with respect to the logits.
///
/// Minimised by uniform rows (value `−ln C`), maximised by one-hot rows (0).
pub fn entropy_loss<T: Real>(logits: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    let (n, c) = logits.dim();
    if c < 2 {
        return Err(Error::Config("negative entropy needs at least two classes".into()));
    }
    if n == 0 {
        return Err(Error::Usage("entropy_loss on an empty batch".into()));
    }
    let logp = log_softmax_rows(logits);
    let p = logp.mapv(T::exp);
    // per-row  Σ p ln p
    let neg_ent: Array1<T> = (&p * &logp).sum_axis(Axis(1));
    let inv_n = T::one() / T::from_usize(n).unwrap();
    // d/dz_k Σ p ln p = p_k (ln p_k − Σ p ln p)
    let mut grad = logp;
    for (mut row, (prow, &ne)) in grad.rows_mut().into_iter().zip(p.rows().into_iter().zip(&neg_ent)) {
        for (g, &pk) in row.iter_mut().zip(prow) {
            *g = pk * (*g - ne) * inv_n;
        }
    }
    let loss = ensure_scalar_finite("entropy_loss", neg_ent.sum() * inv_n)?;
    ensure_finite("entropy_loss", grad.iter())?;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Array2::<f64>::zeros((3, 4));
        let (loss, _) = softmax_ce(&logits, Target::Hard(&[0, 3, 2])).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn saturated_correct_logit_gives_zero() {
        let logits = array![[50.0f64, 0.0, 0.0]];
        let (loss, _) = softmax_ce(&logits, Target::Hard(&[0])).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn out_of_range_label() {
        let logits = Array2::<f32>::zeros((1, 3));
        assert!(matches!(softmax_ce(&logits, Target::Hard(&[3])), Err(Error::Range(_))));
    }

    #[test]
    fn bad_soft_distribution() {
        let logits = Array2::<f64>::zeros((1, 2));
        let dist = array![[0.7, 0.7]];
        assert!(matches!(softmax_ce(&logits, Target::Soft(&dist)), Err(Error::Usage(_))));
    }

    #[test]
    fn one_hot_soft_equals_hard() {
        let logits = array![[0.3f64, -1.2, 2.0], [1.0, 0.5, -0.5]];
        let dist = array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        let (a, ga) = softmax_ce(&logits, Target::Hard(&[2, 0])).unwrap();
        let (b, gb) = softmax_ce(&logits, Target::Soft(&dist)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn entropy_extremes() {
        let (uniform, _) = entropy_loss(&Array2::<f64>::zeros((2, 5))).unwrap();
        assert!((uniform + 5f64.ln()).abs() < 1e-12);
        assert!((uniform + 1.609).abs() < 1e-3);
        let (peaked, _) = entropy_loss(&array![[1000.0f64, 0.0, 0.0]]).unwrap();
        assert!(peaked.abs() < 1e-12);
    }

    #[test]
    fn entropy_single_class_is_config_error() {
        assert!(matches!(entropy_loss(&Array2::<f64>::zeros((2, 1))), Err(Error::Config(_))));
    }
}
