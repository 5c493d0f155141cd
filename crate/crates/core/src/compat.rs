//! Compatibility scoring `τ_ik = ⟨W(h_i), a_k⟩`, its losses, soft labels
//! and prediction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::disentangler::DisentangleNets;
use crate::error::{Error, Result};
use crate::numkernel::{softmax_ce, Activation, Matrix, Mlp, MlpGrads, MlpTape, Real, Target};

/// The compatibility projection `W`: latent space → semantic space.
#[derive(Debug, Clone)]
pub struct CompatHead<T> {
    pub net: Mlp<T>,
    bilinear: bool,
}

/// Scores of a batch against a list of classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix<T> {
    /// `n × C`
    pub scores: Matrix<T>,
    pub class_ids: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct CompatTape<T> {
    net: MlpTape<T>,
    semantics: Matrix<T>,
}

impl<T: Real> CompatHead<T> {
    /// Three-layer head `d_h → hidden.0 → hidden.1 → d_a`, or a single
    /// bias-free matrix when `bilinear`.
    pub fn new<R: Rng + ?Sized>(d_h: usize, d_a: usize, hidden: (usize, usize), bilinear: bool, rng: &mut R) -> Self {
        let net = if bilinear {
            Mlp::glorot(&[d_h, d_a], Activation::Identity, Activation::Identity, rng)
        } else {
            Mlp::glorot(&[d_h, hidden.0, hidden.1, d_a], Activation::Relu, Activation::Identity, rng)
        };
        Self { net, bilinear }
    }

    pub fn from_net(net: Mlp<T>, bilinear: bool) -> Self {
        Self { net, bilinear }
    }

    pub fn is_bilinear(&self) -> bool {
        self.bilinear
    }

    /// `φ = W(h)`.
    pub fn project(&self, h: &Matrix<T>) -> Result<Matrix<T>> {
        self.net.infer(h)
    }

    pub fn scores_train(
        &self,
        h: &Matrix<T>,
        semantics: &Matrix<T>,
        class_ids: &[u32],
    ) -> Result<(ScoreMatrix<T>, CompatTape<T>)> {
        check_table(semantics, class_ids, self.net.out_dim())?;
        let (phi, tape) = self.net.forward(h)?;
        Ok((
            ScoreMatrix {
                scores: phi.dot(&semantics.t()),
                class_ids: class_ids.to_vec(),
            },
            CompatTape {
                net: tape,
                semantics: semantics.clone(),
            },
        ))
    }

    /// Gradient with respect to `h` and `W`'s parameters given `∂L/∂τ`.
    pub fn backward(&self, tape: &CompatTape<T>, g_scores: &Matrix<T>) -> Result<(Matrix<T>, MlpGrads<T>)> {
        let g_phi = g_scores.dot(&tape.semantics);
        let (g_h, mut grads) = self.net.backward(&tape.net, &g_phi)?;
        if self.bilinear {
            for (_, b) in &mut grads.layers {
                b.fill(T::zero());
            }
        }
        Ok((g_h, grads))
    }
}

fn check_table<T: Real>(semantics: &Matrix<T>, class_ids: &[u32], d_a: usize) -> Result<()> {
    if semantics.ncols() != d_a || semantics.nrows() != class_ids.len() {
        return Err(Error::shape(
            "compat_scores",
            semantics.dim(),
            (class_ids.len(), d_a),
        ));
    }
    if class_ids.len() < 2 {
        return Err(Error::Config("a score matrix needs at least two classes".into()));
    }
    Ok(())
}

/// `τ[i][k] = ⟨W(h_i), a_k⟩` for the rows of `semantics` (one per entry of `class_ids`).
pub fn compat_scores<T: Real>(
    h: &Matrix<T>,
    semantics: &Matrix<T>,
    class_ids: &[u32],
    head: &CompatHead<T>,
) -> Result<ScoreMatrix<T>> {
    check_table(semantics, class_ids, head.net.out_dim())?;
    let phi = head.project(h)?;
    Ok(ScoreMatrix {
        scores: phi.dot(&semantics.t()),
        class_ids: class_ids.to_vec(),
    })
}

/// Column index of each label within `class_ids`.
pub fn label_columns(class_ids: &[u32], labels: &[u32]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            class_ids
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| Error::Range(format!("label {l} is not among the scored classes {class_ids:?}")))
        })
        .collect()
}

/// Mean cross-entropy of `softmax(τ)` against hard labels; returns `∂L/∂τ`.
pub fn compat_ce_loss<T: Real>(scores: &ScoreMatrix<T>, labels: &[u32]) -> Result<(T, Matrix<T>)> {
    let cols = label_columns(&scores.class_ids, labels)?;
    softmax_ce(&scores.scores, Target::Hard(&cols))
}

/// How cosine similarities become a distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftLabelMode {
    /// `softmax(cos / T_soft)`
    #[default]
    Softmax,
    /// `max(cos, 0)` renormalised to sum to one.
    Linear,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Distribution over source classes from the cosine similarity between each
/// source semantic row and the target row.
pub fn soft_labels<T: Real>(
    source_semantics: &Matrix<T>,
    target: &[T],
    temperature: f64,
    mode: SoftLabelMode,
) -> Result<Vec<T>> {
    let to64 = |v: &[T]| v.iter().map(|x| x.to_f64().unwrap()).collect::<Vec<f64>>();
    let tgt = to64(target);
    if tgt.len() != source_semantics.ncols() {
        return Err(Error::shape("soft_labels", tgt.len(), source_semantics.dim()));
    }
    let zero = |v: &[f64]| v.iter().all(|&x| x == 0.0);
    if zero(&tgt) {
        return Err(Error::Data("target semantic vector has zero norm".into()));
    }
    let mut cos = Vec::with_capacity(source_semantics.nrows());
    for (j, row) in source_semantics.rows().into_iter().enumerate() {
        let src = to64(row.as_slice().ok_or_else(|| Error::Usage("non-contiguous semantics".into()))?);
        if zero(&src) {
            return Err(Error::Data(format!("source semantic row {j} has zero norm")));
        }
        cos.push(cosine(&src, &tgt));
    }
    let probs: Vec<f64> = match mode {
        SoftLabelMode::Softmax => {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Config(format!("soft-label temperature {temperature} must be > 0")));
            }
            let max = cos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = cos.iter().map(|c| ((c - max) / temperature).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        }
        SoftLabelMode::Linear => {
            let clipped: Vec<f64> = cos.iter().map(|c| c.max(0.0)).collect();
            let z: f64 = clipped.iter().sum();
            if z == 0.0 {
                vec![1.0 / cos.len() as f64; cos.len()]
            } else {
                clipped.into_iter().map(|v| v / z).collect()
            }
        }
    };
    Ok(probs.into_iter().map(T::lit).collect())
}

/// Cross-entropy between `softmax(τ)` over source classes and per-row soft
/// label distributions; returns `∂L/∂τ`.
pub fn transfer_loss<T: Real>(scores: &ScoreMatrix<T>, soft: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    softmax_ce(&scores.scores, Target::Soft(soft))
}

/// Index of the largest entry; NaN never wins and ties go to the lowest index.
pub fn argmax_lowest<T: Real>(row: impl IntoIterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_v = T::neg_infinity();
    for (i, v) in row.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// `argmax_k ⟨W(E_cor(E(x))), a_k⟩` over the given classes. `class_ids`
/// must be ascending for ties to resolve to the lowest class id.
pub fn predict<T: Real>(
    x: &Matrix<T>,
    semantics: &Matrix<T>,
    class_ids: &[u32],
    nets: &DisentangleNets<T>,
    head: &CompatHead<T>,
) -> Result<Vec<u32>> {
    let h = nets.encode_cor(x)?;
    let scores = compat_scores(&h, semantics, class_ids, head)?;
    Ok(predict_from_scores(&scores))
}

pub fn predict_from_scores<T: Real>(scores: &ScoreMatrix<T>) -> Vec<u32> {
    scores
        .scores
        .rows()
        .into_iter()
        .map(|row| scores.class_ids[argmax_lowest(row.iter().copied())])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::DenseLayer;
    use ndarray::{array, Array1, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_head(d: usize) -> CompatHead<f64> {
        let layer = DenseLayer::new(Array2::eye(d), Array1::zeros(d), Activation::Identity).unwrap();
        CompatHead::from_net(Mlp::from_layers(vec![layer]).unwrap(), false)
    }

    #[test]
    fn one_hot_semantics_pick_coordinates() {
        let head = identity_head(4);
        let h = array![[0.5, -1.0, 2.0, 7.0]];
        let sem = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        let s = compat_scores(&h, &sem, &[0, 1, 2], &head).unwrap();
        assert_eq!(s.scores, array![[0.5, -1.0, 2.0]]);
    }

    #[test]
    fn scores_scale_with_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = CompatHead::<f64>::new(5, 3, (6, 4), false, &mut rng);
        let h = Array2::from_shape_fn((2, 5), |(i, j)| (i + j) as f64 * 0.1);
        let sem = array![[0.2, 0.4, 0.1], [0.9, 0.3, 0.5]];
        let a = compat_scores(&h, &sem, &[0, 1], &head).unwrap();
        let b = compat_scores(&h, &(&sem * 3.0), &[0, 1], &head).unwrap();
        for (x, y) in a.scores.iter().zip(b.scores.iter()) {
            assert!((3.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn naive_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = CompatHead::<f64>::new(4, 3, (5, 5), false, &mut rng);
        let h = Array2::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0));
        let sem = Array2::from_shape_simple_fn((5, 3), || rng.random_range(0.0..1.0));
        let s = compat_scores(&h, &sem, &[0, 1, 2, 3, 4], &head).unwrap();
        let phi = head.project(&h).unwrap();
        for i in 0..6 {
            for k in 0..5 {
                let mut acc = 0.0;
                for d in 0..3 {
                    acc += phi[[i, d]] * sem[[k, d]];
                }
                assert!((acc - s.scores[[i, k]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ce_loss_values_and_range() {
        let s = ScoreMatrix {
            scores: Array2::<f64>::zeros((2, 3)),
            class_ids: vec![4, 5, 6],
        };
        let (loss, _) = compat_ce_loss(&s, &[4, 6]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!(matches!(compat_ce_loss(&s, &[7, 4]), Err(Error::Range(_))));
        let strong = ScoreMatrix {
            scores: array![[60.0, 0.0, 0.0]],
            class_ids: vec![4, 5, 6],
        };
        assert!(compat_ce_loss(&strong, &[4]).unwrap().0 < 1e-20);
    }

    #[test]
    fn soft_label_cases() {
        let src: Matrix<f64> = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        // near-zero temperature → one-hot on the matching row
        let p = soft_labels(&src, &[2.0, 0.0, 0.0], 1e-3, SoftLabelMode::Softmax).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-12);
        // equal angles → equal weights
        let two: Matrix<f64> = array![[1.0, 0.0], [0.0, 1.0]];
        let p = soft_labels(&two, &[1.0, 1.0], 1.0, SoftLabelMode::Softmax).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        assert!(matches!(
            soft_labels(&two, &[0.0, 0.0], 1.0, SoftLabelMode::Softmax),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn soft_labels_from_known_cosines() {
        // target e0; sources with cosines 1.0, 0.5, 0.0
        let src = array![[1.0, 0.0], [0.5, 0.75f64.sqrt()], [0.0, 1.0]];
        let p = soft_labels(&src, &[1.0, 0.0], 1.0, SoftLabelMode::Softmax).unwrap();
        // softmax([1.0, 0.5, 0.0]) from an independent evaluation
        let expected = [0.506_480_391_055_654, 0.307_195_885_718_498_4, 0.186_323_723_225_847_56];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let lin = soft_labels(&src, &[1.0, 0.0], 1.0, SoftLabelMode::Linear).unwrap();
        assert!((lin[0] - 2.0 / 3.0).abs() < 1e-12 && lin[2].abs() < 1e-12);
    }

    #[test]
    fn transfer_with_own_softmax_equals_entropy() {
        let s = ScoreMatrix {
            scores: array![[0.3f64, -0.2, 1.1]],
            class_ids: vec![0, 1, 2],
        };
        let p = crate::numkernel::softmax_rows(&s.scores);
        let (loss, _) = transfer_loss(&s, &p).unwrap();
        let h: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((loss - h).abs() < 1e-12);
    }

    #[test]
    fn one_hot_transfer_matches_hard_ce_bitwise() {
        let s = ScoreMatrix {
            scores: array![[0.3f32, -0.2, 1.1], [2.0, 0.1, -0.4]],
            class_ids: vec![3, 5, 9],
        };
        let soft = array![[0.0f32, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let (a, ga) = transfer_loss(&s, &soft).unwrap();
        let (b, gb) = compat_ce_loss(&s, &[5, 9]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(ga, gb);
    }

    #[test]
    fn argmax_ties_and_nan() {
        assert_eq!(argmax_lowest([1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax_lowest([f64::NAN, 0.5, f64::NAN]), 1);
        assert_eq!(argmax_lowest([f64::NAN, f64::NAN]), 0);
    }

    #[test]
    fn single_class_table_rejected() {
        let head = identity_head(2);
        let err = compat_scores(&array![[1.0, 1.0]], &array![[1.0, 0.0]], &[0], &head);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
