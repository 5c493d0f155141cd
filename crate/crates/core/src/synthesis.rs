//! Convert nets, semantic-difference offsets, center/edge pseudo samples and
//! the domain identifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SourceTargetSplit;
use crate::error::{Error, Result};
use crate::numkernel::{softmax_ce, vconcat, Activation, Matrix, Mlp, MlpGrads, MlpTape, Real, Target};

/// `D_a → hidden.0 → hidden.1 → D_h` offset generator.
pub fn convert_net<T: Real, R: Rng + ?Sized>(d_a: usize, hidden: (usize, usize), d_h: usize, rng: &mut R) -> Mlp<T> {
    Mlp::glorot(&[d_a, hidden.0, hidden.1, d_h], Activation::Relu, Activation::Identity, rng)
}

/// `D_h → hidden → 2` real/pseudo discriminator with leaky rectifiers.
pub fn domain_identifier<T: Real, R: Rng + ?Sized>(d_h: usize, hidden: usize, rng: &mut R) -> Mlp<T> {
    Mlp::glorot(&[d_h, hidden, 2], Activation::LeakyRelu, Activation::Identity, rng)
}

/// Domain label of real `h_cor` vectors.
pub const DOMAIN_REAL: usize = 1;
/// Domain label of synthesised vectors.
pub const DOMAIN_PSEUDO: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoKind {
    Center,
    Edge,
}

/// Where one pseudo vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub source_class: u32,
    pub target_class: u32,
    /// Row of the source batch whose `h_cor` was offset.
    pub source_row: usize,
}

/// Synthesised latents with both of their possible labelings.
#[derive(Debug, Clone)]
pub struct PseudoBatch<T> {
    pub vectors: Matrix<T>,
    pub kind: PseudoKind,
    pub provenance: Vec<Provenance>,
}

impl<T> PseudoBatch<T> {
    pub fn target_labels(&self) -> Vec<u32> {
        self.provenance.iter().map(|p| p.target_class).collect()
    }

    pub fn source_labels(&self) -> Vec<u32> {
        self.provenance.iter().map(|p| p.source_class).collect()
    }

    /// Labels used when training the compatibility head: center samples
    /// count as their target class, edge samples as their source class.
    pub fn head_labels(&self) -> Vec<u32> {
        match self.kind {
            PseudoKind::Center => self.target_labels(),
            PseudoKind::Edge => self.source_labels(),
        }
    }

    /// Labels used when training the convert net that produced the batch.
    pub fn convert_labels(&self) -> Vec<u32> {
        self.target_labels()
    }
}

/// Semantic differences `a_i − a_j` for each provenance entry.
pub fn semantic_differences<T: Real>(semantics: &Matrix<T>, provenance: &[Provenance]) -> Result<Matrix<T>> {
    let c = semantics.nrows();
    let mut out = Matrix::zeros((provenance.len(), semantics.ncols()));
    for (mut row, p) in out.rows_mut().into_iter().zip(provenance) {
        let (i, j) = (p.target_class as usize, p.source_class as usize);
        if i >= c || j >= c {
            return Err(Error::Range(format!("class pair ({i}, {j}) outside {c} semantic rows")));
        }
        row.assign(&(&semantics.row(i) - &semantics.row(j)));
    }
    Ok(out)
}

/// `C(a_target − a_source)` for one class pair.
pub fn make_offset<T: Real>(a_target: &[T], a_source: &[T], net: &Mlp<T>) -> Result<Vec<T>> {
    if a_target.len() != net.in_dim() || a_source.len() != net.in_dim() {
        return Err(Error::shape("make_offset", (a_target.len(), a_source.len()), net.in_dim()));
    }
    let diff = Matrix::from_shape_fn((1, a_target.len()), |(_, k)| a_target[k] - a_source[k]);
    Ok(net.infer(&diff)?.row(0).to_vec())
}

/// Per-row norm clipping `o ← o · min(1, bound / ‖o‖)`, kept for backprop.
#[derive(Debug, Clone)]
pub struct ClipTape<T> {
    raw: Matrix<T>,
    norms: Vec<T>,
    bound: T,
}

pub fn clip_rows<T: Real>(raw: &Matrix<T>, bound: T) -> (Matrix<T>, ClipTape<T>) {
    let mut out = raw.clone();
    let mut norms = Vec::with_capacity(raw.nrows());
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > bound {
            let s = bound / norm;
            row.mapv_inplace(|v| v * s);
        }
        norms.push(norm);
    }
    (
        out,
        ClipTape {
            raw: raw.clone(),
            norms,
            bound,
        },
    )
}

/// Backprop through [`clip_rows`]: for clipped rows
/// `∂o'/∂o = (b/‖o‖)(I − ô ôᵀ)`.
pub fn clip_rows_backward<T: Real>(tape: &ClipTape<T>, g: &Matrix<T>) -> Matrix<T> {
    let mut out = g.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = tape.norms[i];
        if norm > tape.bound {
            let raw = tape.raw.row(i);
            let s = tape.bound / norm;
            let proj = raw.dot(&row) / (norm * norm);
            for (gv, &rv) in row.iter_mut().zip(raw.iter()) {
                *gv = s * (*gv - proj * rv);
            }
        }
    }
    out
}

/// Tape of a synthesis pass: needed to send gradients back into the convert net.
#[derive(Debug, Clone)]
pub struct SynthTape<T> {
    net: MlpTape<T>,
    clip: Option<ClipTape<T>>,
}

impl<T: Real> SynthTape<T> {
    /// Given `∂L/∂ĥ`, the convert net's parameter gradients (the `h_cor`
    /// term of `ĥ = h_cor + o` carries no convert-net parameters).
    pub fn backward(&self, net: &Mlp<T>, g_pseudo: &Matrix<T>) -> Result<MlpGrads<T>> {
        let g_off = match &self.clip {
            Some(c) => clip_rows_backward(c, g_pseudo),
            None => g_pseudo.clone(),
        };
        Ok(net.backward(&self.net, &g_off)?.1)
    }
}

fn check_pairs(split: &SourceTargetSplit, provenance: &[Provenance], n_rows: usize) -> Result<()> {
    for p in provenance {
        if !split.target_classes.contains(&p.target_class) {
            return Err(Error::Usage(format!("class {} is not a target class", p.target_class)));
        }
        if !split.source_classes.contains(&p.source_class) {
            return Err(Error::Usage(format!("class {} is not a source class", p.source_class)));
        }
        if p.source_row >= n_rows {
            return Err(Error::Usage(format!("source row {} outside a batch of {n_rows}", p.source_row)));
        }
    }
    Ok(())
}

fn gathered_h<T: Real>(h_cor: &Matrix<T>, provenance: &[Provenance]) -> Matrix<T> {
    let rows: Vec<usize> = provenance.iter().map(|p| p.source_row).collect();
    h_cor.select(ndarray::Axis(0), &rows)
}

/// `ĥ_center = h_cor + C_center(a_i − a_j)` for each provenance entry.
pub fn synth_center<T: Real>(
    h_cor: &Matrix<T>,
    provenance: Vec<Provenance>,
    split: &SourceTargetSplit,
    semantics: &Matrix<T>,
    net: &Mlp<T>,
) -> Result<(PseudoBatch<T>, SynthTape<T>)> {
    check_pairs(split, &provenance, h_cor.nrows())?;
    let diffs = semantic_differences(semantics, &provenance)?;
    let (offsets, tape) = net.forward(&diffs)?;
    let base = gathered_h(h_cor, &provenance);
    if base.ncols() != offsets.ncols() {
        return Err(Error::shape("synth_center", base.dim(), offsets.dim()));
    }
    Ok((
        PseudoBatch {
            vectors: base + offsets,
            kind: PseudoKind::Center,
            provenance,
        },
        SynthTape { net: tape, clip: None },
    ))
}

/// Mean Euclidean norm of the rows of `h`.
pub fn mean_row_norm<T: Real>(h: &Matrix<T>) -> T {
    let n = T::from_usize(h.nrows().max(1)).unwrap();
    h.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<T>() / n
}

/// `ĥ_edge = h_cor + clip(C_edge[k](a_i − a_j))` with every offset norm at
/// most `eps_edge × mean ‖h_cor‖` over the batch.
pub fn synth_edge<T: Real>(
    h_cor: &Matrix<T>,
    provenance: Vec<Provenance>,
    split: &SourceTargetSplit,
    semantics: &Matrix<T>,
    nets: &[Mlp<T>],
    k: usize,
    eps_edge: f64,
) -> Result<(PseudoBatch<T>, SynthTape<T>)> {
    let net = nets
        .get(k)
        .ok_or_else(|| Error::Usage(format!("edge net {k} requested but only {} exist", nets.len())))?;
    check_pairs(split, &provenance, h_cor.nrows())?;
    let diffs = semantic_differences(semantics, &provenance)?;
    let (raw, tape) = net.forward(&diffs)?;
    let bound = T::lit(eps_edge) * mean_row_norm(h_cor);
    let (offsets, clip) = clip_rows(&raw, bound);
    let base = gathered_h(h_cor, &provenance);
    if base.ncols() != offsets.ncols() {
        return Err(Error::shape("synth_edge", base.dim(), offsets.dim()));
    }
    Ok((
        PseudoBatch {
            vectors: base + offsets,
            kind: PseudoKind::Edge,
            provenance,
        },
        SynthTape {
            net: tape,
            clip: Some(clip),
        },
    ))
}

/// Output of [`domain_loss`].
#[derive(Debug, Clone)]
pub struct DomainOutput<T> {
    pub loss: T,
    pub di: MlpGrads<T>,
    pub g_real: Matrix<T>,
    pub g_pseudo: Matrix<T>,
}

/// Binary cross-entropy of the domain identifier over `[real; pseudo]`,
/// averaged over all rows. With `swapped` the labels are exchanged, which is
/// the objective the center convert net minimises to fool the identifier.
pub fn domain_loss<T: Real>(di: &Mlp<T>, real: &Matrix<T>, pseudo: &Matrix<T>, swapped: bool) -> Result<DomainOutput<T>> {
    if real.nrows() == 0 || pseudo.nrows() == 0 {
        return Err(Error::Usage("domain loss needs real and pseudo samples".into()));
    }
    let both = vconcat(real, pseudo)?;
    let (real_label, pseudo_label) = if swapped {
        (DOMAIN_PSEUDO, DOMAIN_REAL)
    } else {
        (DOMAIN_REAL, DOMAIN_PSEUDO)
    };
    let labels: Vec<usize> = std::iter::repeat_n(real_label, real.nrows())
        .chain(std::iter::repeat_n(pseudo_label, pseudo.nrows()))
        .collect();
    let (logits, tape) = di.forward(&both)?;
    let (loss, g_logits) = softmax_ce(&logits, Target::Hard(&labels))?;
    let (g_in, grads) = di.backward(&tape, &g_logits)?;
    let g_real = g_in.slice(ndarray::s![..real.nrows(), ..]).to_owned();
    let g_pseudo = g_in.slice(ndarray::s![real.nrows().., ..]).to_owned();
    Ok(DomainOutput {
        loss,
        di: grads,
        g_real,
        g_pseudo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::DenseLayer;
    use ndarray::{array, Array1, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn split() -> SourceTargetSplit {
        SourceTargetSplit {
            source_classes: vec![0, 1],
            target_classes: vec![2],
            seed: 0,
        }
    }

    fn prov(rows: &[(usize, u32)]) -> Vec<Provenance> {
        rows.iter()
            .map(|&(r, src)| Provenance {
                source_class: src,
                target_class: 2,
                source_row: r,
            })
            .collect()
    }

    #[test]
    fn equal_semantics_give_zero_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = convert_net::<f64, _>(3, (4, 4), 5, &mut rng);
        let o = make_offset(&[0.2, 0.4, 0.9], &[0.2, 0.4, 0.9], &net).unwrap();
        assert_eq!(o, vec![0.0; 5]);
    }

    #[test]
    fn offset_golden_snapshot() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let net = convert_net::<f64, _>(3, (4, 4), 2, &mut rng);
        let fwd = make_offset(&[1.0, 0.0, 0.5], &[0.0, 1.0, 0.25], &net).unwrap();
        let back = make_offset(&[0.0, 1.0, 0.25], &[1.0, 0.0, 0.5], &net).unwrap();
        // no antisymmetry for a rectified net
        assert!(fwd.iter().zip(&back).any(|(a, b)| (a + b).abs() > 1e-9));
        let golden = GOLDEN_OFFSET;
        for (a, b) in fwd.iter().zip(golden) {
            assert!((a - b).abs() < 1e-12, "{fwd:?}");
        }
    }

    pub(super) const GOLDEN_OFFSET: [f64; 2] = [0.078_475_814_037_686_33, 0.102_442_082_419_094_47];

    fn zero_net(d_a: usize, d_h: usize) -> Mlp<f64> {
        let layer = DenseLayer::new(Array2::zeros((d_a, d_h)), Array1::zeros(d_h), Activation::Identity).unwrap();
        Mlp::from_layers(vec![layer]).unwrap()
    }

    #[test]
    fn zero_offset_center_is_identity() {
        let sem = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let h = array![[0.5, 1.5, -2.0], [3.0, 0.0, 1.0]];
        let (pb, _) = synth_center(&h, prov(&[(0, 0), (1, 1)]), &split(), &sem, &zero_net(2, 3)).unwrap();
        assert_eq!(pb.vectors, h);
        assert_eq!(pb.head_labels(), vec![2, 2]);
    }

    #[test]
    fn center_is_additive_per_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = convert_net::<f64, _>(4, (6, 6), 8, &mut rng);
        let sem = Array2::from_shape_simple_fn((3, 4), || rng.random_range(0.0..1.0));
        let h = Array2::from_shape_simple_fn((64, 8), || rng.random_range(-1.0..1.0));
        let provenance: Vec<_> = (0..64).map(|i| (i, (i % 2) as u32)).collect();
        let (pb, _) = synth_center(&h, prov(&provenance), &split(), &sem, &net).unwrap();
        for (i, p) in pb.provenance.iter().enumerate() {
            let o = make_offset(
                sem.row(2).as_slice().unwrap(),
                sem.row(p.source_class as usize).as_slice().unwrap(),
                &net,
            )
            .unwrap();
            for d in 0..8 {
                assert!((pb.vectors[[i, d]] - h[[p.source_row, d]] - o[d]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn invalid_pairs_are_usage_errors() {
        let sem = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let h = array![[0.5, 1.5, -2.0]];
        let bad_target = vec![Provenance {
            source_class: 0,
            target_class: 1,
            source_row: 0,
        }];
        assert!(matches!(
            synth_center(&h, bad_target, &split(), &sem, &zero_net(2, 3)),
            Err(Error::Usage(_))
        ));
        let bad_source = vec![Provenance {
            source_class: 2,
            target_class: 2,
            source_row: 0,
        }];
        assert!(matches!(
            synth_center(&h, bad_source, &split(), &sem, &zero_net(2, 3)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn edge_clipping_and_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let nets: Vec<Mlp<f64>> = (0..2).map(|_| convert_net(2, (5, 5), 3, &mut rng)).collect();
        let sem = array![[3.0, 0.0], [0.0, 4.0], [5.0, 5.0]];
        let h = Array2::from_shape_simple_fn((10, 3), || rng.random_range(-1.0..1.0));
        let provenance = prov(&(0..10).map(|i| (i, (i % 2) as u32)).collect::<Vec<_>>());
        let bound = 0.3 * mean_row_norm(&h);
        let (pb, _) = synth_edge(&h, provenance.clone(), &split(), &sem, &nets, 1, 0.3).unwrap();
        for (i, p) in pb.provenance.iter().enumerate() {
            let d = &pb.vectors.row(i) - &h.row(p.source_row);
            assert!(d.dot(&d).sqrt() <= bound + 1e-12);
        }
        assert_eq!(pb.head_labels(), pb.source_labels());
        assert_eq!(pb.convert_labels(), vec![2; 10]);
        let (zero, _) = synth_edge(&h, provenance.clone(), &split(), &sem, &nets, 0, 0.0).unwrap();
        assert_eq!(zero.vectors, h);
        assert!(matches!(
            synth_edge(&h, provenance, &split(), &sem, &nets, 2, 0.3),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn uninformative_identifier_gives_ln2() {
        let di = zero_net(3, 2);
        let real = array![[1.0, 2.0, 3.0]];
        let pseudo = array![[0.0, 1.0, 0.0], [2.0, 2.0, 2.0]];
        let plain = domain_loss(&di, &real, &pseudo, false).unwrap().loss;
        let swapped = domain_loss(&di, &real, &pseudo, true).unwrap().loss;
        assert!((plain - 2f64.ln()).abs() < 1e-12);
        assert_eq!(plain, swapped);
    }

    #[test]
    fn confident_identifier_swap() {
        // logit for "real" = x0, for "pseudo" = −x0
        let w = array![[-10.0, 10.0]];
        let layer = DenseLayer::new(w, Array1::zeros(2), Activation::Identity).unwrap();
        let di = Mlp::from_layers(vec![layer]).unwrap();
        let real = array![[3.0]];
        let pseudo = array![[-3.0]];
        let plain = domain_loss(&di, &real, &pseudo, false).unwrap().loss;
        let swapped = domain_loss(&di, &real, &pseudo, true).unwrap().loss;
        assert!(plain < 1e-12);
        assert!(swapped > 50.0);
        assert!(matches!(
            domain_loss(&di, &real, &Array2::zeros((0, 1)), false),
            Err(Error::Usage(_))
        ));
    }
}
