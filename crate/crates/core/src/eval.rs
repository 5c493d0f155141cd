//! Average per-class accuracy, harmonic mean, GZSL evaluation, linear
//! probes and a 2-D embedding export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compat::argmax_lowest;
use crate::data::{DatasetBundle, SourceTargetSplit};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numkernel::{cast, softmax_ce, AdamConfig, AdamState, Matrix, Real, Target};
use crate::par::Exec;
use crate::synthesis::{synth_center, synth_edge, Provenance};

/// GZSL evaluation result. Accuracies are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: BTreeMap<u32, f64>,
    pub n_evaluated: BTreeMap<u32, usize>,
    pub u: f64,
    pub s: f64,
    #[serde(rename = "H")]
    pub h: f64,
}

impl Metrics {
    /// `(u, s, H)` as percentages rounded to one decimal.
    pub fn percent(&self) -> (f64, f64, f64) {
        let r = |v: f64| (v * 1000.0).round() / 10.0;
        (r(self.u), r(self.s), r(self.h))
    }
}

/// Per-class top-1 accuracy for every class in `class_set` and their
/// unweighted mean.
pub fn per_class_top1(preds: &[u32], labels: &[u32], class_set: &[u32]) -> Result<(BTreeMap<u32, f64>, f64)> {
    if preds.len() != labels.len() {
        return Err(Error::Metric(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut hits: BTreeMap<u32, (usize, usize)> = class_set.iter().map(|&c| (c, (0, 0))).collect();
    for (&p, &l) in preds.iter().zip(labels) {
        if let Some(slot) = hits.get_mut(&l) {
            slot.1 += 1;
            if p == l {
                slot.0 += 1;
            }
        }
    }
    let mut acc = BTreeMap::new();
    for (&c, &(hit, total)) in &hits {
        if total == 0 {
            return Err(Error::Metric(format!("class {c} has no test samples")));
        }
        acc.insert(c, hit as f64 / total as f64);
    }
    if acc.is_empty() {
        return Err(Error::Metric("empty class set".into()));
    }
    let mean = acc.values().sum::<f64>() / acc.len() as f64;
    Ok((acc, mean))
}

/// `2us / (u + s)`, zero when both are zero.
pub fn harmonic_mean(u: f64, s: f64) -> f64 {
    if u + s == 0.0 {
        0.0
    } else {
        2.0 * u * s / (u + s)
    }
}

/// Builds [`Metrics`] from predictions over the joint label space.
pub fn gzsl_metrics(preds: &[u32], labels: &[u32], seen: &[u32], unseen: &[u32]) -> Result<Metrics> {
    let (seen_acc, s) = per_class_top1(preds, labels, seen)?;
    let (unseen_acc, u) = if unseen.is_empty() {
        (BTreeMap::new(), 0.0)
    } else {
        per_class_top1(preds, labels, unseen)?
    };
    let mut n_evaluated = BTreeMap::new();
    for &l in labels {
        *n_evaluated.entry(l).or_insert(0) += 1;
    }
    let mut per_class = seen_acc;
    per_class.extend(unseen_acc);
    Ok(Metrics {
        per_class,
        n_evaluated,
        u,
        s,
        h: harmonic_mean(u, s),
    })
}

/// Scores every test row against all `S + U` classes.
pub fn evaluate_gzsl<T: Real>(model: &Model<T>, bundle: &DatasetBundle, exec: Exec) -> Result<Metrics> {
    let rows = bundle.test_rows();
    let preds = model.predict_rows(bundle, &rows, exec)?;
    let labels: Vec<u32> = rows.iter().map(|&r| bundle.labels[r]).collect();
    gzsl_metrics(&preds, &labels, &bundle.seen_classes, &bundle.unseen_classes)
}

/// Settings for [`linear_probe_accuracy`].
#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 1e-2,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Trains a multinomial logistic-regression probe on standardised features
/// and returns its accuracy on the test set.
pub fn linear_probe_accuracy(
    train_x: &Matrix<f32>,
    train_y: &[u32],
    test_x: &Matrix<f32>,
    test_y: &[u32],
    cfg: ProbeConfig,
) -> Result<f64> {
    let classes: Vec<u32> = {
        let mut c: Vec<u32> = train_y.iter().chain(test_y).copied().collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let index = |y: &[u32]| -> Vec<usize> { y.iter().map(|l| classes.binary_search(l).unwrap()).collect() };
    let (ytr, yte) = (index(train_y), index(test_y));
    let d = train_x.ncols();
    let mean = train_x.mean_axis(ndarray::Axis(0)).ok_or_else(|| Error::Usage("empty probe set".into()))?;
    let std = train_x.std_axis(ndarray::Axis(0), 0.0).mapv(|v| if v > 1e-6 { v } else { 1.0 });
    let norm = |x: &Matrix<f32>| -> Matrix<f64> { cast(&((x - &mean) / &std)) };
    let (xtr, xte) = (norm(train_x), norm(test_x));

    let mut w = Matrix::<f64>::zeros((d, classes.len()));
    let mut b = ndarray::Array1::<f64>::zeros(classes.len());
    let mut adam = AdamState::<f64>::new(AdamConfig::with_lr(cfg.lr), &[w.len(), b.len()]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..xtr.nrows()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x = xtr.select(ndarray::Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| ytr[i]).collect();
            let logits = x.dot(&w) + &b;
            let (_, g) = softmax_ce(&logits, Target::Hard(&y))?;
            let gw = x.t().dot(&g);
            let gb = g.sum_axis(ndarray::Axis(0));
            adam.step(
                &mut [w.as_slice_mut().unwrap(), b.as_slice_mut().unwrap()],
                &[gw.as_slice().unwrap(), gb.as_slice().unwrap()],
            )?;
        }
    }
    let logits = xte.dot(&w) + &b;
    let correct = logits
        .rows()
        .into_iter()
        .zip(&yte)
        .filter(|(row, &y)| argmax_lowest(row.iter().copied()) == y)
        .count();
    Ok(correct as f64 / yte.len().max(1) as f64)
}

/// Top-2 principal-component projection of the rows of `x` (centred).
/// Components are ordered by explained variance; signs are fixed so the
/// largest-magnitude loading of each component is positive.
pub fn pca_2d(x: &Matrix<f64>) -> Result<Matrix<f64>> {
    let n = x.nrows();
    if n < 3 {
        return Err(Error::Usage(format!("PCA export needs at least 3 vectors, got {n}")));
    }
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    let centered = x - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let (_, vecs) = jacobi_eigen(&cov);
    let proj = centered.dot(&vecs.slice(ndarray::s![.., ..2.min(vecs.ncols())]));
    if proj.ncols() == 1 {
        let mut out = Matrix::zeros((n, 2));
        out.column_mut(0).assign(&proj.column(0));
        return Ok(out);
    }
    Ok(proj)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with matching eigenvector columns.
fn jacobi_eigen(sym: &Matrix<f64>) -> (Vec<f64>, Matrix<f64>) {
    let d = sym.nrows();
    let mut a = sym.clone();
    let mut v = Matrix::<f64>::eye(d);
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-22 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[[i, i]]).collect();
    let mut vecs = Matrix::zeros((d, d));
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src).to_owned();
        let lead = argmax_lowest(col.iter().map(|x| x.abs()));
        if col[lead] < 0.0 {
            col.mapv_inplace(|x| -x);
        }
        vecs.column_mut(dst).assign(&col);
    }
    (values, vecs)
}

/// One row of the embedding export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub class: u32,
    pub kind: String,
    pub pc1: f64,
    pub pc2: f64,
}

/// Collects real `h_cor`, `h_ind`, and center/edge pseudo samples aimed at
/// the unseen classes, projects the pooled vectors onto their top two
/// principal components and returns one row per vector.
pub fn embeddings_2d<T: Real>(
    model: &Model<T>,
    bundle: &DatasetBundle,
    per_class: usize,
    eps_edge: f64,
    seed: u64,
) -> Result<Vec<EmbeddingRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let semantics: Matrix<T> = cast(&bundle.semantics);
    let mut vectors: Vec<Matrix<f64>> = Vec::new();
    let mut tags: Vec<(u32, &'static str)> = Vec::new();

    // real test rows of every class
    let test = bundle.test_rows();
    let mut picked = Vec::new();
    for c in 0..bundle.num_classes() as u32 {
        let rows: Vec<usize> = test.iter().copied().filter(|&r| bundle.labels[r] == c).collect();
        picked.extend(rows.into_iter().take(per_class));
    }
    if !picked.is_empty() {
        let x: Matrix<T> = cast(&bundle.features.select(ndarray::Axis(0), &picked));
        let pair = model.nets.encode(&x)?;
        vectors.push(cast(&pair.h_cor));
        vectors.push(cast(&pair.h_ind));
        tags.extend(picked.iter().map(|&r| (bundle.labels[r], "real")));
        tags.extend(picked.iter().map(|&r| (bundle.labels[r], "h_ind")));
    }

    // pseudo samples from seen training rows towards unseen classes
    if !bundle.unseen_classes.is_empty() {
        let src_rows = bundle.train_rows(&bundle.seen_classes);
        let n = (per_class * bundle.unseen_classes.len()).min(src_rows.len());
        let chosen: Vec<usize> = (0..n).map(|_| src_rows[rng.random_range(0..src_rows.len())]).collect();
        let x: Matrix<T> = cast(&bundle.seen_view().features(&chosen)?);
        let h = model.nets.encode_cor(&x)?;
        let split = SourceTargetSplit {
            source_classes: bundle.seen_classes.clone(),
            target_classes: bundle.unseen_classes.clone(),
            seed,
        };
        let provenance: Vec<Provenance> = (0..n)
            .map(|i| Provenance {
                source_class: bundle.labels[chosen[i]],
                target_class: bundle.unseen_classes[i % bundle.unseen_classes.len()],
                source_row: i,
            })
            .collect();
        let (center, _) = synth_center(&h, provenance.clone(), &split, &semantics, &model.c_center)?;
        let (edge, _) = synth_edge(&h, provenance, &split, &semantics, &model.c_edge, 0, eps_edge)?;
        tags.extend(center.target_labels().into_iter().map(|c| (c, "center")));
        tags.extend(edge.target_labels().into_iter().map(|c| (c, "edge")));
        vectors.push(cast(&center.vectors));
        vectors.push(cast(&edge.vectors));
    }

    let views: Vec<_> = vectors.iter().map(|m| m.view()).collect();
    let pooled = ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|_| Error::Usage("no vectors to export".into()))?;
    let proj = pca_2d(&pooled)?;
    Ok(tags
        .into_iter()
        .zip(proj.rows())
        .map(|((class, kind), p)| EmbeddingRow {
            class,
            kind: kind.to_string(),
            pc1: p[0],
            pc2: p[1],
        })
        .collect())
}

/// Writes rows as `class,kind,pc1,pc2` CSV.
pub fn write_embeddings_csv(rows: &[EmbeddingRow], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "class,kind,pc1,pc2")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.class, r.kind, r.pc1, r.pc2)?;
    }
    f.flush()?;
    Ok(())
}

/// [`embeddings_2d`] followed by [`write_embeddings_csv`].
pub fn export_embeddings_2d<T: Real>(
    model: &Model<T>,
    bundle: &DatasetBundle,
    path: impl AsRef<Path>,
    eps_edge: f64,
    seed: u64,
) -> Result<Vec<EmbeddingRow>> {
    let rows = embeddings_2d(model, bundle, 50, eps_edge, seed)?;
    write_embeddings_csv(&rows, path)?;
    Ok(rows)
}

/// One JSON Lines metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub u: f64,
    pub s: f64,
    #[serde(rename = "H")]
    pub h: f64,
    pub per_class: BTreeMap<u32, f64>,
    pub split: String,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricsRecord {
    pub fn new(epoch: usize, m: &Metrics, split: &str, seed: u64, config_hash: &str) -> Self {
        Self {
            epoch,
            u: m.u,
            s: m.s,
            h: m.h,
            per_class: m.per_class.clone(),
            split: split.to_string(),
            seed,
            config_hash: config_hash.to_string(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialise")
    }
}
