//! Central-difference checks of every training loss against its analytic
//! gradient, in f64 on networks no wider than 16.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tdcss::compat::{compat_ce_loss, transfer_loss, CompatHead};
use tdcss::data::SourceTargetSplit;
use tdcss::disentangler::{
    adversarial_entropy_loss, mine_loss, reconstruction_loss, DisentangleDims, DisentangleNets, EncoderGrads,
};
use tdcss::numkernel::{grad_check, GradCheckConfig, Matrix, Mlp, MlpGrads};
use tdcss::synthesis::{convert_net, domain_identifier, domain_loss, synth_center, synth_edge, Provenance};

/// `(what, max relative error)` for one parameter group.
pub type Check = (String, f64);

const N: usize = 12;
const D_A: usize = 6;
const CLASSES: usize = 5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.sample(StandardNormal))
}

fn dims() -> DisentangleDims {
    DisentangleDims {
        d_x: 10,
        e_hidden: 12,
        e_out: 12,
        enc_hidden: 10,
        d_h: 8,
        r_hidden: (12, 10),
        mine_hidden: 12,
    }
}

struct Fixture {
    x: Matrix<f64>,
    labels: Vec<u32>,
    semantics: Matrix<f64>,
    class_ids: Vec<u32>,
    nets: DisentangleNets<f64>,
    head: CompatHead<f64>,
}

fn fixture(seed: u64) -> Fixture {
    let mut r = rng(seed);
    let nets = DisentangleNets::new(dims(), false, &mut r).unwrap();
    let head = CompatHead::new(8, D_A, (10, 8), false, &mut r);
    Fixture {
        x: randn(&mut r, N, 10),
        labels: (0..N).map(|i| (i % CLASSES) as u32).collect(),
        semantics: randn(&mut r, CLASSES, D_A),
        class_ids: (0..CLASSES as u32).collect(),
        nets,
        head,
    }
}

/// Checks `analytic` for the parameters of `net`; `loss` receives a copy of
/// `net` with perturbed parameters.
fn check(what: &str, net: &Mlp<f64>, analytic: &MlpGrads<f64>, loss: impl Fn(&Mlp<f64>) -> f64) -> Check {
    let params = net.flat_params();
    let mut probe = net.clone();
    let err = grad_check(
        |p| {
            probe.set_flat_params(p)?;
            Ok(loss(&probe))
        },
        &params,
        &analytic.flat(),
        GradCheckConfig::default(),
    )
    .unwrap();
    (what.to_string(), err)
}

fn with_net(nets: &DisentangleNets<f64>, which: &str, net: &Mlp<f64>) -> DisentangleNets<f64> {
    let mut out = nets.clone();
    match which {
        "E" => out.e = net.clone(),
        "E_cor" => out.e_cor = net.clone(),
        "E_ind" => out.e_ind = net.clone(),
        "R" => out.r = net.clone(),
        "T" => out.t_mine = net.clone(),
        _ => unreachable!(),
    }
    out
}

fn check_encoders(
    what: &str,
    nets: &DisentangleNets<f64>,
    grads: &EncoderGrads<f64>,
    loss: impl Fn(&DisentangleNets<f64>) -> f64,
) -> Vec<Check> {
    [
        ("E", &nets.e, &grads.e),
        ("E_cor", &nets.e_cor, &grads.e_cor),
        ("E_ind", &nets.e_ind, &grads.e_ind),
    ]
    .into_iter()
    .map(|(name, net, g)| check(&format!("{what} / {name}"), net, g, |p| loss(&with_net(nets, name, p))))
    .collect()
}

pub fn classification_loss() -> Vec<Check> {
    let mut checks = Vec::new();
    let f = fixture(1);
    let ce = |nets: &DisentangleNets<f64>, head: &CompatHead<f64>| {
        let h = nets.encode(&f.x).unwrap().h_cor;
        let (s, _) = head.scores_train(&h, &f.semantics, &f.class_ids).unwrap();
        compat_ce_loss(&s, &f.labels).unwrap().0
    };
    let (lat, tape) = f.nets.encode_train(&f.x).unwrap();
    let (scores, ctape) = f.head.scores_train(&lat.h_cor, &f.semantics, &f.class_ids).unwrap();
    let (_, g_scores) = compat_ce_loss(&scores, &f.labels).unwrap();
    let (g_h, g_w) = f.head.backward(&ctape, &g_scores).unwrap();
    let g_enc = f.nets.encode_backward(&tape, N, Some(&g_h), None).unwrap();

    checks.push(check("ce / W", &f.head.net, &g_w, |w| ce(&f.nets, &CompatHead::from_net(w.clone(), false))));
    checks.extend(check_encoders("ce", &f.nets, &g_enc, |n| ce(n, &f.head)));
    assert!(g_enc.e_ind.flat().iter().all(|&v| v == 0.0));
    checks
}

pub fn bilinear_head_classification_loss() -> Vec<Check> {
    let mut checks = Vec::new();
    let f = fixture(2);
    let head = CompatHead::new(8, D_A, (0, 0), true, &mut rng(3));
    let h = f.nets.encode(&f.x).unwrap().h_cor;
    let (scores, tape) = head.scores_train(&h, &f.semantics, &f.class_ids).unwrap();
    let (_, g) = compat_ce_loss(&scores, &f.labels).unwrap();
    let (_, g_w) = head.backward(&tape, &g).unwrap();
    // The bias is frozen at zero, so only the weight coordinates are compared.
    let layer = &head.net.layers()[0];
    let n_w = layer.weight.len();
    let params = head.net.flat_params();
    let mut probe = head.net.clone();
    let err = grad_check(
        |p| {
            let mut full = params.clone();
            full[..n_w].copy_from_slice(p);
            probe.set_flat_params(&full)?;
            let (s, _) = CompatHead::from_net(probe.clone(), true).scores_train(&h, &f.semantics, &f.class_ids)?;
            Ok(compat_ce_loss(&s, &f.labels)?.0)
        },
        &params[..n_w],
        &g_w.flat()[..n_w],
        GradCheckConfig::default(),
    )
    .unwrap();
    checks.push(("bilinear / W".to_string(), err));
    checks
}

pub fn adversarial_entropy() -> Vec<Check> {
    let mut checks = Vec::new();
    let f = fixture(4);
    let loss = |nets: &DisentangleNets<f64>| {
        let h = nets.encode(&f.x).unwrap().h_ind;
        let (s, _) = f.head.scores_train(&h, &f.semantics, &f.class_ids).unwrap();
        adversarial_entropy_loss(&s.scores).unwrap().0
    };
    let (lat, tape) = f.nets.encode_train(&f.x).unwrap();
    let (scores, ctape) = f.head.scores_train(&lat.h_ind, &f.semantics, &f.class_ids).unwrap();
    let (_, g_scores) = adversarial_entropy_loss(&scores.scores).unwrap();
    let (g_h, _) = f.head.backward(&ctape, &g_scores).unwrap();
    let g_enc = f.nets.encode_backward(&tape, N, None, Some(&g_h)).unwrap();
    checks.extend(check_encoders("entropy", &f.nets, &g_enc, loss));
    checks
}

pub fn reconstruction() -> Vec<Check> {
    let mut checks = Vec::new();
    let f = fixture(5);
    let loss = |nets: &DisentangleNets<f64>| {
        let lat = nets.encode(&f.x).unwrap();
        reconstruction_loss(&f.x, &lat, &nets.r).unwrap().loss
    };
    let (lat, tape) = f.nets.encode_train(&f.x).unwrap();
    let out = reconstruction_loss(&f.x, &lat, &f.nets.r).unwrap();
    let g_enc = f.nets.encode_backward(&tape, N, Some(&out.g_cor), Some(&out.g_ind)).unwrap();
    checks.push(check("rec / R", &f.nets.r, &out.r, |r| loss(&with_net(&f.nets, "R", r))));
    checks.extend(check_encoders("rec", &f.nets, &g_enc, loss));
    checks
}

pub fn mine_both_directions() -> Vec<Check> {
    let mut checks = Vec::new();
    let f = fixture(6);
    let perm: Vec<usize> = (0..N).map(|i| (i * 5 + 3) % N).collect();
    let estimate = |nets: &DisentangleNets<f64>| {
        let lat = nets.encode(&f.x).unwrap();
        mine_loss(&lat.h_cor, &lat.h_ind, &nets.t_mine, &perm, None).unwrap().estimate
    };
    let (lat, tape) = f.nets.encode_train(&f.x).unwrap();
    let out = mine_loss(&lat.h_cor, &lat.h_ind, &f.nets.t_mine, &perm, None).unwrap();
    // Statistics network: ascent on the estimate.
    checks.push(check("mine / T", &f.nets.t_mine, &out.t, |t| estimate(&with_net(&f.nets, "T", t))));
    // Encoders: descent on the same estimate.
    let g_enc = f.nets.encode_backward(&tape, N, Some(&out.g_cor), Some(&out.g_ind)).unwrap();
    checks.extend(check_encoders("mine", &f.nets, &g_enc, estimate));
    checks
}

fn split() -> SourceTargetSplit {
    SourceTargetSplit {
        source_classes: vec![0, 1, 2, 3],
        target_classes: vec![4],
        seed: 0,
    }
}

fn provenance(labels: &[u32]) -> Vec<Provenance> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != 4)
        .map(|(row, &l)| Provenance {
            source_class: l,
            target_class: 4,
            source_row: row,
        })
        .collect()
}

pub fn center_synthesis_losses() -> Vec<Check> {
    let mut checks = Vec::new();
    let f = fixture(7);
    let mut r = rng(8);
    let c = convert_net::<f64, _>(D_A, (8, 8), 8, &mut r);
    let h = f.nets.encode(&f.x).unwrap().h_cor;
    let prov = provenance(&f.labels);
    let src_ids: Vec<u32> = vec![0, 1, 2, 3];
    let src_sem = f.semantics.slice(ndarray::s![..4, ..]).to_owned();
    let soft = randn(&mut r, prov.len(), 4).mapv(f64::exp);
    let soft = &soft / &soft.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));

    let pseudo = |c: &Mlp<f64>| synth_center(&h, prov.clone(), &split(), &f.semantics, c).unwrap();
    let ce = |c: &Mlp<f64>| {
        let (s, _) = f.head.scores_train(&pseudo(c).0.vectors, &f.semantics, &f.class_ids).unwrap();
        compat_ce_loss(&s, &pseudo(c).0.target_labels()).unwrap().0
    };
    let transfer = |c: &Mlp<f64>| {
        let (s, _) = f.head.scores_train(&pseudo(c).0.vectors, &src_sem, &src_ids).unwrap();
        transfer_loss(&s, &soft).unwrap().0
    };

    let (batch, stape) = pseudo(&c);
    let (s, ctape) = f.head.scores_train(&batch.vectors, &f.semantics, &f.class_ids).unwrap();
    let (_, g) = compat_ce_loss(&s, &batch.target_labels()).unwrap();
    let g_c = stape.backward(&c, &f.head.backward(&ctape, &g).unwrap().0).unwrap();
    checks.push(check("center ce / C_center", &c, &g_c, ce));

    let (s, ctape) = f.head.scores_train(&batch.vectors, &src_sem, &src_ids).unwrap();
    let (_, g) = transfer_loss(&s, &soft).unwrap();
    let (g_h, g_w) = f.head.backward(&ctape, &g).unwrap();
    checks.push(check("transfer / C_center", &c, &stape.backward(&c, &g_h).unwrap(), transfer));
    checks.push(check("transfer / W", &f.head.net, &g_w, |w| {
        let (s, _) = CompatHead::from_net(w.clone(), false)
            .scores_train(&batch.vectors, &src_sem, &src_ids)
            .unwrap();
        transfer_loss(&s, &soft).unwrap().0
    }));
    checks
}

pub fn edge_synthesis_through_clipping() -> Vec<Check> {
    let mut checks = Vec::new();
    let f = fixture(9);
    let mut r = rng(10);
    let edges = vec![convert_net::<f64, _>(D_A, (8, 8), 8, &mut r)];
    let h = f.nets.encode(&f.x).unwrap().h_cor;
    let prov = provenance(&f.labels);
    let eps_edge = 0.05;
    let loss = |c: &Mlp<f64>| {
        let (b, _) = synth_edge(&h, prov.clone(), &split(), &f.semantics, std::slice::from_ref(c), 0, eps_edge).unwrap();
        let (s, _) = f.head.scores_train(&b.vectors, &f.semantics, &f.class_ids).unwrap();
        compat_ce_loss(&s, &b.target_labels()).unwrap().0
    };
    let (b, tape) = synth_edge(&h, prov.clone(), &split(), &f.semantics, &edges, 0, eps_edge).unwrap();
    let raw = edges[0].infer(&tdcss::synthesis::semantic_differences(&f.semantics, &prov).unwrap()).unwrap();
    let bound = eps_edge * tdcss::synthesis::mean_row_norm(&h);
    assert!(raw.rows().into_iter().all(|row| row.dot(&row).sqrt() > bound), "every row should be clipped");
    let (s, ctape) = f.head.scores_train(&b.vectors, &f.semantics, &f.class_ids).unwrap();
    let (_, g) = compat_ce_loss(&s, &b.target_labels()).unwrap();
    let g_c = tape.backward(&edges[0], &f.head.backward(&ctape, &g).unwrap().0).unwrap();
    checks.push(check("edge ce / C_edge", &edges[0], &g_c, loss));
    checks
}

pub fn domain_identifier_both_labelings() -> Vec<Check> {
    let mut checks = Vec::new();
    let f = fixture(11);
    let mut r = rng(12);
    let di = domain_identifier::<f64, _>(8, 8, &mut r);
    let c = convert_net::<f64, _>(D_A, (8, 8), 8, &mut r);
    let h = f.nets.encode(&f.x).unwrap().h_cor;
    let prov = provenance(&f.labels);
    let real = randn(&mut r, 6, 8);
    let (batch, stape) = synth_center(&h, prov.clone(), &split(), &f.semantics, &c).unwrap();

    let out = domain_loss(&di, &real, &batch.vectors, false).unwrap();
    checks.push(check("di / DI", &di, &out.di, |d| domain_loss(d, &real, &batch.vectors, false).unwrap().loss));

    let fool = domain_loss(&di, &real, &batch.vectors, true).unwrap();
    let g_c = stape.backward(&c, &fool.g_pseudo).unwrap();
    checks.push(check("di fool / C_center", &c, &g_c, |c| {
        let (b, _) = synth_center(&h, prov.clone(), &split(), &f.semantics, c).unwrap();
        domain_loss(&di, &real, &b.vectors, true).unwrap().loss
    }));
    checks
}

/// Every check above, in order.
pub fn all() -> Vec<Check> {
    [
        classification_loss,
        bilinear_head_classification_loss,
        adversarial_entropy,
        reconstruction,
        mine_both_directions,
        center_synthesis_losses,
        edge_synthesis_through_clipping,
        domain_identifier_both_labelings,
    ]
    .into_iter()
    .flat_map(|f| f())
    .collect()
}
