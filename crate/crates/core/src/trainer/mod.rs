//! Two-stage alternating optimisation with ablation switches, validation and
//! checkpointing.

mod checkpoint;
mod config;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, Tensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{config_hash, Ablation, TrainConfig};

use checkpoint::{adam_tensors, load_adam, net_tensors};

use crate::compat::{compat_ce_loss, compat_scores, predict_from_scores, soft_labels, transfer_loss};
use crate::data::{split_source_target, DatasetBundle, SourceTargetSplit};
use crate::disentangler::{adversarial_entropy_loss, mine_loss, reconstruction_loss, MINE_MIN_BATCH};
use crate::error::{Error, Result};
use crate::eval::{evaluate_gzsl, harmonic_mean, per_class_top1, Metrics};
use crate::model::{edge_group, Model, GROUP_C_CENTER, GROUP_DI, GROUP_E, GROUP_E_COR, GROUP_E_IND, GROUP_R, GROUP_T, GROUP_W};
use crate::numkernel::{vconcat, AdamConfig, AdamState, Matrix, MlpGrads};
use crate::par::Exec;
use crate::synthesis::{domain_loss, synth_center, synth_edge, Provenance};

/// Parameter initialisation stream.
pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Every epoch draws from its own stream, so a resumed run needs no RNG state.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Mean value of every loss term that was active during an epoch. Inactive
/// terms are absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossRecord(pub BTreeMap<String, f64>);

impl LossRecord {
    pub fn get(&self, term: &str) -> Option<f64> {
        self.0.get(term).copied()
    }
}

#[derive(Default)]
pub(crate) struct LossAcc(BTreeMap<&'static str, (f64, usize)>);

impl LossAcc {
    fn add(&mut self, term: &'static str, v: f32) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::numeric("training loss", format!("{term} = {v}")));
        }
        let slot = self.0.entry(term).or_insert((0.0, 0));
        slot.0 += f64::from(v);
        slot.1 += 1;
        Ok(())
    }

    fn finish(self) -> LossRecord {
        LossRecord(self.0.into_iter().map(|(k, (s, n))| (k.to_string(), s / n as f64)).collect())
    }
}

/// Validation scores used to pick the best epoch. `u` is the accuracy with
/// which center pseudo samples built from validation rows are recognised as
/// their unseen target classes; no unseen feature is read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub u: f64,
    pub s: f64,
    #[serde(rename = "H")]
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossRecord,
    pub val: Option<ValMetrics>,
    pub test: Option<Metrics>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
    pub best_epoch: Option<usize>,
    pub final_checkpoint_id: Option<String>,
}

/// Per-batch inputs shared by the stage-1 sub-steps.
pub(crate) struct BatchContext {
    x: Matrix<f32>,
    labels: Vec<u32>,
    src_ids: Vec<u32>,
    src_sem: Matrix<f32>,
    joint_ids: Vec<u32>,
    joint_sem: Matrix<f32>,
    split: SourceTargetSplit,
}

/// One uniformly drawn target class per source row.
fn draw_provenance(labels: &[u32], targets: &[u32], rng: &mut ChaCha8Rng) -> Vec<Provenance> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| Provenance {
            source_class: l,
            target_class: targets[rng.random_range(0..targets.len())],
            source_row: i,
        })
        .collect()
}

/// Shuffled pass over a row pool that reshuffles when exhausted.
struct Cycle {
    rows: Vec<usize>,
    at: usize,
}

impl Cycle {
    fn new(mut rows: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        rows.shuffle(rng);
        Self { rows, at: 0 }
    }

    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.at == self.rows.len() {
                self.rows.shuffle(rng);
                self.at = 0;
            }
            out.push(self.rows[self.at]);
            self.at += 1;
        }
        out
    }
}

type Optimizers = BTreeMap<String, AdamState<f32>>;

fn apply(opts: &mut Optimizers, model: &mut Model<f32>, group: &str, grads: &MlpGrads<f32>) -> Result<()> {
    let state = opts
        .get_mut(group)
        .ok_or_else(|| Error::Usage(format!("no optimizer for group {group}")))?;
    let net = model
        .group_mut(group)
        .ok_or_else(|| Error::Usage(format!("no parameter group {group}")))?;
    state.step_mlp(net, grads)
}

fn scaled(mut g: MlpGrads<f32>, c: f64) -> MlpGrads<f32> {
    g.scale(c as f32);
    g
}

/// Owns one training run.
pub struct Trainer<'a> {
    bundle: &'a DatasetBundle,
    cfg: TrainConfig,
    model: Model<f32>,
    opt1: Optimizers,
    opt2: Optimizers,
    epoch: usize,
    pool: Vec<usize>,
    val_rows: Vec<usize>,
    best: Option<(usize, f64, Model<f32>)>,
    report: TrainReport,
    exec: Exec,
    soft_cache: BTreeMap<(Vec<u32>, u32), Vec<f32>>,
}

impl<'a> Trainer<'a> {
    pub fn new(bundle: &'a DatasetBundle, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.n_target >= bundle.seen_classes.len() {
            return Err(Error::Config(format!(
                "n_target = {} leaves no source classes among {} seen classes",
                cfg.n_target,
                bundle.seen_classes.len()
            )));
        }
        let dims = cfg.model_dims(bundle.feature_dim(), bundle.semantic_dim());
        let model = Model::<f32>::new(dims, cfg.no_tfd, cfg.bilinear, &mut init_rng(cfg.seed))?;
        let adam1 = AdamConfig::with_lr(cfg.lr);
        let adam2 = AdamConfig::with_lr(cfg.stage2_lr());
        let opt1 = model
            .groups()
            .into_iter()
            .map(|(name, net)| (name, AdamState::for_mlp(adam1, net)))
            .collect();
        let opt2 = [GROUP_W, GROUP_C_CENTER]
            .into_iter()
            .map(|g| {
                let net = model.groups().into_iter().find(|(n, _)| n == g).unwrap().1;
                (g.to_string(), AdamState::for_mlp(adam2, net))
            })
            .collect();
        let (pool, val_rows) = carve_validation(bundle, &cfg);
        if pool.is_empty() {
            return Err(Error::Data("no seen-class training rows".into()));
        }
        Ok(Self {
            bundle,
            cfg,
            model,
            opt1,
            opt2,
            epoch: 0,
            pool,
            val_rows,
            best: None,
            report: TrainReport::default(),
            exec: Exec::default(),
            soft_cache: BTreeMap::new(),
        })
    }

    /// Continues a run from a checkpoint. `cfg` may differ from the stored
    /// configuration only in `epochs`.
    pub fn resume(bundle: &'a DatasetBundle, ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let mut same = cfg.clone();
        same.epochs = ckpt.meta.config.epochs;
        if same != ckpt.meta.config {
            return Err(Error::Config("resume config differs from the checkpoint beyond `epochs`".into()));
        }
        ckpt.check_bundle(bundle)?;
        let mut t = Self::new(bundle, cfg)?;
        t.model = ckpt.model()?;
        for (prefix, opts) in [("adam1", &mut t.opt1), ("adam2", &mut t.opt2)] {
            for (name, state) in opts.iter_mut() {
                let key = format!("{prefix}.{name}");
                let step = *ckpt
                    .meta
                    .adam_steps
                    .get(&key)
                    .ok_or_else(|| Error::format(0, format!("checkpoint has no step count for {key}")))?;
                load_adam(
                    state,
                    &key,
                    ckpt.group(&format!("{key}.m"))?,
                    ckpt.group(&format!("{key}.v"))?,
                    step,
                )?;
            }
        }
        t.epoch = ckpt.meta.epoch;
        if let (Some(e), Some(h)) = (ckpt.meta.best_epoch, ckpt.meta.best_val_h) {
            t.best = Some((e, h, ckpt.model_with_prefix("best.")?));
            t.report.best_epoch = Some(e);
        }
        Ok(t)
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<f32> {
        &mut self.model
    }

    /// Model with the best validation score so far.
    pub fn best_model(&self) -> Option<(usize, &Model<f32>)> {
        self.best.as_ref().map(|(e, _, m)| (*e, m))
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// Seen-class rows the optimiser draws from.
    pub fn training_rows(&self) -> &[usize] {
        &self.pool
    }

    pub fn validation_rows(&self) -> &[usize] {
        &self.val_rows
    }

    /// Runs every remaining epoch.
    pub fn run(&mut self) -> Result<()> {
        let left = self.cfg.epochs.saturating_sub(self.epoch);
        self.run_epochs(left)
    }

    pub fn run_epochs(&mut self, n: usize) -> Result<()> {
        let start = Instant::now();
        for _ in 0..n {
            self.run_epoch()?;
        }
        self.report.wall_clock_secs += start.elapsed().as_secs_f64();
        Ok(())
    }

    /// Fresh source/target split, stage 1, stage 2, then validation on schedule.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch + 1;
        let mut rng = epoch_rng(self.cfg.seed, self.epoch);
        let split_seed = if self.cfg.fixed_split { self.cfg.seed } else { rng.random() };
        let split = split_source_target(self.bundle, self.cfg.n_target, split_seed)?;
        let mut losses = self
            .stage1_epoch(&split, &mut rng)
            .map_err(|e| e.context(format!("epoch {epoch}, stage 1")))?;
        let stage2 = self
            .stage2_epoch(&mut rng)
            .map_err(|e| e.context(format!("epoch {epoch}, stage 2")))?;
        losses.0.extend(stage2.0);
        self.epoch = epoch;

        let (mut val, mut test) = (None, None);
        if self.cfg.eval_every > 0 && epoch % self.cfg.eval_every == 0 {
            let v = self.validate(&self.model)?;
            let crit = if self.bundle.unseen_classes.is_empty() { v.s } else { v.h };
            if self.best.as_ref().is_none_or(|(_, h, _)| crit > *h) {
                self.best = Some((epoch, crit, self.model.clone()));
                self.report.best_epoch = Some(epoch);
            }
            val = Some(v);
            if self.cfg.report_test {
                test = Some(evaluate_gzsl(&self.model, self.bundle, self.exec)?);
            }
        }
        let record = EpochRecord {
            epoch,
            losses,
            val,
            test,
        };
        self.report.epochs.push(record.clone());
        Ok(record)
    }

    fn soft_targets(&mut self, sources: &[u32], targets: &[u32]) -> Result<Matrix<f32>> {
        let sem = &self.bundle.semantics;
        let src_sem = self.bundle.semantics_of(sources);
        let mut out = Matrix::<f32>::zeros((targets.len(), sources.len()));
        for (i, &t) in targets.iter().enumerate() {
            let key = (sources.to_vec(), t);
            if !self.soft_cache.contains_key(&key) {
                let row = sem.row(t as usize).to_vec();
                let probs = soft_labels(&src_sem, &row, self.cfg.t_soft, self.cfg.soft_label_mode)?;
                self.soft_cache.insert(key.clone(), probs);
            }
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&self.soft_cache[&key]));
        }
        Ok(out)
    }

    /// Thirty (by default) batches of steps (a)–(g) over one source/target
    /// split of the seen classes.
    pub fn stage1_epoch(&mut self, split: &SourceTargetSplit, rng: &mut ChaCha8Rng) -> Result<LossRecord> {
        if split.target_classes.is_empty() {
            return Err(Error::Config("empty target split".into()));
        }
        if let Some(c) = split
            .source_classes
            .iter()
            .chain(&split.target_classes)
            .find(|&&c| !self.bundle.is_seen(c))
        {
            return Err(Error::Usage(format!("stage-1 split contains non-seen class {c}")));
        }
        let bundle = self.bundle;
        let in_set = |set: &[u32]| -> Vec<usize> {
            self.pool
                .iter()
                .copied()
                .filter(|&r| set.contains(&bundle.labels[r]))
                .collect()
        };
        let src_pool = in_set(&split.source_classes);
        let tgt_pool = in_set(&split.target_classes);
        if src_pool.is_empty() {
            return Err(Error::Data("no training rows in the source classes".into()));
        }
        let n = self.cfg.n_b.min(src_pool.len());
        let mut cycle = Cycle::new(src_pool, rng);
        let mut acc = LossAcc::default();
        for b in 0..self.cfg.batches_stage1 {
            let rows = cycle.take(n, rng);
            self.stage1_batch(split, &rows, &tgt_pool, rng, &mut acc)
                .map_err(|e| e.context(format!("batch {}", b + 1)))?;
        }
        Ok(acc.finish())
    }

    fn stage1_batch(
        &mut self,
        split: &SourceTargetSplit,
        rows: &[usize],
        tgt_pool: &[usize],
        rng: &mut ChaCha8Rng,
        acc: &mut LossAcc,
    ) -> Result<()> {
        let c = self.batch_context(split, rows)?;
        self.step_classify(&c, acc)?;
        if !self.cfg.no_tfd {
            self.step_adversarial(&c, acc)?;
            self.step_reconstruct(&c, acc)?;
            self.step_mine(&c, rng, acc)?;
        }
        let provenance = draw_provenance(&c.labels, &split.target_classes, rng);
        self.step_convert(&c, &provenance, acc)?;
        let center = self.step_head(&c, &provenance, acc)?;
        if let Some(center) = center {
            self.step_domain(&c, &provenance, &center, tgt_pool, rng, acc)?;
        }
        Ok(())
    }

    fn batch_context(&self, split: &SourceTargetSplit, rows: &[usize]) -> Result<BatchContext> {
        let bundle = self.bundle;
        let view = bundle.seen_view();
        let mut joint_ids: Vec<u32> = split.source_classes.iter().chain(&split.target_classes).copied().collect();
        joint_ids.sort_unstable();
        Ok(BatchContext {
            x: view.features(rows)?,
            labels: view.labels(rows),
            src_sem: bundle.semantics_of(&split.source_classes),
            src_ids: split.source_classes.clone(),
            joint_sem: bundle.semantics_of(&joint_ids),
            joint_ids,
            split: split.clone(),
        })
    }

    /// (a) `L_ce` of `h_cor` (and optionally `h_ind`) over the source classes
    /// updates the encoders and `W`.
    pub(crate) fn step_classify(&mut self, c: &BatchContext, acc: &mut LossAcc) -> Result<()> {
        let n = c.labels.len();
        let classify_ind = !self.cfg.no_tfd && self.cfg.classify_ind;
        let m = &self.model;
        let (lat, tape) = m.nets.encode_train(&c.x)?;
        let (sc, ct) = m.head.scores_train(&lat.h_cor, &c.src_sem, &c.src_ids)?;
        let (l_ce, g) = compat_ce_loss(&sc, &c.labels)?;
        acc.add("ce", l_ce)?;
        let (g_cor, mut g_w) = m.head.backward(&ct, &g)?;
        let mut g_ind = None;
        if classify_ind {
            let (sc, ct) = m.head.scores_train(&lat.h_ind, &c.src_sem, &c.src_ids)?;
            let (l, g) = compat_ce_loss(&sc, &c.labels)?;
            acc.add("ce_ind", l)?;
            let (gh, gw) = m.head.backward(&ct, &g)?;
            g_w.add_assign(&gw);
            g_ind = Some(gh);
        }
        let eg = m.nets.encode_backward(&tape, n, Some(&g_cor), g_ind.as_ref())?;
        apply(&mut self.opt1, &mut self.model, GROUP_E, &eg.e)?;
        if !self.model.nets.split_output {
            apply(&mut self.opt1, &mut self.model, GROUP_E_COR, &eg.e_cor)?;
            if g_ind.is_some() {
                apply(&mut self.opt1, &mut self.model, GROUP_E_IND, &eg.e_ind)?;
            }
        }
        apply(&mut self.opt1, &mut self.model, GROUP_W, &g_w)
    }

    /// (b) Negative entropy of `W(h_ind)` with `W` frozen updates `E`, `E_ind`.
    pub(crate) fn step_adversarial(&mut self, c: &BatchContext, acc: &mut LossAcc) -> Result<()> {
        let m = &self.model;
        let (lat, tape) = m.nets.encode_train(&c.x)?;
        let (sc, ct) = m.head.scores_train(&lat.h_ind, &c.src_sem, &c.src_ids)?;
        let (l_adv, g) = adversarial_entropy_loss(&sc.scores)?;
        acc.add("adv", l_adv)?;
        let g = g.mapv(|v| v * self.cfg.lambda_adv as f32);
        let (g_ind, _) = m.head.backward(&ct, &g)?;
        let eg = m.nets.encode_backward(&tape, c.labels.len(), None, Some(&g_ind))?;
        apply(&mut self.opt1, &mut self.model, GROUP_E, &eg.e)?;
        apply(&mut self.opt1, &mut self.model, GROUP_E_IND, &eg.e_ind)
    }

    /// (c) Reconstruction updates `R` and, unless disabled, the encoders.
    pub(crate) fn step_reconstruct(&mut self, c: &BatchContext, acc: &mut LossAcc) -> Result<()> {
        let m = &self.model;
        let (lat, tape) = m.nets.encode_train(&c.x)?;
        let rec = reconstruction_loss(&c.x, &lat, &m.nets.r)?;
        acc.add("rec", rec.loss)?;
        let lam = self.cfg.lambda_rec;
        let eg = if self.cfg.rec_updates_encoders {
            let gc = rec.g_cor.mapv(|v| v * lam as f32);
            let gi = rec.g_ind.mapv(|v| v * lam as f32);
            Some(m.nets.encode_backward(&tape, c.labels.len(), Some(&gc), Some(&gi))?)
        } else {
            None
        };
        apply(&mut self.opt1, &mut self.model, GROUP_R, &scaled(rec.r, lam))?;
        if let Some(eg) = eg {
            apply(&mut self.opt1, &mut self.model, GROUP_E, &eg.e)?;
            apply(&mut self.opt1, &mut self.model, GROUP_E_COR, &eg.e_cor)?;
            apply(&mut self.opt1, &mut self.model, GROUP_E_IND, &eg.e_ind)?;
        }
        Ok(())
    }

    /// (d) The statistics network ascends the MINE bound, then the encoders
    /// descend it.
    pub(crate) fn step_mine(&mut self, c: &BatchContext, rng: &mut ChaCha8Rng, acc: &mut LossAcc) -> Result<()> {
        let n = c.labels.len();
        if n < MINE_MIN_BATCH {
            return Ok(());
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let lat = self.model.nets.encode(&c.x)?;
        let ema = if self.cfg.mine_ema { Some(&mut self.model.mine_ema) } else { None };
        let out = mine_loss(&lat.h_cor, &lat.h_ind, &self.model.nets.t_mine, &perm, ema)?;
        acc.add("mine_t", out.estimate)?;
        apply(&mut self.opt1, &mut self.model, GROUP_T, &scaled(out.t, -1.0))?;

        let m = &self.model;
        let (lat, tape) = m.nets.encode_train(&c.x)?;
        let out = mine_loss(&lat.h_cor, &lat.h_ind, &m.nets.t_mine, &perm, None)?;
        acc.add("mine_enc", out.estimate)?;
        let lam = self.cfg.lambda_mine as f32;
        let gc = out.g_cor.mapv(|v| v * lam);
        let gi = out.g_ind.mapv(|v| v * lam);
        let eg = m.nets.encode_backward(&tape, n, Some(&gc), Some(&gi))?;
        apply(&mut self.opt1, &mut self.model, GROUP_E, &eg.e)?;
        apply(&mut self.opt1, &mut self.model, GROUP_E_COR, &eg.e_cor)?;
        apply(&mut self.opt1, &mut self.model, GROUP_E_IND, &eg.e_ind)
    }

    /// (e) Convert nets learn offsets toward the target classes: target-labelled
    /// `L_ce` plus the transfer loss for `C_center`, target-labelled `L_ce`
    /// for each edge net. Encoders and `W` are frozen.
    pub(crate) fn step_convert(&mut self, c: &BatchContext, provenance: &[Provenance], acc: &mut LossAcc) -> Result<()> {
        let cfg = self.cfg.clone();
        let semantics = &self.bundle.semantics;
        let h = self.model.nets.encode_cor(&c.x)?;
        let targets: Vec<u32> = provenance.iter().map(|p| p.target_class).collect();
        if !cfg.no_cps {
            let soft = self.soft_targets(&c.src_ids, &targets)?;
            let m = &self.model;
            let (pb, tape) = synth_center(&h, provenance.to_vec(), &c.split, semantics, &m.c_center)?;
            let (sc, ct) = m.head.scores_train(&pb.vectors, &c.joint_sem, &c.joint_ids)?;
            let (l_ce, g) = compat_ce_loss(&sc, &targets)?;
            acc.add("c_center_ce", l_ce)?;
            let (mut g_hat, _) = m.head.backward(&ct, &g)?;
            let (sc, ct) = m.head.scores_train(&pb.vectors, &c.src_sem, &c.src_ids)?;
            let (l_tr, g) = transfer_loss(&sc, &soft)?;
            acc.add("transfer", l_tr)?;
            let g = g.mapv(|v| v * cfg.lambda_trans as f32);
            g_hat += &m.head.backward(&ct, &g)?.0;
            let grads = tape.backward(&m.c_center, &g_hat)?;
            apply(&mut self.opt1, &mut self.model, GROUP_C_CENTER, &grads)?;
        }
        if !cfg.no_eps {
            for k in 0..cfg.edge_nets {
                let m = &self.model;
                let (pb, tape) = synth_edge(&h, provenance.to_vec(), &c.split, semantics, &m.c_edge, k, cfg.eps_edge)?;
                let (sc, ct) = m.head.scores_train(&pb.vectors, &c.joint_sem, &c.joint_ids)?;
                let (l, g) = compat_ce_loss(&sc, &targets)?;
                acc.add("c_edge_ce", l)?;
                let (g_hat, _) = m.head.backward(&ct, &g)?;
                let grads = tape.backward(&m.c_edge[k], &g_hat)?;
                apply(&mut self.opt1, &mut self.model, &edge_group(k), &grads)?;
            }
        }
        Ok(())
    }

    /// (f) `W` learns center samples as their target classes and edge samples
    /// as their source classes. Returns the center samples for step (g).
    pub(crate) fn step_head(
        &mut self,
        c: &BatchContext,
        provenance: &[Provenance],
        acc: &mut LossAcc,
    ) -> Result<Option<Matrix<f32>>> {
        let cfg = &self.cfg;
        let semantics = &self.bundle.semantics;
        let h = self.model.nets.encode_cor(&c.x)?;
        let mut parts: Vec<(Matrix<f32>, Vec<u32>)> = Vec::new();
        let mut center = None;
        if !cfg.no_cps {
            let (pb, _) = synth_center(&h, provenance.to_vec(), &c.split, semantics, &self.model.c_center)?;
            parts.push((pb.vectors.clone(), pb.head_labels()));
            center = Some(pb.vectors);
        }
        if !cfg.no_eps {
            for k in 0..cfg.edge_nets {
                let (pb, _) = synth_edge(&h, provenance.to_vec(), &c.split, semantics, &self.model.c_edge, k, cfg.eps_edge)?;
                parts.push((pb.vectors.clone(), pb.head_labels()));
            }
        }
        let Some((first, _)) = parts.first() else {
            return Ok(center);
        };
        let mut stacked = first.clone();
        for (v, _) in &parts[1..] {
            stacked = vconcat(&stacked, v)?;
        }
        let labels: Vec<u32> = parts.iter().flat_map(|(_, l)| l.iter().copied()).collect();
        let m = &self.model;
        let (sc, ct) = m.head.scores_train(&stacked, &c.joint_sem, &c.joint_ids)?;
        let (l, g) = compat_ce_loss(&sc, &labels)?;
        acc.add("w_pseudo_ce", l)?;
        let (_, g_w) = m.head.backward(&ct, &g)?;
        apply(&mut self.opt1, &mut self.model, GROUP_W, &g_w)?;
        Ok(center)
    }

    /// (g) `DI` separates real target-class `h_cor` from center samples, then
    /// `C_center` is trained with swapped domain labels to fool it.
    fn step_domain(
        &mut self,
        c: &BatchContext,
        provenance: &[Provenance],
        center: &Matrix<f32>,
        tgt_pool: &[usize],
        rng: &mut ChaCha8Rng,
        acc: &mut LossAcc,
    ) -> Result<()> {
        if tgt_pool.is_empty() {
            return Ok(());
        }
        let n = c.labels.len();
        let real_rows: Vec<usize> = (0..n).map(|_| tgt_pool[rng.random_range(0..tgt_pool.len())]).collect();
        let h_real = self.model.nets.encode_cor(&self.bundle.seen_view().features(&real_rows)?)?;
        self.step_identifier(&h_real, center, acc)?;
        self.step_fool(c, provenance, &h_real, acc)
    }

    /// Domain identifier update on real (label 1) vs center (label 0) samples.
    pub(crate) fn step_identifier(&mut self, h_real: &Matrix<f32>, center: &Matrix<f32>, acc: &mut LossAcc) -> Result<()> {
        let out = domain_loss(&self.model.di, h_real, center, false)?;
        acc.add("di", out.loss)?;
        apply(&mut self.opt1, &mut self.model, GROUP_DI, &scaled(out.di, self.cfg.lambda_di))
    }

    /// `C_center` update against the identifier with the domain labels swapped.
    pub(crate) fn step_fool(
        &mut self,
        c: &BatchContext,
        provenance: &[Provenance],
        h_real: &Matrix<f32>,
        acc: &mut LossAcc,
    ) -> Result<()> {
        let m = &self.model;
        let h = m.nets.encode_cor(&c.x)?;
        let (pb, tape) = synth_center(&h, provenance.to_vec(), &c.split, &self.bundle.semantics, &m.c_center)?;
        let out = domain_loss(&m.di, h_real, &pb.vectors, true)?;
        acc.add("di_fool", out.loss)?;
        let g = out.g_pseudo.mapv(|v| v * self.cfg.lambda_di as f32);
        let grads = tape.backward(&m.c_center, &g)?;
        apply(&mut self.opt1, &mut self.model, GROUP_C_CENTER, &grads)
    }

    /// Seen classes as sources, unseen classes as targets: the transfer loss
    /// finetunes `C_center`, then center samples labelled as unseen classes
    /// finetune `W` over the full semantic table. Only seen-class features
    /// are read.
    pub fn stage2_epoch(&mut self, rng: &mut ChaCha8Rng) -> Result<LossRecord> {
        let bundle = self.bundle;
        let mut acc = LossAcc::default();
        if self.cfg.no_cps || bundle.unseen_classes.is_empty() {
            return Ok(acc.finish());
        }
        let split = SourceTargetSplit {
            source_classes: bundle.seen_classes.clone(),
            target_classes: bundle.unseen_classes.clone(),
            seed: 0,
        };
        let all_ids: Vec<u32> = (0..bundle.num_classes() as u32).collect();
        let seen_ids = split.source_classes.clone();
        let seen_sem = bundle.semantics_of(&seen_ids);
        let semantics = &bundle.semantics;
        let view = bundle.seen_view();
        let n = self.cfg.n_b.min(self.pool.len());
        let mut cycle = Cycle::new(self.pool.clone(), rng);
        for b in 0..self.cfg.batches_stage2 {
            let rows = cycle.take(n, rng);
            let step = (|| -> Result<()> {
                let x = view.features(&rows)?;
                let labels = view.labels(&rows);
                let h = self.model.nets.encode_cor(&x)?;
                let provenance = draw_provenance(&labels, &split.target_classes, rng);
                let targets: Vec<u32> = provenance.iter().map(|p| p.target_class).collect();

                let soft = self.soft_targets(&seen_ids, &targets)?;
                let m = &self.model;
                let (pb, tape) = synth_center(&h, provenance.clone(), &split, semantics, &m.c_center)?;
                let (sc, ct) = m.head.scores_train(&pb.vectors, &seen_sem, &seen_ids)?;
                let (l, g) = transfer_loss(&sc, &soft)?;
                acc.add("s2_transfer", l)?;
                let (g_hat, _) = m.head.backward(&ct, &g)?;
                let grads = tape.backward(&m.c_center, &g_hat)?;
                apply(&mut self.opt2, &mut self.model, GROUP_C_CENTER, &grads)?;

                let m = &self.model;
                let (pb, _) = synth_center(&h, provenance, &split, semantics, &m.c_center)?;
                let stacked = vconcat(&h, &pb.vectors)?;
                let stacked_labels: Vec<u32> = labels.iter().chain(&targets).copied().collect();
                let (sc, ct) = m.head.scores_train(&stacked, semantics, &all_ids)?;
                let (l, g) = compat_ce_loss(&sc, &stacked_labels)?;
                acc.add("s2_w_ce", l)?;
                let (_, g_w) = m.head.backward(&ct, &g)?;
                apply(&mut self.opt2, &mut self.model, GROUP_W, &g_w)
            })();
            step.map_err(|e| e.context(format!("batch {}", b + 1)))?;
        }
        Ok(acc.finish())
    }

    /// Seen accuracy on the validation rows over all classes, and recognition
    /// of center pseudo samples built from them as their unseen targets.
    pub fn validate(&self, model: &Model<f32>) -> Result<ValMetrics> {
        let bundle = self.bundle;
        if self.val_rows.is_empty() {
            return Err(Error::Metric("no validation rows".into()));
        }
        let view = bundle.seen_view();
        let x = view.features(&self.val_rows)?;
        let labels = view.labels(&self.val_rows);
        let all_ids: Vec<u32> = (0..bundle.num_classes() as u32).collect();
        let h = model.nets.encode_cor(&x)?;
        let scores = compat_scores(&h, &bundle.semantics, &all_ids, &model.head)?;
        let preds = predict_from_scores(&scores);
        let mut present: Vec<u32> = labels.clone();
        present.sort_unstable();
        present.dedup();
        let (_, s) = per_class_top1(&preds, &labels, &present)?;
        if bundle.unseen_classes.is_empty() {
            return Ok(ValMetrics { u: 0.0, s, h: 0.0 });
        }
        let split = SourceTargetSplit {
            source_classes: bundle.seen_classes.clone(),
            target_classes: bundle.unseen_classes.clone(),
            seed: 0,
        };
        let u_n = bundle.unseen_classes.len();
        let provenance: Vec<Provenance> = (0..labels.len())
            .map(|i| Provenance {
                source_class: labels[i],
                target_class: bundle.unseen_classes[i % u_n],
                source_row: i,
            })
            .collect();
        let targets: Vec<u32> = provenance.iter().map(|p| p.target_class).collect();
        let (pb, _) = synth_center(&h, provenance, &split, &bundle.semantics, &model.c_center)?;
        let scores = compat_scores(&pb.vectors, &bundle.semantics, &all_ids, &model.head)?;
        let preds = predict_from_scores(&scores);
        let mut present = targets.clone();
        present.sort_unstable();
        present.dedup();
        let (_, u) = per_class_top1(&preds, &targets, &present)?;
        Ok(ValMetrics { u, s, h: harmonic_mean(u, s) })
    }

    /// Full run state: parameters, optimizer moments, MINE average, epoch and
    /// the best model so far.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut groups: Vec<(String, Vec<Tensor>)> = self
            .model
            .groups()
            .into_iter()
            .map(|(name, net)| (name, net_tensors(net)))
            .collect();
        let mut adam_steps = BTreeMap::new();
        for (prefix, opts) in [("adam1", &self.opt1), ("adam2", &self.opt2)] {
            for (name, state) in opts {
                let net = self.model.groups().into_iter().find(|(n, _)| n == name).unwrap().1;
                let (m, v) = adam_tensors(net, state);
                let key = format!("{prefix}.{name}");
                groups.push((format!("{key}.m"), m));
                groups.push((format!("{key}.v"), v));
                adam_steps.insert(key, state.step);
            }
        }
        if let Some((_, _, best)) = &self.best {
            for (name, net) in best.groups() {
                groups.push((format!("best.{name}"), net_tensors(net)));
            }
        }
        Checkpoint {
            meta: CheckpointMeta {
                config: self.cfg.clone(),
                config_hash: self.cfg.hash(),
                d_x: self.bundle.feature_dim(),
                d_a: self.bundle.semantic_dim(),
                num_classes: self.bundle.num_classes(),
                epoch: self.epoch,
                mine_ema: self.model.mine_ema,
                adam_steps,
                best_epoch: self.best.as_ref().map(|b| b.0),
                best_val_h: self.best.as_ref().map(|b| b.1),
            },
            groups,
        }
    }

    /// Parameters of the best-validation model only.
    pub fn best_checkpoint(&self) -> Option<Checkpoint> {
        let (epoch, h, best) = self.best.as_ref()?;
        let mut meta = self.checkpoint().meta;
        meta.epoch = *epoch;
        meta.mine_ema = best.mine_ema;
        meta.adam_steps.clear();
        meta.best_epoch = Some(*epoch);
        meta.best_val_h = Some(*h);
        Some(Checkpoint {
            meta,
            groups: best.groups().into_iter().map(|(n, net)| (n, net_tensors(net))).collect(),
        })
    }

    /// Stamps the report with the id of the final checkpoint and returns both.
    pub fn finish(mut self) -> (Model<f32>, TrainReport, Checkpoint) {
        let ckpt = self.checkpoint();
        self.report.final_checkpoint_id = Some(ckpt.id());
        (self.model, self.report, ckpt)
    }
}

/// Splits the seen training rows into an optimisation pool and validation
/// rows. Few-shot bundles and `val_frac = 0` validate on the pool itself.
fn carve_validation(bundle: &DatasetBundle, cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let all = bundle.train_rows(&bundle.seen_classes);
    if bundle.shots().is_some() || cfg.val_frac == 0.0 {
        return (all.clone(), all);
    }
    let mut pool = Vec::new();
    let mut val = Vec::new();
    for &c in &bundle.seen_classes {
        let mut rows = bundle.train_rows(&[c]);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0076_616c ^ (u64::from(c) << 32));
        rows.shuffle(&mut rng);
        let k = if rows.len() >= 2 {
            ((rows.len() as f64 * cfg.val_frac).floor() as usize).clamp(1, rows.len() - 1)
        } else {
            0
        };
        val.extend_from_slice(&rows[..k]);
        pool.extend_from_slice(&rows[k..]);
    }
    pool.sort_unstable();
    val.sort_unstable();
    (pool, val)
}

/// Trains from scratch and returns the final model with its report.
pub fn train(bundle: &DatasetBundle, cfg: TrainConfig) -> Result<(Model<f32>, TrainReport)> {
    let mut t = Trainer::new(bundle, cfg)?;
    t.run()?;
    let (model, report, _) = t.finish();
    Ok((model, report))
}
