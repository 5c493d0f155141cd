use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;
use tdcss::data::{generate_synthetic, load_bundle, save_bundle, subsample_fszu, DatasetBundle};
use tdcss::eval::{evaluate_gzsl, export_embeddings_2d, Metrics, MetricsRecord};
use tdcss::sweep::{parse_grid, run_sweep, write_csv};
use tdcss::trainer::{config_hash, Checkpoint, Trainer};
use tdcss::Result;

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.tdck";
pub const BEST_FILE: &str = "best.tdck";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "run_config.toml";

#[derive(Serialize)]
struct Sidecar<'a, C: Serialize> {
    config_hash: String,
    config: &'a C,
}

fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// Writes `<artifact>.meta.json` holding the config echo and its hash.
fn write_sidecar<C: Serialize>(artifact: &Path, config: &C) -> Result<()> {
    let meta = Sidecar {
        config_hash: config_hash(&serde_json::to_string(config).expect("config serialises")),
        config,
    };
    let mut text = serde_json::to_string_pretty(&meta).expect("meta serialises");
    text.push('\n');
    fs::write(sidecar_path(artifact), text)?;
    Ok(())
}

fn bundle_for(cfg: &RunConfig) -> Result<DatasetBundle> {
    match &cfg.run.bundle {
        Some(p) => {
            info!("loading bundle {}", p.display());
            load_bundle(p).map_err(|e| e.context(format!("bundle {}", p.display())))
        }
        None => {
            info!("no bundle given, generating synthetic data (seed {})", cfg.data.seed);
            generate_synthetic(&cfg.data)
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| e.context(format!("checkpoint {}", path.display())))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let bundle = generate_synthetic(&cfg.data)?;
    save_bundle(&bundle, out)?;
    write_sidecar(out, &cfg.data)?;
    info!(
        "wrote {} ({} rows, {} seen + {} unseen classes)",
        out.display(),
        bundle.num_rows(),
        bundle.seen_classes.len(),
        bundle.unseen_classes.len()
    );
    Ok(())
}

fn json_line<W: Write, T: Serialize>(w: &mut W, v: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, v).expect("record serialises");
    w.write_all(b"\n")?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    config_hash: String,
    epochs: usize,
    best_epoch: Option<usize>,
    wall_clock_secs: f64,
    final_checkpoint_id: Option<String>,
    #[serde(rename = "final")]
    final_metrics: &'a Metrics,
}

pub fn train(cfg: &RunConfig, fszu_shots: Option<usize>, resume: Option<&Path>) -> Result<()> {
    let bundle = bundle_for(cfg)?;
    let data = match fszu_shots {
        Some(k) => {
            info!("keeping {k} training rows per seen class");
            subsample_fszu(&bundle, k, cfg.train.seed)?
        }
        None => bundle.clone(),
    };
    let exec = cfg.exec();
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            ckpt.check_bundle(&bundle)?;
            info!("resuming {} after epoch {}", p.display(), ckpt.meta.epoch);
            Trainer::resume(&data, &ckpt, cfg.train.clone())?
        }
        None => Trainer::new(&data, cfg.train.clone())?,
    }
    .with_exec(exec);

    let dir = &cfg.run.out_dir;
    fs::create_dir_all(dir)?;
    let hash = cfg.train.hash();
    fs::write(dir.join(CONFIG_FILE), format!("# config_hash = \"{hash}\"\n{}", cfg.to_toml()))?;
    let open = |name: &str| -> Result<BufWriter<File>> {
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(resume.is_some())
            .truncate(resume.is_none())
            .open(dir.join(name))?;
        Ok(BufWriter::new(f))
    };
    let mut metrics = open(METRICS_FILE)?;
    let mut report = open(REPORT_FILE)?;

    let start = Instant::now();
    let seed = cfg.train.seed;
    while trainer.epochs_done() < cfg.train.epochs {
        let rec = trainer.run_epoch()?;
        json_line(&mut report, &rec)?;
        if let Some(v) = rec.val {
            let m = Metrics {
                per_class: Default::default(),
                n_evaluated: Default::default(),
                u: v.u,
                s: v.s,
                h: v.h,
            };
            json_line(&mut metrics, &MetricsRecord::new(rec.epoch, &m, "val", seed, &hash))?;
            info!("epoch {:>4}  val u {:.3} s {:.3} H {:.3}", rec.epoch, v.u, v.s, v.h);
        }
        if let Some(t) = &rec.test {
            json_line(&mut metrics, &MetricsRecord::new(rec.epoch, t, "test", seed, &hash))?;
            info!("epoch {:>4}  test u {:.3} s {:.3} H {:.3}", rec.epoch, t.u, t.s, t.h);
        }
    }
    let best = trainer.best_checkpoint();
    let epochs = trainer.epochs_done();
    let (model, train_report, ckpt) = trainer.finish();
    ckpt.save(dir.join(CHECKPOINT_FILE))?;
    if let Some(b) = best {
        b.save(dir.join(BEST_FILE))?;
    }
    let final_metrics = evaluate_gzsl(&model, &bundle, exec)?;
    json_line(&mut metrics, &MetricsRecord::new(epochs, &final_metrics, "final", seed, &hash))?;
    metrics.flush()?;
    report.flush()?;
    let summary = Summary {
        config_hash: hash,
        epochs,
        best_epoch: train_report.best_epoch,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        final_checkpoint_id: train_report.final_checkpoint_id,
        final_metrics: &final_metrics,
    };
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serialises");
    text.push('\n');
    fs::write(dir.join(SUMMARY_FILE), text)?;
    let (u, s, h) = final_metrics.percent();
    info!("final u {u:.1} s {s:.1} H {h:.1}; wrote {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: String,
    config_hash: &'a str,
    epoch: usize,
    #[serde(flatten)]
    metrics: &'a Metrics,
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, json: bool, out: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let bundle = bundle_for(cfg)?;
    ckpt.check_bundle(&bundle)?;
    let model = ckpt.model()?;
    let m = evaluate_gzsl(&model, &bundle, cfg.exec())?;
    let record = EvalOutput {
        checkpoint: ckpt.id(),
        config_hash: &ckpt.meta.config_hash,
        epoch: ckpt.meta.epoch,
        metrics: &m,
    };
    if json {
        println!("{}", serde_json::to_string(&record).expect("metrics serialise"));
    } else {
        let (u, s, h) = m.percent();
        println!("u {u:.1}  s {s:.1}  H {h:.1}");
        println!("{:>6}  {:>6}  {:>5}  {}", "class", "acc", "n", "kind");
        for (c, acc) in &m.per_class {
            let kind = if bundle.is_seen(*c) { "seen" } else { "unseen" };
            println!("{c:>6}  {:>6.1}  {:>5}  {kind}", acc * 100.0, m.n_evaluated[c]);
        }
    }
    if let Some(p) = out {
        let mut text = serde_json::to_string_pretty(&record).expect("metrics serialise");
        text.push('\n');
        fs::write(p, text)?;
    }
    Ok(())
}

pub fn sweep(cfg: &RunConfig, grid: &str, seeds: &[u64], out: Option<&Path>) -> Result<()> {
    let cells = parse_grid(grid)?;
    if seeds.is_empty() {
        return Err(tdcss::Error::Config("sweep needs at least one seed".into()));
    }
    let bundle = bundle_for(cfg)?;
    info!("sweeping {} cells x {} seeds", cells.len(), seeds.len());
    let rows = run_sweep(&bundle, &cfg.train, &cells, seeds, cfg.exec())?;
    for r in rows.iter().filter(|r| r.is_median()) {
        info!("{:>8}  median u {:.3} s {:.3} H {:.3}", r.setting, r.u, r.s, r.h);
    }
    match out {
        Some(p) => {
            write_csv(&rows, File::create(p)?)?;
            write_sidecar(p, cfg)?;
        }
        None => write_csv(&rows, std::io::stdout().lock())?,
    }
    Ok(())
}

pub fn export_embeddings(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let bundle = bundle_for(cfg)?;
    ckpt.check_bundle(&bundle)?;
    let model = ckpt.model()?;
    let train = &ckpt.meta.config;
    export_embeddings_2d(&model, &bundle, out, train.eps_edge, train.seed)?;
    write_sidecar(out, train)?;
    info!("wrote {}", out.display());
    Ok(())
}
