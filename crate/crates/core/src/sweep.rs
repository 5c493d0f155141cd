//! Grids of training runs over ablations and shot counts.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{subsample_fszu, DatasetBundle};
use crate::error::{Error, Result};
use crate::eval::evaluate_gzsl;
use crate::model::Model;
use crate::par::{self, Exec};
use crate::trainer::{Ablation, TrainConfig, Trainer};

/// One column of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    Full,
    Without(Ablation),
    /// All training data, the reference column of a shot grid.
    AllShots,
    Shots(usize),
}

impl Cell {
    pub const ABLATIONS: [Cell; 4] = [
        Cell::Full,
        Cell::Without(Ablation::Tfd),
        Cell::Without(Ablation::Eps),
        Cell::Without(Ablation::Cps),
    ];
    pub const SHOTS: [Cell; 4] = [Cell::AllShots, Cell::Shots(10), Cell::Shots(5), Cell::Shots(2)];
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Full => f.write_str("full"),
            Cell::Without(Ablation::Tfd) => f.write_str("no_tfd"),
            Cell::Without(Ablation::Eps) => f.write_str("no_eps"),
            Cell::Without(Ablation::Cps) => f.write_str("no_cps"),
            Cell::AllShots => f.write_str("all"),
            Cell::Shots(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for Cell {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Cell::Full,
            "all" => Cell::AllShots,
            other => match other.strip_prefix("no_") {
                Some(a) => Cell::Without(a.parse()?),
                None => match other.parse::<usize>() {
                    Ok(k) if k > 0 => Cell::Shots(k),
                    _ => return Err(Error::Config(format!("unknown sweep cell {other:?}"))),
                },
            },
        })
    }
}

/// Parses a comma-separated grid such as `full,no_tfd` or `all,10,5,2`.
/// The names `ablations` and `shots` expand to the standard grids.
pub fn parse_grid(text: &str) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "ablations" => cells.extend(Cell::ABLATIONS),
            "shots" => cells.extend(Cell::SHOTS),
            p => cells.push(p.parse()?),
        }
    }
    if cells.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    /// A seed, or `median` for the summary row of a cell.
    pub seed: String,
    pub u: f64,
    pub s: f64,
    #[serde(rename = "H")]
    pub h: f64,
}

impl SweepRow {
    pub fn is_median(&self) -> bool {
        self.seed == "median"
    }
}

/// Trains one cell for one seed and returns the best-validation model (the
/// final one when no validation epoch ran). The seed drives both the trainer
/// and the few-shot subsample.
pub fn train_cell(bundle: &DatasetBundle, base: &TrainConfig, cell: Cell, seed: u64, exec: Exec) -> Result<Model<f32>> {
    let mut cfg = TrainConfig { seed, ..base.clone() };
    let few;
    let data = match cell {
        Cell::Full | Cell::AllShots => bundle,
        Cell::Without(a) => {
            cfg = cfg.ablate(a);
            bundle
        }
        Cell::Shots(k) => {
            few = subsample_fszu(bundle, k, seed)?;
            &few
        }
    };
    cfg.report_test = false;
    let mut trainer = Trainer::new(data, cfg)?.with_exec(exec);
    trainer.run().map_err(|e| e.context(format!("sweep cell {cell}, seed {seed}")))?;
    match trainer.best_model() {
        Some((_, best)) => Ok(best.clone()),
        None => Ok(trainer.finish().0),
    }
}

/// Trains one cell for one seed and scores it on the full bundle.
pub fn run_cell(bundle: &DatasetBundle, base: &TrainConfig, cell: Cell, seed: u64, exec: Exec) -> Result<SweepRow> {
    let model = train_cell(bundle, base, cell, seed, exec)?;
    let m = evaluate_gzsl(&model, bundle, exec)?;
    Ok(SweepRow {
        setting: cell.to_string(),
        seed: seed.to_string(),
        u: m.u,
        s: m.s,
        h: m.h,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-column medians, one row per cell in first-appearance order.
pub fn medians(rows: &[SweepRow]) -> Vec<SweepRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows.iter().filter(|r| !r.is_median()) {
        if !order.contains(&r.setting.as_str()) {
            order.push(&r.setting);
        }
    }
    order
        .into_iter()
        .map(|setting| {
            let cell: Vec<&SweepRow> = rows.iter().filter(|r| r.setting == setting && !r.is_median()).collect();
            let col = |f: fn(&SweepRow) -> f64| median(cell.iter().map(|r| f(r)).collect());
            SweepRow {
                setting: setting.to_string(),
                seed: "median".into(),
                u: col(|r| r.u),
                s: col(|r| r.s),
                h: col(|r| r.h),
            }
        })
        .collect()
}

/// Runs every (cell, seed) pair and appends one median row per cell.
/// Runs are independent, so `exec` only changes wall-clock time.
pub fn run_sweep(bundle: &DatasetBundle, base: &TrainConfig, cells: &[Cell], seeds: &[u64], exec: Exec) -> Result<Vec<SweepRow>> {
    let jobs: Vec<(Cell, u64)> = cells.iter().flat_map(|&c| seeds.iter().map(move |&s| (c, s))).collect();
    let mut rows = par::map(exec, &jobs, |&(c, s)| run_cell(bundle, base, c, s, Exec::Sequential))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let meds = medians(&rows);
    rows.extend(meds);
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<SweepRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::format(i as u64 + 1, format!("bad sweep row: {e}"))))
        .collect()
}
