//! The six pairwise comparisons, run as a grid of deduplicated cells.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::experiment::{run_experiment, save_run, ExperimentConfig, RunLog};
use crate::model::{FusionKind, Modality, TrunkKind};
use crate::path::Scheme;
use crate::rng::{derive_seed, mix};

/// Architecture of one grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub trunk: TrunkKind,
    pub modality: Modality,
    pub fusion: FusionKind,
    pub scheme: Scheme,
    pub pretrain: bool,
}

impl Cell {
    const fn new(trunk: TrunkKind, modality: Modality, fusion: FusionKind, scheme: Scheme, pretrain: bool) -> Self {
        Self {
            trunk,
            modality,
            fusion,
            scheme,
            pretrain,
        }
    }

    /// Applies the cell to `base`. The split seed stays the base one, so all
    /// cells see the same patients; the training seed depends only on the
    /// base seed and the cell.
    pub fn config(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.model.trunk = self.trunk;
        c.model.modality = self.modality;
        c.model.fusion = self.fusion;
        c.model.scheme = self.scheme;
        c.pretrain = self.pretrain;
        c.split_seed = Some(base.split_seed());
        let key = c.label();
        let h = key.bytes().fold(0u64, |h, b| mix(h ^ u64::from(b)));
        c.seed = derive_seed(base.seed, h);
        c
    }
}

use FusionKind as F;
use Modality as M;
use Scheme as S;
use TrunkKind as T;

const CDE_STRUCT: Cell = Cell::new(T::Cde, M::Structured, F::None, S::HermiteBackward, false);
const CDE_MULTI: Cell = Cell::new(T::Cde, M::Multimodal, F::None, S::HermiteBackward, false);
const LSTM_MULTI: Cell = Cell::new(T::Lstm, M::Multimodal, F::None, S::HermiteBackward, false);
const CDE_SUM: Cell = Cell::new(T::Cde, M::Multimodal, F::Sum, S::HermiteBackward, true);
const CDE_CONCAT: Cell = Cell::new(T::Cde, M::Multimodal, F::Concat, S::HermiteBackward, true);
const LSTM_CONCAT: Cell = Cell::new(T::Lstm, M::Multimodal, F::Concat, S::HermiteBackward, false);
const CDE_RECT: Cell = Cell::new(T::Cde, M::Multimodal, F::Concat, S::Rectilinear, true);

/// Published OSIC RMSEs (train, validation, test), shown for context only.
pub struct Comparison {
    pub title: &'static str,
    pub slug: &'static str,
    pub rows: [(&'static str, Cell, [f64; 3]); 2],
}

pub const COMPARISONS: [Comparison; 6] = [
    Comparison {
        title: "Neural CDE: structured data alone vs multimodal data",
        slug: "structured_vs_multimodal",
        rows: [
            ("Structured Data", CDE_STRUCT, [1.076, 1.054, 1.215]),
            ("Multimodal Data", CDE_MULTI, [0.4147, 0.6559, 0.5405]),
        ],
    },
    Comparison {
        title: "Multimodal LSTM vs multimodal Neural CDE",
        slug: "multimodal_lstm_vs_cde",
        rows: [
            ("LSTM", LSTM_MULTI, [0.5824, 0.8586, 1.396]),
            ("Neural CDE", CDE_MULTI, [0.4147, 0.6559, 0.5405]),
        ],
    },
    Comparison {
        title: "Fusion embedding: sum vs concatenation",
        slug: "sum_vs_concat",
        rows: [
            ("Sum", CDE_SUM, [0.8879, 1.118, 0.902]),
            ("Concatenation", CDE_CONCAT, [0.1360, 0.3465, 0.2912]),
        ],
    },
    Comparison {
        title: "LSTM fusion vs Neural CDE fusion",
        slug: "lstm_vs_cde_fusion",
        rows: [
            ("LSTM Fusion", LSTM_CONCAT, [0.3038, 0.8191, 0.9066]),
            ("Neural CDE Fusion", CDE_CONCAT, [0.1360, 0.3465, 0.2912]),
        ],
    },
    Comparison {
        title: "Cubic Hermite splines vs rectilinear interpolation",
        slug: "hermite_vs_rectilinear",
        rows: [
            ("Cubic Hermite Splines", CDE_CONCAT, [0.1360, 0.3465, 0.2912]),
            ("Rectilinear", CDE_RECT, [0.1278, 0.3371, 0.2570]),
        ],
    },
    Comparison {
        title: "Pretrained Neural CDE vs full fusion model",
        slug: "pretrained_vs_fusion",
        rows: [
            ("Pretrained CDE", CDE_STRUCT, [1.076, 1.054, 1.215]),
            ("Pretrained CDE fusion (rectilinear)", CDE_RECT, [0.1278, 0.3371, 0.2570]),
        ],
    },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// Cell label, also the name of its run directory.
    pub cell: String,
    /// Our RMSE for train, validation and test.
    pub rmse: [Option<f64>; 3],
    pub reported: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub slug: String,
    pub rows: Vec<AblationRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub tables: Vec<AblationTable>,
}

const HEADER: [&str; 7] = [
    "model",
    "train_rmse",
    "val_rmse",
    "test_rmse",
    "reported (OSIC) train_rmse",
    "reported (OSIC) val_rmse",
    "reported (OSIC) test_rmse",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

impl AblationReport {
    /// Plain-text rendering, one block per table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for t in &self.tables {
            writeln!(s, "## {}", t.title).unwrap();
            writeln!(
                s,
                "{:<24} {:>10} {:>10} {:>10} | {:>8} {:>8} {:>8}",
                "", "train", "val", "test", "reported (OSIC) train", "val", "test"
            )
            .unwrap();
            for r in &t.rows {
                writeln!(
                    s,
                    "{:<24} {:>10} {:>10} {:>10} | {:>8} {:>8} {:>8}",
                    r.label,
                    fmt_opt(r.rmse[0]),
                    fmt_opt(r.rmse[1]),
                    fmt_opt(r.rmse[2]),
                    r.reported[0],
                    r.reported[1],
                    r.reported[2]
                )
                .unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// `ablation.csv` with every table plus one `table_<slug>.csv` each.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        let err = |p: &Path| {
            let p = p.to_path_buf();
            move |e: csv::Error| Error::format(&p, 0, e.to_string())
        };
        let all_path = dir.join("ablation.csv");
        let mut all = csv::Writer::from_path(&all_path).map_err(err(&all_path))?;
        let mut header = vec!["table"];
        header.extend(HEADER);
        all.write_record(&header).map_err(err(&all_path))?;
        for t in &self.tables {
            let path = dir.join(format!("table_{}.csv", t.slug));
            let mut one = csv::Writer::from_path(&path).map_err(err(&path))?;
            one.write_record(HEADER).map_err(err(&path))?;
            for r in &t.rows {
                let mut rec: Vec<String> = vec![r.label.clone()];
                rec.extend(r.rmse.iter().map(|v| v.map_or_else(String::new, |v| v.to_string())));
                rec.extend(r.reported.iter().map(|v| v.to_string()));
                one.write_record(&rec).map_err(err(&path))?;
                rec.insert(0, t.slug.to_string());
                all.write_record(&rec).map_err(err(&all_path))?;
            }
            one.flush().map_err(|e| Error::io(&path, e))?;
        }
        all.flush().map_err(|e| Error::io(&all_path, e))
    }
}

/// Distinct cells in table order.
pub fn grid_cells(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let mut cells: Vec<ExperimentConfig> = Vec::new();
    for c in COMPARISONS.iter().flat_map(|c| c.rows.iter().map(|r| r.1.config(base))) {
        if !cells.iter().any(|x| x.label() == c.label()) {
            cells.push(c);
        }
    }
    cells
}

/// Runs every distinct cell (in parallel), writes each cell's run under
/// `out/cells/<label>` as soon as it finishes, then the tables. A failing
/// cell aborts the grid after the other cells have completed; their run
/// directories are kept. `data_dir` is recorded in each run log.
pub fn run_ablation_grid(
    base: &ExperimentConfig,
    cohort: &Cohort,
    out: Option<&Path>,
    data_dir: Option<&Path>,
) -> Result<AblationReport> {
    base.validate()?;
    let cells = grid_cells(base);
    let results: Vec<Result<RunLog>> = cells
        .par_iter()
        .map(|cfg| {
            let label = cfg.label();
            info!("cell {label}: start");
            let mut exp = run_experiment(cfg, cohort)?;
            if let Some(out) = out {
                exp.log.data = data_dir.map(Path::to_path_buf);
                save_run(&exp, &out.join("cells").join(&label))?;
            }
            info!("cell {label}: test rmse {:?}", exp.log.metrics.test.map(|m| m.rmse));
            Ok(exp.log)
        })
        .collect();
    let mut logs = BTreeMap::new();
    for (cfg, r) in cells.iter().zip(results) {
        let log = r.map_err(|e| e.context(format!("ablation cell {}", cfg.label())))?;
        logs.insert(cfg.label(), log);
    }
    let tables = COMPARISONS
        .iter()
        .map(|c| AblationTable {
            title: c.title.to_string(),
            slug: c.slug.to_string(),
            rows: c
                .rows
                .iter()
                .map(|(label, cell, reported)| {
                    let key = cell.config(base).label();
                    AblationRow {
                        label: label.to_string(),
                        rmse: logs[&key].metrics.rmse(),
                        cell: key,
                        reported: *reported,
                    }
                })
                .collect(),
        })
        .collect();
    let report = AblationReport { tables };
    if let Some(out) = out {
        report.write_csv(out)?;
        let p = out.join("ablation.txt");
        fs::write(&p, report.render()).map_err(|e| Error::io(p, e))?;
        let p = out.join("ablation.json");
        fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(p, e))?;
    }
    Ok(report)
}
