//! Experiment configs, end-to-end runs, run logs and plot data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_checkpoint, save_checkpoint, ParamStore};
use crate::data::{preprocess, split_cohort, Cohort, PatientSeries, Prepared};
use crate::encoders::load_precomputed_features;
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, Metrics};
use crate::model::{FusionKind, Model, ModelSpec, TrunkKind};
use crate::rng::derive_seed;
use crate::train::{predict_all, train, EpochLoss, TrainConfig};

pub const RUN_LOG_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    /// Pretrain the CDE trunk as a structured forecaster before fusion.
    pub pretrain: bool,
    pub seed: u64,
    /// Seed of the patient split; defaults to `seed`.
    pub split_seed: Option<u64>,
    /// Epochs for models without a fusion block.
    pub epochs: usize,
    pub pretrain_epochs: usize,
    /// Epochs for models with a fusion block.
    pub fusion_epochs: usize,
    pub lr: f64,
    pub batch_patients: usize,
    pub clip_norm: f64,
    /// Keep the parameters of the best validation epoch.
    pub select_best_val: bool,
    /// CSV of precomputed image feature vectors replacing inline images.
    pub features: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            model: ModelSpec::default(),
            pretrain: false,
            seed: 0,
            split_seed: None,
            epochs: 300,
            pretrain_epochs: 200,
            fusion_epochs: 200,
            lr: t.lr,
            batch_patients: t.batch_patients,
            clip_norm: t.clip_norm,
            select_best_val: false,
            features: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl ExperimentConfig {
    /// Sets one `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "trunk" => m.trunk = value.parse()?,
            "modality" => m.modality = value.parse()?,
            "fusion" => m.fusion = value.parse()?,
            "scheme" => m.scheme = value.parse()?,
            "allow_noncausal" => m.allow_noncausal = parse_value(key, value)?,
            "hidden_size" => m.hidden_size = parse_value(key, value)?,
            "mlp_width" => m.mlp_width = parse_value(key, value)?,
            "substeps_per_interval" => m.substeps_per_interval = parse_value(key, value)?,
            "lstm_time_delta" => m.lstm_time_delta = parse_value(key, value)?,
            "residual" => m.residual = parse_value(key, value)?,
            "heads" => m.heads = parse_value(key, value)?,
            "d_emb" => m.d_emb = parse_value(key, value)?,
            "d_img" => m.d_img = parse_value(key, value)?,
            "d_stat" => m.d_stat = parse_value(key, value)?,
            "norm_order" => m.norm_order = value.parse()?,
            "time_embedding" => m.time_embedding = parse_value(key, value)?,
            "image_size" => m.image_size = parse_value(key, value)?,
            "feature_dim" => m.feature_dim = Some(parse_value(key, value)?),
            "pretrain" => self.pretrain = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "split_seed" => self.split_seed = Some(parse_value(key, value)?),
            "epochs" => self.epochs = parse_value(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_value(key, value)?,
            "fusion_epochs" => self.fusion_epochs = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "batch_patients" => self.batch_patients = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            "select_best_val" => self.select_best_val = parse_value(key, value)?,
            "features" => self.features = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` text; `#` starts a comment. Unset keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| e.context(format!("config line {}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(path.display().to_string()))
    }

    /// Every key in a fixed order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| writeln!(s, "{k} = {v}").unwrap();
        kv("trunk", &m.trunk);
        kv("modality", &m.modality);
        kv("fusion", &m.fusion);
        kv("scheme", &m.scheme);
        kv("allow_noncausal", &m.allow_noncausal);
        kv("pretrain", &self.pretrain);
        kv("seed", &self.seed);
        if let Some(v) = self.split_seed {
            kv("split_seed", &v);
        }
        kv("epochs", &self.epochs);
        kv("pretrain_epochs", &self.pretrain_epochs);
        kv("fusion_epochs", &self.fusion_epochs);
        kv("lr", &self.lr);
        kv("batch_patients", &self.batch_patients);
        kv("clip_norm", &self.clip_norm);
        kv("select_best_val", &self.select_best_val);
        kv("hidden_size", &m.hidden_size);
        kv("mlp_width", &m.mlp_width);
        kv("substeps_per_interval", &m.substeps_per_interval);
        kv("lstm_time_delta", &m.lstm_time_delta);
        kv("residual", &m.residual);
        kv("heads", &m.heads);
        kv("d_emb", &m.d_emb);
        kv("d_img", &m.d_img);
        kv("d_stat", &m.d_stat);
        kv("norm_order", &m.norm_order);
        kv("time_embedding", &m.time_embedding);
        kv("image_size", &m.image_size);
        if let Some(v) = m.feature_dim {
            kv("feature_dim", &v);
        }
        if let Some(p) = &self.features {
            kv("features", &p.display());
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.pretrain && (self.model.trunk != TrunkKind::Cde || self.model.fusion == FusionKind::None) {
            return Err(Error::Config("pretrain needs trunk = cde with a fusion block".into()));
        }
        if !(self.lr >= 0.0) || !(self.clip_norm > 0.0) || self.batch_patients == 0 {
            return Err(Error::Config("lr must be >= 0, clip_norm > 0, batch_patients > 0".into()));
        }
        Ok(())
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.seed)
    }

    /// Epoch budget of the main training stage.
    pub fn main_epochs(&self) -> usize {
        match self.model.fusion {
            FusionKind::None => self.epochs,
            _ => self.fusion_epochs,
        }
    }

    /// Short human-readable identity of the architecture.
    pub fn label(&self) -> String {
        let m = &self.model;
        let mut s = format!("{}-{}", m.trunk, m.modality);
        if m.fusion != FusionKind::None {
            write!(s, "-{}", m.fusion).unwrap();
        }
        if m.trunk == TrunkKind::Cde {
            write!(s, "-{}", m.scheme).unwrap();
        }
        if self.pretrain {
            s.push_str("-pretrained");
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub train: Option<Metrics>,
    pub val: Option<Metrics>,
    pub test: Option<Metrics>,
}

impl MetricsReport {
    pub fn evaluate(model: &Model, store: &ParamStore, data: &Prepared) -> Result<Self> {
        let split = |s: &[PatientSeries]| -> Result<Option<Metrics>> {
            let preds: Vec<f64> = predict_all(model, store, s)?.concat();
            if preds.is_empty() {
                return Ok(None);
            }
            let targets: Vec<f64> = s.iter().flat_map(|p| p.targets()).collect();
            compute_metrics(&preds, &targets).map(Some)
        };
        Ok(Self {
            train: split(&data.train)?,
            val: split(&data.val)?,
            test: split(&data.test)?,
        })
    }

    pub fn rmse(&self) -> [Option<f64>; 3] {
        [self.train, self.val, self.test].map(|m| m.map(|m| m.rmse))
    }
}

/// Record of one run, serialized once when the run completes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub version: String,
    pub config: ExperimentConfig,
    /// Directory of the cohort the run was trained on, when known.
    pub data: Option<PathBuf>,
    pub pretrain_losses: Vec<EpochLoss>,
    pub losses: Vec<EpochLoss>,
    pub metrics: MetricsReport,
    pub wall_time_secs: f64,
}

impl RunLog {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// A finished run with everything needed to evaluate or plot it.
pub struct Experiment {
    pub log: RunLog,
    pub model: Model,
    pub store: ParamStore,
    pub data: Prepared,
}

/// Applies the config's precomputed image features, if any, and fills in
/// `feature_dim` from them.
pub fn prepare_cohort(cfg: &mut ExperimentConfig, cohort: &Cohort) -> Result<Cohort> {
    let mut cohort = cohort.clone();
    if let Some(path) = &cfg.features {
        let features = load_precomputed_features(path)?;
        cohort.attach_features(&features)?;
        let dim = features.values().next().map_or(0, Vec::len);
        match cfg.model.feature_dim {
            Some(d) if d != dim => {
                return Err(Error::Config(format!("feature_dim = {d} but {} has {dim} columns", path.display())))
            }
            _ => cfg.model.feature_dim = Some(dim),
        }
    }
    Ok(cohort)
}

/// Splits, preprocesses, optionally pretrains, trains and evaluates.
pub fn run_experiment(config: &ExperimentConfig, cohort: &Cohort) -> Result<Experiment> {
    run_experiment_inner(config, cohort).map_err(|e| e.context(format!("run {}", config.label())))
}

fn run_experiment_inner(config: &ExperimentConfig, cohort: &Cohort) -> Result<Experiment> {
    let start = Instant::now();
    let mut cfg = config.clone();
    cfg.validate()?;
    let cohort = prepare_cohort(&mut cfg, cohort)?;
    let data = preprocess(&split_cohort(&cohort, cfg.split_seed())?)?;
    let train_cfg = |epochs, stream| TrainConfig {
        epochs,
        lr: cfg.lr,
        batch_patients: cfg.batch_patients,
        clip_norm: cfg.clip_norm,
        seed: derive_seed(cfg.seed, stream),
        select_best_val: cfg.select_best_val,
    };
    let (mut store, model) = Model::new(&cfg.model, derive_seed(cfg.seed, 1))?;
    let mut pretrain_losses = Vec::new();
    if cfg.pretrain {
        let (mut pre_store, pre_model) = Model::new(&cfg.model.pretrain_spec(), derive_seed(cfg.seed, 2))?;
        pretrain_losses = train(&pre_model, &mut pre_store, &data.train, &data.val, &train_cfg(cfg.pretrain_epochs, 3), |e| {
            info!("pretrain epoch {}: train {:.5}", e.epoch, e.train)
        })
        .map_err(|e| e.context("pretraining"))?;
        crate::model::transfer_trunk(&pre_store, &mut store)?;
    }
    let losses = train(&model, &mut store, &data.train, &data.val, &train_cfg(cfg.main_epochs(), 4), |e| {
        info!("epoch {}: train {:.5} val {:?}", e.epoch, e.train, e.val)
    })?;
    let metrics = MetricsReport::evaluate(&model, &store, &data)?;
    let log = RunLog {
        version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
        config: cfg,
        data: None,
        pretrain_losses,
        losses,
        metrics,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok(Experiment { log, model, store, data })
}

/// Writes `run.json`, `config.txt` and the parameter checkpoint into `dir`.
pub fn save_run(exp: &Experiment, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write(RUN_LOG_FILE, exp.log.to_json()?)?;
    write(CONFIG_FILE, exp.log.config.to_text())?;
    save_checkpoint(&exp.store, &dir.join(CHECKPOINT_FILE))
}

/// Reads a run directory back and rebuilds its model. The cohort is
/// reloaded from `data` (or the path recorded in the log).
pub fn load_run(dir: &Path, data: Option<&Path>) -> Result<Experiment> {
    let p = dir.join(RUN_LOG_FILE);
    let log = RunLog::from_json(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
    let loaded = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    let (fresh, model) = Model::new(&log.config.model, 0)?;
    if fresh.names() != loaded.names()
        || fresh.tensors().iter().zip(loaded.tensors()).any(|(a, b)| a.shape() != b.shape())
    {
        return Err(Error::Contract(format!("checkpoint in {} does not match its config", dir.display())));
    }
    let data_dir = data
        .map(Path::to_path_buf)
        .or_else(|| log.data.clone())
        .ok_or_else(|| Error::Config("run log records no data directory; pass one explicitly".into()))?;
    let mut cfg = log.config.clone();
    let cohort = prepare_cohort(&mut cfg, &crate::data::load_cohort(&data_dir)?)?;
    let data = preprocess(&split_cohort(&cohort, cfg.split_seed())?)?;
    Ok(Experiment {
        log,
        model,
        store: loaded,
        data,
    })
}

/// One row of `actual_vs_pred.csv`, in mL.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub patient_id: String,
    pub week: f64,
    pub actual: f64,
    pub predicted: f64,
    pub split: &'static str,
}

/// Rows for every shifted example, given normalized predictions per patient.
pub fn prediction_rows(data: &Prepared, split: &'static str, preds: &[Vec<f64>]) -> Result<Vec<PredictionRow>> {
    let series = data.split(split).ok_or_else(|| Error::Lookup {
        kind: "split",
        id: split.to_string(),
    })?;
    let fvc = &data.pre.fvc;
    let mut rows = Vec::new();
    for (s, p) in series.iter().zip(preds) {
        for (e, &y) in s.examples.iter().zip(p) {
            rows.push(PredictionRow {
                patient_id: s.id.clone(),
                week: e.next_week,
                actual: fvc.invert(e.target),
                predicted: fvc.invert(y),
                split,
            });
        }
    }
    Ok(rows)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::format(path, 0, e.to_string())
}

pub fn write_prediction_rows(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["patient_id", "week", "actual", "predicted", "split"])
        .map_err(csv_err(path))?;
    for r in rows {
        w.write_record([&r.patient_id, &r.week.to_string(), &r.actual.to_string(), &r.predicted.to_string(), r.split])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `actual_vs_pred.csv` for all splits and, for each requested patient,
/// `trajectory_<id>.csv`. Returns the files written.
pub fn emit_plot_data(exp: &Experiment, patients: &[&str], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows = Vec::new();
    for split in ["train", "val", "test"] {
        let preds = predict_all(&exp.model, &exp.store, exp.data.split(split).unwrap_or(&[]))?;
        rows.extend(prediction_rows(&exp.data, split, &preds)?);
    }
    let avp = out.join("actual_vs_pred.csv");
    write_prediction_rows(&avp, &rows)?;
    let mut written = vec![avp];
    for id in patients {
        let path = out.join(format!("trajectory_{id}.csv"));
        write_trajectory(exp, id, &path)?;
        written.push(path);
    }
    Ok(written)
}

fn find_series<'a>(data: &'a Prepared, id: &str) -> Result<&'a PatientSeries> {
    [&data.train, &data.val, &data.test]
        .into_iter()
        .flatten()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::Lookup {
            kind: "patient",
            id: id.to_string(),
        })
}

/// Observed visits plus predictions read from the model state. A CDE trunk
/// is read at every whole week between the first and last input visit; an
/// LSTM only at the visits themselves.
fn write_trajectory(exp: &Experiment, id: &str, path: &Path) -> Result<()> {
    use crate::autodiff::Tape;
    use crate::model::{SliceChoice, TrunkNet};

    let s = find_series(&exp.data, id)?;
    let fvc = &exp.data.pre.fvc;
    let tape = Tape::new();
    let p = exp.store.bind(&tape);
    let (weeks, preds) = match exp.model.trunk {
        TrunkNet::Cde(_) => {
            let (first, last) = (s.examples[0].week, s.examples[s.len() - 1].week);
            let weeks: Vec<f64> = (0..=(last - first).floor() as usize).map(|k| first + k as f64).collect();
            let norm: Vec<f64> = weeks.iter().map(|&w| s.week_to_norm(w)).collect();
            (weeks, exp.model.predict_dense(&p, s, &norm)?.to_vec())
        }
        TrunkNet::Lstm(_) => (
            s.examples.iter().map(|e| e.week).collect(),
            exp.model.predict(&p, s, SliceChoice::First)?.to_vec(),
        ),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["kind", "week", "fvc"]).map_err(csv_err(path))?;
    for (wk, f) in s.weeks.iter().zip(&s.fvc_raw) {
        w.write_record(["observed", &wk.to_string(), &f.to_string()])
            .map_err(csv_err(path))?;
    }
    for (wk, y) in weeks.iter().zip(&preds) {
        w.write_record(["predicted", &wk.to_string(), &fvc.invert(*y).to_string()])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
