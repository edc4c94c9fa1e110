//! Per-patient gradient training with Adam and global-norm clipping.

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_global_norm, Adam, AdamConfig, ParamStore, Tape, Tensor};
use crate::data::PatientSeries;
use crate::error::{Error, Result};
use crate::model::{Model, SliceChoice};
use crate::rng::{derive_seed, rng_for};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Patients whose gradients are averaged into one optimizer step.
    pub batch_patients: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Restore the parameters of the epoch with the lowest validation loss
    /// once training ends.
    pub select_best_val: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 1e-3,
            batch_patients: 1,
            clip_norm: 1.0,
            seed: 0,
            select_best_val: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Example-weighted MSE over the epoch's training steps.
    pub train: f64,
    /// MSE on the validation patients after the epoch; `None` without any.
    pub val: Option<f64>,
}

/// MSE of one patient's predictions plus the parameter gradients of the sum
/// of squared errors.
fn patient_grads(model: &Model, store: &ParamStore, s: &PatientSeries, slice: SliceChoice) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let p = store.bind(&tape);
    let pred = model.predict(&p, s, slice)?;
    let target = tape.leaf(Tensor::new(&[s.len(), 1], s.targets())?);
    let sse = pred.sub(target)?.map(|d| d * d, |d| 2.0 * d).sum();
    let value = sse.item();
    let grads = tape.backward(sse)?;
    Ok((value, p.grads(&grads)))
}

/// Predictions for every example of every patient, first image slice.
pub fn predict_all(model: &Model, store: &ParamStore, series: &[PatientSeries]) -> Result<Vec<Vec<f64>>> {
    series
        .iter()
        .map(|s| {
            let tape = Tape::new();
            let p = store.bind(&tape);
            Ok(model.predict(&p, s, SliceChoice::First)?.to_vec())
        })
        .collect()
}

/// Example-weighted MSE over `series`; `None` when there are no examples.
pub fn evaluate_loss(model: &Model, store: &ParamStore, series: &[PatientSeries]) -> Result<Option<f64>> {
    let preds = predict_all(model, store, series)?;
    let (mut sse, mut n) = (0.0, 0usize);
    for (p, s) in preds.iter().zip(series) {
        for (a, b) in p.iter().zip(s.targets()) {
            sse += (a - b).powi(2);
            n += 1;
        }
    }
    Ok((n > 0).then(|| sse / n as f64))
}

/// Trains `store` in place. Each epoch visits the training patients in a
/// seeded random order; a step averages squared error over the examples of
/// `batch_patients` patients. Image slices are drawn per (epoch, patient).
/// `on_epoch` sees each epoch's losses as they are produced. The returned
/// history always covers every epoch, also under `select_best_val`.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    train: &[PatientSeries],
    val: &[PatientSeries],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<Vec<EpochLoss>> {
    if cfg.batch_patients == 0 || !(cfg.lr >= 0.0) || !(cfg.clip_norm > 0.0) {
        return Err(Error::Config(format!("invalid training settings: {cfg:?}")));
    }
    let mut adam = Adam::new(
        store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    for epoch in 1..=cfg.epochs {
        let mut rng = rng_for(derive_seed(cfg.seed, 0x7472_6169_6e), epoch as u64);
        order.shuffle(&mut rng);
        let (mut epoch_sse, mut epoch_n) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_patients) {
            let mut total: Option<Vec<Tensor>> = None;
            let mut n = 0usize;
            for &i in batch {
                let slice = SliceChoice::Index(rng.random_range(0..usize::MAX));
                let (sse, g) = patient_grads(model, store, &train[i], slice)?;
                if !sse.is_finite() {
                    return Err(Error::TrainingDiverged { epoch });
                }
                epoch_sse += sse;
                n += train[i].len();
                total = Some(match total {
                    None => g,
                    Some(mut acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                        }
                        acc
                    }
                });
            }
            epoch_n += n;
            let Some(mut grads) = total else { continue };
            if n == 0 {
                continue;
            }
            let scale = 1.0 / n as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.step(store, &grads)?;
        }
        if store.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
        let record = EpochLoss {
            epoch,
            train: if epoch_n > 0 { epoch_sse / epoch_n as f64 } else { 0.0 },
            val: evaluate_loss(model, store, val)?,
        };
        debug!("epoch {epoch}: train {:.6} val {:?}", record.train, record.val);
        if let Some(v) = record.val.filter(|_| cfg.select_best_val) {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, store.tensors().to_vec()));
            }
        }
        on_epoch(&record);
        history.push(record);
    }
    if let Some((_, tensors)) = best {
        store.tensors_mut().clone_from_slice(&tensors);
    }
    Ok(history)
}

/// First epoch (1-based) whose validation loss is at or below `target`.
pub fn epochs_to_reach(history: &[EpochLoss], target: f64) -> Option<usize> {
    history.iter().find(|e| e.val.is_some_and(|v| v <= target)).map(|e| e.epoch)
}
