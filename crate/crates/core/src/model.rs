//! Complete forecasting models: a trunk (CDE or LSTM) plus the head implied by
//! the modality and fusion settings.

use crate::autodiff::{Bound, Init, ParamStore, Tensor, Var};
use crate::cde::{CdeConfig, CdeTrunk};
use crate::data::{PatientSeries, PATH_CHANNELS};
use crate::encoders::{EncoderConfig, ImageEncoder, StaticEncoder};
use crate::error::{Error, Result};
use crate::fusion::{tag_enum, FusionConfig, FusionHead, FusionMode, NormOrder};
use crate::lstm::Lstm;
use crate::nn::Linear;
use crate::path::{ControlPath, Scheme};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

tag_enum!(TrunkKind { Cde = "cde", Lstm = "lstm" });
tag_enum!(Modality { Structured = "structured", Multimodal = "multimodal" });
tag_enum!(FusionKind { None = "none", Sum = "sum", Concat = "concat" });

/// Architecture description shared by model construction and configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub trunk: TrunkKind,
    pub modality: Modality,
    pub fusion: FusionKind,
    pub scheme: Scheme,
    pub allow_noncausal: bool,
    pub hidden_size: usize,
    pub mlp_width: usize,
    pub substeps_per_interval: usize,
    pub lstm_time_delta: bool,
    /// Predict the change from the current FVC instead of the level.
    pub residual: bool,
    pub heads: usize,
    pub d_emb: usize,
    pub d_img: usize,
    pub d_stat: usize,
    pub norm_order: NormOrder,
    pub time_embedding: bool,
    pub image_size: usize,
    pub feature_dim: Option<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            trunk: TrunkKind::Cde,
            modality: Modality::Structured,
            fusion: FusionKind::None,
            scheme: Scheme::HermiteBackward,
            allow_noncausal: false,
            hidden_size: 16,
            mlp_width: 64,
            substeps_per_interval: 4,
            lstm_time_delta: true,
            residual: true,
            heads: 4,
            d_emb: 16,
            d_img: 16,
            d_stat: 8,
            norm_order: NormOrder::Pre,
            time_embedding: false,
            image_size: 32,
            feature_dim: None,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fusion != FusionKind::None && self.modality != Modality::Multimodal {
            return Err(Error::Config("fusion requires modality = multimodal".into()));
        }
        if self.fusion != FusionKind::None
            && self.trunk == TrunkKind::Cde
            && !self.scheme.is_causal()
            && !self.allow_noncausal
        {
            return Err(Error::Config(format!(
                "scheme {} is not causal; fusion needs hermite_backward or rectilinear (set allow_noncausal = true to override)",
                self.scheme
            )));
        }
        if let Some(f) = self.fusion_config() {
            f.validate()?;
        }
        if self.hidden_size == 0 || self.mlp_width == 0 || self.substeps_per_interval == 0 {
            return Err(Error::Config("sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn fusion_config(&self) -> Option<FusionConfig> {
        let mode = match self.fusion {
            FusionKind::None => return None,
            FusionKind::Sum => FusionMode::Sum,
            FusionKind::Concat => FusionMode::Concat,
        };
        Some(FusionConfig {
            mode,
            heads: self.heads,
            d_emb: self.d_emb,
            d_img: self.d_img,
            d_stat: self.d_stat,
            norm_order: self.norm_order,
            time_embedding: self.time_embedding,
        })
    }

    pub fn cde_config(&self) -> CdeConfig {
        CdeConfig {
            channels: PATH_CHANNELS,
            hidden: self.hidden_size,
            width: self.mlp_width,
            substeps: self.substeps_per_interval,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            d_img: self.d_img,
            d_stat: self.d_stat,
            static_in: 3,
            feature_dim: self.feature_dim,
        }
    }

    /// Row width fed to the recurrent trunk.
    pub fn lstm_input(&self) -> usize {
        PATH_CHANNELS + 1 + usize::from(self.lstm_time_delta)
    }

    /// The structured CDE whose trunk this model's trunk is pretrained as.
    pub fn pretrain_spec(&self) -> ModelSpec {
        ModelSpec {
            trunk: TrunkKind::Cde,
            modality: Modality::Structured,
            fusion: FusionKind::None,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrunkNet {
    Cde(CdeTrunk),
    Lstm(Lstm),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HeadNet {
    /// Scalar readout of the trunk state.
    Readout(Linear),
    /// Readout of `[state ‖ image embedding]`.
    Joint(Linear),
    Fusion(FusionHead),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Model {
    pub trunk: TrunkNet,
    pub head: HeadNet,
    pub image: Option<ImageEncoder>,
    pub statics: Option<StaticEncoder>,
    pub scheme: Scheme,
    pub lstm_time_delta: bool,
    pub residual: bool,
}

/// Which image slice a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceChoice {
    First,
    Index(usize),
}

impl Model {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<(ParamStore, Model)> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let h = spec.hidden_size;
        let trunk = match spec.trunk {
            TrunkKind::Cde => TrunkNet::Cde(CdeTrunk::new(&mut store, &mut init, spec.cde_config())?),
            TrunkKind::Lstm => TrunkNet::Lstm(Lstm::new(&mut store, &mut init, spec.lstm_input(), h, 2)?),
        };
        let enc = spec.encoder_config();
        let multimodal = spec.modality == Modality::Multimodal;
        let head = match (spec.fusion_config(), multimodal) {
            (Some(f), _) => HeadNet::Fusion(FusionHead::new(&mut store, &mut init, h, f)?),
            (None, true) => HeadNet::Joint(Linear::new(&mut store, &mut init, "joint.readout", h + spec.d_img, 1)?),
            (None, false) => {
                let name = match spec.trunk {
                    TrunkKind::Cde => "cde.readout",
                    TrunkKind::Lstm => "lstm.head",
                };
                HeadNet::Readout(Linear::new(&mut store, &mut init, name, h, 1)?)
            }
        };
        let image = multimodal
            .then(|| ImageEncoder::new(&mut store, &mut init, &enc))
            .transpose()?;
        let statics = matches!(head, HeadNet::Fusion(_))
            .then(|| StaticEncoder::new(&mut store, &mut init, &enc))
            .transpose()?;
        Ok((
            store,
            Model {
                trunk,
                head,
                image,
                statics,
                scheme: spec.scheme,
                lstm_time_delta: spec.lstm_time_delta,
                residual: spec.residual,
            },
        ))
    }

    pub fn path(&self, series: &PatientSeries) -> Result<ControlPath> {
        ControlPath::build(&series.observations()?, self.scheme)
    }

    /// Predictions `[T, 1]` for every shifted example of `series`.
    pub fn predict<'t>(&self, p: &Bound<'t>, series: &PatientSeries, slice: SliceChoice) -> Result<Var<'t>> {
        let tape = p.vars()[0].tape();
        let (states, times) = match &self.trunk {
            TrunkNet::Cde(cde) => {
                let path = self.path(series)?;
                let traj = cde.solve(p, &path, path.observation_params())?;
                (traj.stacked()?, series.examples.iter().map(|e| e.week_norm).collect())
            }
            TrunkNet::Lstm(lstm) => {
                let rows = series.lstm_rows(self.lstm_time_delta)?;
                let t = Tensor::new(&[rows.len(), rows[0].len()], rows.concat())?;
                (lstm.forward(p, tape.leaf(t))?, series.examples.iter().map(|e| e.week_norm).collect::<Vec<_>>())
            }
        };
        let out = self.head_forward(p, series, states, &times, slice)?;
        if !self.residual {
            return Ok(out);
        }
        let current: Vec<f64> = series.examples.iter().map(|e| e.fvc).collect();
        out.add(tape.leaf(Tensor::new(&[current.len(), 1], current)?))
    }

    /// Continuous-time predictions at normalized weeks `weeks` (CDE trunks
    /// only). Each week is evaluated on the path as far as it is known.
    pub fn predict_dense<'t>(&self, p: &Bound<'t>, series: &PatientSeries, weeks: &[f64]) -> Result<Var<'t>> {
        let TrunkNet::Cde(cde) = &self.trunk else {
            return Err(Error::Config("dense evaluation needs a CDE trunk".into()));
        };
        let path = self.path(series)?;
        let params: Vec<f64> = weeks.iter().map(|&w| path.param_at_time(w)).collect();
        let traj = cde.solve(p, &path, &params)?;
        let out = self.head_forward(p, series, traj.stacked()?, weeks, SliceChoice::First)?;
        if !self.residual {
            return Ok(out);
        }
        // channel 0 is time, channel 1 the interpolated FVC
        let current: Vec<f64> = params.iter().map(|&s| path.eval_point(s)[1]).collect();
        let tape = p.vars()[0].tape();
        out.add(tape.leaf(Tensor::new(&[current.len(), 1], current)?))
    }

    fn head_forward<'t>(
        &self,
        p: &Bound<'t>,
        series: &PatientSeries,
        states: Var<'t>,
        times: &[f64],
        slice: SliceChoice,
    ) -> Result<Var<'t>> {
        let rows = states.shape()[0];
        let image = || -> Result<Var<'t>> {
            let enc = self.image.as_ref().expect("multimodal model has an image encoder");
            if series.images.is_empty() {
                return Err(Error::Lookup {
                    kind: "image for patient",
                    id: series.id.clone(),
                });
            }
            let k = match slice {
                SliceChoice::First => 0,
                SliceChoice::Index(i) => i % series.images.len(),
            };
            enc.encode(p, &series.images[k])
        };
        match &self.head {
            HeadNet::Readout(l) => l.forward(p, states),
            HeadNet::Joint(l) => l.forward(p, Var::concat_last(&[states, image()?.tile_rows(rows)?])?),
            HeadNet::Fusion(f) => {
                let stat = self.statics.as_ref().expect("fusion model has a static encoder").encode(p, &series.statics)?;
                f.forward(p, states, image()?, stat, times)
            }
        }
    }
}

/// Copies the CDE trunk (`cde.init.*`, `cde.field.*`) from `pretrained` into
/// `store`; the pretrained readout is not carried over. Returns the number of
/// tensors copied.
pub fn transfer_trunk(pretrained: &ParamStore, store: &mut ParamStore) -> Result<usize> {
    let mut copied = 0;
    for (name, t) in pretrained.iter() {
        if !(name.starts_with("cde.init.") || name.starts_with("cde.field.")) {
            continue;
        }
        let id = store.id(name).ok_or_else(|| Error::Lookup {
            kind: "trunk parameter",
            id: name.to_string(),
        })?;
        store.set(id, t.clone())?;
        copied += 1;
    }
    Ok(copied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::data::{generate_synthetic_cohort, preprocess, split_cohort, SyntheticConfig};

    fn series() -> Vec<PatientSeries> {
        let c = generate_synthetic_cohort(10, 1, &SyntheticConfig::default()).unwrap();
        preprocess(&split_cohort(&c, 1).unwrap()).unwrap().train
    }

    fn spec(trunk: TrunkKind, modality: Modality, fusion: FusionKind) -> ModelSpec {
        ModelSpec {
            trunk,
            modality,
            fusion,
            ..Default::default()
        }
    }

    #[test]
    fn every_variant_predicts_one_per_example() {
        let s = &series()[0];
        for trunk in [TrunkKind::Cde, TrunkKind::Lstm] {
            for (m, f) in [
                (Modality::Structured, FusionKind::None),
                (Modality::Multimodal, FusionKind::None),
                (Modality::Multimodal, FusionKind::Sum),
                (Modality::Multimodal, FusionKind::Concat),
            ] {
                let (store, model) = Model::new(&spec(trunk, m, f), 0).unwrap();
                let tape = Tape::new();
                let p = store.bind(&tape);
                let out = model.predict(&p, s, SliceChoice::First).unwrap();
                assert_eq!(out.shape(), vec![s.len(), 1], "{trunk} {m} {f}");
                assert!(out.value().is_finite());
            }
        }
    }

    #[test]
    fn config_invariants() {
        assert!(Model::new(&spec(TrunkKind::Cde, Modality::Structured, FusionKind::Concat), 0).is_err());
        let mut s = spec(TrunkKind::Cde, Modality::Multimodal, FusionKind::Concat);
        s.scheme = Scheme::NaturalCubic;
        assert!(matches!(Model::new(&s, 0), Err(Error::Config(_))));
        s.allow_noncausal = true;
        assert!(Model::new(&s, 0).is_ok());
    }

    #[test]
    fn trunk_swap_only_touches_trunk_names() {
        let names = |t| {
            let (store, _) = Model::new(&spec(t, Modality::Multimodal, FusionKind::Concat), 0).unwrap();
            store.names().to_vec()
        };
        let (cde, lstm) = (names(TrunkKind::Cde), names(TrunkKind::Lstm));
        let non_trunk = |v: &[String]| -> Vec<String> {
            v.iter().filter(|n| !n.starts_with("cde.") && !n.starts_with("lstm.")).cloned().collect()
        };
        assert_eq!(non_trunk(&cde), non_trunk(&lstm));
        assert_ne!(cde, lstm);
    }

    #[test]
    fn transfer_copies_trunk_only() {
        let base = spec(TrunkKind::Cde, Modality::Multimodal, FusionKind::Concat);
        let (pre, _) = Model::new(&base.pretrain_spec(), 7).unwrap();
        let (mut store, _) = Model::new(&base, 8).unwrap();
        let n = transfer_trunk(&pre, &mut store).unwrap();
        assert_eq!(n, 8);
        for (name, t) in store.iter() {
            match pre.by_name(name) {
                Some(src) if !name.starts_with("cde.readout") => assert_eq!(src, t),
                _ => assert!(!name.starts_with("cde.")),
            }
        }
        assert!(store.by_name("cde.readout.w").is_none());
    }

    #[test]
    fn dense_predictions_need_cde() {
        let s = &series()[0];
        let (store, model) = Model::new(&spec(TrunkKind::Lstm, Modality::Structured, FusionKind::None), 0).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        assert!(model.predict_dense(&p, s, &[0.0]).is_err());
        let (store, model) = Model::new(&spec(TrunkKind::Cde, Modality::Structured, FusionKind::None), 0).unwrap();
        let p = store.bind(&tape);
        let w: Vec<f64> = s.examples.iter().map(|e| e.week_norm).collect();
        let dense = model.predict_dense(&p, s, &w).unwrap().to_vec();
        let direct = model.predict(&p, s, SliceChoice::First).unwrap().to_vec();
        for (a, b) in dense.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_adds_the_current_fvc() {
        let s = &series()[0];
        for residual in [false, true] {
            let mut sp = spec(TrunkKind::Lstm, Modality::Structured, FusionKind::None);
            sp.residual = residual;
            let (mut store, model) = Model::new(&sp, 0).unwrap();
            let HeadNet::Readout(l) = &model.head else { unreachable!() };
            store.get_mut(l.weight).data_mut().fill(0.0);
            store.get_mut(l.bias).data_mut().fill(0.25);
            let tape = Tape::new();
            let p = store.bind(&tape);
            let out = model.predict(&p, s, SliceChoice::First).unwrap().to_vec();
            for (y, e) in out.iter().zip(&s.examples) {
                let want = if residual { 0.25 + e.fvc } else { 0.25 };
                assert_eq!(*y, want);
            }
        }
    }
}
