//! Cohorts of irregularly sampled FVC series with static features and image
//! slices: synthetic generation, CSV ingest and preprocessing.

mod io;
mod prep;
mod synth;

pub use io::{load_cohort, load_cohort_csv, write_cohort, MANIFEST_FILE, MEASUREMENTS_FILE};
pub use prep::{
    preprocess, split_cohort, LabelMap, PatientSeries, Prepared, Preprocessor, ShiftedExample, Split, Standardizer,
    PATH_CHANNELS,
};
pub use synth::{generate_synthetic_cohort, SyntheticConfig};

use crate::encoders::ImageRef;

#[derive(Clone, Debug, PartialEq)]
pub struct StaticFeatures {
    pub age: f64,
    pub sex: String,
    pub smoking_status: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    /// Strictly increasing visit weeks.
    pub weeks: Vec<f64>,
    /// FVC in mL, aligned with `weeks`.
    pub fvc: Vec<f64>,
    pub statics: StaticFeatures,
    /// Image slices; empty when the patient has no image.
    pub images: Vec<ImageRef>,
}

impl PatientRecord {
    pub fn visits(&self) -> usize {
        self.weeks.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Cohort {
    pub records: Vec<PatientRecord>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PatientRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Replaces every patient's images with a precomputed feature vector.
    pub fn attach_features(&mut self, features: &std::collections::BTreeMap<String, Vec<f64>>) -> crate::Result<()> {
        for r in &mut self.records {
            let v = features.get(&r.id).ok_or_else(|| crate::Error::Lookup {
                kind: "patient in feature file",
                id: r.id.clone(),
            })?;
            r.images = vec![ImageRef::Precomputed(v.clone())];
        }
        Ok(())
    }
}
