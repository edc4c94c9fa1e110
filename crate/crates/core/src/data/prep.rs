use log::warn;
use rand::seq::SliceRandom;

use super::{Cohort, PatientRecord};
use crate::encoders::ImageRef;
use crate::error::{Error, Result};
use crate::path::ObservationSequence;
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Cohort,
    pub val: Cohort,
    pub test: Cohort,
}

/// Patient-level shuffle, then `max(1, floor(0.2 n))` validation and
/// `max(1, floor(0.1 n))` test patients; the rest train.
pub fn split_cohort(cohort: &Cohort, seed: u64) -> Result<Split> {
    let n = cohort.len();
    if n < 4 {
        return Err(Error::Config(format!("need at least 4 patients to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, u64::MAX));
    let n_val = (n / 5).max(1);
    let n_test = (n / 10).max(1);
    let pick = |idx: &[usize]| Cohort {
        records: idx.iter().map(|&i| cohort.records[i].clone()).collect(),
    };
    let (val, rest) = order.split_at(n_val);
    let (test, train) = rest.split_at(n_test);
    Ok(Split {
        train: pick(train),
        val: pick(val),
        test: pick(test),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    /// Population mean and standard deviation; zero variance is an error.
    pub fn fit(feature: &str, values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Err(Error::Config(format!("no training values for `{feature}`")));
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        if !(std > 0.0) {
            return Err(Error::Config(format!("feature `{feature}` has zero variance in the training split")));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Sorted training categories; anything unseen maps to the reserved code
/// `categories.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub categories: Vec<String>,
}

impl LabelMap {
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a str>) -> Self {
        let mut categories: Vec<String> = values.into_iter().map(str::to_string).collect();
        categories.sort();
        categories.dedup();
        Self { categories }
    }

    pub fn code(&self, value: &str) -> usize {
        self.categories
            .binary_search_by(|c| c.as_str().cmp(value))
            .unwrap_or(self.categories.len())
    }

    pub fn reserved(&self) -> usize {
        self.categories.len()
    }
}

/// Training-split statistics and label maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessor {
    pub fvc: Standardizer,
    pub week: Standardizer,
    pub age: Standardizer,
    pub sex: LabelMap,
    pub smoking: LabelMap,
}

impl Preprocessor {
    pub fn fit(train: &Cohort) -> Result<Self> {
        let usable: Vec<&PatientRecord> = train.records.iter().filter(|r| r.visits() >= 2).collect();
        Ok(Self {
            fvc: Standardizer::fit("fvc", usable.iter().flat_map(|r| r.fvc.iter().copied()))?,
            week: Standardizer::fit("week", usable.iter().flat_map(|r| r.weeks.iter().copied()))?,
            age: Standardizer::fit("age", usable.iter().map(|r| r.statics.age))?,
            sex: LabelMap::fit(usable.iter().map(|r| r.statics.sex.as_str())),
            smoking: LabelMap::fit(usable.iter().map(|r| r.statics.smoking_status.as_str())),
        })
    }

    /// Normalized series for one patient, or `None` with fewer than two visits.
    pub fn series(&self, r: &PatientRecord) -> Option<PatientSeries> {
        if r.visits() < 2 {
            warn!("patient {} has {} visit(s); no shifted target, skipped", r.id, r.visits());
            return None;
        }
        let fvc: Vec<f64> = r.fvc.iter().map(|&v| self.fvc.apply(v)).collect();
        let week_norm: Vec<f64> = r.weeks.iter().map(|&w| self.week.apply(w)).collect();
        let statics = vec![
            self.age.apply(r.statics.age),
            self.sex.code(&r.statics.sex) as f64,
            self.smoking.code(&r.statics.smoking_status) as f64,
        ];
        let examples = (0..r.visits() - 1)
            .map(|i| ShiftedExample {
                week: r.weeks[i],
                next_week: r.weeks[i + 1],
                week_norm: week_norm[i],
                next_week_norm: week_norm[i + 1],
                fvc: fvc[i],
                target: fvc[i + 1],
            })
            .collect();
        Some(PatientSeries {
            id: r.id.clone(),
            weeks: r.weeks.clone(),
            fvc_raw: r.fvc.clone(),
            statics,
            images: r.images.clone(),
            examples,
            week_scale: self.week.std,
        })
    }

    pub fn apply(&self, cohort: &Cohort) -> Vec<PatientSeries> {
        cohort.records.iter().filter_map(|r| self.series(r)).collect()
    }
}

/// Inputs at visit `i` and the normalized FVC of visit `i + 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftedExample {
    pub week: f64,
    pub next_week: f64,
    pub week_norm: f64,
    pub next_week_norm: f64,
    pub fvc: f64,
    pub target: f64,
}

/// Channels of the control path built from a series, after the time channel.
pub const PATH_CHANNELS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct PatientSeries {
    pub id: String,
    pub weeks: Vec<f64>,
    pub fvc_raw: Vec<f64>,
    /// `[age_norm, sex_code, smoking_code]`.
    pub statics: Vec<f64>,
    pub images: Vec<ImageRef>,
    pub examples: Vec<ShiftedExample>,
    week_scale: f64,
}

impl PatientSeries {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.examples.iter().map(|e| e.target).collect()
    }

    fn row(&self, e: &ShiftedExample) -> Vec<f64> {
        let mut v = vec![e.fvc, e.next_week_norm];
        v.extend(&self.statics);
        v
    }

    /// Input rows over normalized week: `[fvc, next_week, age, sex, smoking]`.
    pub fn observations(&self) -> Result<ObservationSequence> {
        self.observations_upto(self.len())
    }

    /// As [`observations`](Self::observations), over the first `n` examples.
    pub fn observations_upto(&self, n: usize) -> Result<ObservationSequence> {
        let ex = &self.examples[..n];
        ObservationSequence::fully_observed(
            ex.iter().map(|e| e.week_norm).collect(),
            ex.iter().map(|e| self.row(e)).collect(),
        )
    }

    /// Rows for the recurrent trunk: `[week, fvc, next_week, age, sex,
    /// smoking, delta]`, with the time delta in normalized week units.
    pub fn lstm_rows(&self, with_delta: bool) -> Result<Vec<Vec<f64>>> {
        let obs = self.observations()?;
        let (filled, deltas) = crate::path::forward_fill(&obs)?;
        Ok(filled
            .into_iter()
            .zip(deltas)
            .zip(&self.examples)
            .map(|((row, d), e)| {
                let mut v = vec![e.week_norm];
                v.extend(row);
                if with_delta {
                    v.push(d);
                }
                v
            })
            .collect())
    }

    /// Normalized week for a raw week value.
    pub fn week_to_norm(&self, week: f64) -> f64 {
        let e = &self.examples[0];
        e.week_norm + (week - e.week) / self.week_scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub pre: Preprocessor,
    pub train: Vec<PatientSeries>,
    pub val: Vec<PatientSeries>,
    pub test: Vec<PatientSeries>,
}

impl Prepared {
    pub fn split(&self, name: &str) -> Option<&[PatientSeries]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Fits statistics on `split.train` only and applies them to all three splits.
pub fn preprocess(split: &Split) -> Result<Prepared> {
    let pre = Preprocessor::fit(&split.train)?;
    Ok(Prepared {
        train: pre.apply(&split.train),
        val: pre.apply(&split.val),
        test: pre.apply(&split.test),
        pre,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_cohort, StaticFeatures, SyntheticConfig};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn ids(c: &Cohort) -> Vec<String> {
        c.records.iter().map(|r| r.id.clone()).collect()
    }

    fn record(id: &str, weeks: Vec<f64>, fvc: Vec<f64>, age: f64) -> PatientRecord {
        PatientRecord {
            id: id.into(),
            weeks,
            fvc,
            statics: StaticFeatures {
                age,
                sex: "Male".into(),
                smoking_status: "Ex-smoker".into(),
            },
            images: Vec::new(),
        }
    }

    #[test]
    fn ten_patients_split_seven_two_one() {
        let c = generate_synthetic_cohort(10, 0, &SyntheticConfig::default()).unwrap();
        let s = split_cohort(&c, 4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 2, 1));
    }

    #[test]
    fn split_seed_behaviour() {
        let c = generate_synthetic_cohort(20, 0, &SyntheticConfig::default()).unwrap();
        assert_eq!(split_cohort(&c, 1).unwrap(), split_cohort(&c, 1).unwrap());
        assert_ne!(ids(&split_cohort(&c, 1).unwrap().train), ids(&split_cohort(&c, 2).unwrap().train));
    }

    proptest! {
        #[test]
        fn split_is_partition(n in 4usize..60, seed in any::<u64>()) {
            let c = Cohort {
                records: (0..n).map(|i| record(&format!("p{i}"), vec![0.0, 1.0], vec![1.0, 2.0], 50.0)).collect(),
            };
            let s = split_cohort(&c, seed).unwrap();
            prop_assert_eq!(s.val.len(), (n / 5).max(1));
            prop_assert_eq!(s.test.len(), (n / 10).max(1));
            prop_assert!(!s.train.is_empty());
            let mut all: Vec<String> = [ids(&s.train), ids(&s.val), ids(&s.test)].concat();
            let unique: HashSet<_> = all.iter().cloned().collect();
            prop_assert_eq!(unique.len(), n);
            all.sort();
            let mut expect = ids(&c);
            expect.sort();
            prop_assert_eq!(all, expect);
        }
    }

    #[test]
    fn shifted_examples() {
        let train = Cohort {
            records: vec![
                record("a", vec![0.0, 3.0, 7.0], vec![10.0, 20.0, 30.0], 60.0),
                record("b", vec![1.0, 2.0], vec![5.0, 6.0], 70.0),
            ],
        };
        let pre = Preprocessor::fit(&train).unwrap();
        let s = pre.series(&train.records[0]).unwrap();
        assert_eq!(s.len(), 2);
        let (e0, e1) = (s.examples[0], s.examples[1]);
        assert_eq!((e0.week, e0.next_week, e0.target), (0.0, 3.0, pre.fvc.apply(20.0)));
        assert_eq!((e1.week, e1.next_week, e1.target), (3.0, 7.0, pre.fvc.apply(30.0)));
        assert_eq!(s.lstm_rows(true).unwrap()[1].last().copied(), Some(pre.week.apply(3.0) - pre.week.apply(0.0)));
        assert!((s.week_to_norm(7.0) - pre.week.apply(7.0)).abs() < 1e-12);
    }

    #[test]
    fn training_fvc_is_standardized() {
        let c = generate_synthetic_cohort(30, 2, &SyntheticConfig::default()).unwrap();
        let p = preprocess(&split_cohort(&c, 2).unwrap()).unwrap();
        let vals: Vec<f64> = p
            .train
            .iter()
            .flat_map(|s| s.fvc_raw.iter().map(|&v| p.pre.fvc.apply(v)))
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-10);
        assert!((sd - 1.0).abs() < 1e-10);
        let val_mean = p.val.iter().flat_map(|s| s.fvc_raw.iter().map(|&v| p.pre.fvc.apply(v))).sum::<f64>();
        assert!(val_mean.abs() > 0.0);
    }

    #[test]
    fn stats_come_from_train_only() {
        let c = generate_synthetic_cohort(30, 3, &SyntheticConfig::default()).unwrap();
        let s = split_cohort(&c, 3).unwrap();
        let p = preprocess(&s).unwrap();
        let mut union = s.train.clone();
        union.records.extend(s.val.records.iter().cloned());
        let leaky = Preprocessor::fit(&union).unwrap();
        assert_ne!(leaky.fvc, p.pre.fvc);
        assert_ne!(leaky.age, p.pre.age);
        assert_eq!(p.pre, Preprocessor::fit(&s.train).unwrap());
    }

    #[test]
    fn zero_variance_names_feature() {
        let train = Cohort {
            records: vec![
                record("a", vec![0.0, 3.0], vec![10.0, 20.0], 60.0),
                record("b", vec![1.0, 2.0], vec![5.0, 6.0], 60.0),
            ],
        };
        let err = Preprocessor::fit(&train).unwrap_err();
        assert!(err.to_string().contains("age"), "{err}");
    }

    #[test]
    fn unseen_category_gets_reserved_code() {
        let m = LabelMap::fit(["b", "a", "b"]);
        assert_eq!((m.code("a"), m.code("b"), m.code("zzz")), (0, 1, 2));
        assert_eq!(m.reserved(), 2);
    }

    #[test]
    fn next_week_exceeds_week() {
        let c = generate_synthetic_cohort(20, 4, &SyntheticConfig::default()).unwrap();
        let p = preprocess(&split_cohort(&c, 4).unwrap()).unwrap();
        for s in p.train.iter().chain(&p.val).chain(&p.test) {
            assert!(s.examples.iter().all(|e| e.next_week > e.week && e.next_week_norm > e.week_norm));
        }
    }
}
