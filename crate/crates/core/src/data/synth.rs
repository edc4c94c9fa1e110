use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Cohort, PatientRecord, StaticFeatures};
use crate::encoders::{GrayImage, ImageRef};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Parameters of the synthetic decline model
/// `fvc(t) = baseline * exp(-r t) * (1 + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// Median weekly decline rate for never-smokers.
    pub decline_median: f64,
    /// Standard deviation of `ln r`.
    pub decline_log_sd: f64,
    pub ex_smoker_factor: f64,
    pub smoker_factor: f64,
    pub baseline_mean: f64,
    pub baseline_sd: f64,
    pub noise_sd: f64,
    pub min_visits: usize,
    pub max_visits: usize,
    pub min_gap: u32,
    pub max_gap: u32,
    pub image_size: usize,
    pub slices: usize,
    /// Per-pixel noise of the image surrogate.
    pub image_noise: f64,
    /// Image brightness change per standard deviation of `ln r`.
    pub image_contrast: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            decline_median: 0.006,
            decline_log_sd: 0.5,
            ex_smoker_factor: 1.2,
            smoker_factor: 1.5,
            baseline_mean: 3000.0,
            baseline_sd: 400.0,
            noise_sd: 0.01,
            min_visits: 5,
            max_visits: 12,
            min_gap: 3,
            max_gap: 12,
            image_size: 32,
            slices: 3,
            image_noise: 0.05,
            image_contrast: 0.15,
        }
    }
}

pub const SEXES: [&str; 2] = ["Male", "Female"];
pub const SMOKING: [&str; 3] = ["Never smoked", "Ex-smoker", "Currently smokes"];

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.decline_median > 0.0
            && self.decline_log_sd >= 0.0
            && self.baseline_sd >= 0.0
            && self.noise_sd >= 0.0
            && self.min_visits >= 2
            && self.min_visits <= self.max_visits
            && self.min_gap >= 1
            && self.min_gap <= self.max_gap
            && self.image_size >= 4
            && self.slices >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid synthetic cohort parameters: {self:?}")))
        }
    }
}

/// Generates `n` patients; patient `i` draws from its own stream derived from
/// `(seed, i)`, so output does not depend on generation order.
pub fn generate_synthetic_cohort(n: usize, seed: u64, cfg: &SyntheticConfig) -> Result<Cohort> {
    if n < 4 {
        return Err(Error::Config(format!("need at least 4 patients to fill three splits, got {n}")));
    }
    cfg.validate()?;
    let records = (0..n).map(|i| patient(i, seed, cfg)).collect::<Result<_>>()?;
    Ok(Cohort { records })
}

fn patient(index: usize, seed: u64, cfg: &SyntheticConfig) -> Result<PatientRecord> {
    let mut rng = rng_for(seed, index as u64);
    let std_normal: Normal<f64> = Normal::new(0.0, 1.0).unwrap();
    let sex = if rng.random_bool(0.75) { SEXES[0] } else { SEXES[1] };
    let smoking = match rng.random_range(0.0..1.0) {
        u if u < 0.35 => 0,
        u if u < 0.8 => 1,
        _ => 2,
    };
    let age = (67.0 + 7.0 * std_normal.sample(&mut rng)).round().clamp(40.0, 90.0);
    let factor = [1.0, cfg.ex_smoker_factor, cfg.smoker_factor][smoking];
    let z_rate: f64 = std_normal.sample(&mut rng);
    let rate = cfg.decline_median * factor * (cfg.decline_log_sd * z_rate).exp();
    let baseline = (cfg.baseline_mean + cfg.baseline_sd * std_normal.sample(&mut rng)).max(800.0);

    let visits = rng.random_range(cfg.min_visits..=cfg.max_visits);
    let mut week = rng.random_range(0..=4) as f64;
    let first = week;
    let mut weeks = Vec::with_capacity(visits);
    let mut fvc = Vec::with_capacity(visits);
    for _ in 0..visits {
        let eps = cfg.noise_sd * std_normal.sample(&mut rng);
        weeks.push(week);
        fvc.push((baseline * (-rate * (week - first)).exp() * (1.0 + eps)).round());
        week += rng.random_range(cfg.min_gap..=cfg.max_gap) as f64;
    }

    // brightness tracks the patient's own log decline rate, standardized
    // against the population median
    let z = (rate / cfg.decline_median).ln() / cfg.decline_log_sd.max(1e-12);
    let level = (0.5 + cfg.image_contrast * z).clamp(0.05, 0.95);
    let images = (0..cfg.slices)
        .map(|_| slice(&mut rng, cfg, level).map(ImageRef::Inline))
        .collect::<Result<_>>()?;

    Ok(PatientRecord {
        id: format!("ID{index:05}"),
        weeks,
        fvc,
        statics: StaticFeatures {
            age,
            sex: sex.to_string(),
            smoking_status: SMOKING[smoking].to_string(),
        },
        images,
    })
}

/// Elliptical "lung" region at brightness `level` on a dark background,
/// with pixel noise, quantized to 8 bits.
fn slice(rng: &mut impl Rng, cfg: &SyntheticConfig, level: f64) -> Result<GrayImage> {
    let n = cfg.image_size;
    let noise = Normal::new(0.0, cfg.image_noise.max(0.0)).unwrap();
    let c = (n as f64 - 1.0) / 2.0;
    let (rx, ry) = (rng.random_range(0.35..0.45) * n as f64, rng.random_range(0.3..0.4) * n as f64);
    let mut pixels = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = ((x as f64 - c) / rx, (y as f64 - c) / ry);
            let base = if dx * dx + dy * dy <= 1.0 { level } else { 0.1 };
            let v: f64 = (base + noise.sample(rng)).clamp(0.0, 1.0);
            pixels.push((v * 255.0).round() / 255.0);
        }
    }
    GrayImage::new(n, n, pixels)
}
