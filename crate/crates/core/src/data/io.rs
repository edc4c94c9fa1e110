use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use log::warn;

use super::{Cohort, PatientRecord, StaticFeatures};
use crate::encoders::{read_pgm, write_pgm, GrayImage, ImageRef};
use crate::error::{Error, Result};

pub const MEASUREMENTS_FILE: &str = "measurements.csv";
pub const MANIFEST_FILE: &str = "manifest.csv";
const IMAGE_DIR: &str = "images";

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, 0, e.to_string()))
}

/// Header positions of `columns`, or a format error naming the first missing one.
fn columns<const N: usize>(path: &Path, rdr: &mut csv::Reader<fs::File>, names: [&str; N], optional: usize) -> Result<Option<[Option<usize>; N]>> {
    let headers = rdr.headers().map_err(|e| Error::format(path, 1, e.to_string()))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(None);
    }
    let mut out = [None; N];
    for (i, name) in names.iter().enumerate() {
        out[i] = headers.iter().position(|h| h == *name);
        if out[i].is_none() && i < N - optional {
            return Err(Error::format(path, 1, format!("missing column `{name}`")));
        }
    }
    Ok(Some(out))
}

fn number(path: &Path, line: usize, field: &str, what: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::format(path, line, format!("non-numeric {what} `{field}`")))
}

/// Loads the measurement table (`patient_id,week,fvc`) and manifest
/// (`patient_id,age,sex,smoking_status,image_path`). Image paths are
/// relative to the manifest's directory.
pub fn load_cohort_csv(measurements: &Path, manifest: &Path) -> Result<Cohort> {
    let mut series: HashMap<String, (usize, BTreeMap<u64, (f64, f64)>)> = HashMap::new();
    let mut rdr = reader(measurements)?;
    if let Some([Some(pid), Some(wk), Some(fv)]) = columns(measurements, &mut rdr, ["patient_id", "week", "fvc"], 0)? {
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::format(measurements, line, e.to_string()))?;
            let week = number(measurements, line, &rec[wk], "week")?;
            let fvc = number(measurements, line, &rec[fv], "fvc")?;
            let id = rec[pid].to_string();
            let entry = series.entry(id.clone()).or_insert_with(|| (line, BTreeMap::new()));
            // key on the bit pattern of a normalized float so equal weeks collide
            if entry.1.insert((week + 0.0).to_bits(), (week, fvc)).is_some() {
                warn!("{}: line {line}: duplicate visit for {id} at week {week}, keeping the last", measurements.display());
            }
        }
    }

    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut rdr = reader(manifest)?;
    let mut records = Vec::new();
    let mut seen = HashMap::new();
    if let Some(cols) = columns(manifest, &mut rdr, ["patient_id", "age", "sex", "smoking_status", "image_path"], 1)? {
        let [pid, age, sex, smoke, img] = cols.map(|c| c.unwrap_or(usize::MAX));
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::format(manifest, line, e.to_string()))?;
            let id = rec[pid].to_string();
            if let Some(prev) = seen.insert(id.clone(), line) {
                return Err(Error::format(manifest, line, format!("duplicate patient id {id} (first at line {prev})")));
            }
            let Some((_, visits)) = series.remove(&id) else {
                warn!("{}: line {line}: patient {id} has no measurements, skipped", manifest.display());
                continue;
            };
            let path = rec.get(img).unwrap_or("");
            let images = if path.is_empty() {
                Vec::new()
            } else {
                read_pgm(&base.join(path))?.into_iter().map(ImageRef::Inline).collect()
            };
            let mut visits: Vec<(f64, f64)> = visits.into_values().collect();
            visits.sort_by(|a, b| a.0.total_cmp(&b.0));
            records.push(PatientRecord {
                id,
                weeks: visits.iter().map(|v| v.0).collect(),
                fvc: visits.iter().map(|v| v.1).collect(),
                statics: StaticFeatures {
                    age: number(manifest, line, &rec[age], "age")?,
                    sex: rec[sex].to_string(),
                    smoking_status: rec[smoke].to_string(),
                },
                images,
            });
        }
    }
    if let Some((id, (line, _))) = series.into_iter().min_by_key(|(_, (line, _))| *line) {
        return Err(Error::format(measurements, line, format!("patient {id} is missing from the manifest")));
    }
    Ok(Cohort { records })
}

/// Loads `measurements.csv` and `manifest.csv` from `dir`.
pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    load_cohort_csv(&dir.join(MEASUREMENTS_FILE), &dir.join(MANIFEST_FILE))
}

/// Writes `measurements.csv`, `manifest.csv` and one multi-slice PGM per
/// patient with inline images.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGE_DIR)).map_err(|e| Error::io(dir, e))?;
    let m_path = dir.join(MEASUREMENTS_FILE);
    let csv_err = |p: &Path| {
        let p = p.to_path_buf();
        move |e: csv::Error| Error::format(&p, 0, e.to_string())
    };
    let mut m = csv::Writer::from_path(&m_path).map_err(csv_err(&m_path))?;
    m.write_record(["patient_id", "week", "fvc"]).map_err(csv_err(&m_path))?;
    let man_path = dir.join(MANIFEST_FILE);
    let mut man = csv::Writer::from_path(&man_path).map_err(csv_err(&man_path))?;
    man.write_record(["patient_id", "age", "sex", "smoking_status", "image_path"])
        .map_err(csv_err(&man_path))?;
    for r in &cohort.records {
        for (w, f) in r.weeks.iter().zip(&r.fvc) {
            m.write_record([r.id.as_str(), &w.to_string(), &f.to_string()])
                .map_err(csv_err(&m_path))?;
        }
        let inline: Vec<GrayImage> = r
            .images
            .iter()
            .filter_map(|i| match i {
                ImageRef::Inline(im) => Some(im.clone()),
                ImageRef::Precomputed(_) => None,
            })
            .collect();
        let rel = if inline.is_empty() {
            String::new()
        } else {
            let rel = format!("{IMAGE_DIR}/{}.pgm", r.id);
            write_pgm(&dir.join(&rel), &inline)?;
            rel
        };
        let s = &r.statics;
        man.write_record([r.id.as_str(), &s.age.to_string(), &s.sex, &s.smoking_status, &rel])
            .map_err(csv_err(&man_path))?;
    }
    m.flush().map_err(|e| Error::io(&m_path, e))?;
    man.flush().map_err(|e| Error::io(&man_path, e))
}
