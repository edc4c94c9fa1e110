//! End-to-end acceptance suite. Runs the ten criteria in order and prints one
//! PASS/FAIL line each; exits non-zero if any fails. Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 2 9`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cdefuse::autodiff::{Init, ParamStore, Tape, Tensor};
use cdefuse::cde::{CdeConfig, CdeForecaster};
use cdefuse::data::{
    generate_synthetic_cohort, load_cohort, preprocess, split_cohort, write_cohort, Cohort, PatientSeries, Split,
    SyntheticConfig,
};
use cdefuse::diagnostics::gradient_suite;
use cdefuse::experiment::{run_experiment, ExperimentConfig, RunLog};
use cdefuse::metrics::compute_metrics;
use cdefuse::model::{transfer_trunk, FusionKind, Modality, Model, ModelSpec, SliceChoice, TrunkKind};
use cdefuse::path::{ControlPath, ObservationSequence, Scheme};
use cdefuse::train::{epochs_to_reach, evaluate_loss, train, TrainConfig};

type Criterion = fn() -> Result<String>;

const COHORT_SEED: u64 = 2024;
const SEEDS: u64 = 5;

fn random_sequence(rng: &mut ChaCha8Rng, n: usize, c: usize) -> ObservationSequence {
    let mut t = rng.random_range(-1.0..1.0);
    let mut times = Vec::with_capacity(n);
    for _ in 0..n {
        times.push(t);
        t += rng.random_range(0.2..2.0);
    }
    let rows = (0..n).map(|_| (0..c).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    ObservationSequence::fully_observed(times, rows).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn grad_correctness() -> Result<String> {
    let start = Instant::now();
    let reports = gradient_suite(0, 20)?;
    let elapsed = start.elapsed();
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    ensure!(failed.is_empty(), "over tolerance: {failed:?}");
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    let worst_op = reports
        .iter()
        .filter(|r| r.name.starts_with("op "))
        .map(|r| r.max_rel_err)
        .fold(0.0, f64::max);
    let composed: Vec<String> = reports
        .iter()
        .filter(|r| !r.name.starts_with("op "))
        .map(|r| format!("{} {:.1e}", r.name, r.max_rel_err))
        .collect();
    Ok(format!(
        "{} ops x 20 inputs, worst {worst_op:.1e}; {}; {elapsed:.1?}",
        reports.len() - composed.len(),
        composed.join(", ")
    ))
}

/// Smooth field: first relu layer saturated on, identity middle layer, so
/// the field is tanh of an affine function of z.
fn smooth_problem(seed: u64) -> (ParamStore, CdeForecaster, ControlPath) {
    let mut store = ParamStore::new();
    let cfg = CdeConfig {
        channels: 2,
        hidden: 4,
        width: 8,
        substeps: 1,
    };
    let m = CdeForecaster::new(&mut store, &mut Init::new(3), cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = &m.trunk.field.layers;
    for v in store.get_mut(l[0].weight).data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    store.get_mut(l[0].bias).data_mut().fill(30.0);
    store.set(l[1].weight, Tensor::eye(8)).unwrap();
    store.set(l[1].bias, Tensor::zeros(&[8])).unwrap();
    let w2: Vec<f64> = (0..8 * 12).map(|_| rng.random_range(-0.3..0.3)).collect();
    let b2 = (0..12)
        .map(|j| -30.0 * (0..8).map(|i| w2[i * 12 + j]).sum::<f64>() + rng.random_range(-0.5..0.5))
        .collect();
    store.set(l[2].weight, Tensor::new(&[8, 12], w2).unwrap()).unwrap();
    store.set(l[2].bias, Tensor::vector(b2)).unwrap();
    let rows = (0..2).map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let obs = ObservationSequence::fully_observed(vec![0.0, rng.random_range(2.0..4.0)], rows).unwrap();
    (store, m, ControlPath::build(&obs, Scheme::HermiteBackward).unwrap())
}

fn solver_order() -> Result<String> {
    let mut orders = Vec::new();
    for seed in 0..4 {
        let (store, m, path) = smooth_problem(seed);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let end = |n: usize| m.trunk.solve_with(&p, &path, &[path.end()], n).unwrap().states[0].to_vec();
        let reference = end(1024);
        let pts: Vec<(f64, f64)> = [4usize, 8, 16, 32]
            .iter()
            .map(|&n| ((n as f64).log2(), max_diff(&end(n), &reference).log2()))
            .collect();
        let k = pts.len() as f64;
        let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / k, pts.iter().map(|p| p.1).sum::<f64>() / k);
        let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let order = -num / den;
        ensure!((3.7..=4.3).contains(&order), "seed {seed}: order {order:.3}");
        orders.push(order);
    }

    // z-independent field: constant M = tanh(b), so z(end) = z0 + M (X(end) - X(start))
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for scheme in Scheme::ALL {
        let mut store = ParamStore::new();
        let cfg = CdeConfig {
            channels: 2,
            hidden: 3,
            width: 5,
            substeps: 3,
        };
        let m = CdeForecaster::new(&mut store, &mut Init::new(4), cfg).unwrap();
        let last = m.trunk.field.layers[2];
        store.get_mut(last.weight).data_mut().fill(0.0);
        let bias: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        store.set(last.bias, Tensor::vector(bias.clone())).unwrap();
        let path = ControlPath::build(&random_sequence(&mut rng, 6, 2), scheme).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let z0 = m.trunk.initial_map(&p, &path.eval_point(path.start()))?.to_vec();
        let z1 = m.trunk.solve(&p, &path, &[path.end()])?.states[0].to_vec();
        let (a, b) = (path.eval_point(path.start()), path.eval_point(path.end()));
        let expected: Vec<f64> = (0..3)
            .map(|i| z0[i] + (0..3).map(|j| bias[i * 3 + j].tanh() * (b[j] - a[j])).sum::<f64>())
            .collect();
        worst = worst.max(max_diff(&z1, &expected));
    }
    ensure!(worst < 1e-10, "linear witness error {worst:e}");
    Ok(format!(
        "orders {}; linear witness max error {worst:.1e} over 4 schemes",
        orders.iter().map(|o| format!("{o:.3}")).collect::<Vec<_>>().join(" ")
    ))
}

/// Largest change in the path (value and derivative) over the parameter
/// range up to observation `k` after every later observation is redrawn.
fn past_change(rng: &mut ChaCha8Rng, scheme: Scheme) -> f64 {
    let n = rng.random_range(3..9);
    let obs = random_sequence(rng, n, 2);
    let k = rng.random_range(0..n - 1);
    let mut rows: Vec<Vec<f64>> = obs.values().iter().map(|r| r.iter().map(|v| v.unwrap()).collect()).collect();
    let mut times = obs.times().to_vec();
    let shift = rng.random_range(0.0..0.5);
    for j in k + 1..n {
        rows[j] = (0..2).map(|_| rng.random_range(-5.0..5.0)).collect();
        times[j] += shift * (j - k) as f64;
    }
    let moved = ObservationSequence::fully_observed(times, rows).unwrap();
    let (a, b) = (ControlPath::build(&obs, scheme).unwrap(), ControlPath::build(&moved, scheme).unwrap());
    let (s0, s1) = (a.start(), a.observation_param(k));
    let mut worst: f64 = 0.0;
    for i in 0..=40 {
        let s = s0 + (s1 - s0) * i as f64 / 40.0;
        worst = worst.max(max_diff(&a.eval_point(s), &b.eval_point(s)));
        if s < s1 {
            worst = worst.max(max_diff(&a.eval_derivative(s), &b.eval_derivative(s)));
        }
    }
    worst
}

fn small_cohort_series(n: usize, seed: u64) -> Vec<PatientSeries> {
    let c = generate_synthetic_cohort(n, seed, &SyntheticConfig::default()).unwrap();
    preprocess(&split_cohort(&c, seed).unwrap()).unwrap().train
}

fn causality() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut report = Vec::new();
    for scheme in [Scheme::HermiteBackward, Scheme::Rectilinear] {
        let worst = (0..100).map(|_| past_change(&mut rng, scheme)).fold(0.0, f64::max);
        ensure!(worst <= 1e-12, "{scheme}: past changed by {worst:e}");
        report.push(format!("{scheme} {worst:.0e}"));
    }

    let spec = ModelSpec {
        modality: Modality::Multimodal,
        fusion: FusionKind::Concat,
        scheme: Scheme::Rectilinear,
        ..Default::default()
    };
    let (store, model) = Model::new(&spec, 5)?;
    let series = small_cohort_series(20, 8);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let s = &series[trial % series.len()];
        let k = rng.random_range(0..s.len() - 1);
        let mut moved = s.clone();
        for e in &mut moved.examples[k + 1..] {
            e.fvc += rng.random_range(-3.0..3.0);
            e.next_week_norm += rng.random_range(0.0..1.0);
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let a = model.predict(&p, s, SliceChoice::First)?.to_vec();
        let b = model.predict(&p, &moved, SliceChoice::First)?.to_vec();
        worst = worst.max(max_diff(&a[..=k], &b[..=k]));
    }
    ensure!(worst <= 1e-12, "fusion model: past prediction changed by {worst:e}");
    report.push(format!("fusion model {worst:.0e}"));

    let witness = (0..100).map(|_| past_change(&mut rng, Scheme::NaturalCubic)).fold(0.0, f64::max);
    ensure!(witness > 1e-6, "natural cubic past unchanged ({witness:e})");
    report.push(format!("natural_cubic witness {witness:.2}"));
    Ok(format!("100 trials each: {}", report.join(", ")))
}

fn interpolation_contracts() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut knot_err, mut cont_err, mut herm_err, mut rect_err): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..200 {
        let n = rng.random_range(2..10);
        let obs = random_sequence(&mut rng, n, 3);
        let t = obs.times();
        let x: Vec<Vec<f64>> = obs.values().iter().map(|r| r.iter().map(|v| v.unwrap()).collect()).collect();
        for scheme in Scheme::ALL {
            let path = ControlPath::build(&obs, scheme)?;
            for i in 0..n {
                let mut want = vec![t[i]];
                want.extend(&x[i]);
                knot_err = knot_err.max(max_diff(&path.eval_point(path.observation_param(i)), &want));
            }
            for seg in 1..path.num_segments() {
                cont_err = cont_err.max(max_diff(&path.segment_point(seg - 1, 1.0), &path.segment_point(seg, 0.0)));
            }
            if scheme == Scheme::HermiteBackward {
                for i in 0..n {
                    let want: Vec<f64> = (0..3)
                        .map(|c| if i == 0 { 0.0 } else { (x[i][c] - x[i - 1][c]) / (t[i] - t[i - 1]) })
                        .collect();
                    let mut sides = Vec::new();
                    if i > 0 {
                        sides.push(path.segment_derivative(i - 1, t[i]));
                    }
                    if i + 1 < n {
                        sides.push(path.segment_derivative(i, t[i]));
                    }
                    for d in sides {
                        herm_err = herm_err.max(max_diff(&d[1..], &want));
                        herm_err = herm_err.max((d[0] - 1.0).abs());
                    }
                }
            }
            if scheme == Scheme::Rectilinear {
                let knots = path.knots();
                ensure!(knots.len() == 2 * n - 1, "rectilinear knot count {}", knots.len());
                for (j, &k) in knots.iter().enumerate() {
                    rect_err = rect_err.max((k - j as f64).abs());
                }
                for i in 1..n {
                    // time advances with values held, then values jump with time held
                    let mid = &path.knot_values()[2 * i - 1];
                    let mut want = vec![t[i]];
                    want.extend(&x[i - 1]);
                    rect_err = rect_err.max(max_diff(mid, &want));
                    let d_time = path.segment_derivative(2 * i - 2, (2 * i - 2) as f64 + 0.5);
                    let d_value = path.segment_derivative(2 * i - 1, (2 * i - 1) as f64 + 0.5);
                    rect_err = rect_err.max((d_time[0] - (t[i] - t[i - 1])).abs());
                    rect_err = rect_err.max(d_time[1..].iter().fold(0.0, |m, v| m.max(v.abs())));
                    rect_err = rect_err.max(d_value[0].abs());
                    let dx: Vec<f64> = (0..3).map(|c| x[i][c] - x[i - 1][c]).collect();
                    rect_err = rect_err.max(max_diff(&d_value[1..], &dx));
                }
            }
        }
    }
    ensure!(knot_err == 0.0 || knot_err <= 1e-12, "knot interpolation error {knot_err:e}");
    ensure!(cont_err <= 1e-12, "knot continuity error {cont_err:e}");
    ensure!(herm_err <= 1e-12, "Hermite knot derivative error {herm_err:e}");
    ensure!(rect_err <= 1e-12, "rectilinear pattern error {rect_err:e}");
    Ok(format!(
        "200 sequences x 4 schemes: knots {knot_err:.0e}, continuity {cont_err:.0e}, hermite {herm_err:.0e}, rectilinear {rect_err:.0e}"
    ))
}

fn capacity() -> Result<String> {
    let cohort = generate_synthetic_cohort(4, 7, &SyntheticConfig::default())?;
    let split = Split {
        train: cohort,
        val: Cohort::default(),
        test: Cohort::default(),
    };
    let data = preprocess(&split)?;
    let mut out = Vec::new();
    for trunk in [TrunkKind::Cde, TrunkKind::Lstm] {
        for modality in [Modality::Structured, Modality::Multimodal] {
            let spec = ModelSpec {
                trunk,
                modality,
                ..Default::default()
            };
            let (mut store, model) = Model::new(&spec, 1)?;
            let cfg = TrainConfig {
                epochs: 500,
                seed: 1,
                ..Default::default()
            };
            let start = Instant::now();
            train(&model, &mut store, &data.train, &[], &cfg, |_| {})?;
            let elapsed = start.elapsed();
            let rmse = evaluate_loss(&model, &store, &data.train)?.unwrap().sqrt();
            ensure!(rmse < 0.05, "{trunk} {modality}: train RMSE {rmse:.4}");
            ensure!(elapsed < Duration::from_secs(300), "{trunk} {modality}: {elapsed:?}");
            out.push(format!("{trunk}/{modality} {rmse:.4} ({:.0?})", elapsed));
        }
    }
    Ok(format!("500 epochs, train RMSE: {}", out.join(", ")))
}

/// Per seed: structured CDE, pretrained concat fusion, random-init concat
/// fusion, all on one n = 40 cohort.
struct SeedRuns {
    structured: RunLog,
    pretrained: RunLog,
    random_init: RunLog,
}

fn seed_runs() -> &'static Result<Vec<SeedRuns>, String> {
    static RUNS: OnceLock<Result<Vec<SeedRuns>, String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let cohort = generate_synthetic_cohort(40, COHORT_SEED, &SyntheticConfig::default()).map_err(|e| e.to_string())?;
        (0..SEEDS)
            .map(|seed| {
                let structured = ExperimentConfig {
                    seed,
                    ..Default::default()
                };
                let mut fusion = structured.clone();
                fusion.model.modality = Modality::Multimodal;
                fusion.model.fusion = FusionKind::Concat;
                let mut pretrained = fusion.clone();
                pretrained.pretrain = true;
                let run = |c: &ExperimentConfig| run_experiment(c, &cohort).map(|e| e.log).map_err(|e| e.to_string());
                Ok(SeedRuns {
                    structured: run(&structured)?,
                    pretrained: run(&pretrained)?,
                    random_init: run(&fusion)?,
                })
            })
            .collect()
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn learning_signal() -> Result<String> {
    let runs = seed_runs().as_ref().map_err(|e| anyhow::anyhow!("{e}"))?;
    let test = |l: &RunLog| l.metrics.test.expect("test split is non-empty").rmse;
    let s: Vec<f64> = runs.iter().map(|r| test(&r.structured)).collect();
    let f: Vec<f64> = runs.iter().map(|r| test(&r.pretrained)).collect();
    let wins = s.iter().zip(&f).filter(|(a, b)| b < a).count();
    let (ms, mf) = (median(s.clone()), median(f.clone()));
    let detail = format!(
        "fusion wins {wins}/{SEEDS}, median test RMSE {mf:.4} vs structured {ms:.4}; per seed (structured, fusion): {}",
        s.iter().zip(&f).map(|(a, b)| format!("({a:.3}, {b:.3})")).collect::<Vec<_>>().join(" ")
    );
    ensure!(wins >= 4 && mf < ms, "{detail}");
    Ok(detail)
}

fn pretraining_handoff() -> Result<String> {
    let spec = ModelSpec {
        modality: Modality::Multimodal,
        fusion: FusionKind::Concat,
        ..Default::default()
    };
    let (pre, _) = Model::new(&spec.pretrain_spec(), 3)?;
    let (mut store, _) = Model::new(&spec, 4)?;
    transfer_trunk(&pre, &mut store)?;
    let bits = |s: &ParamStore| -> BTreeMap<String, Vec<u64>> {
        s.iter()
            .filter(|(n, _)| n.starts_with("cde.init.") || n.starts_with("cde.field."))
            .map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    };
    ensure!(bits(&pre) == bits(&store), "trunk changed across the hand-off");
    ensure!(store.by_name("cde.readout.w").is_none(), "pretraining readout carried over");

    let runs = seed_runs().as_ref().map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut wins = 0;
    let mut per_seed = Vec::new();
    for r in runs {
        // validation loss of the pretrained model as handed off
        let target = r
            .pretrained
            .pretrain_losses
            .last()
            .and_then(|e| e.val)
            .ok_or_else(|| anyhow::anyhow!("pretraining logged no validation loss"))?;
        let a = epochs_to_reach(&r.pretrained.losses, target);
        let b = epochs_to_reach(&r.random_init.losses, target);
        if let Some(a) = a {
            if b.is_none_or(|b| a < b) {
                wins += 1;
            }
        }
        let show = |e: Option<usize>| e.map_or_else(|| "never".to_string(), |e| e.to_string());
        per_seed.push(format!("({}, {})", show(a), show(b)));
    }
    let detail = format!(
        "trunk bit-identical; pretrained init faster in {wins}/{SEEDS}; epochs to pretrain val loss (pretrained, random): {}",
        per_seed.join(" ")
    );
    ensure!(wins >= 4, "{detail}");
    Ok(detail)
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            for (k, v) in dir_bytes(&p) {
                out.insert(format!("{}/{k}", p.file_name().unwrap().to_string_lossy()), v);
            }
        } else {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
        }
    }
    out
}

fn pipeline_hygiene() -> Result<String> {
    let ten = generate_synthetic_cohort(10, 1, &SyntheticConfig::default())?;
    let s = split_cohort(&ten, 1)?;
    ensure!((s.train.len(), s.val.len(), s.test.len()) == (7, 2, 1), "10 patients split unevenly");
    for n in 4..60 {
        let c = generate_synthetic_cohort(n, n as u64, &SyntheticConfig::default())?;
        let s = split_cohort(&c, 99)?;
        let mut ids: Vec<&str> = [&s.train, &s.val, &s.test]
            .iter()
            .flat_map(|p| p.records.iter().map(|r| r.id.as_str()))
            .collect();
        ids.sort_unstable();
        let mut all: Vec<&str> = c.records.iter().map(|r| r.id.as_str()).collect();
        all.sort_unstable();
        ensure!(ids == all, "n = {n}: splits are not a partition");
    }

    let c = generate_synthetic_cohort(40, 3, &SyntheticConfig::default())?;
    let split = split_cohort(&c, 3)?;
    let data = preprocess(&split)?;
    let train_fvc: Vec<f64> = split.train.records.iter().filter(|r| r.visits() >= 2).flat_map(|r| r.fvc.clone()).collect();
    let mean = train_fvc.iter().sum::<f64>() / train_fvc.len() as f64;
    ensure!((data.pre.fvc.mean - mean).abs() < 1e-9, "FVC mean is not the training mean");
    let pooled: Vec<f64> = split
        .train
        .records
        .iter()
        .chain(&split.val.records)
        .flat_map(|r| r.fvc.clone())
        .collect();
    let pooled_mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
    ensure!((pooled_mean - mean).abs() > 1e-6, "pooled stats equal train stats");

    let mut cfg = ExperimentConfig {
        epochs: 3,
        ..Default::default()
    };
    cfg.model.hidden_size = 8;
    let a = run_experiment(&cfg, &ten)?;
    let b = run_experiment(&cfg, &ten)?;
    ensure!(a.store == b.store && a.log.losses == b.log.losses && a.log.metrics == b.log.metrics, "same-seed runs differ");
    let json = a.log.to_json()?;
    ensure!(RunLog::from_json(&json)?.to_json()? == json, "run log round trip is not byte-stable");

    let tmp = tempfile::tempdir()?;
    let (d1, d2) = (tmp.path().join("a"), tmp.path().join("b"));
    write_cohort(&c, &d1)?;
    write_cohort(&load_cohort(&d1)?, &d2)?;
    let (f1, f2) = (dir_bytes(&d1), dir_bytes(&d2));
    ensure!(f1 == f2, "cohort files changed on round trip");
    Ok(format!(
        "7/2/1 split, partition for n = 4..59, train-only stats (pooled mean differs by {:.1}), bit-identical reruns, byte-stable run log and {} cohort files",
        (pooled_mean - mean).abs(),
        f1.len()
    ))
}

/// Welford single pass.
fn streaming(p: &[f64], t: &[f64]) -> (f64, f64, Option<f64>) {
    let (mut n, mut mean, mut m2, mut sq, mut abs) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, t) in p.iter().zip(t) {
        n += 1.0;
        let d = t - mean;
        mean += d / n;
        m2 += d * (t - mean);
        sq += (p - t) * (p - t);
        abs += (p - t).abs();
    }
    ((sq / n).sqrt(), abs / n, (m2 > 0.0).then(|| 1.0 - sq / m2))
}

fn metrics() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..300);
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p: Vec<f64> = t.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
        let m = compute_metrics(&p, &t)?;
        let (rmse, mae, r2) = streaming(&p, &t);
        worst = worst.max((m.rmse - rmse).abs()).max((m.mae - mae).abs());
        worst = worst.max((m.r2.unwrap() - r2.unwrap()).abs());
    }
    ensure!(worst <= 1e-12, "oracle mismatch {worst:e}");
    let t = [0.5, -1.0, 2.0, 3.5];
    let perfect = compute_metrics(&t, &t)?;
    ensure!((perfect.rmse, perfect.mae, perfect.r2) == (0.0, 0.0, Some(1.0)), "perfect fit {perfect:?}");
    let mean = [1.25; 4];
    ensure!(compute_metrics(&mean, &t)?.r2 == Some(0.0), "mean predictor r2 not 0");
    Ok(format!("1000 random cases vs one-pass oracle, max diff {worst:.1e}; analytic cases exact"))
}

/// Context values per table row: (train, val, test).
const REPORTED: [[[f64; 3]; 2]; 6] = [
    [[1.076, 1.054, 1.215], [0.4147, 0.6559, 0.5405]],
    [[0.5824, 0.8586, 1.396], [0.4147, 0.6559, 0.5405]],
    [[0.8879, 1.118, 0.902], [0.1360, 0.3465, 0.2912]],
    [[0.3038, 0.8191, 0.9066], [0.1360, 0.3465, 0.2912]],
    [[0.1360, 0.3465, 0.2912], [0.1278, 0.3371, 0.2570]],
    [[1.076, 1.054, 1.215], [0.1278, 0.3371, 0.2570]],
];

fn ablation_report() -> Result<String> {
    let bin = env!("CARGO_BIN_EXE_cdefuse");
    let tmp = tempfile::tempdir()?;
    let (data, out, cfg) = (tmp.path().join("data"), tmp.path().join("ablation"), tmp.path().join("base.cfg"));
    let status = Command::new(bin)
        .args(["gen-data", "--n", "40", "--seed", &COHORT_SEED.to_string(), "--out"])
        .arg(&data)
        .status()?;
    ensure!(status.success(), "gen-data failed");
    fs::write(&cfg, "seed = 0\n")?;
    let start = Instant::now();
    let run = Command::new(bin)
        .args(["ablate", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .env("RUST_LOG", "warn")
        .output()?;
    let elapsed = start.elapsed();
    ensure!(run.status.success(), "ablate failed: {}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout)?;
    ensure!(stdout.matches("## ").count() == 6, "expected 6 tables in output");
    ensure!(stdout.contains("reported (OSIC)"), "context columns missing from output");

    let mut rdr = csv::Reader::from_path(out.join("ablation.csv"))?;
    let headers = rdr.headers()?.clone();
    ensure!(headers.iter().filter(|h| h.starts_with("reported (OSIC)")).count() == 3, "context columns missing");
    let rows: Vec<csv::StringRecord> = rdr.records().collect::<Result<_, _>>()?;
    ensure!(rows.len() == 12, "expected 12 rows, got {}", rows.len());
    let mut tables = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let (table, row) = (i / 2, i % 2);
        for c in 0..3 {
            let ours: f64 = r[2 + c].parse()?;
            ensure!(ours.is_finite() && ours > 0.0, "row {i}: RMSE {ours}");
            let reported: f64 = r[5 + c].parse()?;
            ensure!(reported == REPORTED[table][row][c], "row {i} column {c}: context {reported}");
        }
        if !tables.contains(&r[0].to_string()) {
            tables.push(r[0].to_string());
        }
        ensure!(out.join(format!("table_{}.csv", &r[0])).exists(), "missing per-table CSV for {}", &r[0]);
    }
    ensure!(tables.len() == 6, "expected 6 tables, got {}", tables.len());
    ensure!(elapsed < Duration::from_secs(30 * 60), "ablation took {elapsed:?}");
    Ok(format!("6 tables x 2 rows with context columns, n = 40, {elapsed:.0?}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 10] = [
        ("gradient correctness", grad_correctness),
        ("solver order", solver_order),
        ("causality", causality),
        ("interpolation contracts", interpolation_contracts),
        ("capacity", capacity),
        ("learning signal", learning_signal),
        ("pretraining hand-off", pretraining_handoff),
        ("pipeline hygiene", pipeline_hygiene),
        ("metrics", metrics),
        ("ablation report", ablation_report),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(anyhow::anyhow!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS {name}: {detail} [{secs:.1}s]"),
            Err(e) => {
                failed += 1;
                println!("criterion {id:>2} FAIL {name}: {e:#} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
