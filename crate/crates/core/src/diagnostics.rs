//! Finite-difference gradient checks over every tape op and the composed
//! graphs the models are built from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check_many, grad_check_params, ConvGeometry, Init, ParamStore, Tape, Tensor, Var};
use crate::cde::{CdeConfig, CdeForecaster};
use crate::error::Result;
use crate::fusion::{FusionConfig, FusionHead};
use crate::lstm::LstmForecaster;
use crate::path::{ControlPath, ObservationSequence, Scheme};
use crate::rng::rng_for;

pub const GRAD_EPS: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const CDE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub trials: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches length")
}

/// Values bounded away from zero, so relu's kink is never straddled.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

type OpFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

/// Contracts a non-scalar output with fixed weights so every output entry
/// contributes a distinct gradient.
fn contract<'t>(tape: &'t Tape, out: Var<'t>) -> Result<Var<'t>> {
    let n = out.numel();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + ((i * 7919) % 13) as f64 / 13.0).collect();
    let w = tape.leaf(Tensor::new(&out.shape(), w)?);
    Ok(out.mul(w)?.sum())
}

fn ops() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, x| contract(t, x[0].matmul(x[1])?)),
        ("transpose", vec![vec![3, 4]], |t, x| contract(t, x[0].t()?)),
        ("add", vec![vec![2, 3], vec![2, 3]], |t, x| contract(t, x[0].add(x[1])?)),
        ("sub", vec![vec![2, 3], vec![2, 3]], |t, x| contract(t, x[0].sub(x[1])?)),
        ("mul", vec![vec![2, 3], vec![2, 3]], |t, x| contract(t, x[0].mul(x[1])?)),
        ("scale", vec![vec![2, 3]], |t, x| contract(t, x[0].scale(-1.7))),
        ("offset", vec![vec![2, 3]], |t, x| contract(t, x[0].offset(0.4).mul(x[0])?)),
        ("add_bias", vec![vec![3, 4], vec![4]], |t, x| contract(t, x[0].add_bias(x[1])?)),
        ("tile_rows", vec![vec![1, 3]], |t, x| contract(t, x[0].tile_rows(4)?)),
        ("tanh", vec![vec![2, 3]], |t, x| contract(t, x[0].tanh())),
        ("sigmoid", vec![vec![2, 3]], |t, x| contract(t, x[0].sigmoid())),
        ("relu", vec![vec![2, 3]], |t, x| contract(t, x[0].relu())),
        ("map", vec![vec![2, 3]], |t, x| contract(t, x[0].map(f64::sin, f64::cos))),
        ("concat_last", vec![vec![2, 3], vec![2, 2]], |t, x| contract(t, Var::concat_last(&[x[0], x[1]])?)),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |t, x| contract(t, Var::concat_rows(&[x[0], x[1]])?)),
        ("slice_last", vec![vec![3, 5]], |t, x| contract(t, x[0].slice_last(1, 3)?)),
        ("slice_rows", vec![vec![4, 2]], |t, x| contract(t, x[0].slice_rows(1, 2)?)),
        ("reshape", vec![vec![2, 6]], |t, x| contract(t, x[0].reshape(&[3, 4])?)),
        ("sum", vec![vec![2, 3]], |_, x| Ok(x[0].mul(x[0])?.sum())),
        ("mean", vec![vec![2, 3]], |_, x| Ok(x[0].mul(x[0])?.mean())),
        ("mean_rows", vec![vec![4, 3]], |t, x| contract(t, x[0].mean_rows())),
        ("mse", vec![vec![3, 2], vec![3, 2]], |_, x| x[0].mse(x[1])),
        ("softmax", vec![vec![2, 4]], |t, x| contract(t, x[0].softmax()?)),
        ("causal_softmax", vec![vec![4, 4]], |t, x| contract(t, x[0].causal_softmax()?)),
        ("layer_norm", vec![vec![3, 4], vec![4], vec![4]], |t, x| contract(t, x[0].layer_norm(x[1], x[2])?)),
        ("im2col", vec![vec![16, 2]], |t, x| {
            let geom = ConvGeometry {
                height: 4,
                width: 4,
                channels: 2,
                kernel: 3,
                stride: 2,
                pad: 1,
            };
            contract(t, x[0].im2col(geom)?)
        }),
    ]
}

/// Every op over `trials` random inputs each.
pub fn op_checks(seed: u64, trials: usize) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for (k, (name, shapes, f)) in ops().into_iter().enumerate() {
        let mut rng = rng_for(seed, k as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| off_zero(&mut rng, s)).collect();
            worst = worst.max(grad_check_many(f, &inputs, GRAD_EPS)?);
        }
        out.push(GradReport {
            name: format!("op {name}"),
            max_rel_err: worst,
            tolerance: OP_TOLERANCE,
            trials,
        });
    }
    Ok(out)
}

/// Two-layer LSTM forecaster unrolled over 6 steps.
pub fn lstm_chain_check(seed: u64) -> Result<GradReport> {
    let mut rng = rng_for(seed, 100);
    let mut store = ParamStore::new();
    let m = LstmForecaster::new(&mut store, &mut Init::new(seed), 2, 3)?;
    let seq = uniform(&mut rng, &[6, 2], -1.0, 1.0);
    let target = uniform(&mut rng, &[6, 1], -1.0, 1.0);
    let err = grad_check_params(&store, |t, p| m.forward(p, t.leaf(seq.clone()))?.mse(t.leaf(target.clone())), GRAD_EPS)?;
    Ok(GradReport {
        name: "LSTM cell chain".into(),
        max_rel_err: err,
        tolerance: OP_TOLERANCE,
        trials: 1,
    })
}

/// CDE forecaster with hidden size 4 over a 2-channel path with 3 intervals,
/// one RK4 step each, through the readout.
pub fn cde_solve_check(seed: u64) -> Result<GradReport> {
    let mut rng = rng_for(seed, 101);
    let mut store = ParamStore::new();
    let cfg = CdeConfig {
        channels: 2,
        hidden: 4,
        width: 8,
        substeps: 1,
    };
    let m = CdeForecaster::new(&mut store, &mut Init::new(seed), cfg)?;
    let times = vec![0.0, 0.7, 1.5, 2.0];
    let rows = (0..4).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let path = ControlPath::build(&ObservationSequence::fully_observed(times, rows)?, Scheme::HermiteBackward)?;
    let target = uniform(&mut rng, &[4, 1], -1.0, 1.0);
    let err = grad_check_params(
        &store,
        |t, p| m.forward(p, &path, path.observation_params())?.mse(t.leaf(target.clone())),
        GRAD_EPS,
    )?;
    Ok(GradReport {
        name: "CDE solve".into(),
        max_rel_err: err,
        tolerance: CDE_TOLERANCE,
        trials: 1,
    })
}

/// Fusion head with model width 8, two heads and three tokens.
pub fn fusion_block_check(seed: u64) -> Result<GradReport> {
    let mut rng = rng_for(seed, 102);
    let mut store = ParamStore::new();
    let cfg = FusionConfig {
        d_emb: 4,
        d_img: 2,
        d_stat: 2,
        heads: 2,
        ..Default::default()
    };
    let h = FusionHead::new(&mut store, &mut Init::new(seed), 3, cfg)?;
    let states = uniform(&mut rng, &[3, 3], -1.0, 1.0);
    let img = uniform(&mut rng, &[1, 2], -1.0, 1.0);
    let stat = uniform(&mut rng, &[1, 2], -1.0, 1.0);
    let target = uniform(&mut rng, &[3, 1], -1.0, 1.0);
    let err = grad_check_params(
        &store,
        |t, p| {
            h.forward(p, t.leaf(states.clone()), t.leaf(img.clone()), t.leaf(stat.clone()), &[0.0, 1.0, 2.0])?
                .mse(t.leaf(target.clone()))
        },
        GRAD_EPS,
    )?;
    Ok(GradReport {
        name: "fusion block".into(),
        max_rel_err: err,
        tolerance: OP_TOLERANCE,
        trials: 1,
    })
}

/// The whole suite: every op, then the three composed graphs.
pub fn gradient_suite(seed: u64, trials: usize) -> Result<Vec<GradReport>> {
    let mut out = op_checks(seed, trials)?;
    out.push(lstm_chain_check(seed)?);
    out.push(cde_solve_check(seed)?);
    out.push(fusion_block_check(seed)?);
    Ok(out)
}
