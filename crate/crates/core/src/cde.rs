//! Neural controlled differential equation trunk.
//!
//! The hidden state follows `dz/ds = f(z) · dX/ds` along a [`ControlPath`],
//! integrated with fixed-step RK4 on the autodiff tape.

use crate::autodiff::{Bound, Init, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::path::ControlPath;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CdeConfig {
    /// Observed channel count `c` (the path has `c + 1` with time).
    pub channels: usize,
    pub hidden: usize,
    pub width: usize,
    pub substeps: usize,
}

impl CdeConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            hidden: 16,
            width: 64,
            substeps: 4,
        }
    }
}

/// Initial map and vector field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdeTrunk {
    pub config: CdeConfig,
    pub init: Linear,
    pub field: Mlp,
}

#[derive(Clone, Debug)]
pub struct CdeTrajectory<'t> {
    pub times: Vec<f64>,
    /// One `[1, h]` state per evaluation time.
    pub states: Vec<Var<'t>>,
}

impl CdeTrunk {
    pub fn new(store: &mut ParamStore, init: &mut Init, config: CdeConfig) -> Result<Self> {
        if config.hidden == 0 || config.width == 0 || config.substeps == 0 {
            return Err(Error::Config("cde sizes and substeps must be positive".into()));
        }
        let d = config.channels + 1;
        Ok(Self {
            config,
            init: Linear::new(store, init, "cde.init", d, config.hidden)?,
            field: Mlp::new(
                store,
                init,
                "cde.field",
                &[config.hidden, config.width, config.width, config.hidden * d],
            )?,
        })
    }

    /// `z0 = W [t0; x0] + b` as a `[1, h]` row.
    pub fn initial_map<'t>(&self, p: &Bound<'t>, start: &[f64]) -> Result<Var<'t>> {
        let d = self.config.channels + 1;
        if start.len() != d {
            return Err(Error::dim("initial_map", &[d], &[start.len()]));
        }
        let x = p.vars()[0].tape().leaf(Tensor::new(&[1, d], start.to_vec())?);
        self.init.forward(p, x)
    }

    /// `f(z)` reshaped to `[h, c + 1]`.
    pub fn vector_field<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        self.field
            .forward(p, z)?
            .tanh()
            .reshape(&[self.config.hidden, self.config.channels + 1])
    }

    fn rate<'t>(&self, p: &Bound<'t>, z: Var<'t>, dx: &[f64]) -> Result<Var<'t>> {
        let dx = z.tape().leaf(Tensor::new(&[dx.len(), 1], dx.to_vec())?);
        self.vector_field(p, z)?.matmul(dx)?.reshape(&[1, self.config.hidden])
    }

    /// Integrates from the path start and records the state at each of
    /// `eval_params` (path parameters, non-decreasing). Knots and evaluation
    /// points are always step boundaries.
    pub fn solve<'t>(&self, p: &Bound<'t>, path: &ControlPath, eval_params: &[f64]) -> Result<CdeTrajectory<'t>> {
        self.solve_with(p, path, eval_params, self.config.substeps)
    }

    pub fn solve_with<'t>(
        &self,
        p: &Bound<'t>,
        path: &ControlPath,
        eval_params: &[f64],
        substeps: usize,
    ) -> Result<CdeTrajectory<'t>> {
        if path.dim() != self.config.channels + 1 {
            return Err(Error::dim("solve_cde", &[self.config.channels + 1], &[path.dim()]));
        }
        if eval_params.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Contract("evaluation times must be non-decreasing".into()));
        }
        let mut z = self.initial_map(p, &path.knot_values()[0])?;
        let mut states = Vec::with_capacity(eval_params.len());
        let mut next = 0;
        while next < eval_params.len() && eval_params[next] <= path.start() {
            states.push(z);
            next += 1;
        }
        let knots = path.knots();
        let d = path.dim();
        let (mut d0, mut dm, mut d1) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let mut step = 0;
        for seg in 0..path.num_segments() {
            let (a, b) = (knots[seg], knots[seg + 1]);
            let mut bounds: Vec<f64> = (0..substeps).map(|k| a + (b - a) * k as f64 / substeps as f64).collect();
            bounds.push(b);
            let extra = eval_params[next..].iter().take_while(|&&s| s < b).filter(|&&s| s > a);
            bounds.extend(extra);
            bounds.sort_by(f64::total_cmp);
            bounds.dedup();
            for w in bounds.windows(2) {
                let (s0, s1) = (w[0], w[1]);
                let dt = s1 - s0;
                path.segment_derivative_into(seg, s0, &mut d0);
                path.segment_derivative_into(seg, s0 + 0.5 * dt, &mut dm);
                path.segment_derivative_into(seg, s1, &mut d1);
                let k1 = self.rate(p, z, &d0)?;
                let k2 = self.rate(p, z.add(k1.scale(0.5 * dt))?, &dm)?;
                let k3 = self.rate(p, z.add(k2.scale(0.5 * dt))?, &dm)?;
                let k4 = self.rate(p, z.add(k3.scale(dt))?, &d1)?;
                let incr = k1.add(k2.scale(2.0))?.add(k3.scale(2.0))?.add(k4)?.scale(dt / 6.0);
                z = z.add(incr)?;
                step += 1;
                if !z.value().is_finite() {
                    return Err(Error::Divergence { step });
                }
                while next < eval_params.len() && eval_params[next] <= s1 {
                    states.push(z);
                    next += 1;
                }
            }
        }
        states.extend(std::iter::repeat_n(z, eval_params.len() - next));
        Ok(CdeTrajectory {
            times: eval_params.to_vec(),
            states,
        })
    }
}

impl<'t> CdeTrajectory<'t> {
    /// States stacked as `[T, h]`.
    pub fn stacked(&self) -> Result<Var<'t>> {
        if self.states.is_empty() {
            return Err(Error::Contract("empty trajectory".into()));
        }
        Var::concat_rows(&self.states)
    }
}

/// Affine readout applied per state; returns `[T, 1]`.
pub fn readout_forecast<'t>(readout: &Linear, p: &Bound<'t>, traj: &CdeTrajectory<'t>) -> Result<Var<'t>> {
    readout.forward(p, traj.stacked()?)
}

/// Trunk plus scalar forecasting head, the structured-only model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdeForecaster {
    pub trunk: CdeTrunk,
    pub readout: Linear,
}

impl CdeForecaster {
    pub fn new(store: &mut ParamStore, init: &mut Init, config: CdeConfig) -> Result<Self> {
        let trunk = CdeTrunk::new(store, init, config)?;
        let readout = Linear::new(store, init, "cde.readout", config.hidden, 1)?;
        Ok(Self { trunk, readout })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, path: &ControlPath, eval_params: &[f64]) -> Result<Var<'t>> {
        let traj = self.trunk.solve(p, path, eval_params)?;
        readout_forecast(&self.readout, p, &traj)
    }
}
