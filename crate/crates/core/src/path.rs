//! Control paths built from irregularly sampled observation sequences.
//!
//! A [`ControlPath`] is piecewise cubic in a path parameter `s`. Each segment
//! stores power-basis coefficients in the local coordinate `u = (s - s_j) /
//! (s_{j+1} - s_j)` in `[0, 1]`, one set per augmented channel. Channel 0 is
//! always physical time; the observed channels follow.
//!
//! For the `linear`, `hermite_backward` and `natural_cubic` schemes the path
//! parameter is physical time. The `rectilinear` scheme uses two segments per
//! new observation (time advances, then values jump) and the parameter
//! advances by one per segment.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Linear,
    HermiteBackward,
    NaturalCubic,
    Rectilinear,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::Linear,
        Scheme::HermiteBackward,
        Scheme::NaturalCubic,
        Scheme::Rectilinear,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Linear => "linear",
            Scheme::HermiteBackward => "hermite_backward",
            Scheme::NaturalCubic => "natural_cubic",
            Scheme::Rectilinear => "rectilinear",
        }
    }

    /// Whether the path up to an observation never depends on later data.
    pub fn is_causal(self) -> bool {
        matches!(self, Scheme::HermiteBackward | Scheme::Rectilinear)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown interpolation scheme `{s}`")))
    }
}

/// Observations at strictly increasing times; `None` marks a missing entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSequence {
    times: Vec<f64>,
    values: Vec<Vec<Option<f64>>>,
    channels: usize,
}

impl ObservationSequence {
    pub fn new(times: Vec<f64>, values: Vec<Vec<Option<f64>>>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Build("observation sequence is empty".into()));
        }
        if times.len() != values.len() {
            return Err(Error::dim("observations", &[times.len()], &[values.len()]));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Build("observation times must be finite and strictly increasing".into()));
        }
        let channels = values[0].len();
        if channels == 0 {
            return Err(Error::Build("observations need at least one channel".into()));
        }
        if values.iter().any(|row| row.len() != channels) {
            return Err(Error::Build("ragged observation rows".into()));
        }
        if values.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Build("observed values must be finite".into()));
        }
        Ok(Self {
            times,
            values,
            channels,
        })
    }

    pub fn fully_observed(times: Vec<f64>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let values = rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect();
        Self::new(times, values)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Vec<Option<f64>>] {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn check_complete_baseline(&self) -> Result<()> {
        for ch in 0..self.channels {
            if self.values.iter().all(|row| row[ch].is_none()) {
                return Err(Error::Build(format!("channel {ch} has no observed values")));
            }
        }
        if let Some(ch) = self.values[0].iter().position(Option::is_none) {
            return Err(Error::Build(format!(
                "first observation must be fully observed (channel {ch} missing)"
            )));
        }
        Ok(())
    }

    /// Column of channel `ch` with gaps filled according to `scheme`.
    fn filled_channel(&self, ch: usize, scheme: Scheme) -> Vec<f64> {
        let obs: Vec<(f64, f64)> = self
            .times
            .iter()
            .zip(&self.values)
            .filter_map(|(&t, row)| row[ch].map(|v| (t, v)))
            .collect();
        if obs.len() == self.len() {
            return obs.into_iter().map(|p| p.1).collect();
        }
        let (ot, ov): (Vec<f64>, Vec<f64>) = obs.iter().copied().unzip();
        let m2 = match scheme {
            Scheme::NaturalCubic => Some(natural_second_derivatives(&ot, &ov)),
            _ => None,
        };
        let mut last = ov[0];
        self.times
            .iter()
            .zip(&self.values)
            .map(|(&t, row)| {
                if let Some(v) = row[ch] {
                    last = v;
                    return v;
                }
                // forward-constant past the last observation, and always for
                // the causal schemes
                let after = ot.partition_point(|&x| x <= t);
                if after >= ot.len() || scheme.is_causal() {
                    return last;
                }
                let i = after - 1;
                let h = ot[i + 1] - ot[i];
                let u = (t - ot[i]) / h;
                match &m2 {
                    Some(m) => {
                        let c = natural_segment(ov[i], ov[i + 1], m[i], m[i + 1], h);
                        horner(&c, u)
                    }
                    None => ov[i] + u * (ov[i + 1] - ov[i]),
                }
            })
            .collect()
    }
}

/// Second derivatives of the natural cubic spline through `(t, x)`.
fn natural_second_derivatives(t: &[f64], x: &[f64]) -> Vec<f64> {
    let n = t.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    // tridiagonal system for interior unknowns m[1..n-1]
    let k = n - 2;
    let mut diag = vec![0.0; k];
    let mut upper = vec![0.0; k];
    let mut rhs = vec![0.0; k];
    for j in 0..k {
        let i = j + 1;
        let h0 = t[i] - t[i - 1];
        let h1 = t[i + 1] - t[i];
        diag[j] = 2.0 * (h0 + h1);
        upper[j] = h1;
        rhs[j] = 6.0 * ((x[i + 1] - x[i]) / h1 - (x[i] - x[i - 1]) / h0);
    }
    // Thomas algorithm; sub-diagonal entry j is h_{j} = t[j+1] - t[j]
    for j in 1..k {
        let lower = t[j + 1] - t[j];
        let w = lower / diag[j - 1];
        diag[j] -= w * upper[j - 1];
        rhs[j] -= w * rhs[j - 1];
    }
    m[k] = rhs[k - 1] / diag[k - 1];
    for j in (0..k - 1).rev() {
        m[j + 1] = (rhs[j] - upper[j] * m[j + 2]) / diag[j];
    }
    m
}

fn natural_segment(x0: f64, x1: f64, m0: f64, m1: f64, h: f64) -> [f64; 4] {
    let slope = (x1 - x0) / h - h * (2.0 * m0 + m1) / 6.0;
    [x0, slope * h, m0 * h * h / 2.0, (m1 - m0) * h * h / 6.0]
}

fn hermite_segment(x0: f64, x1: f64, m0: f64, m1: f64, h: f64) -> [f64; 4] {
    let (d0, d1) = (h * m0, h * m1);
    [
        x0,
        d0,
        -3.0 * x0 - 2.0 * d0 + 3.0 * x1 - d1,
        2.0 * x0 + d0 - 2.0 * x1 + d1,
    ]
}

fn linear_segment(x0: f64, x1: f64) -> [f64; 4] {
    [x0, x1 - x0, 0.0, 0.0]
}

#[inline]
fn horner(c: &[f64; 4], u: f64) -> f64 {
    c[0] + u * (c[1] + u * (c[2] + u * c[3]))
}

#[inline]
fn horner_derivative(c: &[f64; 4], u: f64) -> f64 {
    c[1] + u * (2.0 * c[2] + u * 3.0 * c[3])
}

/// Interpolated, time-augmented control path.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPath {
    scheme: Scheme,
    knots: Vec<f64>,
    knot_values: Vec<Vec<f64>>,
    /// `[segment][channel]` coefficients in the local coordinate.
    coeffs: Vec<Vec<[f64; 4]>>,
    observation_params: Vec<f64>,
    observation_times: Vec<f64>,
}

impl ControlPath {
    pub fn build(obs: &ObservationSequence, scheme: Scheme) -> Result<Self> {
        obs.check_complete_baseline()?;
        let n = obs.len();
        let c = obs.channels();
        let columns: Vec<Vec<f64>> = (0..c).map(|ch| obs.filled_channel(ch, scheme)).collect();
        let row = |i: usize| -> Vec<f64> {
            let mut v = Vec::with_capacity(c + 1);
            v.push(obs.times[i]);
            v.extend(columns.iter().map(|col| col[i]));
            v
        };
        let t = &obs.times;

        if scheme == Scheme::Rectilinear {
            let mut knots = vec![0.0];
            let mut knot_values = vec![row(0)];
            for i in 1..n {
                let mut advanced = knot_values.last().unwrap().clone();
                advanced[0] = t[i];
                knots.push((2 * i - 1) as f64);
                knot_values.push(advanced);
                knots.push((2 * i) as f64);
                knot_values.push(row(i));
            }
            let coeffs = knot_values
                .windows(2)
                .map(|w| w[0].iter().zip(&w[1]).map(|(&a, &b)| linear_segment(a, b)).collect())
                .collect();
            return Ok(Self {
                scheme,
                knots,
                knot_values,
                coeffs,
                observation_params: (0..n).map(|i| (2 * i) as f64).collect(),
                observation_times: t.clone(),
            });
        }

        let knot_values: Vec<Vec<f64>> = (0..n).map(row).collect();
        let second: Vec<Vec<f64>> = match scheme {
            Scheme::NaturalCubic => columns.iter().map(|col| natural_second_derivatives(t, col)).collect(),
            _ => Vec::new(),
        };
        let mut coeffs = Vec::with_capacity(n.saturating_sub(1));
        for i in 0..n.saturating_sub(1) {
            let h = t[i + 1] - t[i];
            let mut seg = Vec::with_capacity(c + 1);
            seg.push(linear_segment(t[i], t[i + 1]));
            for (ch, col) in columns.iter().enumerate() {
                let (x0, x1) = (col[i], col[i + 1]);
                seg.push(match scheme {
                    Scheme::Linear => linear_segment(x0, x1),
                    Scheme::HermiteBackward => {
                        let backward = |j: usize| {
                            if j == 0 {
                                0.0
                            } else {
                                (col[j] - col[j - 1]) / (t[j] - t[j - 1])
                            }
                        };
                        hermite_segment(x0, x1, backward(i), backward(i + 1), h)
                    }
                    Scheme::NaturalCubic => {
                        natural_segment(x0, x1, second[ch][i], second[ch][i + 1], h)
                    }
                    Scheme::Rectilinear => unreachable!(),
                });
            }
            coeffs.push(seg);
        }
        Ok(Self {
            scheme,
            knots: t.clone(),
            knot_values,
            coeffs,
            observation_params: t.clone(),
            observation_times: t.clone(),
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Augmented width `c + 1`.
    pub fn dim(&self) -> usize {
        self.knot_values[0].len()
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn knot_values(&self) -> &[Vec<f64>] {
        &self.knot_values
    }

    pub fn num_segments(&self) -> usize {
        self.coeffs.len()
    }

    pub fn start(&self) -> f64 {
        self.knots[0]
    }

    pub fn end(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    /// Path parameter at which observation `i` is fully incorporated.
    pub fn observation_param(&self, i: usize) -> f64 {
        self.observation_params[i]
    }

    pub fn observation_params(&self) -> &[f64] {
        &self.observation_params
    }

    /// Path parameter at which the time channel first reaches physical time `t`.
    pub fn param_at_time(&self, t: f64) -> f64 {
        let times = &self.observation_times;
        if self.scheme != Scheme::Rectilinear {
            let scale = (self.end() - self.start()) / (times[times.len() - 1] - times[0]).max(f64::MIN_POSITIVE);
            return if times.len() == 1 {
                self.start()
            } else {
                self.start() + (t - times[0]) * scale
            };
        }
        if t <= times[0] {
            return self.start();
        }
        let i = times.partition_point(|&x| x < t);
        if i >= times.len() {
            return self.end();
        }
        let frac = (t - times[i - 1]) / (times[i] - times[i - 1]);
        let (k0, k1) = (self.knots[2 * i - 2], self.knots[2 * i - 1]);
        k0 + frac * (k1 - k0)
    }

    /// Segment containing `s` (the one starting at or before it).
    pub fn segment_index(&self, s: f64) -> usize {
        let j = self.knots.partition_point(|&k| k <= s);
        j.saturating_sub(1).min(self.coeffs.len().saturating_sub(1))
    }

    fn local(&self, seg: usize, s: f64) -> (f64, f64) {
        let h = self.knots[seg + 1] - self.knots[seg];
        ((s - self.knots[seg]) / h, h)
    }

    /// `X(s)`, clamped to the end knots outside the knot range.
    pub fn eval_point(&self, s: f64) -> Vec<f64> {
        if self.coeffs.is_empty() || s <= self.start() {
            return self.knot_values[0].clone();
        }
        if s >= self.end() {
            return self.knot_values.last().unwrap().clone();
        }
        let seg = self.segment_index(s);
        if s == self.knots[seg] {
            return self.knot_values[seg].clone();
        }
        let (u, _) = self.local(seg, s);
        self.coeffs[seg].iter().map(|c| horner(c, u)).collect()
    }

    /// `dX/ds`: right-hand at interior knots, left-hand at the final knot,
    /// zero outside the knot range.
    pub fn eval_derivative(&self, s: f64) -> Vec<f64> {
        if self.coeffs.is_empty() || s < self.start() || s > self.end() {
            return vec![0.0; self.dim()];
        }
        let seg = self.segment_index(s);
        self.segment_derivative(seg, s)
    }

    /// Derivative of segment `seg`'s polynomial at `s`, which may be either
    /// end point of that segment.
    pub fn segment_derivative(&self, seg: usize, s: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.segment_derivative_into(seg, s, &mut out);
        out
    }

    pub fn segment_derivative_into(&self, seg: usize, s: f64, out: &mut [f64]) {
        let (u, h) = self.local(seg, s);
        for (o, c) in out.iter_mut().zip(&self.coeffs[seg]) {
            *o = horner_derivative(c, u) / h;
        }
    }

    /// Value of segment `seg`'s polynomial at its local coordinate `u`.
    pub fn segment_point(&self, seg: usize, u: f64) -> Vec<f64> {
        self.coeffs[seg].iter().map(|c| horner(c, u)).collect()
    }

    /// Same path image under the parameter map `s -> scale * s + shift`.
    /// Channel values, including the time channel, are unchanged.
    pub fn reparameterize(&self, scale: f64, shift: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite() && shift.is_finite()) {
            return Err(Error::Contract(format!("invalid reparameterization scale {scale}")));
        }
        let map = |v: &Vec<f64>| v.iter().map(|s| scale * s + shift).collect::<Vec<_>>();
        Ok(Self {
            knots: map(&self.knots),
            observation_params: map(&self.observation_params),
            ..self.clone()
        })
    }
}

/// Forward-filled value matrix `[T, c]` and time deltas (`0` for the first row).
pub fn forward_fill(obs: &ObservationSequence) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if let Some(ch) = obs.values[0].iter().position(Option::is_none) {
        return Err(Error::Build(format!(
            "first observation must be fully observed (channel {ch} missing)"
        )));
    }
    let mut last: Vec<f64> = obs.values[0].iter().map(|v| v.unwrap()).collect();
    let filled = obs
        .values
        .iter()
        .map(|row| {
            for (l, v) in last.iter_mut().zip(row) {
                if let Some(v) = v {
                    *l = *v;
                }
            }
            last.clone()
        })
        .collect();
    let deltas = std::iter::once(0.0)
        .chain(obs.times.windows(2).map(|w| w[1] - w[0]))
        .collect();
    Ok((filled, deltas))
}
