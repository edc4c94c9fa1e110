//! Stacked LSTM baseline with the standard gate equations:
//!
//! ```text
//! f = σ(W_f x + U_f h + b_f)    i = σ(W_i x + U_i h + b_i)    o = σ(W_o x + U_o h + b_o)
//! c' = f ⊙ c + i ⊙ tanh(W_c x + U_c h + b_c)
//! h' = o ⊙ tanh(c')
//! ```

use crate::autodiff::{Bound, Init, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;

const GATES: [&str; 4] = ["f", "i", "o", "c"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmLayer {
    /// Input weights `[in, h]` in gate order f, i, o, c.
    pub w: [ParamId; 4],
    /// Recurrent weights `[h, h]`.
    pub u: [ParamId; 4],
    pub b: [ParamId; 4],
    pub input: usize,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for g in GATES {
            w.push(store.add(format!("{name}.W_{g}"), init.weight(&[input, hidden], input))?);
            u.push(store.add(format!("{name}.U_{g}"), init.weight(&[hidden, hidden], hidden))?);
            b.push(store.add(format!("{name}.b_{g}"), init.bias(hidden))?);
        }
        let arr = |v: Vec<ParamId>| -> [ParamId; 4] { v.try_into().unwrap() };
        Ok(Self {
            w: arr(w),
            u: arr(u),
            b: arr(b),
            input,
            hidden,
        })
    }

    /// One step on `[1, in]` input with `[1, h]` states.
    pub fn cell<'t>(&self, p: &Bound<'t>, x: Var<'t>, h: Var<'t>, c: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let pre = |g: usize| -> Result<Var<'t>> {
            x.matmul(p[self.w[g]])?.add(h.matmul(p[self.u[g]])?)?.add_bias(p[self.b[g]])
        };
        let f = pre(0)?.sigmoid();
        let i = pre(1)?.sigmoid();
        let o = pre(2)?.sigmoid();
        let cand = pre(3)?.tanh();
        let c_next = f.mul(c)?.add(i.mul(cand)?)?;
        let h_next = o.mul(c_next.tanh())?;
        Ok((h_next, c_next))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, init: &mut Init, input: usize, hidden: usize, depth: usize) -> Result<Self> {
        if input == 0 || hidden == 0 || depth == 0 {
            return Err(Error::Config("lstm sizes must be positive".into()));
        }
        let layers = (0..depth)
            .map(|l| {
                let width = if l == 0 { input } else { hidden };
                LstmLayer::new(store, init, &format!("lstm.l{}", l + 1), width, hidden)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, hidden })
    }

    pub fn input(&self) -> usize {
        self.layers[0].input
    }

    /// Runs `seq: [T, d]` from zero states; returns the top layer's hidden
    /// states as `[T, h]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, seq: Var<'t>) -> Result<Var<'t>> {
        let shape = seq.shape();
        if shape.len() != 2 || shape[1] != self.input() {
            return Err(Error::dim("lstm_forward", &[0, self.input()], &shape));
        }
        let tape = seq.tape();
        let zero = || tape.leaf(Tensor::zeros(&[1, self.hidden]));
        let mut rows: Vec<Var<'t>> = (0..shape[0]).map(|t| seq.slice_rows(t, 1)).collect::<Result<_>>()?;
        for layer in &self.layers {
            let (mut h, mut c) = (zero(), zero());
            for row in rows.iter_mut() {
                (h, c) = layer.cell(p, *row, h, c)?;
                *row = h;
            }
        }
        Var::concat_rows(&rows)
    }
}

/// Stacked LSTM with a scalar forecasting head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmForecaster {
    pub lstm: Lstm,
    pub head: Linear,
}

impl LstmForecaster {
    pub fn new(store: &mut ParamStore, init: &mut Init, input: usize, hidden: usize) -> Result<Self> {
        let lstm = Lstm::new(store, init, input, hidden, 2)?;
        let head = Linear::new(store, init, "lstm.head", hidden, 1)?;
        Ok(Self { lstm, head })
    }

    /// `[T, 1]` predictions, one per input row.
    pub fn forward<'t>(&self, p: &Bound<'t>, seq: Var<'t>) -> Result<Var<'t>> {
        forecast_head(&self.head, p, self.lstm.forward(p, seq)?)
    }
}

pub fn forecast_head<'t>(head: &Linear, p: &Bound<'t>, hidden: Var<'t>) -> Result<Var<'t>> {
    head.forward(p, hidden)
}
