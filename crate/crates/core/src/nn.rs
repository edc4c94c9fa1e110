//! Small layer building blocks shared by the model modules.

use crate::autodiff::{Bound, Init, ParamId, ParamStore, Var};
use crate::error::Result;

/// Affine map `x · W + b` with `W: [in, out]`, applied row-wise to `[rows, in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.w"), init.weight(&[in_dim, out_dim], in_dim))?;
        let bias = store.add(format!("{name}.b"), init.bias(out_dim))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p[self.weight])?.add_bias(p[self.bias])
    }
}

/// Stack of linear layers with relu between them (none after the last).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, widths: &[usize]) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, init, &format!("{name}.l{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, mut x: Var<'t>) -> Result<Var<'t>> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(p, x)?;
            if i < last {
                x = x.relu();
            }
        }
        Ok(x)
    }
}
