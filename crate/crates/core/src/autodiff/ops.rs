//! Differentiable operations and their backward rules.
//!
//! Binary elementwise operations require identical shapes; the only
//! broadcasting allowed is a single-element operand against a tensor.

use crate::autodiff::tape::{ConvGeometry, Node, NodeId, Op, Var};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn pick(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl<'t> Var<'t> {
    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes();
            let v = &nodes[self.id].value;
            Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
        };
        self.tape.push(value, op)
    }

    fn binary(self, other: Var<'t>, name: &'static str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let shape = broadcast_shape(name, a, b)?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|i| f(pick(a.data(), i), pick(b.data(), i))).collect();
            Tensor::from_parts(shape, data)
        };
        Ok(self.tape.push(value, op))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (value, m, k, n) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::dim("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            matmul_into(a.data(), b.data(), &mut out, m, k, n);
            (Tensor::from_parts(vec![m, n], out), m, k, n)
        };
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(self) -> Result<Var<'t>> {
        let (value, rows, cols) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id].value;
            if a.rank() != 2 {
                return Err(Error::dim("transpose", a.shape(), &[2]));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a.data()[i * c + j];
                }
            }
            (Tensor::from_parts(vec![c, r], out), r, c)
        };
        Ok(self.tape.push(value, Op::Transpose { a: self.id, rows, cols }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add { a: self.id, b: other.id })
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub { a: self.id, b: other.id })
    }

    /// Hadamard product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul { a: self.id, b: other.id })
    }

    /// Multiplication by a constant.
    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(|x| c * x, Op::Scale { a: self.id, c })
    }

    /// Addition of a constant.
    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, Op::Offset { a: self.id })
    }

    /// Adds a length-`n` bias to every last-axis slice of `[..., n]`.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias)?;
        let value = {
            let nodes = self.tape.nodes();
            let (x, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            let n = x.last_dim();
            if b.numel() != n {
                return Err(Error::dim("add_bias", x.shape(), b.shape()));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n) {
                for (v, &bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        Ok(self.tape.push(value, Op::AddBias { x: self.id, b: bias.id }))
    }

    /// Repeats a single row `rows` times: `[1, d]` or `[d]` becomes `[rows, d]`.
    pub fn tile_rows(self, rows: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id].value;
            if a.outer() != 1 || rows == 0 {
                return Err(Error::dim("tile_rows", a.shape(), &[rows]));
            }
            let d = a.last_dim();
            let mut data = Vec::with_capacity(rows * d);
            for _ in 0..rows {
                data.extend_from_slice(a.data());
            }
            Tensor::from_parts(vec![rows, d], data)
        };
        Ok(self.tape.push(value, Op::TileRows { a: self.id }))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh { a: self.id })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid { a: self.id })
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu { a: self.id })
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map(self, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var<'t> {
        self.unary(f, Op::Map { a: self.id, df })
    }

    /// Concatenation along the last axis; all other dimensions must agree.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        for p in parts {
            first.same_tape(p)?;
        }
        let (value, widths) = {
            let nodes = first.tape.nodes();
            let lead = nodes[first.id].value.shape();
            let lead = &lead[..lead.len() - 1];
            let outer = nodes[first.id].value.outer();
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let s = nodes[p.id].value.shape();
                if &s[..s.len() - 1] != lead {
                    return Err(Error::dim("concat_last", nodes[first.id].value.shape(), s));
                }
                widths.push(*s.last().unwrap());
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(outer * total);
            for r in 0..outer {
                for (p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[p.id].value.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            (Tensor::from_parts(shape, data), widths)
        };
        let parts = parts.iter().zip(widths).map(|(p, w)| (p.id, w)).collect();
        Ok(first.tape.push(value, Op::ConcatLast { parts }))
    }

    /// Stacks rank-2 tensors with equal column counts along the first axis.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        for p in parts {
            first.same_tape(p)?;
        }
        let value = {
            let nodes = first.tape.nodes();
            let cols = nodes[first.id].value.last_dim();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.id].value;
                if v.last_dim() != cols || v.rank() > 2 {
                    return Err(Error::dim("concat_rows", nodes[first.id].value.shape(), v.shape()));
                }
                rows += v.outer();
                data.extend_from_slice(v.data());
            }
            Tensor::from_parts(vec![rows, cols], data)
        };
        Ok(first.tape.push(
            value,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.id).collect(),
            },
        ))
    }

    /// Columns `start..start + len` of every last-axis slice.
    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id].value;
            let w = a.last_dim();
            if len == 0 || start + len > w {
                return Err(Error::Bounds {
                    op: "slice_last",
                    detail: format!("{start}..{} of width {w}", start + len),
                });
            }
            let mut data = Vec::with_capacity(a.outer() * len);
            for row in a.data().chunks(w) {
                data.extend_from_slice(&row[start..start + len]);
            }
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::from_parts(shape, data)
        };
        Ok(self.tape.push(value, Op::SliceLast { a: self.id, start }))
    }

    /// Rows `start..start + len` of a rank-2 tensor.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let (value, offset) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id].value;
            let rows = a.outer();
            if a.rank() != 2 || len == 0 || start + len > rows {
                return Err(Error::Bounds {
                    op: "slice_rows",
                    detail: format!("{start}..{} of {rows} rows", start + len),
                });
            }
            let c = a.last_dim();
            (
                Tensor::from_parts(vec![len, c], a.data()[start * c..(start + len) * c].to_vec()),
                start * c,
            )
        };
        Ok(self.tape.push(value, Op::SliceRows { a: self.id, offset }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.tape.nodes()[self.id].value.reshaped(shape)?;
        Ok(self.tape.push(value, Op::Reshape { a: self.id }))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(self) -> Var<'t> {
        let s = self.tape.nodes()[self.id].value.sum();
        self.tape.push(Tensor::scalar(s), Op::Sum { a: self.id })
    }

    pub fn mean(self) -> Var<'t> {
        let s = {
            let nodes = self.tape.nodes();
            let v = &nodes[self.id].value;
            v.sum() / v.numel() as f64
        };
        self.tape.push(Tensor::scalar(s), Op::Mean { a: self.id })
    }

    /// Column means of `[rows, cols]`, giving `[1, cols]`.
    pub fn mean_rows(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes();
            let v = &nodes[self.id].value;
            let (r, c) = (v.outer(), v.last_dim());
            let mut out = vec![0.0; c];
            for row in v.data().chunks(c) {
                for (o, x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
            out.iter_mut().for_each(|o| *o /= r as f64);
            Tensor::from_parts(vec![1, c], out)
        };
        self.tape.push(value, Op::MeanRows { a: self.id })
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&target)?;
        let value = {
            let nodes = self.tape.nodes();
            let (p, t) = (&nodes[self.id].value, &nodes[target.id].value);
            if p.numel() != t.numel() {
                return Err(Error::dim("mse", p.shape(), t.shape()));
            }
            let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
            Tensor::scalar(s / p.numel() as f64)
        };
        Ok(self.tape.push(value, Op::Mse { p: self.id, t: target.id }))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        self.softmax_impl(false)
    }

    /// Softmax over the last axis of `[..., T, T]` where entry `(q, k)` is
    /// kept only when `k <= q`; masked entries are exactly zero.
    pub fn causal_softmax(self) -> Result<Var<'t>> {
        self.softmax_impl(true)
    }

    fn softmax_impl(self, causal: bool) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id].value;
            if !a.is_finite() {
                return Err(Error::Numeric("softmax input"));
            }
            let n = a.last_dim();
            let shape = a.shape();
            if causal && (shape.len() < 2 || shape[shape.len() - 2] != n) {
                return Err(Error::dim("causal_softmax", shape, &[n, n]));
            }
            let mut out = vec![0.0; a.numel()];
            for (r, (row, orow)) in a.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
                let keep = if causal { r % n + 1 } else { n };
                let max = row[..keep].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (o, &x) in orow[..keep].iter_mut().zip(&row[..keep]) {
                    *o = (x - max).exp();
                    total += *o;
                }
                orow[..keep].iter_mut().for_each(|o| *o /= total);
            }
            Tensor::from_parts(shape.to_vec(), out)
        };
        Ok(self.tape.push(value, Op::Softmax { a: self.id }))
    }

    /// Layer normalization over the last axis with population variance and
    /// epsilon [`LAYER_NORM_EPS`], followed by the affine `gamma * x + beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&gamma)?;
        self.same_tape(&beta)?;
        let (value, xhat, inv_std) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let (g, b) = (&nodes[gamma.id].value, &nodes[beta.id].value);
            let n = x.last_dim();
            if n < 2 {
                return Err(Error::dim("layer_norm", x.shape(), &[2]));
            }
            if g.numel() != n || b.numel() != n {
                return Err(Error::dim("layer_norm", x.shape(), g.shape()));
            }
            let mut xhat = Vec::with_capacity(x.numel());
            let mut inv_std = Vec::with_capacity(x.outer());
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks(n) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std.push(inv);
                for j in 0..n {
                    let h = (row[j] - mean) * inv;
                    xhat.push(h);
                    out.push(g.data()[j] * h + b.data()[j]);
                }
            }
            (Tensor::from_parts(x.shape().to_vec(), out), xhat, inv_std)
        };
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
        ))
    }

    /// Unfolds an `[h*w, c]` image into `[oh*ow, k*k*c]` patches (zero padded),
    /// so that a convolution becomes a single matmul.
    pub fn im2col(self, geom: ConvGeometry) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id].value;
            if a.numel() != geom.height * geom.width * geom.channels
                || geom.kernel == 0
                || geom.stride == 0
                || geom.height + 2 * geom.pad < geom.kernel
                || geom.width + 2 * geom.pad < geom.kernel
            {
                return Err(Error::dim(
                    "im2col",
                    a.shape(),
                    &[geom.height * geom.width, geom.channels],
                ));
            }
            let rows = geom.out_height() * geom.out_width();
            let mut out = vec![0.0; rows * geom.patch_len()];
            geom.for_each_tap(|dst, src| out[dst] = a.data()[src]);
            Tensor::from_parts(vec![rows, geom.patch_len()], out)
        };
        Ok(self.tape.push(value, Op::Im2Col { a: self.id, geom }))
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId) -> &'g mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()])
}

/// Adds `g` into the gradient of `id`, reducing to a scalar when `id` was
/// broadcast.
fn acc_broadcast(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, g: impl Iterator<Item = f64>) {
    let dst = acc(grads, nodes, id);
    if dst.len() == 1 {
        dst[0] += g.sum::<f64>();
    } else {
        for (d, v) in dst.iter_mut().zip(g) {
            *d += v;
        }
    }
}

/// Propagates the gradient `g` of node `id` into its inputs.
pub(crate) fn backprop(nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            {
                // dA = dC · Bᵀ
                let da = acc(grads, nodes, a);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            // dB = Aᵀ · dC
            let db = acc(grads, nodes, b);
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let aik = av[i * k + p];
                    if aik == 0.0 {
                        continue;
                    }
                    for (d, &x) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                        *d += aik * x;
                    }
                }
            }
        }
        &Op::Transpose { a, rows, cols } => {
            let da = acc(grads, nodes, a);
            for i in 0..rows {
                for j in 0..cols {
                    da[i * cols + j] += g[j * rows + i];
                }
            }
        }
        &Op::Add { a, b } => {
            acc_broadcast(grads, nodes, a, g.iter().copied());
            acc_broadcast(grads, nodes, b, g.iter().copied());
        }
        &Op::Sub { a, b } => {
            acc_broadcast(grads, nodes, a, g.iter().copied());
            acc_broadcast(grads, nodes, b, g.iter().map(|v| -v));
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            acc_broadcast(grads, nodes, a, g.iter().enumerate().map(|(i, x)| x * pick(bv, i)));
            acc_broadcast(grads, nodes, b, g.iter().enumerate().map(|(i, x)| x * pick(av, i)));
        }
        &Op::Scale { a, c } => {
            for (d, x) in acc(grads, nodes, a).iter_mut().zip(g) {
                *d += c * x;
            }
        }
        &Op::Offset { a } | &Op::Reshape { a } => {
            for (d, x) in acc(grads, nodes, a).iter_mut().zip(g) {
                *d += x;
            }
        }
        &Op::AddBias { x, b } => {
            for (d, v) in acc(grads, nodes, x).iter_mut().zip(g) {
                *d += v;
            }
            let db = acc(grads, nodes, b);
            let n = db.len();
            for row in g.chunks(n) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        &Op::TileRows { a } => {
            let da = acc(grads, nodes, a);
            let n = da.len();
            for row in g.chunks(n) {
                for (d, v) in da.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        &Op::Tanh { a } => {
            for ((d, x), y) in acc(grads, nodes, a).iter_mut().zip(g).zip(out.data()) {
                *d += x * (1.0 - y * y);
            }
        }
        &Op::Sigmoid { a } => {
            for ((d, x), y) in acc(grads, nodes, a).iter_mut().zip(g).zip(out.data()) {
                *d += x * y * (1.0 - y);
            }
        }
        &Op::Relu { a } => {
            let av = nodes[a].value.data();
            for ((d, x), v) in acc(grads, nodes, a).iter_mut().zip(g).zip(av) {
                if *v > 0.0 {
                    *d += x;
                }
            }
        }
        &Op::Map { a, df } => {
            let av = nodes[a].value.data();
            for ((d, x), v) in acc(grads, nodes, a).iter_mut().zip(g).zip(av) {
                *d += x * df(*v);
            }
        }
        Op::ConcatLast { parts } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut col = 0;
            for &(pid, w) in parts {
                let dp = acc(grads, nodes, pid);
                for (r, row) in g.chunks(total).enumerate() {
                    for (d, v) in dp[r * w..(r + 1) * w].iter_mut().zip(&row[col..col + w]) {
                        *d += v;
                    }
                }
                col += w;
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &pid in parts {
                let dp = acc(grads, nodes, pid);
                let len = dp.len();
                for (d, v) in dp.iter_mut().zip(&g[offset..offset + len]) {
                    *d += v;
                }
                offset += len;
            }
        }
        &Op::SliceLast { a, start } => {
            let w = nodes[a].value.last_dim();
            let len = out.last_dim();
            let da = acc(grads, nodes, a);
            for (r, row) in g.chunks(len).enumerate() {
                for (d, v) in da[r * w + start..r * w + start + len].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        &Op::SliceRows { a, offset } => {
            let da = acc(grads, nodes, a);
            for (d, v) in da[offset..offset + g.len()].iter_mut().zip(g) {
                *d += v;
            }
        }
        &Op::Sum { a } => {
            acc(grads, nodes, a).iter_mut().for_each(|d| *d += g[0]);
        }
        &Op::Mean { a } => {
            let da = acc(grads, nodes, a);
            let s = g[0] / da.len() as f64;
            da.iter_mut().for_each(|d| *d += s);
        }
        &Op::MeanRows { a } => {
            let da = acc(grads, nodes, a);
            let c = g.len();
            let r = da.len() / c;
            for row in da.chunks_mut(c) {
                for (d, v) in row.iter_mut().zip(g) {
                    *d += v / r as f64;
                }
            }
        }
        &Op::Mse { p, t } => {
            let (pv, tv) = (nodes[p].value.data(), nodes[t].value.data());
            let s = 2.0 * g[0] / pv.len() as f64;
            for ((d, x), y) in acc(grads, nodes, p).iter_mut().zip(pv).zip(tv) {
                *d += s * (x - y);
            }
            for ((d, x), y) in acc(grads, nodes, t).iter_mut().zip(pv).zip(tv) {
                *d -= s * (x - y);
            }
        }
        &Op::Softmax { a } => {
            let n = out.last_dim();
            let da = acc(grads, nodes, a);
            for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                for ((d, x), y) in drow.iter_mut().zip(grow).zip(yrow) {
                    *d += y * (x - dot);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let n = out.last_dim();
            let gv = nodes[*gamma].value.data();
            {
                let dg = acc(grads, nodes, *gamma);
                for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for ((d, x), h) in dg.iter_mut().zip(grow).zip(hrow) {
                        *d += x * h;
                    }
                }
            }
            {
                let db = acc(grads, nodes, *beta);
                for grow in g.chunks(n) {
                    for (d, x) in db.iter_mut().zip(grow) {
                        *d += x;
                    }
                }
            }
            let dx = acc(grads, nodes, *x);
            let nf = n as f64;
            let mut dh = vec![0.0; n];
            for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                for j in 0..n {
                    dh[j] = grow[j] * gv[j];
                }
                let sum_dh: f64 = dh.iter().sum();
                let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                let inv = inv_std[r];
                for j in 0..n {
                    dx[r * n + j] += inv / nf * (nf * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                }
            }
        }
        &Op::Im2Col { a, geom } => {
            let da = acc(grads, nodes, a);
            geom.for_each_tap(|dst, src| da[src] += g[dst]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let tape = Tape::new();
        let i2 = tape.leaf(Tensor::eye(2));
        let a = tape.leaf(Tensor::matrix(&[vec![1., 2.], vec![3., 4.]]).unwrap());
        let b = tape.leaf(Tensor::matrix(&[vec![5., 6.], vec![7., 8.]]).unwrap());
        assert_eq!(i2.matmul(a).unwrap().to_vec(), vec![1., 2., 3., 4.]);
        assert_eq!(a.matmul(b).unwrap().to_vec(), vec![19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn activations_at_zero() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::scalar(0.0));
        assert_eq!(z.sigmoid().item(), 0.5);
        assert_eq!(z.tanh().item(), 0.0);
        assert_eq!(z.relu().item(), 0.0);
    }

    #[test]
    fn mse_identity_is_zero() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1., 2.]));
        let t = tape.leaf(Tensor::vector(vec![1., 2.]));
        assert_eq!(p.mse(t).unwrap().item(), 0.0);
    }

    #[test]
    fn binary_ops_reject_mismatched_shapes_but_allow_scalars() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2]));
        let b = tape.leaf(Tensor::zeros(&[4]));
        assert!(matches!(a.add(b), Err(Error::Dimension { .. })));
        let s = tape.scalar(3.0);
        assert_eq!(a.add(s).unwrap().to_vec(), vec![3.0; 4]);
    }

    #[test]
    fn slice_out_of_range_is_bounds_error() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.slice_last(2, 2), Err(Error::Bounds { .. })));
        assert!(matches!(a.slice_rows(1, 2), Err(Error::Bounds { .. })));
    }

    #[test]
    fn concat_requires_matching_leading_dims() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 1]));
        assert!(Var::concat_last(&[a, b]).is_err());
        let c = tape.leaf(Tensor::full(&[2, 1], 1.0));
        let ac = Var::concat_last(&[a, c]).unwrap();
        assert_eq!(ac.shape(), vec![2, 4]);
        assert_eq!(ac.to_vec(), vec![0., 0., 0., 1., 0., 0., 0., 1.]);
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
        close(&x.softmax().unwrap().to_vec(), &[1. / 3.; 3], 1e-15);
        let y = tape.leaf(Tensor::vector(vec![0.0, 2f64.ln()]));
        close(&y.softmax().unwrap().to_vec(), &[1. / 3., 2. / 3.], 1e-15);
        let bad = tape.leaf(Tensor::vector(vec![0.0, f64::NAN]));
        assert!(matches!(bad.softmax(), Err(Error::Numeric(_))));
    }

    #[test]
    fn causal_softmax_is_lower_triangular_row_stochastic() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3, 3], vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap());
        let y = x.causal_softmax().unwrap().value();
        for r in 0..3 {
            let row = y.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (c, &v) in row.iter().enumerate() {
                if c > r {
                    assert_eq!(v, 0.0);
                } else {
                    assert!(v > 0.0);
                }
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new();
        let g = tape.leaf(Tensor::full(&[3], 1.0));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let c = tape.leaf(Tensor::vector(vec![5., 5., 5.]));
        assert_eq!(c.layer_norm(g, b).unwrap().to_vec(), vec![0.0; 3]);
        let x = tape.leaf(Tensor::vector(vec![1., 2., 3.]));
        let s = (1.0 / (2.0 / 3.0 + LAYER_NORM_EPS)).sqrt();
        close(&x.layer_norm(g, b).unwrap().to_vec(), &[-s, 0.0, s], 1e-12);
        assert!((s - 1.5f64.sqrt()).abs() < 1e-4);
    }

    #[test]
    fn im2col_identity_kernel_reproduces_image() {
        let tape = Tape::new();
        let img: Vec<f64> = (0..16).map(f64::from).collect();
        let x = tape.leaf(Tensor::new(&[16, 1], img.clone()).unwrap());
        let geom = ConvGeometry {
            height: 4,
            width: 4,
            channels: 1,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let cols = x.im2col(geom).unwrap();
        assert_eq!(cols.shape(), vec![16, 9]);
        // centre tap of each patch is the pixel itself
        let v = cols.value();
        for p in 0..16 {
            assert_eq!(v.row(p)[4], img[p]);
        }
        let strided = ConvGeometry { stride: 2, ..geom };
        assert_eq!(x.im2col(strided).unwrap().shape(), vec![4, 9]);
    }

    #[test]
    fn backward_linear_and_mse_cases() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1., -2., 3.]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x).data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![3.0]));
        let t = tape.leaf(Tensor::vector(vec![1.0]));
        let g = tape.backward(p.mse(t).unwrap()).unwrap();
        assert_eq!(g.get(p).data(), &[4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_nodes_get_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1., 2.]));
        let unused = tape.leaf(Tensor::vector(vec![5., 6.]));
        let g = tape.backward(x.sum()).unwrap();
        assert!(!g.reached(unused));
        assert_eq!(g.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // d/dx sum(x*x + x) = 2x + 1
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.5, -0.5]));
        let y = x.mul(x).unwrap().add(x).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[4.0, 0.0]);
    }
}
