//! Differentiable primitives. Each forward records an [`Op`] whose
//! `backward` scatters the output adjoint into its inputs.

use super::tape::{grad_slot, Node, Tape, Var};
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking the log in cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    Affine(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy(Var, Vec<usize>),
    Embedding(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::MulScalar(a, s) => vec![*a, *s],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Affine(x, _)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::CrossEntropy(x, _)
            | Op::Embedding(x, _)
            | Op::SliceCols(x, _)
            | Op::SliceRows(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Transpose(x) => vec![*x],
        }
    }

    pub(crate) fn backward(&self, nodes: &[Node], out: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match self {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&nodes[a.0].shape);
                let n = nodes[b.0].shape[1];
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(da) = grad_slot(nodes, grads, *a) {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                }
                if let Some(db) = grad_slot(nodes, grads, *b) {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            let row = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *d += aip * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = grad_slot(nodes, grads, *v) {
                        d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if let Some(db) = grad_slot(nodes, grads, *b) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(da) = grad_slot(nodes, grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if let Some(db) = grad_slot(nodes, grads, *b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::MulScalar(x, s) => {
                let xv = &nodes[x.0].value;
                let sv = nodes[s.0].value[0];
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * sv);
                }
                if let Some(ds) = grad_slot(nodes, grads, *s) {
                    ds[0] += g.iter().zip(xv).map(|(gv, xv)| gv * xv).sum::<f64>();
                }
            }
            Op::Affine(x, scale) => {
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * scale);
                }
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let s = &out.value;
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * s[i] * (1.0 - s[i]);
                    }
                }
            }
            Op::Softmax(x) => {
                let c = *out.shape.last().unwrap();
                let s = &out.value;
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    for ((dr, sr), gr) in dx.chunks_mut(c).zip(s.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = sr.iter().zip(gr).map(|(s, g)| s * g).sum();
                        for j in 0..c {
                            dr[j] += sr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *out.shape.last().unwrap();
                let gv = &nodes[gain.0].value;
                if let Some(dg) = grad_slot(nodes, grads, *gain) {
                    for (xr, gr) in xhat.chunks(d).zip(g.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if let Some(db) = grad_slot(nodes, grads, *bias) {
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    let inv_d = 1.0 / d as f64;
                    for (r, ((dr, xr), gr)) in dx.chunks_mut(d).zip(xhat.chunks(d)).zip(g.chunks(d)).enumerate() {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_xh = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_xh += dh * xr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dr[j] += rstd[r] * (dh - inv_d * sum_dh - xr[j] * inv_d * sum_dh_xh);
                        }
                    }
                }
            }
            Op::CrossEntropy(p, labels) => {
                let c = nodes[p.0].shape[1];
                let pv = &nodes[p.0].value;
                let inv_b = 1.0 / labels.len() as f64;
                if let Some(dp) = grad_slot(nodes, grads, *p) {
                    for (b, &l) in labels.iter().enumerate() {
                        let prob = pv[b * c + l];
                        if prob > PROB_FLOOR {
                            dp[b * c + l] -= g[0] * inv_b / prob;
                        }
                    }
                }
            }
            Op::Embedding(table, ids) => {
                let d = nodes[table.0].shape[1];
                if let Some(dt) = grad_slot(nodes, grads, *table) {
                    for (s, &id) in ids.iter().enumerate() {
                        let row = &mut dt[id * d..(id + 1) * d];
                        row.iter_mut().zip(&g[s * d..(s + 1) * d]).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = dims2(&out.shape);
                let mut offset = 0;
                for part in parts {
                    let w = nodes[part.0].shape[1];
                    if let Some(dp) = grad_slot(nodes, grads, *part) {
                        for i in 0..m {
                            for j in 0..w {
                                dp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let (m, w) = dims2(&out.shape);
                let n = nodes[x.0].shape[1];
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    for i in 0..m {
                        for j in 0..w {
                            dx[i * n + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let n = nodes[x.0].shape[1];
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    let off = start * n;
                    dx[off..off + g.len()].iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    let s = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = dims2(&out.shape);
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    for i in 0..m {
                        for j in 0..n {
                            dx[j * m + i] += g[i * n + j];
                        }
                    }
                }
            }
        }
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Logistic function, evaluated on the branch that cannot overflow.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax of one slice, with optional key mask (`false` entries
/// get probability exactly zero). At least one entry must be unmasked.
pub fn softmax_slice(x: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let max = (0..x.len())
        .filter(|&j| keep(j))
        .map(|j| x[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for j in 0..x.len() {
        out[j] = if keep(j) { (x[j] - max).exp() } else { 0.0 };
        total += out[j];
    }
    for v in out.iter_mut() {
        *v /= total;
    }
}

impl Tape {
    fn need_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.need_2d("matmul", a)?;
        let (k2, n) = self.need_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                for (o, bv) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    /// `x[.., n] + b[n]`, broadcasting `b` over leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(b).len();
        if self.shape(x).last() != Some(&n) {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape {
                op: "mul_scalar",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v * sv).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulScalar(x, s)))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).iter().map(|v| scale * v + shift).collect();
        self.push(self.shape(x).to_vec(), out, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last axis where `key_mask[j] == false` removes column
    /// `j` from every row. Used for attention over padded sequences.
    pub fn masked_softmax(&mut self, x: Var, key_mask: &[bool]) -> Result<Var> {
        self.softmax_impl(x, Some(key_mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let c = match self.shape(x).last() {
            Some(&c) if c >= 1 => c,
            _ => return Err(Error::contract("softmax needs a non-empty last axis")),
        };
        if let Some(m) = mask {
            if m.len() != c || !m.iter().any(|&k| k) {
                return Err(Error::contract(
                    "attention mask must match the key axis and keep at least one key",
                ));
            }
        }
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for (o, r) in out.chunks_mut(c).zip(xv.chunks(c)) {
            softmax_slice(r, mask, o);
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x)))
    }

    /// Normalizes each last-axis slice to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.value(gain).len() != d || self.value(bias).len() != d || d == 0 {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-distributions
    /// `probs[B, C]`, with probabilities floored at [`PROB_FLOOR`].
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.need_2d("cross_entropy", probs)?;
        if labels.len() != b {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape(probs).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                bound: c,
            });
        }
        let pv = self.value(probs);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -pv[i * c + l].max(PROB_FLOOR).ln())
            .sum::<f64>()
            / b as f64;
        Ok(self.push(vec![], vec![loss], Op::CrossEntropy(probs, labels.to_vec())))
    }

    /// Gathers rows of `table[V, D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.need_2d("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                what: "embedding table",
                index: bad,
                bound: v,
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding(table, ids.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat of zero tensors"));
        };
        let (m, _) = self.need_2d("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, w) = self.need_2d("concat_cols", p)?;
            if pm != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.need_2d("slice_cols", x)?;
        if start + len > n {
            return Err(Error::Index {
                what: "column slice end",
                index: start + len,
                bound: n,
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        Ok(self.push(vec![m, len], out, Op::SliceCols(x, start)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.need_2d("slice_rows", x)?;
        if start + len > m {
            return Err(Error::Index {
                what: "row slice end",
                index: start + len,
                bound: m,
            });
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        Ok(self.push(vec![len, n], out, Op::SliceRows(x, start)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![], vec![s], Op::Mean(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.need_2d("transpose", x)?;
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(x)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn leaf(t: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> Var {
        t.leaf(&Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut t = Tape::new();
        let i = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = t.matmul(i, m).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = t.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = t.constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.value(p), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn matmul_gradient_of_sum() {
        // Central differences of sum(a.b) at a=[[1,1]], b=[[2],[5]] give [[2,5]].
        let mut t = Tape::new();
        let a = leaf(&mut t, vec![1, 2], vec![1.0, 1.0]);
        let b = t.constant(vec![2, 1], vec![2.0, 5.0]).unwrap();
        let p = t.matmul(a, b).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(a).unwrap(), &[2.0, 5.0]);
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut t = Tape::new();
        let x = t.constant(vec![3], vec![0.0; 3]).unwrap();
        let s = t.softmax(x).unwrap();
        for v in t.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(vec![2], vec![1000.0, 0.0]).unwrap();
        let s = t.softmax(x).unwrap();
        assert!((t.value(s)[0] - 1.0).abs() < 1e-12);
        assert!(t.value(s)[1].is_finite() && t.value(s)[1] >= 0.0);
    }

    #[test]
    fn masked_softmax_zeroes_masked_keys() {
        let mut t = Tape::new();
        let x = t.constant(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 9.0]).unwrap();
        let s = t.masked_softmax(x, &[true, true, false]).unwrap();
        let v = t.value(s);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
        assert!(t.masked_softmax(x, &[false; 3]).is_err());
    }

    #[test]
    fn sigmoid_saturates_inside_unit_interval() {
        let mut t = Tape::new();
        let x = t.constant(vec![3], vec![0.0, 40.0, -40.0]).unwrap();
        let s = t.sigmoid(x);
        let v = t.value(s);
        assert_eq!(v[0], 0.5);
        assert!(v[1] <= 1.0 && v[1] > 0.5);
        assert!(v[2] > 0.0 && v[2] < 0.5);
    }

    #[test]
    fn layer_norm_of_constant_slice_is_bias() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 4], vec![5.0; 4]).unwrap();
        let g = t.constant(vec![4], vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = t.constant(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(t.value(y), &[0.1, 0.2, 0.3, 0.4]);
        assert!(t.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut t = Tape::new();
        let p = t.constant(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let l = t.cross_entropy(p, &[0]).unwrap();
        assert!(t.item(l).abs() < 1e-15);
        let p = t.constant(vec![2, 4], vec![0.25; 8]).unwrap();
        let l = t.cross_entropy(p, &[3, 1]).unwrap();
        assert!((t.item(l) - 4f64.ln()).abs() < 1e-15);
        let l = t.cross_entropy(p, &[0, 4]);
        assert!(matches!(l, Err(Error::Index { index: 4, .. })));
        // Clamped entry: finite loss.
        let l = t.cross_entropy(p, &[0, 0]).unwrap();
        assert!(t.item(l).is_finite());
        let z = t.constant(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let l = t.cross_entropy(z, &[0]).unwrap();
        assert!((t.item(l) + PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_simple_cases() {
        let mut t = Tape::new();
        let w = leaf(&mut t, vec![3], vec![0.3, -1.0, 2.0]);
        let s = t.sum(w);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let w = leaf(&mut t, vec![2], vec![1.0, -2.0]);
        let sq = t.mul(w, w).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(w).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut t = Tape::new();
        let w = leaf(&mut t, vec![2], vec![1.0, 2.0]);
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
        let s = t.sum(w);
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::Contract(_))));
        t.reset();
        let w = leaf(&mut t, vec![2], vec![1.0, 2.0]);
        let s = t.sum(w);
        assert!(t.backward(s).is_ok());
    }

    #[test]
    fn fan_out_adjoints_are_summed() {
        // f(x) = sum(3x) + sum(x*x); df/dx = 3 + 2x.
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![2], vec![0.5, -1.5]);
        let a = t.scale(x, 3.0);
        let a = t.sum(a);
        let b = t.mul(x, x).unwrap();
        let b = t.sum(b);
        let c = t.constant(vec![], vec![0.0]).unwrap();
        let ab = t.add(a, b).unwrap();
        let f = t.add(ab, c).unwrap();
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[4.0, 0.0]);
        assert!(g.wrt(c).is_none());
    }

    #[test]
    fn no_grad_tape_records_values_only() {
        let mut t = Tape::no_grad();
        let w = leaf(&mut t, vec![2], vec![1.0, 2.0]);
        let s = t.sum(w);
        assert_eq!(t.item(s), 3.0);
        let g = t.backward(s).unwrap();
        assert!(g.wrt(w).is_none());
    }
}
