use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::gemm::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn placeholder() -> Self {
        Var(usize::MAX)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRowBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, normed: Vec<f64>, rstd: Vec<f64> },
    Gelu { x: Var, slope: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    Rows { x: Var, start: usize },
    MeanRows { x: Var },
    Sum { x: Var },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    Reshape { x: Var },
}

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and `backward` is a single reverse sweep. Gradients are
/// populated only for nodes that require them and are reachable from the
/// loss; all others report `None`.
///
/// `backward` may run once per graph. A second call returns
/// [`Error::BackwardTwice`] unless [`Graph::zero_grad`] cleared the gradients
/// first.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// GELU value and its derivative at `x`.
fn gelu_with_slope(x: f64) -> (f64, f64) {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    (x * cdf, cdf + x * pdf)
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], values: &[Tensor], v: Var) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; values[v.0].numel()])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Leaf that receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Moves a node's value out of the graph, leaving an empty placeholder.
    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(
            &mut self.values[v.0],
            Tensor {
                shape: vec![1],
                data: vec![0.0],
            },
        )
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like the node's value; zeros when absent.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.values[v.0];
        let data = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; value.numel()]);
        Tensor {
            shape: value.shape.clone(),
            data,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.values[v.0].dims2().ok_or_else(|| Error::InvalidShape {
            op,
            msg: format!("expected a 1-D or 2-D tensor, got {:?}", self.shape(v)),
        })
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    /// `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m x k] * b[n x k]^T`, without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.values[a.0].data(), false, self.values[b.0].data(), trans_b, 0.0, &mut out);
        let requires = self.any_requires(&[a, b]);
        Ok(self.push(
            Tensor { shape: vec![m, n], data: out },
            Op::MatMul { a, b, trans_b },
            requires,
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let requires = self.any_requires(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Add { a, b }, requires))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let requires = self.any_requires(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Mul { a, b }, requires))
    }

    /// Adds a length-`c` vector to every row of an `r x c` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims2("add_row_bias", x)?;
        if self.shape(bias) != [c] {
            return Err(self.mismatch("add_row_bias", x, bias));
        }
        let b = self.values[bias.0].data();
        let data = self.values[x.0]
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let shape = self.shape(x).to_vec();
        let requires = self.any_requires(&[x, bias]);
        Ok(self.push(Tensor { shape, data }, Op::AddRowBias { x, bias }, requires))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.values[x.0].map(|v| v * factor);
        let requires = self.requires[x.0];
        self.push(value, Op::Scale { x, factor }, requires)
    }

    /// Row-wise softmax with max-shift. Errors on NaN input.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.dims2("softmax_rows", x)?;
        let src = self.values[x.0].data();
        if src.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax_rows".into()));
        }
        let mut data = vec![0.0; src.len()];
        for (row, out) in src.chunks(c).zip(data.chunks_mut(c)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            out.iter_mut().for_each(|o| *o /= total);
        }
        let shape = self.shape(x).to_vec();
        let requires = self.requires[x.0];
        Ok(self.push(Tensor { shape, data }, Op::Softmax { x }, requires))
    }

    /// Per-row `(x - mean) / sqrt(var + eps) * gamma + beta`, with population variance.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2("layer_norm_rows", x)?;
        if self.shape(gamma) != [c] {
            return Err(self.mismatch("layer_norm_rows", x, gamma));
        }
        if self.shape(beta) != [c] {
            return Err(self.mismatch("layer_norm_rows", x, beta));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidShape {
                op: "layer_norm_rows",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let src = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let mut normed = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                normed[i * c + j] = h;
                data[i * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let requires = self.any_requires(&[x, gamma, beta]);
        Ok(self.push(
            Tensor { shape, data },
            Op::LayerNorm { x, gamma, beta, normed, rstd },
            requires,
        ))
    }

    /// Exact GELU, `0.5 x (1 + erf(x / sqrt 2))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let requires = self.requires[x.0];
        let src = &self.values[x.0];
        let (value, slope) = if requires {
            let (data, slope) = src.data().iter().map(|&v| gelu_with_slope(v)).unzip();
            (Tensor { shape: src.shape.clone(), data }, slope)
        } else {
            (src.map(|v| 0.5 * v * (1.0 + libm::erf(v * FRAC_1_SQRT_2))), Vec::new())
        };
        self.push(value, Op::Gelu { x, slope }, requires)
    }

    /// Columns `start..start + width` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if width == 0 || start + width > c {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for {c}", start + width),
            });
        }
        let src = self.values[x.0].data();
        let mut data = Vec::with_capacity(r * width);
        for row in src.chunks(c) {
            data.extend_from_slice(&row[start..start + width]);
        }
        let requires = self.requires[x.0];
        Ok(self.push(
            Tensor { shape: vec![r, width], data },
            Op::SliceCols { x, start },
            requires,
        ))
    }

    /// Side-by-side concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidShape {
            op: "concat_cols",
            msg: "nothing to concatenate".into(),
        })?;
        let (r, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2("concat_cols", p)?;
            if pr != r {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.values[p.0].data();
            for i in 0..r {
                data[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let requires = self.any_requires(parts);
        Ok(self.push(
            Tensor { shape: vec![r, total], data },
            Op::ConcatCols { parts: parts.to_vec() },
            requires,
        ))
    }

    /// Stacks tensors vertically. A 1-D tensor contributes a single row.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidShape {
            op: "concat_rows",
            msg: "nothing to concatenate".into(),
        })?;
        let (_, c) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.dims2("concat_rows", p)?;
            if pc != c {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += pr;
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.values[p.0].data());
        }
        let requires = self.any_requires(parts);
        Ok(self.push(
            Tensor { shape: vec![rows, c], data },
            Op::ConcatRows { parts: parts.to_vec() },
            requires,
        ))
    }

    /// Rows `start..start + count` of a 2-D tensor.
    pub fn rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (r, c) = self.dims2("rows", x)?;
        if count == 0 || start + count > r {
            return Err(Error::InvalidShape {
                op: "rows",
                msg: format!("rows {start}..{} out of range for {r}", start + count),
            });
        }
        let data = self.values[x.0].data()[start * c..(start + count) * c].to_vec();
        let requires = self.requires[x.0];
        Ok(self.push(
            Tensor { shape: vec![count, c], data },
            Op::Rows { x, start },
            requires,
        ))
    }

    /// Column means, as a `1 x c` tensor.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("mean_rows", x)?;
        let mut data = vec![0.0; c];
        for row in self.values[x.0].data().chunks(c) {
            axpy(&mut data, row, 1.0);
        }
        data.iter_mut().for_each(|v| *v /= r as f64);
        let requires = self.requires[x.0];
        Ok(self.push(Tensor { shape: vec![1, c], data }, Op::MeanRows { x }, requires))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.values[x.0].data().iter().sum();
        let requires = self.requires[x.0];
        self.push(Tensor::scalar(total), Op::Sum { x }, requires)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.values[x.0].clone().reshape(shape)?;
        let requires = self.requires[x.0];
        Ok(self.push(value, Op::Reshape { x }, requires))
    }

    /// `-log softmax(logits)[label]` for a logit vector, as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.values[logits.0].data();
        if label >= z.len() {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                msg: format!("label {label} out of range for {} logits", z.len()),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cross_entropy".into()));
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let probs = z.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - z[label];
        let requires = self.requires[logits.0];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, label, probs },
            requires,
        ))
    }

    /// Populates gradients of every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.values[loss.0].numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        if !self.requires[loss.0] {
            return Ok(());
        }
        let Graph {
            values,
            ops,
            requires,
            grads,
            ..
        } = self;
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !requires[i] {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            match &ops[i] {
                Op::Leaf => {}
                Op::MatMul { a, b, trans_b } => {
                    let (m, n) = (values[i].shape[0], values[i].shape[1]);
                    let k = values[a.0].shape[1];
                    if requires[a.0] {
                        let bv = values[b.0].data();
                        let ga = grad_slot(grads, values, *a);
                        // dA = dC * B^T, or dC * B when B was used transposed.
                        gemm(m, n, k, &gout, false, bv, !trans_b, 1.0, ga);
                    }
                    if requires[b.0] {
                        let av = values[a.0].data();
                        let gb = grad_slot(grads, values, *b);
                        if *trans_b {
                            gemm(n, m, k, &gout, true, av, false, 1.0, gb);
                        } else {
                            gemm(k, m, n, av, true, &gout, false, 1.0, gb);
                        }
                    }
                }
                Op::Add { a, b } => {
                    for v in [a, b] {
                        if requires[v.0] {
                            axpy(grad_slot(grads, values, *v), &gout, 1.0);
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if requires[a.0] {
                        let bv = values[b.0].data();
                        let ga = grad_slot(grads, values, *a);
                        for ((g, d), y) in ga.iter_mut().zip(&gout).zip(bv) {
                            *g += d * y;
                        }
                    }
                    if requires[b.0] {
                        let av = values[a.0].data();
                        let gb = grad_slot(grads, values, *b);
                        for ((g, d), y) in gb.iter_mut().zip(&gout).zip(av) {
                            *g += d * y;
                        }
                    }
                }
                Op::AddRowBias { x, bias } => {
                    if requires[x.0] {
                        axpy(grad_slot(grads, values, *x), &gout, 1.0);
                    }
                    if requires[bias.0] {
                        let gb = grad_slot(grads, values, *bias);
                        let c = gb.len();
                        for row in gout.chunks(c) {
                            axpy(gb, row, 1.0);
                        }
                    }
                }
                Op::Scale { x, factor } => {
                    if requires[x.0] {
                        axpy(grad_slot(grads, values, *x), &gout, *factor);
                    }
                }
                Op::Softmax { x } => {
                    if requires[x.0] {
                        let c = *values[i].shape.last().unwrap();
                        let y = values[i].data();
                        let gx = grad_slot(grads, values, *x);
                        for ((yr, dr), gr) in y.chunks(c).zip(gout.chunks(c)).zip(gx.chunks_mut(c)) {
                            let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                            for ((g, yv), dv) in gr.iter_mut().zip(yr).zip(dr) {
                                *g += yv * (dv - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, normed, rstd } => {
                    let c = *values[i].shape.last().unwrap();
                    if requires[gamma.0] {
                        let gg = grad_slot(grads, values, *gamma);
                        for (dr, hr) in gout.chunks(c).zip(normed.chunks(c)) {
                            for ((g, d), h) in gg.iter_mut().zip(dr).zip(hr) {
                                *g += d * h;
                            }
                        }
                    }
                    if requires[beta.0] {
                        let gb = grad_slot(grads, values, *beta);
                        for dr in gout.chunks(c) {
                            axpy(gb, dr, 1.0);
                        }
                    }
                    if requires[x.0] {
                        let gam = values[gamma.0].data();
                        let gx = grad_slot(grads, values, *x);
                        let mut dh = vec![0.0; c];
                        for (row, ((dr, hr), gr)) in gout
                            .chunks(c)
                            .zip(normed.chunks(c))
                            .zip(gx.chunks_mut(c))
                            .enumerate()
                        {
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for j in 0..c {
                                dh[j] = dr[j] * gam[j];
                                mean_dh += dh[j];
                                mean_dh_h += dh[j] * hr[j];
                            }
                            mean_dh /= c as f64;
                            mean_dh_h /= c as f64;
                            let s = rstd[row];
                            for j in 0..c {
                                gr[j] += s * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    }
                }
                Op::Gelu { x, slope } => {
                    if requires[x.0] {
                        let gx = grad_slot(grads, values, *x);
                        for ((g, d), s) in gx.iter_mut().zip(&gout).zip(slope) {
                            *g += d * s;
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    if requires[x.0] {
                        let w = values[i].shape[1];
                        let c = values[x.0].shape[1];
                        let gx = grad_slot(grads, values, *x);
                        for (dr, gr) in gout.chunks(w).zip(gx.chunks_mut(c)) {
                            axpy(&mut gr[*start..*start + w], dr, 1.0);
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let total = values[i].shape[1];
                    let mut offset = 0;
                    for p in parts {
                        let w = values[p.0].dims2().unwrap().1;
                        if requires[p.0] {
                            let gp = grad_slot(grads, values, *p);
                            for (dr, gr) in gout.chunks(total).zip(gp.chunks_mut(w)) {
                                axpy(gr, &dr[offset..offset + w], 1.0);
                            }
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = values[p.0].numel();
                        if requires[p.0] {
                            axpy(grad_slot(grads, values, *p), &gout[offset..offset + len], 1.0);
                        }
                        offset += len;
                    }
                }
                Op::Rows { x, start } => {
                    if requires[x.0] {
                        let c = values[i].shape[1];
                        let gx = grad_slot(grads, values, *x);
                        axpy(&mut gx[start * c..start * c + gout.len()], &gout, 1.0);
                    }
                }
                Op::MeanRows { x } => {
                    if requires[x.0] {
                        let (r, c) = values[x.0].dims2().unwrap();
                        let gx = grad_slot(grads, values, *x);
                        for gr in gx.chunks_mut(c) {
                            axpy(gr, &gout, 1.0 / r as f64);
                        }
                    }
                }
                Op::Sum { x } => {
                    if requires[x.0] {
                        let d = gout[0];
                        grad_slot(grads, values, *x).iter_mut().for_each(|g| *g += d);
                    }
                }
                Op::CrossEntropy { logits, label, probs } => {
                    if requires[logits.0] {
                        let d = gout[0];
                        let gl = grad_slot(grads, values, *logits);
                        for (j, (g, p)) in gl.iter_mut().zip(probs).enumerate() {
                            let target = if j == *label { 1.0 } else { 0.0 };
                            *g += d * (p - target);
                        }
                    }
                }
                Op::Reshape { x } => {
                    if requires[x.0] {
                        axpy(grad_slot(grads, values, *x), &gout, 1.0);
                    }
                }
            }
            grads[i] = Some(gout);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_hand_expansion() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let m = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let col = g.constant(Tensor::from_rows(&[&[5.0], &[6.0]]));
        let out = g.matmul(m, col).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 1]);
        assert_eq!(g.value(out).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[
            &[1.0, 1.0],
            &[0.0, 3f64.ln()],
            &[1000.0, 1000.0],
        ]));
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y).data();
        assert!(close(v[0], 0.5, 1e-15) && close(v[1], 0.5, 1e-15));
        assert!(close(v[2], 0.25, 1e-15) && close(v[3], 0.75, 1e-15));
        assert!(close(v[4], 0.5, 1e-15) && close(v[5], 0.5, 1e-15));
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[1.0, f64::NAN]]));
        assert!(matches!(g.softmax_rows(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(&[2], 1.0));
        let zeros = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::from_rows(&[&[7.0, 7.0], &[1.0, 3.0]]));
        let y = g.layer_norm_rows(x, ones, zeros, 1e-12).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!(close(v[2], -1.0, 1e-9) && close(v[3], 1.0, 1e-9));
    }

    #[test]
    fn layer_norm_rejects_bad_eps_and_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let ones = g.constant(Tensor::full(&[3], 1.0));
        let short = g.constant(Tensor::full(&[2], 1.0));
        assert!(g.layer_norm_rows(x, ones, ones, 0.0).is_err());
        assert!(g.layer_norm_rows(x, short, ones, 1e-5).is_err());
    }

    #[test]
    fn gelu_zero_and_antisymmetry_identity() {
        let mut g = Graph::new();
        let xs = [-3.0, -1.2, -0.1, 0.0, 0.4, 2.5];
        let x = g.constant(Tensor::new(vec![6], xs.to_vec()).unwrap());
        let neg = g.scale(x, -1.0);
        let y = g.gelu(x);
        let yn = g.gelu(neg);
        assert_eq!(g.value(y).data()[3], 0.0);
        for (k, &xv) in xs.iter().enumerate() {
            let s = g.value(y).data()[k] - g.value(yn).data()[k];
            assert!(close(s, xv, 1e-14), "{xv}: {s}");
        }
    }

    #[test]
    fn backward_of_sum_of_squares_is_twice_x() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_probs_minus_onehot() {
        let mut g = Graph::new();
        let z = g.param(Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap());
        let loss = g.cross_entropy(z, 2).unwrap();
        g.backward(loss).unwrap();
        let zs = [0.3f64, -1.0, 2.0];
        let total: f64 = zs.iter().map(|v| v.exp()).sum();
        for (j, gv) in g.grad(z).unwrap().iter().enumerate() {
            let p = zs[j].exp() / total;
            let want = p - if j == 2 { 1.0 } else { 0.0 };
            assert!(close(*gv, want, 1e-14));
        }
    }

    #[test]
    fn explicit_softmax_then_log_matches_fused_cross_entropy_gradient() {
        // Composite: softmax_rows, then pick the label column via a one-hot mask.
        let mut g = Graph::new();
        let z = g.param(Tensor::from_rows(&[&[0.5, 1.5]]));
        let p = g.softmax_rows(z).unwrap();
        let mask = g.constant(Tensor::from_rows(&[&[0.0, 1.0]]));
        let picked = g.mul(p, mask).unwrap();
        let prob = g.sum(picked);
        g.backward(prob).unwrap();
        // d p1 / d z = p1 * (onehot - p)
        let p1 = 1.5f64.exp() / (0.5f64.exp() + 1.5f64.exp());
        let gz = g.grad(z).unwrap();
        assert!(close(gz[0], -p1 * (1.0 - p1), 1e-14));
        assert!(close(gz[1], p1 * (1.0 - p1), 1e-14));
    }

    #[test]
    fn second_backward_errors_until_reset() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let loss = g.mul(x, x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::BackwardTwice)));
        g.zero_grad();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_nodes_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::scalar(5.0));
        let side = g.mul(unused, unused).unwrap();
        let loss = g.mul(x, x).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(unused).is_none());
        assert!(g.grad(side).is_none());
        assert_eq!(g.grad_tensor(unused).data(), &[0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(c, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn structural_ops_route_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let left = g.slice_cols(x, 0, 1).unwrap();
        let right = g.slice_cols(x, 1, 2).unwrap();
        let swapped = g.concat_cols(&[right, left]).unwrap();
        let top = g.rows(swapped, 0, 1).unwrap();
        let stacked = g.concat_rows(&[top, swapped]).unwrap();
        let mean = g.mean_rows(stacked).unwrap();
        assert_eq!(g.value(mean).data(), &[3.0, 4.0, 2.0]);
        let loss = g.sum(mean);
        g.backward(loss).unwrap();
        let third = 1.0 / 3.0;
        let want = [2.0 * third, 2.0 * third, 2.0 * third, third, third, third];
        for (a, b) in g.grad(x).unwrap().iter().zip(want) {
            assert!(close(*a, b, 1e-15));
        }
    }
}
