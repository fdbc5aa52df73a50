use std::collections::HashSet;

use super::{bilinear_axis, dims2, dims3, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x[m,n] + b[n]`
    AddRowVector(Var, Var),
    /// `x[m,n] + b[m]`
    AddColVector(Var, Var),
    /// `x[m,n] * s[m]`
    MulRows(Var, Var),
    /// `x * s` with `s` of one element
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Sum(Var),
    Mean(Var),
    RowMean(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        groups: usize,
    },
    Resize(Var),
    Concat(Vec<Var>),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows {
        base: Var,
        rows: Var,
        idx: Vec<usize>,
    },
    ChannelOuter(Var, Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Param | Constant => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRowVector(a, b)
            | AddColVector(a, b) | MulRows(a, b) | MulScalarVar(a, b) | ConcatCols(a, b)
            | ChannelOuter(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | AddScalar(a) | Relu(a) | Sigmoid(a) | Ln(a)
            | Powf(a, _) | Clamp(a, _, _) | SoftmaxRows(a) | Sum(a) | Mean(a) | RowMean(a)
            | Reshape(a) | Resize(a) | GatherRows(a, _) => vec![*a],
            LayerNormRows { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Concat(vs) => vs.clone(),
            ScatterRows { base, rows, .. } => vec![*base, *rows],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of tensor operations for reverse-mode differentiation.
///
/// Nodes are stored in creation order, so every operation's inputs precede it.
/// The tape also tallies multiply-accumulates performed by `matmul` and
/// `grouped_conv2d`, which is how attention cost is instrumented.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    /// Gradient for `var`. Constants and nodes that do not depend on a
    /// parameter return `None`; parameters unreachable from the loss get zeros.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Register a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Param, true)
    }

    /// Register a leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        self.push(value, op)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = dims2(self.shape(a), "matmul")?;
        let [k2, n] = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return shape_err("matmul", self.shape(a), self.shape(b));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.macs += (m * k * n) as u64;
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let [m, n] = dims2(self.shape(a), "transpose")?;
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::new([n, m], out)?, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds `b[n]` to every row of `x[m, n]`.
    pub fn add_row_vector(&mut self, x: Var, b: Var) -> Result<Var> {
        let [m, n] = dims2(self.shape(x), "add_row_vector")?;
        if self.shape(b) != [n] {
            return shape_err("add_row_vector", self.shape(x), self.shape(b));
        }
        let (xd, bd) = (self.data(x), self.data(b));
        let out = (0..m * n).map(|i| xd[i] + bd[i % n]).collect();
        Ok(self.push(Tensor::new([m, n], out)?, Op::AddRowVector(x, b)))
    }

    /// Adds `b[i]` to every entry of row `i` of `x[m, n]`.
    pub fn add_col_vector(&mut self, x: Var, b: Var) -> Result<Var> {
        let [m, n] = dims2(self.shape(x), "add_col_vector")?;
        if self.shape(b) != [m] {
            return shape_err("add_col_vector", self.shape(x), self.shape(b));
        }
        let (xd, bd) = (self.data(x), self.data(b));
        let out = (0..m * n).map(|i| xd[i] + bd[i / n]).collect();
        Ok(self.push(Tensor::new([m, n], out)?, Op::AddColVector(x, b)))
    }

    /// Scales row `i` of `x[m, n]` by `s[i]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let [m, n] = dims2(self.shape(x), "mul_rows")?;
        if self.shape(s) != [m] {
            return shape_err("mul_rows", self.shape(x), self.shape(s));
        }
        let (xd, sd) = (self.data(x), self.data(s));
        let out = (0..m * n).map(|i| xd[i] * sd[i / n]).collect();
        Ok(self.push(Tensor::new([m, n], out)?, Op::MulRows(x, s)))
    }

    /// Multiplies every entry of `x` by the single entry of `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err("mul_scalar_var", self.shape(x), self.shape(s));
        }
        let sv = self.data(s)[0];
        Ok(self.map(x, Op::MulScalarVar(x, s), |v| v * sv))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| if v < 0.0 { 0.0 } else { v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.map(x, Op::Ln(x), f64::ln)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.map(x, Op::Powf(x, p), |v| v.powf(p))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Row-wise softmax of a 2-D tensor, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let [m, n] = dims2(self.shape(x), "softmax_rows")?;
        let xd = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * n..(i + 1) * n];
            let mut total = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        Ok(self.push(Tensor::new([m, n], out)?, Op::SoftmaxRows(x)))
    }

    /// Per-row layer normalization with learnable `gain[n]` and `bias[n]`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let [m, n] = dims2(self.shape(x), "layer_norm_rows")?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return shape_err("layer_norm_rows", self.shape(x), self.shape(gain));
        }
        let (xd, gd, bd) = (self.data(x), self.data(gain), self.data(bias));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let (mean, rstd) = row_stats(row, eps);
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * rstd * gd[j] + bd[j];
            }
        }
        let op = Op::LayerNormRows { x, gain, bias, eps };
        Ok(self.push(Tensor::new([m, n], out)?, op))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean of each row: `[m, n] -> [m]`.
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let [m, n] = dims2(self.shape(x), "row_mean")?;
        let xd = self.data(x);
        let out = (0..m)
            .map(|i| xd[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        Ok(self.push(Tensor::new([m], out)?, Op::RowMean(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Grouped 2-D convolution with zero "same" padding.
    ///
    /// `input` is `[C, H, W]`, `kernel` is `[C_out, C / groups, kh, kw]` with odd
    /// `kh` and `kw`. Output channel `o` reads only the input channels of group
    /// `o / (C_out / groups)`.
    pub fn grouped_conv2d(&mut self, input: Var, kernel: Var, groups: usize) -> Result<Var> {
        let [c, h, w] = dims3(self.shape(input), "grouped_conv2d")?;
        let (co, cg, kh, kw) = match *self.shape(kernel) {
            [a, b, d, e] => (a, b, d, e),
            _ => return shape_err("grouped_conv2d", self.shape(input), self.shape(kernel)),
        };
        if groups == 0 || c % groups != 0 || co % groups != 0 {
            return Err(Error::Config(format!(
                "grouped_conv2d: channels in={c} out={co} not divisible by groups={groups}"
            )));
        }
        if cg != c / groups || kh % 2 == 0 || kw % 2 == 0 {
            return shape_err("grouped_conv2d", self.shape(input), self.shape(kernel));
        }
        let geo = ConvGeometry {
            c,
            h,
            w,
            co,
            cg,
            kh,
            kw,
            groups,
        };
        let (xd, kd) = (self.data(input), self.data(kernel));
        let mut out = vec![0.0; co * h * w];
        geo.for_each_tap(|o, y, x, _, kidx, iidx| {
            out[(o * h + y) * w + x] += xd[iidx] * kd[kidx];
        });
        self.macs += (co * h * w * cg * kh * kw) as u64;
        let op = Op::Conv2d {
            input,
            kernel,
            groups,
        };
        Ok(self.push(Tensor::new([co, h, w], out)?, op))
    }

    /// Align-corners-false bilinear resize of a `[C, H, W]` tensor.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [c, h, w] = dims3(self.shape(x), "bilinear_resize")?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "bilinear_resize: cannot resize {h}x{w} to {out_h}x{out_w}"
            )));
        }
        let (ys, xs) = (bilinear_axis(h, out_h), bilinear_axis(w, out_w));
        let xd = self.data(x);
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &xd[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let top = (1.0 - lx) * plane[y0 * w + x0] + lx * plane[y0 * w + x1];
                    let bot = (1.0 - lx) * plane[y1 * w + x0] + lx * plane[y1 * w + x1];
                    out[(ch * out_h + oy) * out_w + ox] = (1.0 - ly) * top + ly * bot;
                }
            }
        }
        Ok(self.push(Tensor::new([c, out_h, out_w], out)?, Op::Resize(x)))
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return shape_err("concat", self.shape(*first), s);
            }
            lead += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec())))
    }

    /// `[m, p] ++ [m, q] -> [m, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, p] = dims2(self.shape(a), "concat_cols")?;
        let [m2, q] = dims2(self.shape(b), "concat_cols")?;
        if m != m2 {
            return shape_err("concat_cols", self.shape(a), self.shape(b));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&ad[i * p..(i + 1) * p]);
            out.extend_from_slice(&bd[i * q..(i + 1) * q]);
        }
        Ok(self.push(Tensor::new([m, p + q], out)?, Op::ConcatCols(a, b)))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let [m, n] = dims2(self.shape(x), "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Contract(format!(
                "gather_rows: index {bad} out of bounds for {m} rows"
            )));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&xd[i * n..(i + 1) * n]);
        }
        Ok(self.push(Tensor::new([idx.len(), n], out)?, Op::GatherRows(x, idx.to_vec())))
    }

    /// Copy of `base` with row `idx[r]` replaced by row `r` of `rows`.
    pub fn scatter_rows(&mut self, base: Var, idx: &[usize], rows: Var) -> Result<Var> {
        let [m, n] = dims2(self.shape(base), "scatter_rows")?;
        if self.shape(rows) != [idx.len(), n] {
            return shape_err("scatter_rows", self.shape(base), self.shape(rows));
        }
        let mut seen = HashSet::with_capacity(idx.len());
        for &i in idx {
            if i >= m {
                return Err(Error::Contract(format!(
                    "scatter_rows: index {i} out of bounds for {m} rows"
                )));
            }
            if !seen.insert(i) {
                return Err(Error::Contract(format!("scatter_rows: duplicate index {i}")));
            }
        }
        let mut out = self.data(base).to_vec();
        let rd = self.data(rows);
        for (r, &i) in idx.iter().enumerate() {
            out[i * n..(i + 1) * n].copy_from_slice(&rd[r * n..(r + 1) * n]);
        }
        let op = Op::ScatterRows {
            base,
            rows,
            idx: idx.to_vec(),
        };
        Ok(self.push(Tensor::new([m, n], out)?, op))
    }

    /// Per-channel outer products: `r[n, m]`, `c[n, m]` to `out[m, n, n]` with
    /// `out[k, a, b] = r[a, k] * c[b, k]`.
    pub fn channel_outer(&mut self, r: Var, c: Var) -> Result<Var> {
        let [n, m] = dims2(self.shape(r), "channel_outer")?;
        if self.shape(c) != [n, m] {
            return shape_err("channel_outer", self.shape(r), self.shape(c));
        }
        let (rd, cd) = (self.data(r), self.data(c));
        let mut out = vec![0.0; m * n * n];
        for k in 0..m {
            for a in 0..n {
                for b in 0..n {
                    out[(k * n + a) * n + b] = rd[a * m + k] * cd[b * m + k];
                }
            }
        }
        Ok(self.push(Tensor::new([m, n, n], out)?, Op::ChannelOuter(r, c)))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                match g {
                    Some(data) => Some(Tensor { shape, data }),
                    None if matches!(node.op, Op::Param) => Some(Tensor::zeros(shape)),
                    None => None,
                }
            })
            .collect();
        Ok(Gradients { grads, visited })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Param | Op::Constant => {}
            Op::MatMul(a, b) => {
                let [m, k] = two(self.shape(*a));
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |da| {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            da[i * k + p] += brow.iter().zip(grow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let [m, n] = two(self.shape(*a));
                acc(*a, &mut |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * ad[i];
                    }
                });
            }
            Op::AddRowVector(x, b) => {
                let n = self.shape(*x)[1];
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (i, &gv) in g.iter().enumerate() {
                        d[i % n] += gv;
                    }
                });
            }
            Op::AddColVector(x, b) => {
                let n = self.shape(*x)[1];
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (i, &gv) in g.iter().enumerate() {
                        d[i / n] += gv;
                    }
                });
            }
            Op::MulRows(x, s) => {
                let n = self.shape(*x)[1];
                let (xd, sd) = (self.data(*x), self.data(*s));
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * sd[i / n];
                    }
                });
                acc(*s, &mut |d| {
                    for (i, &gv) in g.iter().enumerate() {
                        d[i / n] += gv * xd[i];
                    }
                });
            }
            Op::MulScalarVar(x, s) => {
                let (xd, sv) = (self.data(*x), self.data(*s)[0]);
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y * sv));
                acc(*s, &mut |d| d[0] += g.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>());
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b * c)),
            Op::AddScalar(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Relu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        if xd[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Ln(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / xd[i];
                    }
                });
            }
            Op::Powf(x, p) => {
                let xd = self.data(*x);
                acc(*x, &mut |d| {
                    if *p == 0.0 {
                        return;
                    }
                    for i in 0..d.len() {
                        d[i] += g[i] * p * xd[i].powf(p - 1.0);
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xd = self.data(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        if xd[i] >= *lo && xd[i] <= *hi {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let n = self.shape(*x)[1];
                acc(*x, &mut |d| {
                    for (r, (yrow, grow)) in out.chunks(n).zip(g.chunks(n)).enumerate() {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[r * n + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let [m, n] = two(self.shape(*x));
                let (xd, gd) = (self.data(*x), self.data(*gain));
                let mut xhat = vec![0.0; m * n];
                let mut rstds = vec![0.0; m];
                for i in 0..m {
                    let row = &xd[i * n..(i + 1) * n];
                    let (mean, rstd) = row_stats(row, *eps);
                    rstds[i] = rstd;
                    for j in 0..n {
                        xhat[i * n + j] = (row[j] - mean) * rstd;
                    }
                }
                acc(*gain, &mut |d| {
                    for i in 0..m * n {
                        d[i % n] += g[i] * xhat[i];
                    }
                });
                acc(*bias, &mut |d| {
                    for i in 0..m * n {
                        d[i % n] += g[i];
                    }
                });
                acc(*x, &mut |d| {
                    for i in 0..m {
                        let gh: Vec<f64> = (0..n).map(|j| g[i * n + j] * gd[j]).collect();
                        let xh = &xhat[i * n..(i + 1) * n];
                        let mean_gh = gh.iter().sum::<f64>() / n as f64;
                        let mean_ghx =
                            gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            d[i * n + j] += rstds[i] * (gh[j] - mean_gh - xh[j] * mean_ghx);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => acc(*x, &mut |d| {
                let s = g[0] / d.len() as f64;
                d.iter_mut().for_each(|v| *v += s);
            }),
            Op::RowMean(x) => {
                let n = self.shape(*x)[1];
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i / n] / n as f64;
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Conv2d {
                input,
                kernel,
                groups,
            } => {
                let [c, h, w] = dims3(self.shape(*input), "conv").expect("recorded shape");
                let ks = self.shape(*kernel);
                let geo = ConvGeometry {
                    c,
                    h,
                    w,
                    co: ks[0],
                    cg: ks[1],
                    kh: ks[2],
                    kw: ks[3],
                    groups: *groups,
                };
                let (xd, kd) = (self.data(*input), self.data(*kernel));
                acc(*input, &mut |d| {
                    geo.for_each_tap(|o, y, x, _, kidx, iidx| {
                        d[iidx] += g[(o * h + y) * w + x] * kd[kidx];
                    });
                });
                acc(*kernel, &mut |d| {
                    geo.for_each_tap(|o, y, x, _, kidx, iidx| {
                        d[kidx] += g[(o * h + y) * w + x] * xd[iidx];
                    });
                });
            }
            Op::Resize(x) => {
                let [c, h, w] = dims3(self.shape(*x), "resize").expect("recorded shape");
                let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                let (ys, xs) = (bilinear_axis(h, oh), bilinear_axis(w, ow));
                acc(*x, &mut |d| {
                    for ch in 0..c {
                        let base = ch * h * w;
                        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                                let gv = g[(ch * oh + oy) * ow + ox];
                                d[base + y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                                d[base + y0 * w + x1] += gv * (1.0 - ly) * lx;
                                d[base + y1 * w + x0] += gv * ly * (1.0 - lx);
                                d[base + y1 * w + x1] += gv * ly * lx;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let [m, p] = two(self.shape(*a));
                let q = self.shape(*b)[1];
                acc(*a, &mut |d| {
                    for i in 0..m {
                        add_into(&mut d[i * p..(i + 1) * p], &g[i * (p + q)..i * (p + q) + p]);
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..m {
                        add_into(
                            &mut d[i * q..(i + 1) * q],
                            &g[i * (p + q) + p..(i + 1) * (p + q)],
                        );
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let n = self.shape(*x)[1];
                acc(*x, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::ScatterRows { base, rows, idx } => {
                let n = self.shape(*base)[1];
                acc(*base, &mut |d| {
                    add_into(d, g);
                    for &i in idx {
                        for j in 0..n {
                            d[i * n + j] -= g[i * n + j];
                        }
                    }
                });
                acc(*rows, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::ChannelOuter(r, c) => {
                let [n, m] = two(self.shape(*r));
                let (rd, cd) = (self.data(*r), self.data(*c));
                acc(*r, &mut |d| {
                    for k in 0..m {
                        for a in 0..n {
                            for b in 0..n {
                                d[a * m + k] += g[(k * n + a) * n + b] * cd[b * m + k];
                            }
                        }
                    }
                });
                acc(*c, &mut |d| {
                    for k in 0..m {
                        for a in 0..n {
                            for b in 0..n {
                                d[b * m + k] += g[(k * n + a) * n + b] * rd[a * m + k];
                            }
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn two(shape: &[usize]) -> [usize; 2] {
    [shape[0], shape[1]]
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    cg: usize,
    kh: usize,
    kw: usize,
    groups: usize,
}

impl ConvGeometry {
    /// Visits every (output, kernel tap, input) triple inside the padded frame.
    /// The callback receives `(out_channel, y, x, in_channel, kernel_index, input_index)`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let per_group_out = self.co / self.groups;
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        debug_assert_eq!(self.cg * self.groups, self.c);
        for o in 0..self.co {
            let cstart = (o / per_group_out) * self.cg;
            for ci in 0..self.cg {
                let ic = cstart + ci;
                for dy in 0..self.kh {
                    for dx in 0..self.kw {
                        let kidx = ((o * self.cg + ci) * self.kh + dy) * self.kw + dx;
                        for y in 0..self.h {
                            let sy = y + dy;
                            if sy < ph || sy - ph >= self.h {
                                continue;
                            }
                            let iy = sy - ph;
                            for x in 0..self.w {
                                let sx = x + dx;
                                if sx < pw || sx - pw >= self.w {
                                    continue;
                                }
                                let iidx = (ic * self.h + iy) * self.w + (sx - pw);
                                f(o, y, x, ic, kidx, iidx);
                            }
                        }
                    }
                }
            }
        }
    }
}
