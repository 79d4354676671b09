//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! as leaves tagged with their [`ParamId`]; `backward` returns gradients keyed
//! by those ids. `detach` copies a value into a fresh untracked leaf, so no
//! gradient can flow back through it.

use std::collections::BTreeMap;

use super::params::ParamId;
use super::tensor::{bilinear_taps, col2im, gemm, im2col, Window};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        win: Window,
        cols: Vec<f64>,
        x_dims: (usize, usize, usize, usize),
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(usize),
    AddN(Vec<usize>),
    Scale(usize, f64),
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Bilinear(usize),
    Nearest2x(usize),
    CrossEntropy {
        logits: usize,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    SqDiffSum(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Batch statistics measured by a training-mode normalisation, to be folded
/// into the running estimates once the step is committed.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    pending_stats: Vec<BatchStats>,
}

/// Gradients of one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn accumulate(&mut self, id: ParamId, g: Tensor) {
        match self.map.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.map.insert(id, g);
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Tracked parameter leaf.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Same value, severed from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn record_batch_stats(&mut self, stats: BatchStats) {
        self.pending_stats.push(stats);
    }

    pub fn take_batch_stats(&mut self) -> Vec<BatchStats> {
        std::mem::take(&mut self.pending_stats)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, ci, kh, kw) = self.value(w).dims4()?;
        if ci != c || kh != kw {
            return Err(Error::Shape(format!(
                "conv weight {:?} does not fit input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        let win = Window { kernel: kh, stride, pad };
        let (cols, ho, wo) = im2col(self.value(x), win);
        let p = ho * wo;
        let np = n * p;
        let ck = c * kh * kw;
        let mut out_mat = vec![0.0; o * np];
        gemm(o, ck, np, self.value(w).data(), (ck as isize, 1), &cols, (np as isize, 1), 0.0, &mut out_mat, (np as isize, 1));
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        let bias = b.map(|b| self.value(b).data().to_vec());
        {
            let od = out.data_mut();
            for oc in 0..o {
                let bv = bias.as_ref().map_or(0.0, |bv| bv[oc]);
                for bi in 0..n {
                    let src = &out_mat[oc * np + bi * p..oc * np + (bi + 1) * p];
                    let dst = &mut od[(bi * o + oc) * p..(bi * o + oc + 1) * p];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s + bv;
                    }
                }
            }
        }
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|b| b.0));
        let rg = self.rg(&parents);
        let op = Op::Conv {
            x: x.0,
            w: w.0,
            b: b.map(|b| b.0),
            win,
            cols: if rg { cols } else { Vec::new() },
            x_dims: (n, c, h, wd),
        };
        Ok(self.push(out, op, rg))
    }

    fn channel_layout(t: &Tensor) -> Result<(usize, usize, usize)> {
        match t.shape()[..] {
            [n, c] => Ok((n, c, 1)),
            [n, c, h, w] => Ok((n, c, h * w)),
            _ => Err(Error::Shape(format!("normalisation expects 2-d or 4-d input, got {:?}", t.shape()))),
        }
    }

    /// Normalisation with the current batch's statistics. Returns the output
    /// together with the batch mean and unbiased variance per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, p) = Self::channel_layout(self.value(x))?;
        let m = (n * p) as f64;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..n {
                s += xd[(bi * c + ch) * p..(bi * c + ch + 1) * p].iter().sum::<f64>();
            }
            mean[ch] = s / m;
            let mut sq = 0.0;
            for bi in 0..n {
                sq += xd[(bi * c + ch) * p..(bi * c + ch + 1) * p]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
            var[ch] = sq / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let unbiased: Vec<f64> = var.iter().map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v }).collect();
        let out = self.normalise(x, gamma, beta, &mean, &inv_std, true)?;
        Ok((out, mean, unbiased))
    }

    /// Normalisation with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalise(x, gamma, beta, mean, &inv_std, false)
    }

    fn normalise(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64], batch_stats: bool) -> Result<Var> {
        let (n, c, p) = Self::channel_layout(self.value(x))?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c || mean.len() != c {
            return Err(Error::Shape(format!("normalisation over {c} channels given mismatched affine/statistics")));
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * p;
                for k in base..base + p {
                    let h = (xd[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = gd[ch] * h + bd[ch];
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        let op = Op::BatchNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat: if rg { xhat } else { Vec::new() },
            inv_std: inv_std.to_vec(),
            batch_stats,
        };
        Ok(self.push(Tensor::from_vec(&shape, out)?, op, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Relu(x.0), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    /// Left-to-right sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Shape("sum of no tensors".into()))?;
        let mut out = self.value(*first).clone();
        for v in &xs[1..] {
            if self.value(*v).shape() != out.shape() {
                return Err(Error::Shape(format!(
                    "cannot add {:?} and {:?}",
                    out.shape(),
                    self.value(*v).shape()
                )));
            }
            out.add_assign(self.value(*v));
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::AddN(ids), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale(s);
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Scale(x.0, s), rg)
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let win = Window { kernel, stride, pad };
        let (ho, wo) = (win.out_size(h), win.out_size(w));
        let xd = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0usize; n * c * ho * wo];
        let od = out.data_mut();
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    for ki in 0..kernel {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let at = ih as usize * w + iw as usize;
                            if src[at] > best {
                                best = src[at];
                                best_at = at;
                            }
                        }
                    }
                    let o = plane * ho * wo + oh * wo + ow;
                    od[o] = best;
                    argmax[o] = plane * h * w + best_at;
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::MaxPool { x: x.0, argmax }, rg))
    }

    /// [N,C,H,W] → [N,C].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let p = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(p)
            .map(|ch| ch.iter().sum::<f64>() / p as f64)
            .collect();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::from_vec(&[n, c], data)?, Op::GlobalAvgPool(x.0), rg))
    }

    /// `x·wᵀ + b` for x [N,I], w [O,I], b [O].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, i) = self.value(x).dims2()?;
        let (o, wi) = self.value(w).dims2()?;
        if wi != i || self.value(b).numel() != o {
            return Err(Error::Shape(format!(
                "linear weight {:?} does not fit input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        let mut out = vec![0.0; n * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(n, i, o, self.value(x).data(), (i as isize, 1), self.value(w).data(), (1, i as isize), 1.0, &mut out, (o as isize, 1));
        let rg = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(Tensor::from_vec(&[n, o], out)?, Op::Linear { x: x.0, w: w.0, b: b.0 }, rg))
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let rows = bilinear_taps(h, out_h);
        let cols = bilinear_taps(w, out_w);
        let xd = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
        let od = out.data_mut();
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut od[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (r, &(r0, r1, fr)) in rows.iter().enumerate() {
                for (q, &(c0, c1, fc)) in cols.iter().enumerate() {
                    let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
                    let bot = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
                    dst[r * out_w + q] = top * (1.0 - fr) + bot * fr;
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::Bilinear(x.0), rg))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xd = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let od = out.data_mut();
        for plane in 0..n * c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    od[plane * 4 * h * w + i * 2 * w + j] = xd[plane * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::Nearest2x(x.0), rg))
    }

    /// Mean softmax cross-entropy. `logits` is [N,C] or [N,C,H,W]; `labels`
    /// holds one class per sample (or per pixel, sample-major).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c, p) = Self::channel_layout(self.value(logits))?;
        if labels.len() != n * p {
            return Err(Error::Shape(format!("{} labels for {} predictions", labels.len(), n * p)));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label { label: *bad, classes: c });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; ld.len()];
        let mut total = 0.0;
        for bi in 0..n {
            for pos in 0..p {
                let at = |ch: usize| (bi * c + ch) * p + pos;
                let max = (0..c).map(|ch| ld[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..c).map(|ch| (ld[at(ch)] - max).exp()).sum();
                let lse = max + sum.ln();
                for ch in 0..c {
                    probs[at(ch)] = (ld[at(ch)] - lse).exp();
                }
                total += lse - ld[at(labels[bi * p + pos])];
            }
        }
        let rg = self.rg(&[logits.0]);
        let op = Op::CrossEntropy { logits: logits.0, probs, labels: labels.to_vec() };
        Ok(self.push(Tensor::scalar(total / (n * p) as f64), op, rg))
    }

    /// Σ (a − b)² over all elements.
    pub fn sq_diff_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "squared difference of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::scalar(s), Op::SqDiffSum(a.0, b.0), rg))
    }

    /// Reverse sweep from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape("backward needs a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients::default();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(id) = node.param {
                out.accumulate(id, g);
                continue;
            }
            self.backprop_node(node, g, &mut grads)?;
        }
        Ok(out)
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: usize, g: Tensor) {
        if !self.nodes[to].requires_grad {
            return;
        }
        match &mut grads[to] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, win, cols, x_dims } => {
                let (n, o, ho, wo) = g.dims4()?;
                let p = ho * wo;
                let np = n * p;
                let wt = &self.nodes[*w].value;
                let (_, c, kh, kw) = wt.dims4()?;
                let ck = c * kh * kw;
                let mut gmat = vec![0.0; o * np];
                let gd = g.data();
                for oc in 0..o {
                    for bi in 0..n {
                        gmat[oc * np + bi * p..oc * np + (bi + 1) * p]
                            .copy_from_slice(&gd[(bi * o + oc) * p..(bi * o + oc + 1) * p]);
                    }
                }
                if self.nodes[*w].requires_grad {
                    let mut dw = vec![0.0; o * ck];
                    gemm(o, np, ck, &gmat, (np as isize, 1), cols, (1, np as isize), 0.0, &mut dw, (ck as isize, 1));
                    self.send(grads, *w, Tensor::from_vec(wt.shape(), dw)?);
                }
                if let Some(b) = b {
                    if self.nodes[*b].requires_grad {
                        let db = (0..o).map(|oc| gmat[oc * np..(oc + 1) * np].iter().sum()).collect();
                        self.send(grads, *b, Tensor::from_vec(&[o], db)?);
                    }
                }
                if self.nodes[*x].requires_grad {
                    let mut dcols = vec![0.0; ck * np];
                    gemm(ck, o, np, wt.data(), (1, ck as isize), &gmat, (np as isize, 1), 0.0, &mut dcols, (np as isize, 1));
                    self.send(grads, *x, col2im(&dcols, *x_dims, *win));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (n, c, p) = Self::channel_layout(&g)?;
                let gd = g.data();
                let gam = self.nodes[*gamma].value.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * p;
                        for k in base..base + p {
                            dbeta[ch] += gd[k];
                            dgamma[ch] += gd[k] * xhat[k];
                        }
                    }
                }
                if self.nodes[*x].requires_grad {
                    let m = (n * p) as f64;
                    let mut dx = vec![0.0; gd.len()];
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * p;
                            let k0 = gam[ch] * inv_std[ch];
                            for k in base..base + p {
                                dx[k] = if *batch_stats {
                                    k0 * (gd[k] - dbeta[ch] / m - xhat[k] * dgamma[ch] / m)
                                } else {
                                    k0 * gd[k]
                                };
                            }
                        }
                    }
                    self.send(grads, *x, Tensor::from_vec(g.shape(), dx)?);
                }
                self.send(grads, *gamma, Tensor::from_vec(&[c], dgamma)?);
                self.send(grads, *beta, Tensor::from_vec(&[c], dbeta)?);
            }
            Op::Relu(x) => {
                let mut dx = g;
                for (d, v) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::AddN(xs) => {
                for x in xs {
                    self.send(grads, *x, g.clone());
                }
            }
            Op::Scale(x, s) => {
                let mut dx = g;
                dx.scale(*s);
                self.send(grads, *x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.nodes[*x].value.shape());
                let dd = dx.data_mut();
                for (gv, &at) in g.data().iter().zip(argmax) {
                    dd[at] += gv;
                }
                self.send(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.nodes[*x].value.shape().to_vec();
                let p = shape[2] * shape[3];
                let mut dx = Vec::with_capacity(shape.iter().product());
                for gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / p as f64, p));
                }
                self.send(grads, *x, Tensor::from_vec(&shape, dx)?);
            }
            Op::Linear { x, w, b } => {
                let (n, o) = g.dims2()?;
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let i = wv.shape()[1];
                if self.nodes[*x].requires_grad {
                    let mut dx = vec![0.0; n * i];
                    gemm(n, o, i, g.data(), (o as isize, 1), wv.data(), (i as isize, 1), 0.0, &mut dx, (i as isize, 1));
                    self.send(grads, *x, Tensor::from_vec(&[n, i], dx)?);
                }
                if self.nodes[*w].requires_grad {
                    let mut dw = vec![0.0; o * i];
                    gemm(o, n, i, g.data(), (1, o as isize), xv.data(), (i as isize, 1), 0.0, &mut dw, (i as isize, 1));
                    self.send(grads, *w, Tensor::from_vec(&[o, i], dw)?);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; o];
                    for row in g.data().chunks(o) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.send(grads, *b, Tensor::from_vec(&[o], db)?);
                }
            }
            Op::Bilinear(x) => {
                let (n, c, h, w) = self.nodes[*x].value.dims4()?;
                let (_, _, out_h, out_w) = g.dims4()?;
                let rows = bilinear_taps(h, out_h);
                let cols = bilinear_taps(w, out_w);
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let dd = dx.data_mut();
                let gd = g.data();
                for plane in 0..n * c {
                    let src = &gd[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                    let dst = &mut dd[plane * h * w..(plane + 1) * h * w];
                    for (r, &(r0, r1, fr)) in rows.iter().enumerate() {
                        for (q, &(c0, c1, fc)) in cols.iter().enumerate() {
                            let gv = src[r * out_w + q];
                            dst[r0 * w + c0] += gv * (1.0 - fr) * (1.0 - fc);
                            dst[r0 * w + c1] += gv * (1.0 - fr) * fc;
                            dst[r1 * w + c0] += gv * fr * (1.0 - fc);
                            dst[r1 * w + c1] += gv * fr * fc;
                        }
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::Nearest2x(x) => {
                let (n, c, h, w) = self.nodes[*x].value.dims4()?;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let dd = dx.data_mut();
                for (k, gv) in g.data().iter().enumerate() {
                    let plane = k / (4 * h * w);
                    let rem = k % (4 * h * w);
                    let (i, j) = (rem / (2 * w), rem % (2 * w));
                    dd[plane * h * w + (i / 2) * w + j / 2] += gv;
                }
                self.send(grads, *x, dx);
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let shape = self.nodes[*logits].value.shape().to_vec();
                let (n, c, p) = Self::channel_layout(&self.nodes[*logits].value)?;
                let scale = g.item() / (n * p) as f64;
                let mut dl = probs.clone();
                for bi in 0..n {
                    for pos in 0..p {
                        dl[(bi * c + labels[bi * p + pos]) * p + pos] -= 1.0;
                    }
                }
                dl.iter_mut().for_each(|v| *v *= scale);
                self.send(grads, *logits, Tensor::from_vec(&shape, dl)?);
            }
            Op::SqDiffSum(a, b) => {
                let s = 2.0 * g.item();
                let diff: Vec<f64> = self.nodes[*a]
                    .value
                    .data()
                    .iter()
                    .zip(self.nodes[*b].value.data())
                    .map(|(x, y)| s * (x - y))
                    .collect();
                let shape = self.nodes[*a].value.shape().to_vec();
                if self.nodes[*b].requires_grad {
                    let neg = diff.iter().map(|v| -v).collect();
                    self.send(grads, *b, Tensor::from_vec(&shape, neg)?);
                }
                self.send(grads, *a, Tensor::from_vec(&shape, diff)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize], k: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64 + 1.0) * k).sin()).collect()).unwrap()
    }

    /// Central-difference check of d(sum of f(params))/d(param) for one param.
    fn check<F>(params: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let eval = |ps: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().enumerate().map(|(i, t)| g.param(ParamId(i), t.clone())).collect();
            let out = build(&mut g, &vars);
            (g, out)
        };
        let (g, out) = eval(&params);
        let grads = g.backward(out).unwrap();
        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            for k in 0..p.numel() {
                let mut plus = params.clone();
                plus[pi].data_mut()[k] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[k] -= h;
                let (gp, op) = eval(&plus);
                let (gm, om) = eval(&minus);
                let fd = (gp.value(op).item() - gm.value(om).item()) / (2.0 * h);
                let an = grads.get(ParamId(pi)).map_or(0.0, |t| t.data()[k]);
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "param {pi} elem {k}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn conv_bn_relu_pool_gradients() {
        let x = seq(&[2, 2, 5, 5], 0.7);
        let w = seq(&[3, 2, 3, 3], 0.3);
        let b = seq(&[3], 1.1);
        let gamma = seq(&[3], 0.9);
        let beta = seq(&[3], 0.5);
        check(vec![x, w, b, gamma, beta], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
            let (y, _, _) = g.batch_norm_train(y, v[3], v[4], 1e-5).unwrap();
            let y = g.relu(y);
            let y = g.max_pool(y, 2, 2, 0).unwrap();
            let t = g.constant(seq(g.value(y).shape(), 0.21));
            g.sq_diff_sum(y, t).unwrap()
        });
    }

    #[test]
    fn resize_linear_ce_gradients() {
        let x = seq(&[2, 3, 2, 2], 0.4);
        let w = seq(&[4, 3], 0.8);
        let b = seq(&[4], 0.2);
        check(vec![x, w, b], |g, v| {
            let up = g.resize_bilinear(v[0], 5, 3).unwrap();
            let near = g.upsample2x(v[0]).unwrap();
            let p1 = g.global_avg_pool(up).unwrap();
            let p2 = g.global_avg_pool(near).unwrap();
            let s = g.add(p1, p2).unwrap();
            let logits = g.linear(s, v[1], v[2]).unwrap();
            let l1 = g.cross_entropy(logits, &[1, 3]).unwrap();
            let l2 = g.cross_entropy(up, &[0, 1, 2, 2, 1, 0, 0, 0, 1, 2, 2, 1, 1, 1, 0, 0, 2, 2, 2, 1, 0, 0, 1, 2, 1, 0, 2, 1, 0, 1]).unwrap();
            let sum = g.add_n(&[l1, l2]).unwrap();
            g.scale(sum, 0.5)
        });
    }

    #[test]
    fn eval_norm_gradients() {
        let x = seq(&[3, 2], 0.6);
        let gamma = seq(&[2], 0.9);
        let beta = seq(&[2], 0.5);
        check(vec![x, gamma, beta], |g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5).unwrap();
            let t = g.constant(Tensor::zeros(&[3, 2]));
            g.sq_diff_sum(y, t).unwrap()
        });
    }

    #[test]
    fn detach_blocks_gradient_exactly() {
        let mut g = Graph::new();
        let a = g.param(ParamId(0), seq(&[4], 0.3));
        let b = g.param(ParamId(1), seq(&[4], 0.5));
        let d = g.detach(a);
        let s = g.add(d, b).unwrap();
        let z = g.constant(Tensor::zeros(&[4]));
        let l = g.sq_diff_sum(s, z).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(ParamId(0)).is_none());
        assert!(grads.get(ParamId(1)).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[3, 4]));
        let l = g.cross_entropy(logits, &[0, 1, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(g.cross_entropy(logits, &[2]), Err(Error::Label { .. })));
    }
}
