//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its output value; [`Tape::backward`]
//! walks the nodes in reverse execution order and accumulates gradients
//! into every node that requires one. A tape can be differentiated once.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{check_leading, for_each_leading_offset, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How batch norm updates its running statistics in train mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RunningUpdate {
    /// `running = (1 - m) * running + m * batch`.
    Exponential(f64),
    /// Equal-weight average over every batch seen since the last reset.
    Cumulative,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnMode {
    Train(RunningUpdate),
    Eval,
}

impl BnMode {
    pub fn train() -> Self {
        BnMode::Train(RunningUpdate::Exponential(BN_MOMENTUM))
    }
}

/// Running mean/variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of batches folded in since the last reset.
    pub batches: u64,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            batches: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Copy of the leading `c` channels.
    pub fn leading(&self, c: usize) -> BnState {
        BnState {
            mean: self.mean[..c].to_vec(),
            var: self.var[..c].to_vec(),
            batches: self.batches,
        }
    }

    /// Writes `sub` back into the leading channels.
    pub fn store_leading(&mut self, sub: &BnState) {
        let c = sub.channels();
        self.mean[..c].copy_from_slice(&sub.mean);
        self.var[..c].copy_from_slice(&sub.var);
        self.batches = self.batches.max(sub.batches);
    }

    fn fold(&mut self, mean: &[f64], var: &[f64], update: RunningUpdate) {
        self.batches += 1;
        let m = match update {
            RunningUpdate::Exponential(m) => m,
            RunningUpdate::Cumulative => 1.0 / self.batches as f64,
        };
        for c in 0..self.mean.len() {
            self.mean[c] += m * (mean[c] - self.mean[c]);
            self.var[c] += m * (var[c] - self.var[c]);
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Crop {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    differentiated: bool,
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

    /// Records a leaf; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    /// Records a trainable copy of `t`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut t = t.clone();
        t.requires_grad = true;
        self.leaf(t)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Moves the value (with its gradient) out of the tape.
    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        let t = Tensor::from_parts(shape, data).with_requires_grad(rg);
        self.push(t, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        Ok(self.push_op(vec![m, n], out, &[a, b], Op::MatMul { a, b }))
    }

    /// `x[N,in] · w[out,in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", sx, sw));
        }
        let (n, k, m) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(Error::shape("linear bias", self.shape(b), &[m]));
            }
        }
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            for row in out.chunks_mut(m) {
                row.copy_from_slice(self.value(b).data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        kernels::gemm(
            n,
            k,
            m,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            beta,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(vec![n, m], out, &inputs, Op::Linear { x, w, b }))
    }

    fn conv_geom(&self, op: &'static str, x: Var, w: Var, stride: usize, pad: usize, depthwise: bool) -> Result<ConvGeom> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape(op, sx, sw));
        }
        let ok = if depthwise {
            sw[0] == sx[1] && sw[1] == 1
        } else {
            sw[1] == sx[1]
        };
        if !ok {
            return Err(Error::shape(op, sx, sw));
        }
        let oh = kernels::conv_out_extent(sx[2], sw[2], stride, pad)?;
        let ow = kernels::conv_out_extent(sx[3], sw[3], stride, pad)?;
        Ok(ConvGeom {
            n: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            oh,
            ow,
        })
    }

    /// Cross-correlation of `x[N,Cin,H,W]` with `w[Cout,Cin,Kh,Kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom("conv2d", x, w, stride, pad, false)?;
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let shape = vec![geom.n, geom.cout, geom.oh, geom.ow];
        Ok(self.push_op(shape, out, &[x, w], Op::Conv2d { x, w, geom }))
    }

    /// Channel-wise convolution of `x[N,C,H,W]` with `w[C,1,Kh,Kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom("depthwise_conv2d", x, w, stride, pad, true)?;
        let out = kernels::depthwise_forward(&geom, self.value(x).data(), self.value(w).data());
        let shape = vec![geom.n, geom.cout, geom.oh, geom.ow];
        Ok(self.push_op(shape, out, &[x, w], Op::Depthwise { x, w, geom }))
    }

    /// Batch norm over axis 1 of a rank-2 or rank-4 input. In train mode the
    /// batch statistics normalize the input and are folded into `state`.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, state: &mut BnState, mode: BnMode) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 && sx.len() != 4 {
            return Err(Error::shape("batchnorm", &sx, self.shape(gamma)));
        }
        let c = sx[1];
        for (what, s) in [("batchnorm gamma", self.shape(gamma)), ("batchnorm beta", self.shape(beta))] {
            if s != [c] {
                return Err(Error::shape(what, &sx, s));
            }
        }
        if state.channels() != c {
            return Err(Error::shape("batchnorm state", &sx, &[state.channels()]));
        }
        let n = sx[0];
        let spatial: usize = sx[2..].iter().product();
        let count = (n * spatial) as f64;
        let xd = self.value(x).data();
        let (mean, var, batch_stats) = match mode {
            BnMode::Train(update) => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let s = &xd[(b * c + ch) * spatial..][..spatial];
                        mean[ch] += s.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for b in 0..n {
                    for ch in 0..c {
                        let s = &xd[(b * c + ch) * spatial..][..spatial];
                        var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                let unbiased: Vec<f64> = if count > 1.0 {
                    var.iter().map(|v| v * count / (count - 1.0)).collect()
                } else {
                    var.clone()
                };
                state.fold(&mean, &unbiased, update);
                (mean, var, true)
            }
            BnMode::Eval => (state.mean.clone(), state.var.clone(), false),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for i in off..off + spatial {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        };
        Ok(self.push_op(sx, out, &[x, gamma, beta], op))
    }

    /// Leading sub-block `x[0:s0, 0:s1, ...]`.
    pub fn crop(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_leading(self.shape(x), shape)?;
        let out = self.value(x).leading_block(shape)?.into_data();
        Ok(self.push_op(shape.to_vec(), out, &[x], Op::Crop { x }))
    }

    /// Crops a `(Co, Ci, Kh, Kw)` weight to `(co, ci, Kh, Kw)`.
    pub fn crop_channels(&mut self, w: Var, co: usize, ci: usize) -> Result<Var> {
        let s = self.shape(w);
        if s.len() != 4 || co == 0 || ci == 0 || co > s[0] || ci > s[1] {
            return Err(Error::InvalidArgument(format!(
                "cannot crop weight of shape {s:?} to ({co}, {ci}, ..)"
            )));
        }
        let shape = [co, ci, s[2], s[3]];
        self.crop(w, &shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let data = t.into_data();
        Ok(self.push_op(shape.to_vec(), data, &[x], Op::Reshape { x }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, &[x], Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(p, q)| p + q)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(shape, out, &[a, b], Op::Add { a, b }))
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", &s, &[0, 0, 0, 0]));
        }
        let spatial = s[2] * s[3];
        let out = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|p| p.iter().sum::<f64>() / spatial as f64)
            .collect();
        Ok(self.push_op(vec![s[0], s[1]], out, &[x], Op::GlobalAvgPool { x }))
    }

    /// Mean softmax cross-entropy of `logits[N,K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", &s, &[labels.len()]));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; s[0] * k];
        let mut loss = 0.0;
        for (i, row) in self.value(logits).data().chunks(k).enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let log_z = z.ln() + mx;
            for j in 0..k {
                probs[i * k + j] = (row[j] - log_z).exp();
            }
            loss += log_z - row[labels[i]];
        }
        loss /= s[0] as f64;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push_op(vec![1], vec![loss], &[logits], op))
    }

    /// `Σ x ⊙ weights` as a scalar; used to project tensors to a loss.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(Error::shape("weighted_sum", self.shape(x), weights.shape()));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let op = Op::WeightedSum {
            x,
            weights: weights.data().to_vec(),
        };
        Ok(self.push_op(vec![1], vec![s], &[x], op))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let ones = Tensor::ones(self.shape(x));
        self.weighted_sum(x, &ones).expect("shapes agree by construction")
    }

    /// Back-propagates from the scalar `loss`. Can be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.differentiated {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.differentiated = true;
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(dy) = self.nodes[i].value.grad.take() else {
                continue;
            };
            self.backprop_node(i, &dy);
            self.nodes[i].value.grad = Some(dy);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        let t = &mut self.nodes[v.0].value;
        if !t.requires_grad {
            return;
        }
        match &mut t.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => t.grad = Some(g.to_vec()),
        }
    }

    fn backprop_node(&mut self, i: usize, dy: &[f64]) {
        let node = &self.nodes[i];
        let mut grads: Vec<(Var, Vec<f64>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, dy, false, self.value(b).data(), true, &mut da, 0.0);
                    grads.push((a, da));
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.value(a).data(), true, dy, false, &mut db, 0.0);
                    grads.push((b, db));
                }
            }
            &Op::Linear { x, w, b } => {
                let (n, k) = (self.shape(x)[0], self.shape(x)[1]);
                let m = self.shape(w)[0];
                if self.requires_grad(x) {
                    let mut dx = vec![0.0; n * k];
                    kernels::gemm(n, m, k, dy, false, self.value(w).data(), false, &mut dx, 0.0);
                    grads.push((x, dx));
                }
                if self.requires_grad(w) {
                    let mut dw = vec![0.0; m * k];
                    kernels::gemm(m, n, k, dy, true, self.value(x).data(), false, &mut dw, 0.0);
                    grads.push((w, dw));
                }
                if let Some(b) = b.filter(|&b| self.requires_grad(b)) {
                    let mut db = vec![0.0; m];
                    for row in dy.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    grads.push((b, db));
                }
            }
            &Op::Conv2d { x, w, ref geom } | &Op::Depthwise { x, w, ref geom } => {
                let (want_dx, want_dw) = (self.requires_grad(x), self.requires_grad(w));
                let (xd, wd) = (self.value(x).data(), self.value(w).data());
                let (dx, dw) = if matches!(node.op, Op::Conv2d { .. }) {
                    kernels::conv2d_backward(geom, xd, wd, dy, want_dx, want_dw)
                } else {
                    kernels::depthwise_backward(geom, xd, wd, dy, want_dx, want_dw)
                };
                if want_dx {
                    grads.push((x, dx));
                }
                if want_dw {
                    grads.push((w, dw));
                }
            }
            &Op::BatchNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
                batch_stats,
            } => {
                let s = self.shape(x);
                let (n, c) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let count = (n * spatial) as f64;
                let g = self.value(gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        for j in off..off + spatial {
                            dgamma[ch] += dy[j] * xhat[j];
                            dbeta[ch] += dy[j];
                        }
                    }
                }
                if self.requires_grad(x) {
                    let mut dx = vec![0.0; dy.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * spatial;
                            for j in off..off + spatial {
                                dx[j] = if batch_stats {
                                    g[ch] * inv_std[ch] / count
                                        * (count * dy[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                } else {
                                    g[ch] * inv_std[ch] * dy[j]
                                };
                            }
                        }
                    }
                    grads.push((x, dx));
                }
                if self.requires_grad(gamma) {
                    grads.push((gamma, dgamma));
                }
                if self.requires_grad(beta) {
                    grads.push((beta, dbeta));
                }
            }
            &Op::Crop { x } => {
                if self.requires_grad(x) {
                    let full = self.shape(x).to_vec();
                    let mut dx = vec![0.0; self.value(x).numel()];
                    let mut it = dy.iter();
                    for_each_leading_offset(&full, node.value.shape(), |off| {
                        dx[off] = *it.next().expect("crop gradient length");
                    });
                    grads.push((x, dx));
                }
            }
            &Op::Reshape { x } => grads.push((x, dy.to_vec())),
            &Op::Relu { x } => {
                let dx = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                grads.push((x, dx));
            }
            &Op::Add { a, b } => {
                grads.push((a, dy.to_vec()));
                grads.push((b, dy.to_vec()));
            }
            &Op::GlobalAvgPool { x } => {
                let s = self.shape(x);
                let spatial = s[2] * s[3];
                let mut dx = vec![0.0; self.value(x).numel()];
                for (chunk, &d) in dx.chunks_mut(spatial).zip(dy) {
                    chunk.fill(d / spatial as f64);
                }
                grads.push((x, dx));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = dy[0] / labels.len() as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] -= scale;
                }
                grads.push((*logits, dx));
            }
            Op::WeightedSum { x, weights } => {
                grads.push((*x, weights.iter().map(|w| w * dy[0]).collect()));
            }
        }
        for (v, g) in grads {
            self.accumulate(v, &g);
        }
    }
}
