use rand::Rng;

use super::kernels::{self, ConvGeometry};
use super::{pooled_len, RngStream, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-feature batch statistics from a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance, the convention for running estimates.
    pub var: Vec<f32>,
}

enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geo: ConvGeometry },
    MaxPool2d { input: Var, argmax: Vec<u32> },
    Relu { input: Var },
    ConcatChannels { a: Var, b: Var },
    AdaptivePoolPair { input: Var, argmax: Vec<u32> },
    Linear { input: Var, weight: Var, bias: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32>, batch_stats: bool },
    Dropout { input: Var, mask: Vec<f32> },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f32>, labels: Vec<usize> },
    Sum { input: Var },
    WeightedSum { input: Var, weights: Vec<f32> },
    Add { a: Var, b: Var },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    retain_grad: bool,
    op: Op,
}

/// Records a forward computation for one reverse-mode sweep.
///
/// Nodes are appended in evaluation order, so the tape is always a
/// topological order of the graph. [`Tape::backward`] consumes the tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Make `v` a gradient sink: later ops depending on it are differentiated
    /// and its gradient is kept in the [`Gradients`] returned by backward.
    pub fn retain_grad(&mut self, v: Var) {
        let node = &mut self.nodes[v.0];
        node.requires_grad = true;
        node.retain_grad = true;
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            retain_grad: false,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2-D cross-correlation, NCHW input and OIHW weight.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let xd = x.dims4("conv2d")?;
        let wd = w.dims4("conv2d")?;
        let geo = ConvGeometry::new(xd, wd, stride, padding).ok_or_else(|| Error::DimensionMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        })?;
        self.value(bias).check_shape("conv2d bias", &[wd[0]])?;
        let mut out = Tensor::zeros(geo.output_shape());
        kernels::conv2d_forward(&geo, x.data(), w.data(), self.value(bias).data(), out.data_mut());
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(out, rg, Op::Conv2d { input, weight, bias, geo }))
    }

    /// Max pooling without padding.
    pub fn maxpool2d(&mut self, input: Var, kernel: usize, stride: usize, ceil_mode: bool) -> Result<Var> {
        let x = self.value(input);
        let dims @ [n, c, h, w] = x.dims4("maxpool2d")?;
        let too_big = || Error::invalid(format!("pool kernel {kernel} (stride {stride}) does not fit input {h}x{w}"));
        let oh = pooled_len(h, kernel, stride, 0, ceil_mode).ok_or_else(too_big)?;
        let ow = pooled_len(w, kernel, stride, 0, ceil_mode).ok_or_else(too_big)?;
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = vec![0u32; out.numel()];
        kernels::maxpool2d_forward(dims, kernel, stride, oh, ow, x.data(), out.data_mut(), &mut argmax);
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, rg, Op::MaxPool2d { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::new(x.shape(), x.data().iter().map(|&v| v.max(0.0)).collect())
            .expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(out, rg, Op::Relu { input })
    }

    /// Stack `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4("concat_channels")?;
        let [nb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::DimensionMismatch {
                op: "concat_channels",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * ca * plane..][..ca * plane]);
            data.extend_from_slice(&self.value(b).data()[i * cb * plane..][..cb * plane]);
        }
        let out = Tensor::new([n, ca + cb, h, w], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::ConcatChannels { a, b }))
    }

    /// Global average pool and global max pool, concatenated into `N × 2C`
    /// (averages first).
    pub fn adaptive_pool_pair(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("adaptive_pool_pair")?;
        let plane = h * w;
        let mut out = Tensor::zeros([n, 2 * c]);
        let mut argmax = vec![0u32; n * c];
        for i in 0..n {
            for ch in 0..c {
                let src = &x.data()[(i * c + ch) * plane..][..plane];
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0;
                let mut sum = 0.0f64;
                for (j, &v) in src.iter().enumerate() {
                    sum += f64::from(v);
                    if v > best {
                        best = v;
                        best_idx = j;
                    }
                }
                out.data_mut()[i * 2 * c + ch] = (sum / plane as f64) as f32;
                out.data_mut()[i * 2 * c + c + ch] = best;
                argmax[i * c + ch] = best_idx as u32;
            }
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, rg, Op::AdaptivePoolPair { input, argmax }))
    }

    /// `input · weightᵀ + bias` for `input: N×F`, `weight: G×F`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, f] = self.value(input).dims2("linear")?;
        let [g, wf] = self.value(weight).dims2("linear")?;
        if wf != f {
            return Err(Error::DimensionMismatch {
                op: "linear",
                lhs: self.value(input).shape().to_vec(),
                rhs: self.value(weight).shape().to_vec(),
            });
        }
        self.value(bias).check_shape("linear bias", &[g])?;
        let mut out = Tensor::zeros([n, g]);
        kernels::linear_forward(
            n,
            f,
            g,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            out.data_mut(),
        );
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(out, rg, Op::Linear { input, weight, bias }))
    }

    /// Batch norm over `N×F` using the batch's own statistics.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, BatchStats)> {
        let [n, f] = self.value(input).dims2("batch_norm_1d")?;
        if n < 2 {
            return Err(Error::invalid(format!("batch norm in train mode needs at least 2 samples, got {n}")));
        }
        self.value(gamma).check_shape("batch_norm_1d gamma", &[f])?;
        self.value(beta).check_shape("batch_norm_1d beta", &[f])?;
        let x = self.value(input).data();
        let mut mean = vec![0.0f32; f];
        let mut var = vec![0.0f32; f];
        let mut inv_std = vec![0.0f32; f];
        for j in 0..f {
            let m = (0..n).map(|i| f64::from(x[i * f + j])).sum::<f64>() / n as f64;
            let ss = (0..n).map(|i| (f64::from(x[i * f + j]) - m).powi(2)).sum::<f64>();
            mean[j] = m as f32;
            var[j] = (ss / (n - 1) as f64) as f32;
            inv_std[j] = (1.0 / (ss / n as f64 + f64::from(eps)).sqrt()) as f32;
        }
        let y = self.normalize(input, gamma, beta, &mean, &inv_std, true);
        Ok((y, BatchStats { mean, var }))
    }

    /// Batch norm over `N×F` using fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        let [_, f] = self.value(input).dims2("batch_norm_1d")?;
        self.value(gamma).check_shape("batch_norm_1d gamma", &[f])?;
        self.value(beta).check_shape("batch_norm_1d beta", &[f])?;
        if running_mean.len() != f || running_var.len() != f {
            return Err(Error::DimensionMismatch {
                op: "batch_norm_1d running stats",
                lhs: vec![running_mean.len(), running_var.len()],
                rhs: vec![f, f],
            });
        }
        let inv_std: Vec<f32> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.normalize(input, gamma, beta, running_mean, &inv_std, false))
    }

    fn normalize(&mut self, input: Var, gamma: Var, beta: Var, mean: &[f32], inv_std: &[f32], batch_stats: bool) -> Var {
        let x = self.value(input);
        let f = mean.len();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xhat: Vec<f32> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i % f]) * inv_std[i % f])
            .collect();
        let y: Vec<f32> = xhat.iter().enumerate().map(|(i, &h)| g[i % f] * h + b[i % f]).collect();
        let out = Tensor::new(x.shape(), y).expect("same shape");
        let rg = self.any_grad(&[input, gamma, beta]);
        self.push(
            out,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                batch_stats,
            },
        )
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by `1/(1-p)`.
    /// `rng = None` is evaluation mode (identity).
    pub fn dropout(&mut self, input: Var, p: f32, rng: Option<RngStream>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability must be in [0, 1), got {p}")));
        }
        let Some(stream) = rng.filter(|_| p > 0.0) else {
            return Ok(input);
        };
        let mut r = stream.rng();
        let scale = 1.0 / (1.0 - p);
        let x = self.value(input);
        let mask: Vec<f32> = (0..x.numel())
            .map(|_| if r.random::<f32>() < p { 0.0 } else { scale })
            .collect();
        let out = Tensor::new(x.shape(), x.data().iter().zip(&mask).map(|(a, m)| a * m).collect())?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, rg, Op::Dropout { input, mask }))
    }

    /// Mean cross-entropy of a stable softmax; also returns the probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor)> {
        let x = self.value(logits);
        let [n, k] = x.dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                op: "softmax_cross_entropy labels",
                lhs: vec![labels.len()],
                rhs: vec![n],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_rows(x);
        let mut total = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = &x.data()[i * k..(i + 1) * k];
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let lse = row.iter().map(|&v| f64::from(v - m).exp()).sum::<f64>().ln();
            total += lse - f64::from(row[label] - m);
        }
        let loss = Tensor::scalar((total / n as f64) as f32);
        let rg = self.any_grad(&[logits]);
        let var = self.push(
            loss,
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                probs: probs.data().to_vec(),
                labels: labels.to_vec(),
            },
        );
        Ok((var, probs))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total: f64 = self.value(input).data().iter().map(|&v| f64::from(v)).sum();
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(total as f32), rg, Op::Sum { input })
    }

    /// `Σ weights ⊙ input` against constant weights of the same shape.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor) -> Result<Var> {
        weights.check_shape("weighted_sum", self.value(input).shape())?;
        let total: f64 = self
            .value(input)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum();
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            Tensor::scalar(total as f32),
            rg,
            Op::WeightedSum {
                input,
                weights: weights.data().to_vec(),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(b).check_shape("add", self.value(a).shape())?;
        let out = Tensor::new(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        )?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every leaf with `requires_grad` and every retained node receives its
    /// accumulated gradient; fan-out contributions are summed.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) || node.retain_grad {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geo } => {
                let x = self.value(*input).data().to_vec();
                let w = self.value(*weight).data().to_vec();
                let [dx, dw, db] = self.slots(grads, [*input, *weight, *bias]);
                kernels::conv2d_backward(geo, &x, &w, gd, dx, dw, db);
            }
            Op::MaxPool2d { input, argmax } => {
                let dims = self.value(*input).dims4("maxpool2d").expect("recorded 4-D");
                let out_plane = node.value.shape()[2] * node.value.shape()[3];
                if let [Some(dx)] = self.slots(grads, [*input]) {
                    kernels::maxpool2d_backward(dims, out_plane, argmax, gd, dx);
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data().to_vec();
                if let [Some(dx)] = self.slots(grads, [*input]) {
                    for ((d, &v), &gv) in dx.iter_mut().zip(&x).zip(gd) {
                        if v > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::ConcatChannels { a, b } => {
                let [n, ca, h, w] = self.value(*a).dims4("concat").expect("recorded 4-D");
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                if let [Some(da)] = self.slots(grads, [*a]) {
                    for i in 0..n {
                        let src = &gd[i * (ca + cb) * plane..][..ca * plane];
                        add_into(&mut da[i * ca * plane..][..ca * plane], src);
                    }
                }
                if let [Some(db)] = self.slots(grads, [*b]) {
                    for i in 0..n {
                        let src = &gd[(i * (ca + cb) + ca) * plane..][..cb * plane];
                        add_into(&mut db[i * cb * plane..][..cb * plane], src);
                    }
                }
            }
            Op::AdaptivePoolPair { input, argmax } => {
                let [n, c, h, w] = self.value(*input).dims4("adaptive_pool_pair").expect("recorded 4-D");
                let plane = h * w;
                if let [Some(dx)] = self.slots(grads, [*input]) {
                    for i in 0..n {
                        for ch in 0..c {
                            let dst = &mut dx[(i * c + ch) * plane..][..plane];
                            let avg = gd[i * 2 * c + ch] / plane as f32;
                            dst.iter_mut().for_each(|d| *d += avg);
                            dst[argmax[i * c + ch] as usize] += gd[i * 2 * c + c + ch];
                        }
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let [n, f] = self.value(*input).dims2("linear").expect("recorded 2-D");
                let g_out = node.value.shape()[1];
                let x = self.value(*input).data().to_vec();
                let w = self.value(*weight).data().to_vec();
                let [dx, dw, db] = self.slots(grads, [*input, *weight, *bias]);
                kernels::linear_backward(n, f, g_out, &x, &w, gd, dx, dw, db);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let f = inv_std.len();
                let n = gd.len() / f;
                let gam = self.value(*gamma).data().to_vec();
                let mut sum_g = vec![0.0f64; f];
                let mut sum_gx = vec![0.0f64; f];
                for (i, &gv) in gd.iter().enumerate() {
                    sum_g[i % f] += f64::from(gv);
                    sum_gx[i % f] += f64::from(gv) * f64::from(xhat[i]);
                }
                if let [Some(dg)] = self.slots(grads, [*gamma]) {
                    dg.iter_mut().zip(&sum_gx).for_each(|(d, &s)| *d += s as f32);
                }
                if let [Some(dbeta)] = self.slots(grads, [*beta]) {
                    dbeta.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d += s as f32);
                }
                if let [Some(dx)] = self.slots(grads, [*input]) {
                    for (i, d) in dx.iter_mut().enumerate() {
                        let j = i % f;
                        let scale = f64::from(gam[j]) * f64::from(inv_std[j]);
                        let v = if *batch_stats {
                            scale / n as f64
                                * (n as f64 * f64::from(gd[i]) - sum_g[j] - f64::from(xhat[i]) * sum_gx[j])
                        } else {
                            scale * f64::from(gd[i])
                        };
                        *d += v as f32;
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if let [Some(dx)] = self.slots(grads, [*input]) {
                    for ((d, &m), &gv) in dx.iter_mut().zip(mask).zip(gd) {
                        *d += gv * m;
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let n = labels.len();
                let k = probs.len() / n;
                let upstream = gd[0] / n as f32;
                if let [Some(dx)] = self.slots(grads, [*logits]) {
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dx[i * k + j] += upstream * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum { input } => {
                if let [Some(dx)] = self.slots(grads, [*input]) {
                    dx.iter_mut().for_each(|d| *d += gd[0]);
                }
            }
            Op::WeightedSum { input, weights } => {
                if let [Some(dx)] = self.slots(grads, [*input]) {
                    for (d, &w) in dx.iter_mut().zip(weights) {
                        *d += gd[0] * w;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let [Some(dx)] = self.slots(grads, [v]) {
                        add_into(dx, gd);
                    }
                }
            }
        }
    }

    /// Mutable gradient buffers for the given inputs, `None` for inputs that
    /// do not require gradients. Buffers are created zeroed on first use.
    fn slots<'g, const K: usize>(&self, grads: &'g mut [Option<Tensor>], vars: [Var; K]) -> [Option<&'g mut [f32]>; K] {
        for v in vars {
            if self.nodes[v.0].requires_grad && grads[v.0].is_none() {
                grads[v.0] = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
            }
        }
        let mut out: [Option<&'g mut [f32]>; K] = std::array::from_fn(|_| None);
        // Distinct inputs borrow disjoint slots; a repeated input is served once
        // and its later occurrences get nothing, which keeps accumulation correct
        // only for ops whose repeated inputs are handled separately (Add).
        let mut rest: &'g mut [Option<Tensor>] = grads;
        let mut offset = 0;
        let mut order: Vec<(usize, usize)> = vars.iter().enumerate().map(|(k, v)| (v.0, k)).collect();
        order.sort_unstable();
        let mut last = None;
        for (idx, k) in order {
            if last == Some(idx) || !self.nodes[idx].requires_grad {
                continue;
            }
            last = Some(idx);
            let (_, tail) = rest.split_at_mut(idx - offset);
            let (slot, tail) = tail.split_first_mut().expect("index in range");
            out[k] = slot.as_mut().map(|t| t.data_mut());
            rest = tail;
            offset = idx + 1;
        }
        out
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Row-wise softmax of an `N×K` tensor with max subtraction.
pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let k = *x.shape().last().expect("2-D logits");
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0f64;
        for v in row.iter_mut() {
            let e = f64::from(*v - m).exp();
            *v = e as f32;
            s += e;
        }
        row.iter_mut().for_each(|v| *v = (f64::from(*v) / s) as f32);
    }
    out
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
