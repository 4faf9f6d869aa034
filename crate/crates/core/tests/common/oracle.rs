//! Independent double-precision reference implementations and a central
//! finite-difference driver. Nothing here calls into the engine's kernels.

#![allow(dead_code)]

use htxc::tensor::{Tape, Var};
use htxc::{RngStream, Tensor};
use rand::Rng;

pub const FD_STEP: f64 = 1e-3;
/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn uniform(shape: &[usize], lo: f32, hi: f32, stream: RngStream) -> Tensor {
    let mut r = stream.rng();
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero (ReLU kink) by `margin`.
pub fn away_from_zero(shape: &[usize], margin: f32, stream: RngStream) -> Tensor {
    let mut r = stream.rng();
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| {
                let m = r.random_range(margin..1.0);
                if r.random::<bool>() { m } else { -m }
            })
            .collect(),
    )
    .unwrap()
}

/// A random permutation of evenly spaced values, so every max is unique by `spacing`.
pub fn distinct(shape: &[usize], spacing: f32, stream: RngStream) -> Tensor {
    let mut r = stream.rng();
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * spacing).collect();
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape, vals).unwrap()
}

pub fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

/// Compare tape gradients of `Σ w ⊙ op(inputs)` with central differences of the
/// double-precision reference. Returns the largest relative error seen.
pub fn check_op(
    inputs: &[Tensor],
    wrt: &[bool],
    op: impl Fn(&mut Tape, &[Var]) -> Var,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
    stream: RngStream,
    max_probes: usize,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().zip(wrt).map(|(t, &g)| tape.leaf(t.clone(), g)).collect();
    let y = op(&mut tape, &vars);
    let out_shape = tape.value(y).shape().to_vec();
    let weights = uniform(&out_shape, -1.0, 1.0, stream.fork(99));
    let loss = tape.weighted_sum(y, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();
    let w64 = to64(&weights);

    let base: Vec<Vec<f64>> = inputs.iter().map(to64).collect();
    let objective = |xs: &[Vec<f64>]| -> f64 {
        let out = reference(xs);
        assert_eq!(out.len(), w64.len(), "reference output size");
        out.iter().zip(&w64).map(|(a, b)| a * b).sum()
    };

    let mut worst = 0.0f64;
    let mut r = stream.fork(7).rng();
    for (i, input) in inputs.iter().enumerate() {
        if !wrt[i] {
            continue;
        }
        let analytic = grads.get(vars[i]).expect("gradient for requested input");
        let n = input.numel();
        let probes: Vec<usize> = if n <= max_probes {
            (0..n).collect()
        } else {
            (0..max_probes).map(|_| r.random_range(0..n)).collect()
        };
        for j in probes {
            let mut xs = base.clone();
            xs[i][j] = base[i][j] + FD_STEP;
            let up = objective(&xs);
            xs[i][j] = base[i][j] - FD_STEP;
            let down = objective(&xs);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(f64::from(analytic.data()[j]), numeric);
            worst = worst.max(e);
        }
    }
    worst
}

pub fn conv2d(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], b: &[f64], stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [o, _, kh, kw] = ws;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for bi in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w[((oc * c + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

pub fn maxpool(x: &[f64], xs: [usize; 4], k: usize, s: usize, ceil: bool) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let len = |l: usize| {
        let mut o = if ceil { (l - k).div_ceil(s) + 1 } else { (l - k) / s + 1 };
        if ceil && (o - 1) * s >= l {
            o -= 1;
        }
        o
    };
    let (oh, ow) = (len(h), len(w));
    let mut out = vec![f64::NEG_INFINITY; n * c * oh * ow];
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let slot = &mut out[(p * oh + oy) * ow + ox];
                for y in oy * s..(oy * s + k).min(h) {
                    for xx in ox * s..(ox * s + k).min(w) {
                        *slot = slot.max(x[(p * h + y) * w + xx]);
                    }
                }
            }
        }
    }
    (out, [n, c, oh, ow])
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn concat(a: &[f64], ca: usize, b: &[f64], cb: usize, n: usize, plane: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..n {
        out.extend_from_slice(&a[i * ca * plane..(i + 1) * ca * plane]);
        out.extend_from_slice(&b[i * cb * plane..(i + 1) * cb * plane]);
    }
    out
}

pub fn pool_pair(x: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * 2 * c];
    for i in 0..n {
        for ch in 0..c {
            let s = &x[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            out[i * 2 * c + ch] = s.iter().sum::<f64>() / plane as f64;
            out[i * 2 * c + c + ch] = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    out
}

pub fn linear(x: &[f64], n: usize, f: usize, w: &[f64], g: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * g];
    for i in 0..n {
        for j in 0..g {
            out[i * g + j] = b[j] + (0..f).map(|k| x[i * f + k] * w[j * f + k]).sum::<f64>();
        }
    }
    out
}

pub fn batch_norm_train(x: &[f64], n: usize, f: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; n * f];
    for j in 0..f {
        let m = (0..n).map(|i| x[i * f + j]).sum::<f64>() / n as f64;
        let v = (0..n).map(|i| (x[i * f + j] - m).powi(2)).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * f + j] = gamma[j] * (x[i * f + j] - m) / (v + eps).sqrt() + beta[j];
        }
    }
    out
}

pub fn batch_norm_eval(x: &[f64], f: usize, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let j = i % f;
            gamma[j] * (v - mean[j]) / (var[j] + eps).sqrt() + beta[j]
        })
        .collect()
}

pub fn softmax_cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    total / n as f64
}
