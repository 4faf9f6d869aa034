//! Finite-difference gradient checks of every differentiable operator
//! against the double-precision references, plus the whole-network check.
//! Each check panics on failure.

use super::oracle::{self, check_op};
use htxc::model::{Init, Mode, NetworkSpec, SqueezeNet};
use htxc::tensor::Tape;
use htxc::{RngStream, Tensor};

pub const SEEDS: u64 = 10;
pub const TOL: f64 = 1e-3;

fn stream(op: &str, seed: u64) -> RngStream {
    RngStream::new(seed, op, 0, 0)
}

fn dims4(t: &Tensor) -> [usize; 4] {
    t.shape().try_into().unwrap()
}

fn conv_case(xs: [usize; 4], ws: [usize; 4], stride: usize, pad: usize) {
    for seed in 0..SEEDS {
        let s = stream("conv2d", seed);
        let x = oracle::uniform(&xs, -1.0, 1.0, s.fork(1));
        let w = oracle::uniform(&ws, -0.5, 0.5, s.fork(2));
        let b = oracle::uniform(&[ws[0]], -0.5, 0.5, s.fork(3));
        let err = check_op(
            &[x.clone(), w.clone(), b],
            &[true, true, true],
            |t, v| t.conv2d(v[0], v[1], v[2], stride, pad).unwrap(),
            |i| oracle::conv2d(&i[0], dims4(&x), &i[1], dims4(&w), &i[2], stride, pad).0,
            s,
            64,
        );
        assert!(err < TOL, "conv {xs:?} {ws:?} s{stride} p{pad} seed {seed}: {err}");
    }
}

pub fn conv2d_3x3() {
    conv_case([2, 3, 8, 8], [4, 3, 3, 3], 1, 0);
}

pub fn conv2d_padded_and_strided() {
    conv_case([2, 3, 8, 8], [4, 3, 3, 3], 1, 1);
    conv_case([1, 2, 15, 15], [3, 2, 7, 7], 2, 0);
    conv_case([2, 5, 4, 4], [6, 5, 1, 1], 1, 0);
}

pub fn maxpool2d_floor_and_ceil() {
    for ceil in [false, true] {
        for seed in 0..SEEDS {
            let s = stream("maxpool", seed);
            let x = oracle::distinct(&[2, 3, 8, 8], 0.01, s);
            let err = check_op(
                std::slice::from_ref(&x),
                &[true],
                |t, v| t.maxpool2d(v[0], 3, 2, ceil).unwrap(),
                |i| oracle::maxpool(&i[0], dims4(&x), 3, 2, ceil).0,
                s,
                usize::MAX,
            );
            assert!(err < TOL, "maxpool ceil={ceil} seed {seed}: {err}");
        }
    }
}

pub fn relu() {
    for seed in 0..SEEDS {
        let s = stream("relu", seed);
        let x = oracle::away_from_zero(&[3, 17], 0.01, s);
        let err = check_op(&[x], &[true], |t, v| t.relu(v[0]), |i| oracle::relu(&i[0]), s, usize::MAX);
        assert!(err < TOL, "relu seed {seed}: {err}");
    }
}

pub fn concat_channels() {
    for seed in 0..SEEDS {
        let s = stream("concat", seed);
        let a = oracle::uniform(&[2, 3, 4, 5], -1.0, 1.0, s.fork(1));
        let b = oracle::uniform(&[2, 2, 4, 5], -1.0, 1.0, s.fork(2));
        let err = check_op(
            &[a, b],
            &[true, true],
            |t, v| t.concat_channels(v[0], v[1]).unwrap(),
            |i| oracle::concat(&i[0], 3, &i[1], 2, 2, 20),
            s,
            usize::MAX,
        );
        assert!(err < TOL, "concat seed {seed}: {err}");
    }
}

pub fn adaptive_pool_pair() {
    for seed in 0..SEEDS {
        let s = stream("poolpair", seed);
        let x = oracle::distinct(&[2, 4, 5, 5], 0.01, s);
        let err = check_op(
            &[x],
            &[true],
            |t, v| t.adaptive_pool_pair(v[0]).unwrap(),
            |i| oracle::pool_pair(&i[0], 2, 4, 25),
            s,
            usize::MAX,
        );
        assert!(err < TOL, "pool pair seed {seed}: {err}");
    }
}

pub fn linear() {
    for seed in 0..SEEDS {
        let s = stream("linear", seed);
        let x = oracle::uniform(&[4, 6], -1.0, 1.0, s.fork(1));
        let w = oracle::uniform(&[5, 6], -1.0, 1.0, s.fork(2));
        let b = oracle::uniform(&[5], -1.0, 1.0, s.fork(3));
        let err = check_op(
            &[x, w, b],
            &[true, true, true],
            |t, v| t.linear(v[0], v[1], v[2]).unwrap(),
            |i| oracle::linear(&i[0], 4, 6, &i[1], 5, &i[2]),
            s,
            usize::MAX,
        );
        assert!(err < TOL, "linear seed {seed}: {err}");
    }
}

pub fn batch_norm_train_mode() {
    for seed in 0..SEEDS {
        let s = stream("bn-train", seed);
        let x = oracle::uniform(&[5, 3], -2.0, 2.0, s.fork(1));
        let g = oracle::uniform(&[3], 0.5, 1.5, s.fork(2));
        let b = oracle::uniform(&[3], -0.5, 0.5, s.fork(3));
        let err = check_op(
            &[x, g, b],
            &[true, true, true],
            |t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0,
            |i| oracle::batch_norm_train(&i[0], 5, 3, &i[1], &i[2], 1e-5),
            s,
            usize::MAX,
        );
        assert!(err < TOL, "bn train seed {seed}: {err}");
    }
}

pub fn batch_norm_eval_mode() {
    let mean = [0.2f32, -0.1, 0.4];
    let var = [0.5f32, 1.5, 0.9];
    for seed in 0..SEEDS {
        let s = stream("bn-eval", seed);
        let x = oracle::uniform(&[4, 3], -2.0, 2.0, s.fork(1));
        let g = oracle::uniform(&[3], 0.5, 1.5, s.fork(2));
        let b = oracle::uniform(&[3], -0.5, 0.5, s.fork(3));
        let m64: Vec<f64> = mean.iter().map(|&v| f64::from(v)).collect();
        let v64: Vec<f64> = var.iter().map(|&v| f64::from(v)).collect();
        let err = check_op(
            &[x, g, b],
            &[true, true, true],
            |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap(),
            |i| oracle::batch_norm_eval(&i[0], 3, &i[1], &i[2], &m64, &v64, 1e-5),
            s,
            usize::MAX,
        );
        assert!(err < TOL, "bn eval seed {seed}: {err}");
    }
}

pub fn softmax_cross_entropy() {
    for seed in 0..SEEDS {
        let s = stream("xent", seed);
        let x = oracle::uniform(&[4, 8], -3.0, 3.0, s.fork(1));
        let labels = [seed as usize % 8, 3, 7, 0];
        let err = check_op(
            &[x],
            &[true],
            |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap().0,
            |i| vec![oracle::softmax_cross_entropy(&i[0], 8, &labels)],
            s,
            usize::MAX,
        );
        assert!(err < TOL, "cross entropy seed {seed}: {err}");
    }
}

pub fn dropout_reuses_mask() {
    for seed in 0..SEEDS {
        let s = stream("dropout", seed);
        let x = oracle::away_from_zero(&[6, 10], 0.1, s.fork(1));
        let drop = RngStream::new(seed, "mask", 0, 0);
        // The mask is recovered from one forward pass and frozen for the reference.
        let mut probe = Tape::new();
        let xv = probe.leaf(x.clone(), false);
        let yv = probe.dropout(xv, 0.3, Some(drop)).unwrap();
        let mask: Vec<f64> = probe
            .value(yv)
            .data()
            .iter()
            .zip(x.data())
            .map(|(&y, &xv)| f64::from(y) / f64::from(xv))
            .collect();
        let err = check_op(
            &[x],
            &[true],
            |t, v| t.dropout(v[0], 0.3, Some(drop)).unwrap(),
            |i| i[0].iter().zip(&mask).map(|(a, m)| a * m).collect(),
            s,
            usize::MAX,
        );
        assert!(err < TOL, "dropout seed {seed}: {err}");
    }
}


fn build(size: usize, seed: u64) -> SqueezeNet {
    SqueezeNet::build(NetworkSpec::standard().with_input_size(size), Init::Kaiming, RngStream::new(seed, "init", 0, 0)).unwrap()
}

fn random_input(n: usize, size: usize, stream: RngStream) -> Tensor {
    use rand::Rng;
    let mut r = stream.rng();
    Tensor::from_fn([n, 3, size, size], |_| r.random_range(-1.0f32..1.0))
}

fn loss_of(model: &SqueezeNet, x: &Tensor, labels: &[usize]) -> f64 {
    let mut m = model.clone();
    let mut pass = m.forward(x, Mode::Eval).unwrap();
    let (loss, _) = pass.tape.softmax_cross_entropy(pass.logits, labels).unwrap();
    f64::from(pass.tape.value(loss).item().unwrap())
}

/// Analytic gradient of `names` against central differences at the
/// `per_tensor` largest-gradient entries of each tensor.
pub fn network_fd_check(names: &[&str], per_tensor: usize, tol: f64) {
    for seed in 0..10 {
        let model = build(64, seed);
        let x = random_input(4, 64, RngStream::new(seed, "input", 0, 0));
        let labels = [0, 3, 5, 7];

        let mut m = model.clone();
        let mut pass = m.forward(&x, Mode::Eval).unwrap();
        let (loss, _) = pass.tape.softmax_cross_entropy(pass.logits, &labels).unwrap();
        let vars = pass.param_vars.clone();
        let grads = pass.tape.backward(loss).unwrap();

        for name in names {
            let idx = model.params().index_of(name).unwrap();
            let g = grads.get(vars[idx].unwrap()).unwrap().data().to_vec();
            let mut order: Vec<usize> = (0..g.len()).collect();
            order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
            for &i in order.iter().take(per_tensor) {
                let h = 1e-3f32;
                let mut plus = model.clone();
                plus.params_mut().get_mut(idx).value.data_mut()[i] += h;
                let mut minus = model.clone();
                minus.params_mut().get_mut(idx).value.data_mut()[i] -= h;
                let fd = (loss_of(&plus, &x, &labels) - loss_of(&minus, &x, &labels)) / (2.0 * f64::from(h));
                let an = f64::from(g[i]);
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(rel < tol, "seed {seed} {name}[{i}]: analytic {an} vs numeric {fd}");
            }
        }
    }
}

/// One probe in the last Fire module and one in each head linear layer.
/// Batch norm uses running statistics.
pub fn end_to_end_probe_set_matches_finite_differences() {
    network_fd_check(&["backbone.fire8.expand3x3.weight", "head.linear1.weight", "head.linear2.weight"], 1, 1e-2);
}

/// Early layers feed thousands of ReLU and max-pool units, so a step of
/// 1e-3 in f32 crosses kinks and only a few percent agreement is possible.
/// The per-op checks carry the tight tolerance there.
pub fn early_layer_gradients_agree_with_finite_differences() {
    network_fd_check(&["backbone.conv1.weight", "backbone.fire5.expand3x3.weight", "head.linear2.weight"], 3, 5e-2);
}


/// Every check above, by name.
pub const ALL: [(&str, fn()); 13] = [
    ("conv2d 3x3", conv2d_3x3),
    ("conv2d padded/strided/1x1", conv2d_padded_and_strided),
    ("maxpool2d floor/ceil", maxpool2d_floor_and_ceil),
    ("relu", relu),
    ("concat_channels", concat_channels),
    ("adaptive_pool_pair", adaptive_pool_pair),
    ("linear", linear),
    ("batch_norm train", batch_norm_train_mode),
    ("batch_norm eval", batch_norm_eval_mode),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("dropout", dropout_reuses_mask),
    ("network probe set", end_to_end_probe_set_matches_finite_differences),
    ("network early layers", early_layer_gradients_agree_with_finite_differences),
];
