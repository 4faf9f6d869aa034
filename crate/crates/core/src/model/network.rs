use rand_distr::{Distribution, Normal};

use super::checkpoint::Checkpoint;
use super::params::{ParamRole, ParamStore};
use super::spec::{LayerSpec, NetworkSpec, NUM_GROUPS};
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, RngStream, Tape, Tensor, Var};

/// Forward-pass mode. Training draws dropout masks from the given stream.
#[derive(Clone, Copy, Debug)]
pub enum Mode {
    Train(RngStream),
    Eval,
}

/// Weight initialization for [`SqueezeNet::build`].
pub enum Init<'a> {
    Kaiming,
    /// Backbone tensors come from the checkpoint; the head is always fresh.
    Pretrained(&'a Checkpoint),
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct FireLayer {
    squeeze: ConvLayer,
    expand1x1: Option<ConvLayer>,
    expand3x3: Option<ConvLayer>,
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    Conv(ConvLayer),
    Pool { kernel: usize, stride: usize },
    Fire(FireLayer),
}

#[derive(Clone, Copy, Debug)]
struct BnLayer {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Copy, Debug)]
struct LinearLayer {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Head {
    bn1: BnLayer,
    linear1: LinearLayer,
    bn2: BnLayer,
    linear2: LinearLayer,
}

/// Result of one forward pass, ready for a loss and [`Tape::backward`].
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    pub probs: Tensor,
    /// Output of the last Fire module (the Grad-CAM target layer).
    pub features: Var,
    /// Tape handle of every parameter that took part, indexed like the store.
    pub param_vars: Vec<Option<Var>>,
    /// `(layer name, output shape)` in evaluation order.
    pub trace: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug)]
pub struct SqueezeNet {
    spec: NetworkSpec,
    params: ParamStore,
    layers: Vec<(String, Layer)>,
    head: Head,
    class_names: Vec<String>,
}

struct GraphBuilder<'m> {
    model: &'m SqueezeNet,
    tape: Tape,
    vars: Vec<Option<Var>>,
    grad_params: bool,
}

impl GraphBuilder<'_> {
    fn param(&mut self, idx: usize) -> Var {
        if let Some(v) = self.vars[idx] {
            return v;
        }
        let p = self.model.params.get(idx);
        let v = self.tape.leaf(p.value.clone(), self.grad_params && p.trainable);
        self.vars[idx] = Some(v);
        v
    }

    fn conv_relu(&mut self, x: Var, conv: ConvLayer) -> Result<Var> {
        let w = self.param(conv.weight);
        let b = self.param(conv.bias);
        let y = self.tape.conv2d(x, w, b, conv.stride, conv.padding)?;
        Ok(self.tape.relu(y))
    }
}

impl SqueezeNet {
    pub fn build(spec: NetworkSpec, init: Init<'_>, rng: RngStream) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::default();
        let mut layers = Vec::new();
        let mut channels = spec.in_channels;

        let add_conv = |params: &mut ParamStore, name: String, cin: usize, cout: usize, k: usize, stride, padding, group| {
            let weight = params.push(format!("{name}.weight"), Tensor::zeros([cout, cin, k, k]), group, ParamRole::Weight);
            let bias = params.push(format!("{name}.bias"), Tensor::zeros([cout]), group, ParamRole::Bias);
            ConvLayer {
                weight,
                bias,
                stride,
                padding,
            }
        };

        for layer in &spec.layers {
            let base = format!("backbone.{}", layer.name());
            let built = match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    group,
                    ..
                } => {
                    let c = add_conv(&mut params, base, channels, *out_channels, *kernel, *stride, 0, *group);
                    channels = *out_channels;
                    Layer::Conv(c)
                }
                LayerSpec::MaxPool { kernel, stride, .. } => Layer::Pool {
                    kernel: *kernel,
                    stride: *stride,
                },
                LayerSpec::Fire { spec: fire, group, .. } => {
                    let squeeze = add_conv(&mut params, format!("{base}.squeeze"), channels, fire.squeeze, 1, 1, 0, *group);
                    let expand1x1 = (fire.expand1x1 > 0).then(|| {
                        add_conv(&mut params, format!("{base}.expand1x1"), fire.squeeze, fire.expand1x1, 1, 1, 0, *group)
                    });
                    let expand3x3 = (fire.expand3x3 > 0).then(|| {
                        add_conv(&mut params, format!("{base}.expand3x3"), fire.squeeze, fire.expand3x3, 3, 1, 1, *group)
                    });
                    channels = fire.out_channels();
                    Layer::Fire(FireLayer {
                        squeeze,
                        expand1x1,
                        expand3x3,
                    })
                }
            };
            layers.push((layer.name().to_string(), built));
        }

        let pooled = 2 * channels;
        let hidden = spec.head.hidden;
        let add_bn = |params: &mut ParamStore, name: &str, f: usize| BnLayer {
            gamma: params.push(format!("head.{name}.weight"), Tensor::full([f], 1.0), 4, ParamRole::Scale),
            beta: params.push(format!("head.{name}.bias"), Tensor::zeros([f]), 4, ParamRole::Shift),
            mean: params.push(format!("head.{name}.running_mean"), Tensor::zeros([f]), 4, ParamRole::RunningMean),
            var: params.push(format!("head.{name}.running_var"), Tensor::full([f], 1.0), 4, ParamRole::RunningVar),
        };
        let add_linear = |params: &mut ParamStore, name: &str, fin: usize, fout: usize| LinearLayer {
            weight: params.push(format!("head.{name}.weight"), Tensor::zeros([fout, fin]), 4, ParamRole::Weight),
            bias: params.push(format!("head.{name}.bias"), Tensor::zeros([fout]), 4, ParamRole::Bias),
        };
        let bn1 = add_bn(&mut params, "bn1", pooled);
        let linear1 = add_linear(&mut params, "linear1", pooled, hidden);
        let bn2 = add_bn(&mut params, "bn2", hidden);
        let linear2 = add_linear(&mut params, "linear2", hidden, spec.num_classes);

        let class_names = default_class_names(spec.num_classes);
        let mut model = Self {
            spec,
            params,
            layers,
            head: Head {
                bn1,
                linear1,
                bn2,
                linear2,
            },
            class_names,
        };
        model.kaiming_init(rng)?;
        if let Init::Pretrained(ckpt) = init {
            model.load_backbone(ckpt)?;
        }
        Ok(model)
    }

    /// He-normal weights (fan-in, ReLU gain), zero biases.
    fn kaiming_init(&mut self, rng: RngStream) -> Result<()> {
        for (idx, p) in self.params.iter_mut().enumerate() {
            if p.role != ParamRole::Weight {
                continue;
            }
            let fan_in: usize = p.value.shape()[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
            let mut r = rng.fork(idx as u64).rng();
            p.value.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut r) as f32);
        }
        Ok(())
    }

    fn load_backbone(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut bad = Vec::new();
        for p in self.params.iter().filter(|p| p.name.starts_with("backbone.")) {
            match ckpt.get(&p.name) {
                Some(t) if t.shape() == p.value.shape() => {}
                Some(t) => bad.push(format!("{} (expected {:?}, found {:?})", p.name, p.value.shape(), t.shape())),
                None => bad.push(format!("{} (missing)", p.name)),
            }
        }
        if !bad.is_empty() {
            return Err(Error::CheckpointMismatch(bad));
        }
        for p in self.params.iter_mut().filter(|p| p.name.starts_with("backbone.")) {
            p.value = ckpt.get(&p.name).expect("checked above").clone();
        }
        Ok(())
    }

    /// Replace every tensor (parameters and running statistics) from a checkpoint.
    pub fn load_state(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut bad = Vec::new();
        for p in self.params.iter() {
            match ckpt.get(&p.name) {
                Some(t) if t.shape() == p.value.shape() => {}
                Some(t) => bad.push(format!("{} (expected {:?}, found {:?})", p.name, p.value.shape(), t.shape())),
                None => bad.push(format!("{} (missing)", p.name)),
            }
        }
        if !bad.is_empty() {
            return Err(Error::CheckpointMismatch(bad));
        }
        for p in self.params.iter_mut() {
            p.value = ckpt.get(&p.name).expect("checked above").clone();
        }
        if !ckpt.class_names.is_empty() {
            self.set_class_names(ckpt.class_names.clone())?;
        }
        Ok(())
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn set_class_names(&mut self, names: Vec<String>) -> Result<()> {
        if names.len() != self.spec.num_classes {
            return Err(Error::invalid(format!(
                "{} class names for a {}-class model",
                names.len(),
                self.spec.num_classes
            )));
        }
        self.class_names = names;
        Ok(())
    }

    /// Learnable parameter count (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.params.learnable_count()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Unfreeze exactly the listed layer groups.
    pub fn set_trainable(&mut self, groups: &[u8]) -> Result<()> {
        if groups.is_empty() {
            return Err(Error::invalid("at least one layer group must be trainable"));
        }
        if let Some(g) = groups.iter().find(|g| !(1..=NUM_GROUPS as u8).contains(g)) {
            return Err(Error::invalid(format!("layer group {g} out of range")));
        }
        for p in self.params.iter_mut() {
            p.trainable = !p.role.is_buffer() && groups.contains(&p.group);
        }
        Ok(())
    }

    pub fn trainable_groups(&self) -> Vec<u8> {
        let mut g: Vec<u8> = self.params.iter().filter(|p| p.trainable).map(|p| p.group).collect();
        g.sort_unstable();
        g.dedup();
        g
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = self.spec.input_size;
        match input.shape() {
            [n, c, h, w] if *n >= 1 && *c == self.spec.in_channels && *h == s && *w == s => Ok(()),
            other => Err(Error::DimensionMismatch {
                op: "network input",
                lhs: other.to_vec(),
                rhs: vec![input.shape().first().copied().unwrap_or(1), self.spec.in_channels, s, s],
            }),
        }
    }

    /// Forward pass. In training mode the batch-norm running statistics of
    /// unfrozen layers are updated and parameter gradients are recorded.
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<ForwardPass> {
        let (pass, stats) = self.graph(input, mode, true, false)?;
        let momentum = self.spec.bn_momentum;
        for (bn, s) in stats {
            blend(&mut self.params.get_mut(bn.mean).value, &s.mean, momentum);
            blend(&mut self.params.get_mut(bn.var).value, &s.var, momentum);
        }
        Ok(pass)
    }

    /// Evaluation-mode pass without parameter gradients.
    pub fn infer(&self, input: &Tensor) -> Result<ForwardPass> {
        Ok(self.graph(input, Mode::Eval, false, false)?.0)
    }

    /// Evaluation-mode pass that retains the gradient of the final feature map.
    pub fn explain_pass(&self, input: &Tensor) -> Result<ForwardPass> {
        Ok(self.graph(input, Mode::Eval, false, true)?.0)
    }

    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.infer(input)?.probs)
    }

    fn graph(&self, input: &Tensor, mode: Mode, grad_params: bool, retain_features: bool) -> Result<(ForwardPass, Vec<(BnLayer, BatchStats)>)> {
        self.check_input(input)?;
        let mut b = GraphBuilder {
            model: self,
            tape: Tape::new(),
            vars: vec![None; self.params.len()],
            grad_params,
        };
        let mut trace = Vec::new();
        let mut x = b.tape.leaf(input.clone(), false);
        for (name, layer) in &self.layers {
            x = match *layer {
                Layer::Conv(conv) => b.conv_relu(x, conv)?,
                Layer::Pool { kernel, stride } => b.tape.maxpool2d(x, kernel, stride, true)?,
                Layer::Fire(fire) => {
                    let s = b.conv_relu(x, fire.squeeze)?;
                    let e1 = fire.expand1x1.map(|c| b.conv_relu(s, c)).transpose()?;
                    let e3 = fire.expand3x3.map(|c| b.conv_relu(s, c)).transpose()?;
                    match (e1, e3) {
                        (Some(a), Some(c)) => b.tape.concat_channels(a, c)?,
                        (Some(a), None) | (None, Some(a)) => a,
                        (None, None) => unreachable!("fire spec has an expand branch"),
                    }
                }
            };
            trace.push((name.clone(), b.tape.value(x).shape().to_vec()));
        }
        let features = x;
        if retain_features {
            b.tape.retain_grad(features);
        }

        let train_rng = match mode {
            Mode::Train(r) => Some(r),
            Mode::Eval => None,
        };
        let mut stats = Vec::new();
        let pooled = b.tape.adaptive_pool_pair(features)?;
        trace.push(("pool_concat".into(), b.tape.value(pooled).shape().to_vec()));
        let h = self.batch_norm(&mut b, pooled, self.head.bn1, train_rng.is_some(), &mut stats)?;
        let h = b.tape.dropout(h, self.spec.head.dropout1, train_rng.map(|r| r.fork(1)))?;
        let (w1, b1) = (b.param(self.head.linear1.weight), b.param(self.head.linear1.bias));
        let h = b.tape.linear(h, w1, b1)?;
        let h = b.tape.relu(h);
        trace.push(("linear1".into(), b.tape.value(h).shape().to_vec()));
        let h = self.batch_norm(&mut b, h, self.head.bn2, train_rng.is_some(), &mut stats)?;
        let h = b.tape.dropout(h, self.spec.head.dropout2, train_rng.map(|r| r.fork(2)))?;
        let (w2, b2) = (b.param(self.head.linear2.weight), b.param(self.head.linear2.bias));
        let logits = b.tape.linear(h, w2, b2)?;
        trace.push(("logits".into(), b.tape.value(logits).shape().to_vec()));
        let probs = crate::tensor::softmax_rows(b.tape.value(logits));

        Ok((
            ForwardPass {
                tape: b.tape,
                logits,
                probs,
                features,
                param_vars: b.vars,
                trace,
            },
            stats,
        ))
    }

    /// Frozen batch-norm layers normalize with their running statistics.
    fn batch_norm(&self, b: &mut GraphBuilder<'_>, x: Var, bn: BnLayer, train: bool, stats: &mut Vec<(BnLayer, BatchStats)>) -> Result<Var> {
        let gamma = b.param(bn.gamma);
        let beta = b.param(bn.beta);
        let eps = self.spec.bn_eps;
        if train && self.params.get(bn.gamma).trainable {
            let (y, s) = b.tape.batch_norm_train(x, gamma, beta, eps)?;
            stats.push((bn, s));
            Ok(y)
        } else {
            b.tape.batch_norm_eval(
                x,
                gamma,
                beta,
                self.params.get(bn.mean).value.data(),
                self.params.get(bn.var).value.data(),
                eps,
            )
        }
    }
}

fn blend(running: &mut Tensor, batch: &[f32], momentum: f32) {
    for (r, &b) in running.data_mut().iter_mut().zip(batch) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}

fn default_class_names(k: usize) -> Vec<String> {
    if k == super::spec::CRC_CLASS_NAMES.len() {
        super::spec::CRC_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|i| format!("class{i}")).collect()
    }
}
