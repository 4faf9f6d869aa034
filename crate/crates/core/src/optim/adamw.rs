use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Checkpoint, ParamStore, NUM_GROUPS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Parameters sharing one learning rate, with their Adam moments.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    /// Layer group, 1..=4.
    pub index: u8,
    /// Positions in the model's [`ParamStore`].
    pub params: Vec<usize>,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Updates applied so far; drives bias correction.
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl ParamGroup {
    pub fn new(index: u8, params: Vec<usize>, store: &ParamStore, base_lr: f64, weight_decay: f64) -> Self {
        let zeros = |i: &usize| vec![0.0; store.get(*i).value.numel()];
        ParamGroup {
            index,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            params,
            base_lr,
            weight_decay,
            step: 0,
        }
    }

    pub fn first_moment(&self, k: usize) -> &[f32] {
        &self.m[k]
    }

    pub fn second_moment(&self, k: usize) -> &[f32] {
        &self.v[k]
    }
}

fn check_finite(store: &ParamStore, idx: usize, g: &Tensor) -> Result<()> {
    let p = store.get(idx);
    if g.shape() != p.value.shape() {
        return Err(Error::DimensionMismatch {
            op: "adamw gradient",
            lhs: g.shape().to_vec(),
            rhs: p.value.shape().to_vec(),
        });
    }
    if !g.is_finite() {
        return Err(Error::NonFiniteGradient(p.name.clone()));
    }
    Ok(())
}

/// One AdamW update of every trainable parameter in `group` that has a
/// gradient. `grads` is indexed like the parameter store. Nothing is
/// modified if any gradient is non-finite or misshapen.
///
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ` with bias-corrected `m̂`, `v̂`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    group: &mut ParamGroup,
    store: &mut ParamStore,
    grads: &[Option<Tensor>],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    wd: f64,
) -> Result<()> {
    let live: Vec<usize> = (0..group.params.len())
        .filter(|&k| {
            let i = group.params[k];
            store.get(i).trainable && grads.get(i).is_some_and(Option::is_some)
        })
        .collect();
    for &k in &live {
        let i = group.params[k];
        check_finite(store, i, grads[i].as_ref().unwrap())?;
    }
    if live.is_empty() {
        return Ok(());
    }
    group.step += 1;
    let t = group.step as i32;
    let bc1 = (1.0 - beta1.powi(t)) as f32;
    let bc2 = (1.0 - beta2.powi(t)) as f32;
    let (b1, b2, eps, lr, wd) = (beta1 as f32, beta2 as f32, eps as f32, lr as f32, wd as f32);
    for k in live {
        let i = group.params[k];
        let g = grads[i].as_ref().unwrap().data();
        let theta = store.get_mut(i).value.data_mut();
        let (m, v) = (&mut group.m[k], &mut group.v[k]);
        for j in 0..theta.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            theta[j] = theta[j] - lr * (mhat / (vhat.sqrt() + eps)) - lr * wd * theta[j];
        }
    }
    Ok(())
}

/// AdamW over the four layer groups of a model.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub groups: Vec<ParamGroup>,
}

impl AdamW {
    /// One group per layer group, holding its learnable (non-buffer) params.
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let groups = (1..=NUM_GROUPS as u8)
            .map(|g| {
                let members = (0..store.len())
                    .filter(|&i| store.get(i).group == g && !store.get(i).role.is_buffer())
                    .collect();
                ParamGroup::new(g, members, store, 0.0, config.weight_decay)
            })
            .collect();
        AdamW { config, groups }
    }

    /// Updates every group at its own rate; `beta1` follows the momentum
    /// schedule. Gradients are validated for all groups before any update.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lrs: &[f64; NUM_GROUPS], beta1: f64) -> Result<()> {
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if store.get(i).trainable {
                    check_finite(store, i, g)?;
                }
            }
        }
        let c = self.config;
        for (group, &lr) in self.groups.iter_mut().zip(lrs) {
            let wd = group.weight_decay;
            adamw_step(group, store, grads, lr, beta1, c.beta2, c.eps, wd)?;
        }
        Ok(())
    }

    /// Stores moments as `optim.m.<param>` / `optim.v.<param>` tensors and
    /// step counts as metadata, and sets the optimizer flag.
    pub fn export(&self, store: &ParamStore, ckpt: &mut Checkpoint) {
        for g in &self.groups {
            ckpt.metadata.insert(format!("optim.group{}.step", g.index), g.step.to_string());
            for (k, &i) in g.params.iter().enumerate() {
                let p = store.get(i);
                let shape = p.value.shape().to_vec();
                ckpt.insert(format!("optim.m.{}", p.name), Tensor::new(shape.clone(), g.m[k].clone()).expect("moment shape"));
                ckpt.insert(format!("optim.v.{}", p.name), Tensor::new(shape, g.v[k].clone()).expect("moment shape"));
            }
        }
        ckpt.flags |= crate::model::FLAG_OPTIMIZER_STATE;
    }

    pub fn import(&mut self, store: &ParamStore, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.flags & crate::model::FLAG_OPTIMIZER_STATE == 0 {
            return Err(Error::invalid("checkpoint carries no optimizer state"));
        }
        let mut problems = Vec::new();
        let mut steps = BTreeMap::new();
        for g in &mut self.groups {
            match ckpt.meta_parse::<u64>(&format!("optim.group{}.step", g.index))? {
                Some(s) => {
                    steps.insert(g.index, s);
                }
                None => problems.push(format!("optim.group{}.step", g.index)),
            }
            for (k, &i) in g.params.iter().enumerate() {
                let p = store.get(i);
                for (prefix, slot) in [("optim.m.", &mut g.m[k]), ("optim.v.", &mut g.v[k])] {
                    let key = format!("{prefix}{}", p.name);
                    match ckpt.get(&key) {
                        Some(t) if t.shape() == p.value.shape() => slot.copy_from_slice(t.data()),
                        _ => problems.push(key),
                    }
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::CheckpointMismatch(problems));
        }
        for g in &mut self.groups {
            g.step = steps[&g.index];
        }
        Ok(())
    }
}
