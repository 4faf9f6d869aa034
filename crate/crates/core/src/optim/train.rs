use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use super::adamw::{AdamW, AdamWConfig};
use super::range_test::RangeTestSubject;
use super::schedule::{discriminative_groups, stage_rates, LrPolicy};
use crate::data::{make_batches, AugmentConfig, BatchSpec, Batches, SampleSource};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Evaluation};
use crate::model::{Checkpoint, Mode, SqueezeNet, NUM_GROUPS};
use crate::tensor::{Gradients, RngStream, Tensor, Var};

/// A run of epochs training a subset of layer groups under one policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub name: String,
    pub groups: Vec<u8>,
    pub epochs: usize,
    /// Peak rate of each layer group.
    pub group_lrs: [f64; NUM_GROUPS],
    pub policy: LrPolicy,
}

/// Head-only warmup followed by full fine-tuning with discriminative rates,
/// both under one-cycle.
pub fn default_stages(lr_max: f64, head_epochs: usize, full_epochs: usize, warmup_fraction: f64) -> Result<Vec<Stage>> {
    let policy = LrPolicy::OneCycle { warmup_fraction };
    Ok(vec![
        Stage {
            name: "head".into(),
            groups: vec![4],
            epochs: head_epochs,
            group_lrs: [lr_max; NUM_GROUPS],
            policy,
        },
        Stage {
            name: "full".into(),
            groups: vec![1, 2, 3, 4],
            epochs: full_epochs,
            group_lrs: discriminative_groups(lr_max, None)?,
            policy,
        },
    ])
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stages: Vec<Stage>,
    pub batch: BatchSpec,
    pub augment: Option<AugmentConfig>,
    pub optimizer: AdamWConfig,
    /// Where `train_log.csv`, `last.htxc` and `best.htxc` go.
    pub out_dir: Option<PathBuf>,
    /// Return after this many epochs in this call (the run stays resumable).
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub group_lrs: [f64; NUM_GROUPS],
    pub momentum: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_error_rate: f64,
    pub wall_ms: u64,
}

const LOG_HEADER: &str = "epoch,step,lr_group1,lr_group2,lr_group3,lr_group4,momentum,train_loss,val_loss,val_error_rate,wall_ms";

/// Floats use their shortest round-trip form so a resumed log is lossless.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        write!(out, "{},{}", r.epoch, r.step).unwrap();
        for lr in r.group_lrs {
            write!(out, ",{lr}").unwrap();
        }
        writeln!(
            out,
            ",{},{},{},{},{}",
            r.momentum, r.train_loss, r.val_loss, r.val_error_rate, r.wall_ms
        )
        .unwrap();
    }
    out
}

pub fn parse_log_csv(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::invalid("training log has an unexpected header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let bad = || Error::invalid(format!("malformed training log row {line:?}"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(LogRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                step: f[1].parse().map_err(|_| bad())?,
                group_lrs: [num(2)?, num(3)?, num(4)?, num(5)?],
                momentum: num(6)?,
                train_loss: num(7)?,
                val_loss: num(8)?,
                val_error_rate: num(9)?,
                wall_ms: f[10].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub best_val_loss: f64,
    /// 1-based epoch of the best validation loss (0 if none ran).
    pub best_epoch: usize,
    pub skipped_batches: usize,
    /// Every stage ran to completion.
    pub finished: bool,
}

/// Where a run stands; persisted in `last.htxc` for resuming.
#[derive(Clone, Debug, PartialEq)]
struct Progress {
    stage: usize,
    stage_epoch: usize,
    epoch: usize,
    step: u64,
    best_val_loss: f64,
    best_epoch: usize,
    log: Vec<LogRow>,
}

impl Progress {
    fn fresh() -> Self {
        Progress {
            stage: 0,
            stage_epoch: 0,
            epoch: 0,
            step: 0,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            log: Vec::new(),
        }
    }

    fn store(&self, ckpt: &mut Checkpoint) {
        let m = &mut ckpt.metadata;
        m.insert("train.stage".into(), self.stage.to_string());
        m.insert("train.stage_epoch".into(), self.stage_epoch.to_string());
        m.insert("train.epoch".into(), self.epoch.to_string());
        m.insert("train.step".into(), self.step.to_string());
        m.insert("train.best_val_loss".into(), format!("{:e}", self.best_val_loss));
        m.insert("train.best_epoch".into(), self.best_epoch.to_string());
        // Timings stay out of checkpoints so they are reproducible byte for byte.
        let untimed: Vec<LogRow> = self.log.iter().map(|r| LogRow { wall_ms: 0, ..r.clone() }).collect();
        m.insert("train.log".into(), log_csv(&untimed));
    }

    fn load(ckpt: &Checkpoint) -> Result<Self> {
        fn need<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
            ckpt.meta_parse(key)?.ok_or_else(|| Error::CheckpointMismatch(vec![key.to_owned()]))
        }
        Ok(Progress {
            stage: need(ckpt, "train.stage")?,
            stage_epoch: need(ckpt, "train.stage_epoch")?,
            epoch: need(ckpt, "train.epoch")?,
            step: need(ckpt, "train.step")?,
            best_val_loss: need(ckpt, "train.best_val_loss")?,
            best_epoch: need(ckpt, "train.best_epoch")?,
            log: parse_log_csv(ckpt.metadata.get("train.log").map(String::as_str).unwrap_or_default())?,
        })
    }
}

/// Gradients of the store's parameters, indexed like the store.
pub fn collect_grads(param_vars: &[Option<Var>], grads: &mut Gradients) -> Vec<Option<Tensor>> {
    param_vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect()
}

/// Number of optimizer steps one epoch takes (single-sample tails are skipped).
pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples / batch_size + usize::from(samples % batch_size >= 2)
}

/// One forward/backward pass and optimizer update; returns the batch loss.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut SqueezeNet,
    opt: &mut AdamW,
    images: &Tensor,
    labels: &[usize],
    lrs: &[f64; NUM_GROUPS],
    momentum: f64,
    dropout: RngStream,
    step: u64,
) -> Result<f64> {
    let mut pass = model.forward(images, Mode::Train(dropout))?;
    let (loss_var, _) = pass.tape.softmax_cross_entropy(pass.logits, labels)?;
    let loss = pass.tape.value(loss_var).item().map_or(f64::NAN, f64::from);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: step as usize });
    }
    let mut grads = pass.tape.backward(loss_var)?;
    let g = collect_grads(&pass.param_vars, &mut grads);
    opt.step(model.params_mut(), &g, lrs, momentum)?;
    Ok(loss)
}

/// Evaluation-mode predictions plus mean cross-entropy over a split.
pub fn evaluate_with_loss(model: &SqueezeNet, source: &dyn SampleSource, spec: &BatchSpec) -> Result<(Evaluation, f64)> {
    let eval = evaluate(model, make_batches(source, spec, 0, false, None)?.map(|b| b.map(|b| (b.images, b.labels))))?;
    let k = eval.num_classes;
    let total: f64 = eval
        .probs
        .chunks(k)
        .zip(&eval.labels)
        .map(|(row, &l)| -f64::from(row[l].max(f32::MIN_POSITIVE)).ln())
        .sum();
    let loss = total / eval.labels.len() as f64;
    Ok((eval, loss))
}

/// Runs the stages in order, logging one row per epoch and checkpointing
/// after every epoch. `resume` continues from a `last.htxc` written by an
/// earlier call with the same configuration.
pub fn train(
    model: &mut SqueezeNet,
    train_set: &dyn SampleSource,
    val_set: &dyn SampleSource,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainReport> {
    let mut opt = AdamW::new(model.params(), cfg.optimizer);
    let mut prog = Progress::fresh();
    if let Some(ckpt) = resume {
        model.load_state(ckpt)?;
        opt.import(model.params(), ckpt)?;
        prog = Progress::load(ckpt)?;
        let timed = cfg.out_dir.as_ref().and_then(|d| fs::read_to_string(d.join("train_log.csv")).ok());
        if let Some(timed) = timed.and_then(|t| parse_log_csv(&t).ok()) {
            for row in &mut prog.log {
                if let Some(t) = timed.iter().find(|t| t.epoch == row.epoch) {
                    row.wall_ms = t.wall_ms;
                }
            }
        }
    }
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
    }
    let seed = cfg.batch.seed;
    let per_epoch = steps_per_epoch(train_set.len(), cfg.batch.batch_size);
    let mut skipped = 0;
    let mut ran = 0;

    while prog.stage < cfg.stages.len() {
        let stage = &cfg.stages[prog.stage];
        if prog.stage_epoch >= stage.epochs {
            prog.stage += 1;
            prog.stage_epoch = 0;
            continue;
        }
        if cfg.stop_after.is_some_and(|n| ran >= n) {
            break;
        }
        model.set_trainable(&stage.groups)?;
        let total = (per_epoch * stage.epochs) as u64;
        let mut stage_step = (prog.stage_epoch * per_epoch) as u64;
        let started = Instant::now();
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        let (mut lrs, mut momentum) = stage_rates(stage.policy, &stage.group_lrs, cfg.optimizer.beta1, 0, total.max(1))?;

        for batch in make_batches(train_set, &cfg.batch, prog.epoch as u64, true, cfg.augment.as_ref())? {
            let batch = match batch {
                Ok(b) => b,
                Err(e) => {
                    log::warn!("skipping a training batch: {e}");
                    skipped += 1;
                    continue;
                }
            };
            if batch.labels.len() < 2 {
                continue;
            }
            (lrs, momentum) = stage_rates(stage.policy, &stage.group_lrs, cfg.optimizer.beta1, stage_step.min(total), total)?;
            let dropout = RngStream::new(seed, "dropout", prog.epoch as u64, prog.step);
            let loss = train_step(model, &mut opt, &batch.images, &batch.labels, &lrs, momentum, dropout, prog.step)?;
            loss_sum += loss * batch.labels.len() as f64;
            seen += batch.labels.len();
            stage_step += 1;
            prog.step += 1;
        }

        let (eval, val_loss) = evaluate_with_loss(model, val_set, &cfg.batch)?;
        prog.epoch += 1;
        prog.stage_epoch += 1;
        prog.log.push(LogRow {
            epoch: prog.epoch,
            step: prog.step,
            group_lrs: lrs,
            momentum,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            val_loss,
            val_error_rate: 1.0 - eval.accuracy(),
            wall_ms: started.elapsed().as_millis() as u64,
        });
        log::info!(
            "epoch {} ({}): train loss {:.4}, val loss {:.4}, val error {:.4}",
            prog.epoch,
            stage.name,
            prog.log.last().unwrap().train_loss,
            val_loss,
            1.0 - eval.accuracy()
        );
        let improved = val_loss < prog.best_val_loss;
        if improved {
            prog.best_val_loss = val_loss;
            prog.best_epoch = prog.epoch;
        }
        if let Some(dir) = &cfg.out_dir {
            if improved {
                Checkpoint::from_model(model).save(dir.join("best.htxc"))?;
            }
            let mut last = Checkpoint::from_model(model);
            opt.export(model.params(), &mut last);
            prog.store(&mut last);
            last.save(dir.join("last.htxc"))?;
            fs::write(dir.join("train_log.csv"), log_csv(&prog.log))?;
        }
        ran += 1;
    }

    let finished = prog.stage >= cfg.stages.len();
    Ok(TrainReport {
        log: prog.log,
        best_val_loss: prog.best_val_loss,
        best_epoch: prog.best_epoch,
        skipped_batches: skipped,
        finished,
    })
}

/// Range-test subject that trains a private copy of a model.
pub struct CnnRangeSubject<'a> {
    model: SqueezeNet,
    opt: AdamW,
    source: &'a dyn SampleSource,
    spec: BatchSpec,
    beta1: f64,
    epoch: u64,
    step: u64,
    batches: Batches<'a>,
}

impl<'a> CnnRangeSubject<'a> {
    pub fn new(model: &SqueezeNet, source: &'a dyn SampleSource, spec: &BatchSpec, optimizer: AdamWConfig) -> Result<Self> {
        let mut copy = model.clone();
        if copy.trainable_parameter_count() == 0 {
            copy.set_trainable(&[1, 2, 3, 4])?;
        }
        Ok(CnnRangeSubject {
            opt: AdamW::new(copy.params(), optimizer),
            model: copy,
            source,
            spec: spec.clone(),
            beta1: optimizer.beta1,
            epoch: 0,
            step: 0,
            batches: make_batches(source, spec, 0, true, None)?,
        })
    }

    pub fn model(&self) -> &SqueezeNet {
        &self.model
    }
}

impl RangeTestSubject for CnnRangeSubject<'_> {
    fn step(&mut self, lr: f64) -> Result<f64> {
        let batch = loop {
            match self.batches.next() {
                Some(Ok(b)) if b.labels.len() >= 2 => break b,
                Some(Ok(_)) => continue,
                Some(Err(e)) => log::warn!("skipping a range-test batch: {e}"),
                None => {
                    self.epoch += 1;
                    self.batches = make_batches(self.source, &self.spec, self.epoch, true, None)?;
                }
            }
        };
        let dropout = RngStream::new(self.spec.seed, "range-test-dropout", self.epoch, self.step);
        let lrs = [lr; NUM_GROUPS];
        let result = train_step(&mut self.model, &mut self.opt, &batch.images, &batch.labels, &lrs, self.beta1, dropout, self.step);
        self.step += 1;
        match result {
            Ok(loss) => Ok(loss),
            Err(Error::NonFiniteLoss { .. }) | Err(Error::NonFiniteGradient(_)) => Ok(f64::NAN),
            Err(e) => Err(e),
        }
    }
}
