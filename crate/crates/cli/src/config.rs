//! Flat `key = value` run configuration shared by every subcommand.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use htxc::data::AugmentConfig;
use htxc::model::NUM_GROUPS;
use htxc::optim::{AdamWConfig, RangeTestConfig};
use htxc::stain::StainParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    OneCycle,
    Constant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; kernels are single-threaded, so only 1 is accepted.
    pub threads: usize,
    pub data_root: Option<PathBuf>,
    pub split_ratios: [f64; 3],
    pub input_size: usize,
    pub hidden: usize,
    pub dropout: [f32; 2],
    pub batch_size: usize,
    pub lr_max: f64,
    pub head_epochs: usize,
    pub full_epochs: usize,
    pub warmup: f64,
    /// Explicit peak rates of groups 1–4 for the full stage.
    pub group_lrs: Option<[f64; NUM_GROUPS]>,
    pub policy: Policy,
    pub augment_enabled: bool,
    pub augment: AugmentConfig,
    pub optim: AdamWConfig,
    pub stain: StainParams,
    pub lrfind: RangeTestConfig,
    pub bench_sizes: Vec<usize>,
    pub bench_repeats: usize,
    pub bench_warmup: usize,
    pub overlay_alpha: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 1,
            data_root: None,
            split_ratios: [0.6, 0.2, 0.2],
            input_size: 224,
            hidden: 512,
            dropout: [0.25, 0.5],
            batch_size: 32,
            lr_max: 0.01,
            head_epochs: 2,
            full_epochs: 12,
            warmup: 0.3,
            group_lrs: None,
            policy: Policy::OneCycle,
            augment_enabled: true,
            augment: AugmentConfig::default(),
            optim: AdamWConfig::default(),
            stain: StainParams::default(),
            lrfind: RangeTestConfig::default(),
            bench_sizes: vec![1, 2, 4, 8, 16, 32, 64],
            bench_repeats: 5,
            bench_warmup: 2,
            overlay_alpha: 0.5,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| anyhow!("`{key}` expects a number, got {v:?}"))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => bail!("`{key}` expects true or false, got {v:?}"),
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key; unknown keys and malformed values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let a = &mut self.augment;
        match key {
            "seed" => self.seed = num(key, v)?,
            "threads" => self.threads = num(key, v)?,
            "data.root" => self.data_root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "split.train" => self.split_ratios[0] = num(key, v)?,
            "split.val" => self.split_ratios[1] = num(key, v)?,
            "split.test" => self.split_ratios[2] = num(key, v)?,
            "model.input_size" => self.input_size = num(key, v)?,
            "model.hidden" => self.hidden = num(key, v)?,
            "model.dropout1" => self.dropout[0] = num(key, v)?,
            "model.dropout2" => self.dropout[1] = num(key, v)?,
            "train.batch_size" => self.batch_size = num(key, v)?,
            "train.lr_max" => self.lr_max = num(key, v)?,
            "train.head_epochs" => self.head_epochs = num(key, v)?,
            "train.full_epochs" => self.full_epochs = num(key, v)?,
            "train.warmup" => self.warmup = num(key, v)?,
            "train.group_lrs" => {
                self.group_lrs = match v {
                    "" | "auto" => None,
                    _ => {
                        let rates: Vec<f64> = list(key, v)?;
                        Some(rates.try_into().map_err(|_| anyhow!("`{key}` needs {NUM_GROUPS} rates, got {v:?}"))?)
                    }
                }
            }
            "train.policy" => {
                self.policy = match v {
                    "one_cycle" => Policy::OneCycle,
                    "constant" => Policy::Constant,
                    _ => bail!("`{key}` is one_cycle or constant, got {v:?}"),
                }
            }
            "train.augment" => self.augment_enabled = flag(key, v)?,
            "optim.beta1" => self.optim.beta1 = num(key, v)?,
            "optim.beta2" => self.optim.beta2 = num(key, v)?,
            "optim.eps" => self.optim.eps = num(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = num(key, v)?,
            "augment.probability" => a.probability = num(key, v)?,
            "augment.flip_horizontal" => a.flip_horizontal = flag(key, v)?,
            "augment.flip_vertical" => a.flip_vertical = flag(key, v)?,
            "augment.rotate" => a.rotate = flag(key, v)?,
            "augment.rotations" => a.rotations = list(key, v)?,
            "augment.zoom" => a.zoom = flag(key, v)?,
            "augment.zoom_min" => a.zoom_min = num(key, v)?,
            "augment.zoom_max" => a.zoom_max = num(key, v)?,
            "augment.warp" => a.warp = flag(key, v)?,
            "augment.warp_magnitude" => a.warp_magnitude = num(key, v)?,
            "augment.jitter" => a.jitter = flag(key, v)?,
            "augment.jitter_max" => a.jitter_max = num(key, v)?,
            "augment.lighting" => a.lighting = flag(key, v)?,
            "augment.brightness" => a.brightness = num(key, v)?,
            "augment.contrast" => a.contrast = num(key, v)?,
            "augment.blur" => a.blur = flag(key, v)?,
            "augment.blur_sigma_min" => a.blur_sigma_min = num(key, v)?,
            "augment.blur_sigma_max" => a.blur_sigma_max = num(key, v)?,
            "augment.elastic" => a.elastic = flag(key, v)?,
            "augment.elastic_alpha" => a.elastic_alpha = num(key, v)?,
            "augment.elastic_sigma" => a.elastic_sigma = num(key, v)?,
            "stain.beta" => self.stain.beta = num(key, v)?,
            "stain.lambda" => self.stain.lambda = num(key, v)?,
            "stain.density_lambda" => self.stain.density_lambda = num(key, v)?,
            "stain.max_iters" => self.stain.max_iters = num(key, v)?,
            "stain.tol" => self.stain.tol = num(key, v)?,
            "stain.max_pixels" => self.stain.max_pixels = num(key, v)?,
            "stain.percentile" => self.stain.percentile = num(key, v)?,
            "lrfind.lr_lo" => self.lrfind.lr_lo = num(key, v)?,
            "lrfind.lr_hi" => self.lrfind.lr_hi = num(key, v)?,
            "lrfind.iters" => self.lrfind.iters = num(key, v)?,
            "lrfind.smooth_beta" => self.lrfind.smooth_beta = num(key, v)?,
            "lrfind.divergence_factor" => self.lrfind.divergence_factor = num(key, v)?,
            "bench.batch_sizes" => self.bench_sizes = list(key, v)?,
            "bench.repeats" => self.bench_repeats = num(key, v)?,
            "bench.warmup" => self.bench_warmup = num(key, v)?,
            "explain.alpha" => self.overlay_alpha = num(key, v)?,
            _ => bail!("unknown configuration key `{key}`"),
        }
        Ok(())
    }

    /// Applies `key=value` (or `key = value`) text; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected key = value, got {raw:?}", n + 1))?;
            self.set(k.trim(), v).with_context(|| format!("{origin}:{}", n + 1))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.merge_text(&text, &path.display().to_string())
    }

    /// Parses one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("override {assignment:?} is not key=value"))?;
        self.set(k.trim(), v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads != 1 {
            bail!("threads = {} requested, but kernels run on a single thread", self.threads);
        }
        let total: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|&r| !(r >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            bail!("split ratios {:?} must be non-negative and sum to 1", self.split_ratios);
        }
        if self.input_size < 32 {
            bail!("model.input_size {} is too small for the backbone (minimum 32)", self.input_size);
        }
        if self.batch_size < 2 {
            bail!("train.batch_size must be at least 2 for batch normalization");
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            bail!("train.lr_max must be positive");
        }
        if !(self.warmup > 0.0 && self.warmup < 1.0) {
            bail!("train.warmup must lie in (0, 1)");
        }
        if self.bench_sizes.is_empty() || self.bench_sizes.contains(&0) {
            bail!("bench.batch_sizes must list positive sizes");
        }
        if self.bench_repeats < 5 {
            bail!("bench.repeats must be at least 5");
        }
        if !(0.0..=1.0).contains(&self.overlay_alpha) {
            bail!("explain.alpha must lie in [0, 1]");
        }
        self.augment.validate()?;
        htxc::optim::discriminative_groups(self.lr_max, self.group_lrs)?;
        Ok(())
    }

    /// Every key with its current value, in a form [`RunConfig::merge_text`] reads back.
    pub fn to_text(&self) -> String {
        let a = &self.augment;
        let s = &self.stain;
        let r = &self.lrfind;
        let entries: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("data.root", self.data_root.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("split.train", self.split_ratios[0].to_string()),
            ("split.val", self.split_ratios[1].to_string()),
            ("split.test", self.split_ratios[2].to_string()),
            ("model.input_size", self.input_size.to_string()),
            ("model.hidden", self.hidden.to_string()),
            ("model.dropout1", self.dropout[0].to_string()),
            ("model.dropout2", self.dropout[1].to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.lr_max", self.lr_max.to_string()),
            ("train.head_epochs", self.head_epochs.to_string()),
            ("train.full_epochs", self.full_epochs.to_string()),
            ("train.warmup", self.warmup.to_string()),
            ("train.group_lrs", self.group_lrs.map(|g| join(&g)).unwrap_or_else(|| "auto".into())),
            (
                "train.policy",
                match self.policy {
                    Policy::OneCycle => "one_cycle".into(),
                    Policy::Constant => "constant".into(),
                },
            ),
            ("train.augment", self.augment_enabled.to_string()),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.eps", self.optim.eps.to_string()),
            ("optim.weight_decay", self.optim.weight_decay.to_string()),
            ("augment.probability", a.probability.to_string()),
            ("augment.flip_horizontal", a.flip_horizontal.to_string()),
            ("augment.flip_vertical", a.flip_vertical.to_string()),
            ("augment.rotate", a.rotate.to_string()),
            ("augment.rotations", join(&a.rotations)),
            ("augment.zoom", a.zoom.to_string()),
            ("augment.zoom_min", a.zoom_min.to_string()),
            ("augment.zoom_max", a.zoom_max.to_string()),
            ("augment.warp", a.warp.to_string()),
            ("augment.warp_magnitude", a.warp_magnitude.to_string()),
            ("augment.jitter", a.jitter.to_string()),
            ("augment.jitter_max", a.jitter_max.to_string()),
            ("augment.lighting", a.lighting.to_string()),
            ("augment.brightness", a.brightness.to_string()),
            ("augment.contrast", a.contrast.to_string()),
            ("augment.blur", a.blur.to_string()),
            ("augment.blur_sigma_min", a.blur_sigma_min.to_string()),
            ("augment.blur_sigma_max", a.blur_sigma_max.to_string()),
            ("augment.elastic", a.elastic.to_string()),
            ("augment.elastic_alpha", a.elastic_alpha.to_string()),
            ("augment.elastic_sigma", a.elastic_sigma.to_string()),
            ("stain.beta", s.beta.to_string()),
            ("stain.lambda", s.lambda.to_string()),
            ("stain.density_lambda", s.density_lambda.to_string()),
            ("stain.max_iters", s.max_iters.to_string()),
            ("stain.tol", s.tol.to_string()),
            ("stain.max_pixels", s.max_pixels.to_string()),
            ("stain.percentile", s.percentile.to_string()),
            ("lrfind.lr_lo", r.lr_lo.to_string()),
            ("lrfind.lr_hi", r.lr_hi.to_string()),
            ("lrfind.iters", r.iters.to_string()),
            ("lrfind.smooth_beta", r.smooth_beta.to_string()),
            ("lrfind.divergence_factor", r.divergence_factor.to_string()),
            ("bench.batch_sizes", join(&self.bench_sizes)),
            ("bench.repeats", self.bench_repeats.to_string()),
            ("bench.warmup", self.bench_warmup.to_string()),
            ("explain.alpha", self.overlay_alpha.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    /// Stain parameters with the run seed applied.
    pub fn stain_params(&self) -> StainParams {
        StainParams {
            seed: self.seed,
            ..self.stain.clone()
        }
    }
}
