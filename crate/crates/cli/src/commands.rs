//! Subcommand implementations. Each returns once every output is written.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use htxc::data::synth::write_texture_tree;
use htxc::data::{load_rgb8, make_batches, scan_dataset, stratified_split, BatchSpec, DatasetIndex, FolderSource, Image, Split};
use htxc::gradcam::{grad_cam, overlay};
use htxc::metrics::{evaluate, macro_roc, roc_points_csv, summary_csv};
use htxc::model::{Checkpoint, Init, NetworkSpec, SqueezeNet};
use htxc::optim::{default_stages, lr_range_test, train as train_stages, CnnRangeSubject, LrPolicy, LogRow, TrainConfig};
use htxc::stain::{fit_target, normalize_image, StainModel};
use htxc::{RngStream, Tensor};
use rand::Rng;
use walkdir::WalkDir;

use crate::config::{Policy, RunConfig};
use crate::plot::{render, Plot, Series};
use crate::DataArgs;

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "tif", "tiff", "jpg", "jpeg", "bmp"];

fn data_root(cfg: &RunConfig) -> Result<&Path> {
    cfg.data_root
        .as_deref()
        .ok_or_else(|| anyhow!("no dataset root; pass --root or set data.root"))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn batch_spec(cfg: &RunConfig, input_size: usize) -> BatchSpec {
    BatchSpec {
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        input_size,
        ..BatchSpec::default()
    }
}

fn load_index(cfg: &RunConfig, data: &DataArgs) -> Result<DatasetIndex> {
    let root = data_root(cfg)?;
    DatasetIndex::read_split_file(&data.split, root).with_context(|| format!("reading split file {}", data.split.display()))
}

fn load_stain(cfg: &RunConfig, path: Option<&Path>) -> Result<Option<(StainModel, htxc::stain::StainParams)>> {
    path.map(|p| {
        let model = StainModel::load(p).with_context(|| format!("reading stain model {}", p.display()))?;
        Ok((model, cfg.stain_params()))
    })
    .transpose()
}

fn source(cfg: &RunConfig, index: &DatasetIndex, split: Split, data: &DataArgs) -> Result<FolderSource> {
    let src = FolderSource::new(index, split, load_stain(cfg, data.stain_model.as_deref())?);
    if htxc::data::SampleSource::is_empty(&src) {
        bail!("the {} split is empty", split.as_str());
    }
    Ok(src)
}

fn network_spec(cfg: &RunConfig, num_classes: usize) -> NetworkSpec {
    let mut spec = NetworkSpec::standard().with_input_size(cfg.input_size).with_num_classes(num_classes);
    spec.head.hidden = cfg.hidden;
    spec.head.dropout1 = cfg.dropout[0];
    spec.head.dropout2 = cfg.dropout[1];
    spec
}

fn fresh_model(cfg: &RunConfig, class_names: &[String], pretrained: Option<&Checkpoint>) -> Result<SqueezeNet> {
    let init = pretrained.map_or(Init::Kaiming, Init::Pretrained);
    let mut model = SqueezeNet::build(network_spec(cfg, class_names.len()), init, RngStream::new(cfg.seed, "init", 0, 0))?;
    model.set_class_names(class_names.to_vec())?;
    Ok(model)
}

fn load_model(path: &Path) -> Result<SqueezeNet> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(ckpt.to_model()?)
}

pub fn split(cfg: &RunConfig, out: &Path) -> Result<()> {
    let root = data_root(cfg)?;
    let index = stratified_split(&scan_dataset(root)?, cfg.split_ratios, cfg.seed)?;
    index.write_split_file(out)?;
    println!("{}", index.summary());
    println!("split written to {}", out.display());
    Ok(())
}

pub fn stain_fit(cfg: &RunConfig, target: &Path, out: &Path) -> Result<()> {
    let params = cfg.stain_params();
    let img = load_rgb8(target)?;
    let model = fit_target(&img, &params)?;
    model.save(out)?;
    let own = normalize_image(&img, &model, &params)?;
    let total: u64 = img
        .as_raw()
        .iter()
        .zip(own.image.as_raw())
        .map(|(&a, &b)| u64::from(a.abs_diff(b)))
        .sum();
    let mae = total as f64 / img.as_raw().len() as f64;
    println!("stain model written to {}", out.display());
    println!("self-normalization mean abs error: {mae:.3}/255");
    Ok(())
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

pub fn stain_apply(cfg: &RunConfig, model: &Path, input: &Path, output: &Path) -> Result<()> {
    let params = cfg.stain_params();
    let model = StainModel::load(model).with_context(|| format!("reading stain model {}", model.display()))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in WalkDir::new(input).sort_by_file_name() {
        let entry = entry?;
        if entry.file_type().is_file() && is_image(entry.path()) {
            files.push(entry.into_path());
        }
    }
    if files.is_empty() {
        bail!("no images under {}", input.display());
    }
    let mut blank = 0;
    for path in &files {
        let rel = path.strip_prefix(input)?;
        let dest = output.join(rel);
        if let Some(dir) = dest.parent() {
            fs::create_dir_all(dir)?;
        }
        let norm = normalize_image(&load_rgb8(path)?, &model, &params)?;
        if norm.blank {
            blank += 1;
        }
        norm.image.save(&dest).with_context(|| format!("writing {}", dest.display()))?;
    }
    println!("normalized {} images into {}", files.len(), output.display());
    println!("passed through {blank} blank images");
    Ok(())
}

pub fn lrfind(cfg: &RunConfig, data: &DataArgs, out: &Path) -> Result<()> {
    let index = load_index(cfg, data)?;
    let train_set = source(cfg, &index, Split::Train, data)?;
    let model = fresh_model(cfg, &index.class_names, None)?;
    let mut subject = CnnRangeSubject::new(&model, &train_set, &batch_spec(cfg, cfg.input_size), cfg.optim)?;
    let result = lr_range_test(&mut subject, cfg.lrfind)?;
    fs::create_dir_all(out)?;
    write(&out.join("lr_range.csv"), result.to_csv())?;
    let mut plot = Plot::new("Learning rate range test", "learning rate", "loss");
    plot.log_x = true;
    plot.x_range = Some((cfg.lrfind.lr_lo, cfg.lrfind.lr_hi));
    let raw = Series::new("loss", result.points.iter().map(|p| (p.lr, p.loss)).collect());
    let smooth = Series::new("smoothed", result.points.iter().map(|p| (p.lr, p.smoothed)).collect());
    write(&out.join("lr_range.svg"), render(&plot, &[raw, smooth]))?;
    if let Some(i) = result.divergence_iteration {
        println!("stopped at iteration {i}: loss diverged");
    }
    match result.suggested_lr {
        Some(lr) => println!("suggested lr_max: {lr:.3e}"),
        None => println!("no suggestion: the loss never improved, lower lrfind.lr_lo"),
    }
    Ok(())
}

/// Stages from the config: head-only warmup then full fine-tuning.
pub fn stages(cfg: &RunConfig) -> Result<Vec<htxc::optim::Stage>> {
    let mut stages = default_stages(cfg.lr_max, cfg.head_epochs, cfg.full_epochs, cfg.warmup)?;
    if let Some(g) = cfg.group_lrs {
        stages[1].group_lrs = g;
    }
    if cfg.policy == Policy::Constant {
        stages.iter_mut().for_each(|s| s.policy = LrPolicy::Constant);
    }
    Ok(stages)
}

fn curve(log: &[LogRow], f: impl Fn(&LogRow) -> f64) -> Vec<(f64, f64)> {
    log.iter().map(|r| (r.epoch as f64, f(r))).collect()
}

pub fn train(
    cfg: &RunConfig,
    data: &DataArgs,
    out: &Path,
    pretrained: Option<&Path>,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<()> {
    let index = load_index(cfg, data)?;
    let train_set = source(cfg, &index, Split::Train, data)?;
    let val_set = source(cfg, &index, Split::Val, data)?;
    let pretrained = pretrained
        .map(|p| Checkpoint::load(p).with_context(|| format!("reading pretrained weights {}", p.display())))
        .transpose()?;
    let mut model = fresh_model(cfg, &index.class_names, pretrained.as_ref())?;
    let last = out.join("last.htxc");
    let resume_from = if resume {
        Some(Checkpoint::load(&last).with_context(|| format!("resuming from {}", last.display()))?)
    } else {
        None
    };
    let tc = TrainConfig {
        stages: stages(cfg)?,
        batch: batch_spec(cfg, cfg.input_size),
        augment: cfg.augment_enabled.then(|| cfg.augment.clone()),
        optimizer: cfg.optim,
        out_dir: Some(out.to_path_buf()),
        stop_after,
    };
    fs::create_dir_all(out)?;
    write(&out.join("config.txt"), cfg.to_text())?;
    let report = train_stages(&mut model, &train_set, &val_set, &tc, resume_from.as_ref())?;

    let loss = [
        Series::new("train", curve(&report.log, |r| r.train_loss)),
        Series::new("validation", curve(&report.log, |r| r.val_loss)),
    ];
    write(&out.join("loss.svg"), render(&Plot::new("Loss", "epoch", "cross-entropy"), &loss))?;
    let mut err_plot = Plot::new("Validation error rate", "epoch", "error rate");
    err_plot.y_range = Some((0.0, 1.0));
    let err = [Series::new("validation", curve(&report.log, |r| r.val_error_rate))];
    write(&out.join("error.svg"), render(&err_plot, &err))?;

    if report.skipped_batches > 0 {
        log::warn!("{} batches were skipped", report.skipped_batches);
    }
    if let Some(row) = report.log.last() {
        println!(
            "epoch {}: train loss {:.4}, val loss {:.4}, val error {:.4}",
            row.epoch, row.train_loss, row.val_loss, row.val_error_rate
        );
    }
    println!("best val loss {:.4} at epoch {}", report.best_val_loss, report.best_epoch);
    if !report.finished {
        println!("stopped early; continue with --resume");
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, data: &DataArgs, checkpoint: &Path, subset: &str, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let index = load_index(cfg, data)?;
    if index.class_names != model.class_names() {
        bail!(
            "checkpoint classes {:?} differ from dataset classes {:?}",
            model.class_names(),
            index.class_names
        );
    }
    let split = Split::parse(subset)?;
    let src = source(cfg, &index, split, data)?;
    let spec = batch_spec(cfg, model.spec().input_size);
    let eval = evaluate(&model, make_batches(&src, &spec, 0, false, None)?.map(|b| b.map(|b| (b.images, b.labels))))?;
    let names = model.class_names().to_vec();
    let curves = eval.roc_curves();
    let summary = macro_roc(&curves.iter().map(|(_, c)| c.clone()).collect::<Vec<_>>())?;

    fs::create_dir_all(out)?;
    write(&out.join("confusion.csv"), eval.confusion.to_csv(&names))?;
    write(&out.join("roc_points.csv"), roc_points_csv(&curves, &names))?;
    write(&out.join("summary.csv"), summary_csv(eval.accuracy(), &summary))?;
    write(&out.join("probs.csv"), eval.probs_csv(&names))?;
    let mut plot = Plot::new(&format!("ROC curves ({subset})"), "false positive rate", "true positive rate");
    plot.x_range = Some((0.0, 1.0));
    plot.y_range = Some((0.0, 1.0));
    let series: Vec<Series> = curves
        .iter()
        .map(|(c, curve)| {
            Series::new(
                format!("{} (AUC {:.3})", names[*c], curve.auc),
                curve.points.iter().map(|p| (p.fpr, p.tpr)).collect(),
            )
        })
        .collect();
    write(&out.join("roc.svg"), render(&plot, &series))?;

    println!("accuracy: {:.1}%", 100.0 * eval.accuracy());
    println!(
        "macro AUC {:.4}, sensitivity {:.4}, specificity {:.4}",
        summary.auc, summary.sensitivity, summary.specificity
    );
    Ok(())
}

fn parse_class(arg: &str, names: &[String]) -> Result<usize> {
    if let Some(i) = names.iter().position(|n| n == arg) {
        return Ok(i);
    }
    match arg.parse::<usize>() {
        Ok(i) if i < names.len() => Ok(i),
        _ => bail!("unknown class {arg:?}; expected one of {names:?} or an index below {}", names.len()),
    }
}

pub fn explain(
    cfg: &RunConfig,
    checkpoint: &Path,
    class: Option<&str>,
    stain_model: Option<&Path>,
    out: &Path,
    images: &[PathBuf],
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let names = model.class_names().to_vec();
    let class = class.map(|c| parse_class(c, &names)).transpose()?;
    let stain = load_stain(cfg, stain_model)?;
    let spec = batch_spec(cfg, model.spec().input_size);
    fs::create_dir_all(out)?;
    for path in images {
        let mut rgb = load_rgb8(path)?;
        if let Some((m, p)) = &stain {
            rgb = normalize_image(&rgb, m, p)?.image;
        }
        let img = Image::from_rgb8(&rgb);
        let cam = grad_cam(&model, &spec.prepare(&img, None)?, class)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let tag = format!("{stem}_{}", names[cam.class]);
        let png = out.join(format!("{tag}_overlay.png"));
        overlay(&img, &cam, cfg.overlay_alpha)?
            .save(&png)
            .with_context(|| format!("writing {}", png.display()))?;
        write(&out.join(format!("{tag}_cam.csv")), cam.raw_csv())?;
        let note = if cam.zero_map { " (empty map)" } else { "" };
        println!("{}: {} p={:.4}{note}", path.display(), names[cam.class], cam.probability);
    }
    Ok(())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn bench(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let size = model.spec().input_size;
    let mut csv = String::from("batch_size,mean_ms,std_ms,images_per_s\n");
    let mut per_image = Vec::new();
    for &b in &cfg.bench_sizes {
        let mut rng = RngStream::new(cfg.seed, "bench", b as u64, 0).rng();
        let input = Tensor::from_fn([b, 3, size, size], |_| rng.random_range(-2.0f32..2.0));
        let reference = model.predict(&input)?;
        for _ in 0..cfg.bench_warmup {
            model.predict(&input)?;
        }
        let mut times = Vec::with_capacity(cfg.bench_repeats);
        for _ in 0..cfg.bench_repeats {
            let t = Instant::now();
            let probs = model.predict(&input)?;
            times.push(t.elapsed().as_secs_f64() * 1e3);
            if probs != reference {
                bail!("inference at batch size {b} is not repeatable");
            }
        }
        let (mean, std) = mean_std(&times);
        writeln!(csv, "{b},{mean:.4},{std:.4},{:.3}", b as f64 / (mean / 1e3))?;
        per_image.push(mean / b as f64);
        println!("batch {b:>4}: {mean:9.3} ms ± {std:.3}");
    }
    write(out, csv)?;
    let non_increasing = per_image.windows(2).all(|w| w[1] <= w[0]);
    println!(
        "per-image time non-increasing with batch size: {}",
        if non_increasing { "yes" } else { "no" }
    );
    println!("timings written to {}", out.display());
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: &Path, per_class: usize) -> Result<()> {
    if per_class == 0 {
        bail!("--per-class must be at least 1");
    }
    write_texture_tree(out, cfg.seed, per_class)?;
    println!("wrote {} textures per class to {}", per_class, out.display());
    Ok(())
}
