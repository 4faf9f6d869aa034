use std::path::PathBuf;

use rand::seq::SliceRandom;

use super::augment::{augment_sample, AugmentConfig};
use super::image::{load_rgb8, normalize_channels, resize_bilinear, Image, IMAGENET_MEAN, IMAGENET_STD};
use super::index::{DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::stain::{normalize_image, StainModel, StainParams};
use crate::tensor::{RngStream, Tensor};

/// Random-access labelled images in `[0, 1]`, at their native size.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn label(&self, i: usize) -> usize;
    fn image(&self, i: usize) -> Result<Image>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct InMemorySource {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl SampleSource for InMemorySource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn image(&self, i: usize) -> Result<Image> {
        Ok(self.images[i].clone())
    }
}

/// One split of an indexed image tree, optionally stain-normalized on load.
pub struct FolderSource {
    items: Vec<(PathBuf, usize)>,
    stain: Option<(StainModel, StainParams)>,
}

impl FolderSource {
    pub fn new(index: &DatasetIndex, split: Split, stain: Option<(StainModel, StainParams)>) -> Self {
        let items = index.split_entries(split).into_iter().map(|e| (index.path(e), e.class)).collect();
        FolderSource { items, stain }
    }
}

impl SampleSource for FolderSource {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn label(&self, i: usize) -> usize {
        self.items[i].1
    }

    fn image(&self, i: usize) -> Result<Image> {
        let rgb = load_rgb8(&self.items[i].0)?;
        Ok(match &self.stain {
            Some((model, params)) => Image::from_rgb8(&normalize_image(&rgb, model, params)?.image),
            None => Image::from_rgb8(&rgb),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub seed: u64,
    /// Square edge length the network expects.
    pub input_size: usize,
    pub means: [f32; 3],
    pub stds: [f32; 3],
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            batch_size: 32,
            seed: 0,
            input_size: 224,
            means: IMAGENET_MEAN,
            stds: IMAGENET_STD,
        }
    }
}

impl BatchSpec {
    /// Resize, optionally augment, then normalize one image to `[3, S, S]`.
    pub fn prepare(&self, img: &Image, augment: Option<(&AugmentConfig, RngStream)>) -> Result<Tensor> {
        let mut img = resize_bilinear(img, self.input_size, self.input_size)?;
        if let Some((cfg, stream)) = augment {
            img = augment_sample(&img, cfg, stream)?;
        }
        normalize_channels(&img, &self.means, &self.stds)
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Source positions of the samples.
    pub indices: Vec<usize>,
}

/// Streams one epoch of batches; the last batch may be short. A batch
/// containing an unreadable item is reported as an error and skipped.
pub struct Batches<'a> {
    source: &'a dyn SampleSource,
    spec: BatchSpec,
    order: Vec<usize>,
    epoch: u64,
    augment: Option<AugmentConfig>,
    pos: usize,
}

pub fn make_batches<'a>(
    source: &'a dyn SampleSource,
    spec: &BatchSpec,
    epoch: u64,
    shuffle: bool,
    augment: Option<&AugmentConfig>,
) -> Result<Batches<'a>> {
    if spec.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if source.is_empty() {
        return Err(Error::Dataset("cannot batch an empty split".into()));
    }
    if let Some(cfg) = augment {
        cfg.validate()?;
    }
    let mut order: Vec<usize> = (0..source.len()).collect();
    if shuffle {
        order.shuffle(&mut RngStream::new(spec.seed, "shuffle", epoch, 0).rng());
    }
    Ok(Batches {
        source,
        spec: spec.clone(),
        order,
        epoch,
        augment: augment.cloned(),
        pos: 0,
    })
}

impl Batches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.spec.batch_size)
    }

    fn assemble(&self, indices: &[usize]) -> Result<Batch> {
        let mut items = Vec::with_capacity(indices.len());
        let stream = RngStream::new(self.spec.seed, "augment", self.epoch, 0);
        for &i in indices {
            let img = self.source.image(i)?;
            let aug = self.augment.as_ref().map(|cfg| (cfg, stream.with_index(i as u64)));
            items.push(self.spec.prepare(&img, aug)?);
        }
        Ok(Batch {
            images: Tensor::stack(&items)?,
            labels: indices.iter().map(|&i| self.source.label(i)).collect(),
            indices: indices.to_vec(),
        })
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.spec.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.assemble(&indices))
    }
}
