//! Dataset indexing, splitting, image preprocessing, augmentation and
//! batching.

mod augment;
mod batch;
mod image;
mod index;
pub mod synth;

pub use augment::{augment_sample, flip_horizontal, flip_vertical, gaussian_blur, rotate90, AugmentConfig};
pub use batch::{make_batches, Batch, BatchSpec, Batches, FolderSource, InMemorySource, SampleSource};
pub use image::{denormalize_channels, load_rgb8, normalize_channels, resize_bilinear, Image, IMAGENET_MEAN, IMAGENET_STD};
pub use index::{scan_dataset, split_sizes, stratified_split, DatasetIndex, Entry, Split, NATIVE_TILE};

pub const DEFAULT_CLASS_COUNT: usize = 8;
