//! Procedural eight-class texture set: stripes, checkerboards, dots and
//! smooth noise, each at a fine and a coarse scale, in stain-like colours.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::augment::gaussian_blur;
use super::batch::InMemorySource;
use super::image::{resize_bilinear, Image};
use crate::error::Result;
use crate::tensor::RngStream;

pub const TEXTURE_CLASSES: [&str; 8] = [
    "stripes_fine",
    "stripes_coarse",
    "checker_fine",
    "checker_coarse",
    "dots_fine",
    "dots_coarse",
    "noise_fine",
    "noise_coarse",
];

/// Side length textures are drawn at before resizing.
pub const RENDER_SIZE: usize = 96;

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], spread: f64) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-spread..=spread)).clamp(0.0, 1.0))
}

/// Pattern intensity in `[0, 1]` for class `class` at side length `n`.
fn pattern(class: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let coarse = class % 2 == 1;
    let scale = if coarse { 2.0 } else { 1.0 } * rng.random_range(0.85..1.15);
    let theta = rng.random_range(0.0..PI);
    let (c, s) = (theta.cos(), theta.sin());
    let (px, py) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
    let coords = |i: usize| {
        let (x, y) = ((i % n) as f64 + px, (i / n) as f64 + py);
        (c * x + s * y, -s * x + c * y)
    };
    match class / 2 {
        0 => {
            let period = 8.0 * scale;
            (0..n * n).map(|i| 0.5 + 0.5 * (2.0 * PI * coords(i).0 / period).sin()).collect()
        }
        1 => {
            let cell = 5.0 * scale;
            (0..n * n)
                .map(|i| {
                    let (u, v) = coords(i);
                    f64::from(((u / cell).floor() + (v / cell).floor()).rem_euclid(2.0) as u8)
                })
                .collect()
        }
        2 => {
            let radius = 2.2 * scale;
            let count = (n * n) as f64 * 0.18 / (PI * radius * radius);
            let mut out = vec![0.0; n * n];
            for _ in 0..count.round() as usize {
                let (cx, cy) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
                let r = radius * rng.random_range(0.8..1.2);
                for (i, o) in out.iter_mut().enumerate() {
                    let (dx, dy) = ((i % n) as f64 - cx, (i / n) as f64 - cy);
                    if dx * dx + dy * dy <= r * r {
                        *o = 1.0;
                    }
                }
            }
            out
        }
        _ => {
            let mut field: Vec<f32> = (0..n * n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            gaussian_blur(&mut field, n, n, 1, 1.2 * scale * scale);
            let mean = field.iter().map(|&v| f64::from(v)).sum::<f64>() / field.len() as f64;
            let sd = (field.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / field.len() as f64).sqrt();
            field.iter().map(|&v| (0.5 + 0.25 * (f64::from(v) - mean) / sd.max(1e-12)).clamp(0.0, 1.0)).collect()
        }
    }
}

/// One texture of class `class` rendered at `n × n`.
pub fn render_texture(class: usize, n: usize, stream: RngStream) -> Image {
    let mut rng = stream.rng();
    let background = jitter(&mut rng, [0.93, 0.72, 0.84], 0.06);
    let ink = jitter(&mut rng, [0.42, 0.22, 0.58], 0.08);
    let strength = rng.random_range(0.6..1.0);
    let p = pattern(class % TEXTURE_CLASSES.len(), n, &mut rng);
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let mut data = Vec::with_capacity(n * n * 3);
    for &t in &p {
        let a = t * strength;
        for ch in 0..3 {
            let v = background[ch] * (1.0 - a) + ink[ch] * a + noise.sample(&mut rng);
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Image::new(n, n, data).expect("buffer sized for image")
}

/// `per_class` textures per class, rendered at [`RENDER_SIZE`] and resized
/// to `size`. `purpose` separates independent draws (e.g. train vs test).
pub fn texture_set(seed: u64, purpose: &str, per_class: usize, size: usize) -> Result<InMemorySource> {
    let mut out = InMemorySource::default();
    for i in 0..per_class {
        for class in 0..TEXTURE_CLASSES.len() {
            let stream = RngStream::new(seed, purpose, class as u64, i as u64);
            out.images.push(resize_bilinear(&render_texture(class, RENDER_SIZE, stream), size, size)?);
            out.labels.push(class);
        }
    }
    Ok(out)
}

/// Writes `root/<class>/<nnnn>.png` at [`RENDER_SIZE`].
pub fn write_texture_tree(root: &Path, seed: u64, per_class: usize) -> Result<()> {
    for (class, name) in TEXTURE_CLASSES.iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir)?;
        for i in 0..per_class {
            let img = render_texture(class, RENDER_SIZE, RngStream::new(seed, "texture-tree", class as u64, i as u64));
            img.save(&dir.join(format!("{i:04}.png")))?;
        }
    }
    Ok(())
}
