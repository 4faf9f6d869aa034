use nalgebra::{SMatrix, SVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::image::Image;
use crate::error::{Error, Result};
use crate::tensor::RngStream;

/// Which random transforms run during training and how strong they are.
/// Each enabled transform fires independently with `probability`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub probability: f64,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub rotate: bool,
    /// Allowed clockwise angles in degrees, a subset of {90, 180, 270}.
    pub rotations: Vec<u32>,
    pub zoom: bool,
    pub zoom_min: f64,
    pub zoom_max: f64,
    pub warp: bool,
    /// Maximum corner displacement as a fraction of the side length.
    pub warp_magnitude: f64,
    pub jitter: bool,
    /// Maximum translation in pixels.
    pub jitter_max: usize,
    pub lighting: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub blur: bool,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub elastic: bool,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            probability: 0.5,
            flip_horizontal: true,
            flip_vertical: true,
            rotate: true,
            rotations: vec![90, 180, 270],
            zoom: true,
            zoom_min: 1.0,
            zoom_max: 1.1,
            warp: true,
            warp_magnitude: 0.08,
            jitter: true,
            jitter_max: 4,
            lighting: true,
            brightness: 0.1,
            contrast: 0.1,
            blur: true,
            blur_sigma_min: 0.0,
            blur_sigma_max: 1.5,
            elastic: true,
            elastic_alpha: 10.0,
            elastic_sigma: 4.0,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled; parameters keep their defaults.
    pub fn none() -> Self {
        AugmentConfig {
            flip_horizontal: false,
            flip_vertical: false,
            rotate: false,
            zoom: false,
            warp: false,
            jitter: false,
            lighting: false,
            blur: false,
            elastic: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let magnitudes = [
            ("warp_magnitude", self.warp_magnitude),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("blur_sigma_min", self.blur_sigma_min),
            ("blur_sigma_max", self.blur_sigma_max),
            ("elastic_alpha", self.elastic_alpha),
            ("elastic_sigma", self.elastic_sigma),
        ];
        for (name, v) in magnitudes {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("augmentation {name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::invalid(format!("augmentation probability {} outside [0, 1]", self.probability)));
        }
        if let Some(r) = self.rotations.iter().find(|r| ![90, 180, 270].contains(*r)) {
            return Err(Error::invalid(format!("rotation {r} is not one of 90, 180, 270")));
        }
        if self.rotate && self.rotations.is_empty() {
            return Err(Error::invalid("rotation enabled with no allowed angles"));
        }
        if !(self.zoom_min >= 1.0 && self.zoom_max >= self.zoom_min) {
            return Err(Error::invalid(format!("zoom range [{}, {}] invalid", self.zoom_min, self.zoom_max)));
        }
        if self.blur_sigma_max < self.blur_sigma_min {
            return Err(Error::invalid("blur sigma range is reversed"));
        }
        Ok(())
    }
}

/// Applies the enabled transforms in a fixed order: flips, rotation, zoom
/// crop, warp, jitter, lighting, blur, elastic. Output has the input's size
/// and stays in `[0, 1]`.
pub fn augment_sample(img: &Image, cfg: &AugmentConfig, stream: RngStream) -> Result<Image> {
    cfg.validate()?;
    let mut rng = stream.rng();
    let p = cfg.probability;
    let mut out = img.clone();
    let (w, h) = (img.width(), img.height());
    let fire = |enabled: bool, rng: &mut ChaCha8Rng| enabled && rng.random_bool(p);

    if fire(cfg.flip_horizontal, &mut rng) {
        out = flip_horizontal(&out);
    }
    if fire(cfg.flip_vertical, &mut rng) {
        out = flip_vertical(&out);
    }
    if fire(cfg.rotate, &mut rng) {
        let allowed: Vec<u32> = cfg.rotations.iter().copied().filter(|&r| w == h || r == 180).collect();
        if !allowed.is_empty() {
            out = rotate90(&out, allowed[rng.random_range(0..allowed.len())] / 90);
        }
    }
    if fire(cfg.zoom, &mut rng) {
        let z = rng.random_range(cfg.zoom_min..=cfg.zoom_max);
        let (cw, ch) = (w as f64 / z, h as f64 / z);
        let ox = rng.random_range(0.0..=(w as f64 - cw));
        let oy = rng.random_range(0.0..=(h as f64 - ch));
        out = remap(&out, |x, y| {
            (ox + (x + 0.5) * cw / w as f64 - 0.5, oy + (y + 0.5) * ch / h as f64 - 0.5)
        });
    }
    if fire(cfg.warp, &mut rng) {
        let m = cfg.warp_magnitude;
        let mut offsets = [0.0; 8];
        for (i, o) in offsets.iter_mut().enumerate() {
            let side = if i % 2 == 0 { w } else { h };
            *o = rng.random_range(-m..=m) * side as f64;
        }
        if let Some(hm) = corner_homography(w, h, &offsets) {
            out = remap(&out, |x, y| {
                let d = hm[6] * x + hm[7] * y + 1.0;
                ((hm[0] * x + hm[1] * y + hm[2]) / d, (hm[3] * x + hm[4] * y + hm[5]) / d)
            });
        }
    }
    if fire(cfg.jitter, &mut rng) {
        let j = cfg.jitter_max as i64;
        let dx = rng.random_range(-j..=j) as f64;
        let dy = rng.random_range(-j..=j) as f64;
        out = remap(&out, |x, y| (x - dx, y - dy));
    }
    if fire(cfg.lighting, &mut rng) {
        let b = rng.random_range(-cfg.brightness..=cfg.brightness) as f32;
        let c = rng.random_range(-cfg.contrast..=cfg.contrast) as f32;
        for v in out.data_mut() {
            *v = (*v - 0.5) * (1.0 + c) + 0.5 + b;
        }
    }
    if fire(cfg.blur, &mut rng) {
        let sigma = rng.random_range(cfg.blur_sigma_min..=cfg.blur_sigma_max);
        gaussian_blur(out.data_mut(), w, h, 3, sigma);
    }
    if fire(cfg.elastic, &mut rng) {
        out = elastic(&out, cfg.elastic_alpha, cfg.elastic_sigma, &mut rng);
    }
    out.clamp_unit();
    Ok(out)
}

pub fn flip_horizontal(img: &Image) -> Image {
    let w = img.width();
    Image::from_fn(w, img.height(), |x, y| img.pixel(w - 1 - x, y))
}

pub fn flip_vertical(img: &Image) -> Image {
    let h = img.height();
    Image::from_fn(img.width(), h, |x, y| img.pixel(x, h - 1 - y))
}

/// Rotates clockwise by `quarter_turns` × 90° by permuting pixels.
pub fn rotate90(img: &Image, quarter_turns: u32) -> Image {
    let (w, h) = (img.width(), img.height());
    match quarter_turns % 4 {
        0 => img.clone(),
        1 => Image::from_fn(h, w, |x, y| img.pixel(y, h - 1 - x)),
        2 => Image::from_fn(w, h, |x, y| img.pixel(w - 1 - x, h - 1 - y)),
        _ => Image::from_fn(h, w, |x, y| img.pixel(w - 1 - y, x)),
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

fn sample(img: &Image, u: f64, v: f64) -> [f32; 3] {
    let (w, h) = (img.width(), img.height());
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = ((u - x0) as f32, (v - y0) as f32);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let xs = [reflect(x0, w), reflect(x0 + 1, w)];
    let ys = [reflect(y0, h), reflect(y0 + 1, h)];
    let d = img.data();
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let at = |x: usize, y: usize| d[(y * w + x) * 3 + c];
        let top = at(xs[0], ys[0]) * (1.0 - fx) + at(xs[1], ys[0]) * fx;
        let bottom = at(xs[0], ys[1]) * (1.0 - fx) + at(xs[1], ys[1]) * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
    out
}

/// Output pixel `(x, y)` takes the source value at `map(x, y)`.
fn remap(img: &Image, map: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    Image::from_fn(img.width(), img.height(), |x, y| {
        let (u, v) = map(x as f64, y as f64);
        sample(img, u, v)
    })
}

/// Homography taking the image corners to the corners displaced by
/// `offsets` (`dx, dy` per corner, clockwise from the top left).
fn corner_homography(w: usize, h: usize, offsets: &[f64; 8]) -> Option<[f64; 8]> {
    let (wm, hm) = ((w - 1) as f64, (h - 1) as f64);
    let from = [(0.0, 0.0), (wm, 0.0), (wm, hm), (0.0, hm)];
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (k, &(x, y)) in from.iter().enumerate() {
        let (u, v) = (x + offsets[2 * k], y + offsets[2 * k + 1]);
        let r = 2 * k;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let sol = a.lu().solve(&b)?;
    let mut out = [0.0; 8];
    out.copy_from_slice(sol.as_slice());
    Some(out)
}

/// In-place separable Gaussian blur of interleaved `channels`-wide samples
/// with mirrored borders. `sigma == 0` is a no-op.
pub fn gaussian_blur(data: &mut [f32], w: usize, h: usize, channels: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as i64 + k as i64 - radius, w);
                    acc += kv * data[(y * w + sx) * channels + c];
                }
                tmp[(y * w + x) * channels + c] = acc;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as i64 + k as i64 - radius, h);
                    acc += kv * tmp[(sy * w + x) * channels + c];
                }
                data[(y * w + x) * channels + c] = acc;
            }
        }
    }
}

/// Displaces every pixel by a smooth random field: uniform noise blurred
/// with `sigma`, scaled by `alpha` pixels.
fn elastic(img: &Image, alpha: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut field: Vec<f32> = (0..w * h * 2).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
    gaussian_blur(&mut field, w, h, 2, sigma);
    remap(img, |x, y| {
        let i = (y as usize * w + x as usize) * 2;
        (x + alpha * f64::from(field[i]), y + alpha * f64::from(field[i + 1]))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_without_repeating_edges() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
    }

    #[test]
    fn identity_homography_for_zero_offsets() {
        let h = corner_homography(10, 7, &[0.0; 8]).unwrap();
        let want = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        for (a, b) in h.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn homography_hits_displaced_corners() {
        let off = [1.0, -0.5, 0.3, 0.2, -0.7, 0.4, 0.1, -0.9];
        let hm = corner_homography(16, 12, &off).unwrap();
        let apply = |x: f64, y: f64| {
            let d = hm[6] * x + hm[7] * y + 1.0;
            ((hm[0] * x + hm[1] * y + hm[2]) / d, (hm[3] * x + hm[4] * y + hm[5]) / d)
        };
        let (u, v) = apply(15.0, 11.0);
        assert!((u - 14.3).abs() < 1e-9 && (v - 11.4).abs() < 1e-9);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = AugmentConfig::default();
        c.rotations = vec![45];
        assert!(c.validate().is_err());
        let mut c = AugmentConfig::default();
        c.blur_sigma_max = -1.0;
        assert!(c.validate().is_err());
        let mut c = AugmentConfig::default();
        c.zoom_min = 0.5;
        assert!(c.validate().is_err());
    }
}
