use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean and standard deviation of the ImageNet training set, per RGB channel.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Three-channel image with interleaved samples, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "{} samples for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Image { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y));
            }
        }
        Image { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        Image {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer sized for image")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_rgb8(&load_rgb8(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_rgb8().save(path)?)
    }
}

pub fn load_rgb8(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

/// Bilinear resampling with pixel centres at half-integer coordinates
/// (corners not aligned), edges clamped.
pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if img.width < 2 || img.height < 2 {
        return Err(Error::invalid(format!("cannot resize a {}x{} image", img.width, img.height)));
    }
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid("resize target must be non-empty"));
    }
    if (out_w, out_h) == (img.width, img.height) {
        return Ok(img.clone());
    }
    let xs = axis_taps(img.width, out_w);
    let ys = axis_taps(img.height, out_h);
    let mut data = Vec::with_capacity(out_w * out_h * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let at = |x: usize, y: usize| img.data[(y * img.width + x) * 3 + c];
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(Image {
        width: out_w,
        height: out_h,
        data,
    })
}

fn axis_taps(len_in: usize, len_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len_in - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

fn check_stds(stds: &[f32; 3]) -> Result<()> {
    if stds.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!("channel stds must be positive, got {stds:?}")));
    }
    Ok(())
}

/// `(x - mean) / std` per channel, returned as a `[3, H, W]` tensor.
pub fn normalize_channels(img: &Image, means: &[f32; 3], stds: &[f32; 3]) -> Result<Tensor> {
    check_stds(stds)?;
    let plane = img.width * img.height;
    let mut out = vec![0.0; plane * 3];
    for (p, px) in img.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + p] = (px[c] - means[c]) / stds[c];
        }
    }
    Tensor::new([3, img.height, img.width], out)
}

/// Inverse of [`normalize_channels`] for a `[3, H, W]` tensor.
pub fn denormalize_channels(t: &Tensor, means: &[f32; 3], stds: &[f32; 3]) -> Result<Image> {
    check_stds(stds)?;
    let [c, h, w] = match *t.shape() {
        [c, h, w] => [c, h, w],
        [1, c, h, w] => [c, h, w],
        _ => return Err(Error::invalid(format!("expected a [3, H, W] tensor, got {:?}", t.shape()))),
    };
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let src = t.data();
    let mut data = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for ch in 0..3 {
            data.push(src[ch * plane + p] * stds[ch] + means[ch]);
        }
    }
    Image::new(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_resizes_to_constant() {
        let img = Image::filled(150, 150, [0.2, 0.5, 0.9]);
        let out = resize_bilinear(&img, 224, 224).unwrap();
        assert_eq!((out.width(), out.height()), (224, 224));
        assert!(out.data().chunks(3).all(|p| (p[0] - 0.2).abs() < 1e-6 && (p[2] - 0.9).abs() < 1e-6));
    }

    #[test]
    fn half_pixel_downscale_averages_pairs() {
        let img = Image::from_fn(4, 2, |x, _| [x as f32, 0.0, 0.0]);
        let out = resize_bilinear(&img, 2, 2).unwrap();
        assert_eq!(out.pixel(0, 0)[0], 0.5);
        assert_eq!(out.pixel(1, 1)[0], 2.5);
    }

    #[test]
    fn tiny_input_rejected() {
        assert!(resize_bilinear(&Image::filled(1, 5, [0.0; 3]), 4, 4).is_err());
    }

    #[test]
    fn zero_std_rejected() {
        let img = Image::filled(2, 2, [0.5; 3]);
        assert!(normalize_channels(&img, &[0.0; 3], &[1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn value_at_mean_maps_to_zero() {
        let img = Image::filled(3, 2, IMAGENET_MEAN);
        let t = normalize_channels(&img, &IMAGENET_MEAN, &IMAGENET_STD).unwrap();
        assert_eq!(t.shape(), &[3, 2, 3]);
        assert!(t.data().iter().all(|v| v.abs() < 1e-7));
    }
}
