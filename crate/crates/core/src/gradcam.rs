//! Gradient-weighted class activation maps over the last Fire module.

use std::fmt::Write as _;

use image::RgbImage;

use crate::data::{resize_bilinear, Image};
use crate::error::{Error, Result};
use crate::model::SqueezeNet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CamResult {
    /// `ReLU(Σₖ αₖ Aₖ)` before normalization, row-major `height × width`.
    pub unnormalized: Vec<f32>,
    /// Min-max normalized map; all zeros when `zero_map` is set.
    pub raw: Vec<f32>,
    pub height: usize,
    pub width: usize,
    /// `raw` resized to the network input size.
    pub upsampled: Vec<f32>,
    pub input_size: usize,
    pub class: usize,
    /// Pre-softmax logit of `class`.
    pub score: f32,
    pub probability: f32,
    /// The weighted map was identically zero and normalization was skipped.
    pub zero_map: bool,
}

impl CamResult {
    pub fn raw_csv(&self) -> String {
        let mut out = String::new();
        for row in self.raw.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(out, "{}", cells.join(",")).unwrap();
        }
        out
    }
}

/// Min-max normalizes a non-negative map in place; returns `false` (and
/// leaves zeros) when the map is identically zero.
fn normalize_map(map: &mut [f32]) -> bool {
    let max = map.iter().copied().fold(0.0f32, f32::max);
    if max <= 0.0 {
        map.iter_mut().for_each(|v| *v = 0.0);
        return false;
    }
    let min = map.iter().copied().fold(f32::INFINITY, f32::min);
    let span = max - min;
    for v in map.iter_mut() {
        *v = if span > 0.0 { (*v - min) / span } else { *v / max };
    }
    true
}

/// Bilinear resize of a single-channel map (half-pixel centres).
fn upsample(map: &[f32], h: usize, w: usize, size: usize) -> Result<Vec<f32>> {
    if h < 2 || w < 2 {
        let v = map.iter().copied().fold(0.0f32, f32::max);
        return Ok(vec![v; size * size]);
    }
    let img = Image::new(w, h, map.iter().flat_map(|&v| [v, v, v]).collect())?;
    Ok(resize_bilinear(&img, size, size)?.data().chunks(3).map(|p| p[0]).collect())
}

/// `ReLU(Σₖ αₖ Aₖ)` where `αₖ` is the spatial mean of channel `k` of the
/// gradient. Both tensors are `[1, C, H, W]`.
pub fn weighted_map(activations: &Tensor, grads: &Tensor) -> Result<Vec<f32>> {
    grads.check_shape("grad-cam", activations.shape())?;
    let [1, channels, h, w] = *activations.shape() else {
        return Err(Error::invalid(format!("expected a [1, C, H, W] map, got {:?}", activations.shape())));
    };
    let plane = h * w;
    let (a, g) = (activations.data(), grads.data());
    let mut map = vec![0.0f64; plane];
    for c in 0..channels {
        let alpha = g[c * plane..(c + 1) * plane].iter().map(|&v| f64::from(v)).sum::<f64>() / plane as f64;
        for (m, &av) in map.iter_mut().zip(&a[c * plane..(c + 1) * plane]) {
            *m += alpha * f64::from(av);
        }
    }
    Ok(map.into_iter().map(|v| v.max(0.0) as f32).collect())
}

/// Grad-CAM of one image (`[3, S, S]` or `[1, 3, S, S]`) for `class`, or
/// for the predicted class when `class` is `None`.
pub fn grad_cam(model: &SqueezeNet, image: &Tensor, class: Option<usize>) -> Result<CamResult> {
    let input = match image.shape() {
        [c, h, w] => image.clone().reshape([1, *c, *h, *w])?,
        [1, _, _, _] => image.clone(),
        other => return Err(Error::invalid(format!("Grad-CAM takes one image, got shape {other:?}"))),
    };
    let k = model.spec().num_classes;
    let pass = model.explain_pass(&input)?;
    let probs = pass.probs.data().to_vec();
    let class = match class {
        Some(c) if c >= k => return Err(Error::invalid(format!("class {c} out of range for {k} classes"))),
        Some(c) => c,
        None => (0..k).max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a))).unwrap(),
    };
    let mut tape = pass.tape;
    let score = tape.value(pass.logits).data()[class];
    let activations = tape.value(pass.features).clone();
    let mut onehot = Tensor::zeros([1, k]);
    onehot.data_mut()[class] = 1.0;
    let target = tape.weighted_sum(pass.logits, &onehot)?;
    let grads = tape.backward(target)?;

    let [_, _, h, w] = *activations.shape() else {
        unreachable!("feature map is 4-D")
    };
    let mut map = match grads.get(pass.features) {
        Some(g) => weighted_map(&activations, g)?,
        None => vec![0.0; h * w],
    };
    let unnormalized = map.clone();
    let zero_map = !normalize_map(&mut map);
    let size = model.spec().input_size;
    Ok(CamResult {
        upsampled: upsample(&map, h, w, size)?,
        unnormalized,
        raw: map,
        height: h,
        width: w,
        input_size: size,
        class,
        score,
        probability: probs[class],
        zero_map,
    })
}

/// Five-stop ramp: blue, cyan, green, yellow, red at 0, ¼, ½, ¾, 1.
pub fn heat_color(v: f32) -> [f32; 3] {
    const STOPS: [[f32; 3]; 5] = [[0.0, 0.0, 1.0], [0.0, 1.0, 1.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
    let x = v.clamp(0.0, 1.0) * 4.0;
    let i = (x.floor() as usize).min(3);
    let f = x - i as f32;
    [0, 1, 2].map(|c| STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f)
}

/// Alpha-blends the colour-mapped heat map onto `image` (values in `[0, 1]`).
pub fn overlay(image: &Image, cam: &CamResult, alpha: f32) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("overlay alpha {alpha} outside [0, 1]")));
    }
    let heat = upsample(&cam.raw, cam.height, cam.width, cam.input_size)?;
    let heat = if (image.width(), image.height()) == (cam.input_size, cam.input_size) {
        heat
    } else {
        let img = Image::new(cam.input_size, cam.input_size, heat.iter().flat_map(|&v| [v, v, v]).collect())?;
        resize_bilinear(&img, image.width(), image.height())?.data().chunks(3).map(|p| p[0]).collect()
    };
    let mut out = image.clone();
    for (px, &h) in out.data_mut().chunks_exact_mut(3).zip(&heat) {
        let color = heat_color(h);
        for c in 0..3 {
            px[c] = (1.0 - alpha) * px[c].clamp(0.0, 1.0) + alpha * color[c];
        }
    }
    Ok(out.to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_hits_its_stops() {
        assert_eq!(heat_color(0.0), [0.0, 0.0, 1.0]);
        assert_eq!(heat_color(0.5), [0.0, 1.0, 0.0]);
        assert_eq!(heat_color(1.0), [1.0, 0.0, 0.0]);
        assert_eq!(heat_color(0.125), [0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalization_cases() {
        let mut zero = vec![0.0; 4];
        assert!(!normalize_map(&mut zero));
        let mut flat = vec![2.0; 4];
        assert!(normalize_map(&mut flat));
        assert_eq!(flat, vec![1.0; 4]);
        let mut m = vec![1.0, 3.0, 2.0, 5.0];
        normalize_map(&mut m);
        assert_eq!(m, vec![0.0, 0.5, 0.25, 1.0]);
    }
}
