//! Synthetic inputs and brute-force references shared by several suites.

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

pub fn cosine(a: [f64; 3], b: [f64; 3]) -> f64 {
    let (a, b) = (unit(a), unit(b));
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Renders `exp(-W·h)` for planted stains; one pixel in four is background,
/// the rest pure hematoxylin, pure eosin or a mixture.
pub fn planted(w: [[f64; 3]; 2], scale: [f64; 2], n: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    RgbImage::from_fn(n, n, |_, _| {
        let kind = rng.random_range(0..4);
        let mut h = [rng.random_range(0.2..1.0) * scale[0], rng.random_range(0.2..1.0) * scale[1]];
        match kind {
            0 => h = [0.0, 0.0],
            1 => h[1] = 0.0,
            2 => h[0] = 0.0,
            _ => {}
        }
        let od = [0, 1, 2].map(|i| w[0][i] * h[0] + w[1][i] * h[1]);
        Rgb(od.map(|o| (255.0 * (-o).exp()).round().clamp(0.0, 255.0) as u8))
    })
}

pub fn he() -> [[f64; 3]; 2] {
    [unit([0.65, 0.70, 0.29]), unit([0.07, 0.99, 0.11])]
}

pub fn mean_abs_diff(a: &RgbImage, b: &RgbImage) -> f64 {
    let total: f64 = a.as_raw().iter().zip(b.as_raw()).map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs()).sum();
    total / a.as_raw().len() as f64
}

/// Fraction of correctly ordered positive/negative pairs, ties counted half.
pub fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

pub fn auc_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=200);
    // Coarse score levels force plenty of ties.
    let levels = rng.random_range(1..=n.min(20)) as u32;
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n).map(|_| f64::from(rng.random_range(0..levels)) / 7.0).collect();
    (scores, labels)
}

