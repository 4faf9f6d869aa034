//! Structure-preserving colour normalization by sparse stain separation.
//!
//! An RGB tile is mapped to optical density (OD), factored as `V ≈ W·H` with
//! a non-negative 3×2 stain basis `W` (unit columns) and sparse non-negative
//! densities `H`, and rebuilt with a target image's basis after matching
//! per-stain density percentiles.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::RgbImage;
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::tensor::RngStream;

/// Fewest tissue pixels a basis can be fitted from.
pub const MIN_TISSUE_PIXELS: usize = 100;

/// Reference OD directions used when an image shows only one stain.
const HEMATOXYLIN_REF: [f64; 3] = [0.650, 0.704, 0.286];
const EOSIN_REF: [f64; 3] = [0.072, 0.990, 0.105];
/// Columns closer than this (cosine) are treated as a single stain.
const COLLINEAR_COS: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct StainParams {
    /// OD magnitude below which a pixel counts as background.
    pub beta: f64,
    /// Sparsity weight used while fitting the basis.
    pub lambda: f64,
    /// Sparsity weight used for the densities that get recombined.
    pub density_lambda: f64,
    pub max_iters: usize,
    /// Stop once the relative objective change falls below this.
    pub tol: f64,
    pub max_pixels: usize,
    pub percentile: f64,
    pub seed: u64,
}

impl Default for StainParams {
    fn default() -> Self {
        StainParams {
            beta: 0.15,
            lambda: 0.1,
            density_lambda: 0.01,
            max_iters: 200,
            tol: 1e-6,
            max_pixels: 50_000,
            percentile: 99.0,
            seed: 0,
        }
    }
}

/// Per-pixel optical densities in row-major pixel order.
#[derive(Clone, Debug, PartialEq)]
pub struct OdImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl OdImage {
    pub fn magnitude(p: &[f64; 3]) -> f64 {
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
    }

    pub fn tissue_mask(&self, beta: f64) -> Vec<bool> {
        self.pixels.iter().map(|p| Self::magnitude(p) >= beta).collect()
    }
}

pub fn channel_to_od(v: u8) -> f64 {
    -(f64::from(v.max(1)) / 255.0).ln()
}

pub fn od_to_channel(od: f64) -> u8 {
    (255.0 * (-od).exp()).round().clamp(0.0, 255.0) as u8
}

pub fn rgb_to_od(img: &RgbImage) -> OdImage {
    OdImage {
        width: img.width() as usize,
        height: img.height() as usize,
        pixels: img.pixels().map(|p| p.0.map(channel_to_od)).collect(),
    }
}

pub fn od_to_rgb(od: &OdImage) -> RgbImage {
    let raw = od.pixels.iter().flat_map(|p| p.map(od_to_channel)).collect();
    RgbImage::from_raw(od.width as u32, od.height as u32, raw).expect("buffer sized for image")
}

/// Two unit-norm non-negative stain colour vectors in OD space. Column 0 has
/// the larger blue component (ties: larger red).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StainBasis {
    cols: [[f64; 3]; 2],
}

fn norm(v: &[f64; 3]) -> f64 {
    OdImage::magnitude(v)
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = norm(&v);
    (n > 1e-12 && n.is_finite()).then(|| v.map(|x| x / n))
}

fn positive_part(v: [f64; 3]) -> [f64; 3] {
    v.map(|x| x.max(0.0))
}

impl StainBasis {
    /// Validates and orders two column vectors.
    pub fn new(a: [f64; 3], b: [f64; 3]) -> Result<Self> {
        for c in [&a, &b] {
            if c.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || (norm(c) - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("stain vector {c:?} must be non-negative with unit norm")));
            }
        }
        Ok(Self::ordered(a, b))
    }

    fn ordered(a: [f64; 3], b: [f64; 3]) -> Self {
        let a_first = a[2] > b[2] || (a[2] == b[2] && a[0] >= b[0]);
        StainBasis {
            cols: if a_first { [a, b] } else { [b, a] },
        }
    }

    pub fn column(&self, j: usize) -> [f64; 3] {
        self.cols[j]
    }

    /// The 3×2 matrix in row-major order.
    pub fn row_major(&self) -> [f64; 6] {
        let c = &self.cols;
        [c[0][0], c[1][0], c[0][1], c[1][1], c[0][2], c[1][2]]
    }

    pub fn from_row_major(v: &[f64; 6]) -> Result<Self> {
        Self::new([v[0], v[2], v[4]], [v[1], v[3], v[5]])
    }

    pub fn reconstruct(&self, h: [f64; 2]) -> [f64; 3] {
        let c = &self.cols;
        [0, 1, 2].map(|i| c[0][i] * h[0] + c[1][i] * h[1])
    }
}

/// Exact minimizer of `‖v − W·h‖² + λ(h₀ + h₁)` over `h ≥ 0`, found by
/// checking every active set of the two-variable problem.
struct Lasso2 {
    cols: [[f64; 3]; 2],
    g: [[f64; 2]; 2],
    det: f64,
    lambda: f64,
}

impl Lasso2 {
    fn new(cols: [[f64; 3]; 2], lambda: f64) -> Self {
        let g01 = dot(&cols[0], &cols[1]);
        let g = [[dot(&cols[0], &cols[0]), g01], [g01, dot(&cols[1], &cols[1])]];
        Lasso2 {
            cols,
            g,
            det: g[0][0] * g[1][1] - g01 * g01,
            lambda,
        }
    }

    /// Objective minus the constant `‖v‖²`.
    fn reduced(&self, h: [f64; 2], b: [f64; 2]) -> f64 {
        let g = &self.g;
        h[0] * h[0] * g[0][0] + 2.0 * h[0] * h[1] * g[0][1] + h[1] * h[1] * g[1][1] - 2.0 * (b[0] * h[0] + b[1] * h[1])
            + self.lambda * (h[0] + h[1])
    }

    fn solve(&self, v: &[f64; 3]) -> [f64; 2] {
        let b = [dot(&self.cols[0], v), dot(&self.cols[1], v)];
        let r = [b[0] - self.lambda / 2.0, b[1] - self.lambda / 2.0];
        let mut best = ([0.0, 0.0], 0.0);
        let mut consider = |h: [f64; 2]| {
            let f = self.reduced(h, b);
            if f < best.1 {
                best = (h, f);
            }
        };
        if r[0] > 0.0 && self.g[0][0] > 0.0 {
            consider([r[0] / self.g[0][0], 0.0]);
        }
        if r[1] > 0.0 && self.g[1][1] > 0.0 {
            consider([0.0, r[1] / self.g[1][1]]);
        }
        if self.det > 1e-12 {
            let h0 = (self.g[1][1] * r[0] - self.g[0][1] * r[1]) / self.det;
            let h1 = (self.g[0][0] * r[1] - self.g[0][1] * r[0]) / self.det;
            if h0 > 0.0 && h1 > 0.0 {
                consider([h0, h1]);
            }
        }
        best.0
    }
}

fn objective(v: &[[f64; 3]], w: &[[f64; 3]; 2], h: &[[f64; 2]], lambda: f64) -> f64 {
    let basis = StainBasis { cols: *w };
    v.iter()
        .zip(h)
        .map(|(p, hp)| {
            let r = basis.reconstruct(*hp);
            let e = [p[0] - r[0], p[1] - r[1], p[2] - r[2]];
            dot(&e, &e) + lambda * (hp[0] + hp[1])
        })
        .sum()
}

fn percentile(values: &mut [f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

/// Two initial stain directions from the extreme angles (1st and 99th
/// percentile) of the pixels projected onto their dominant OD plane.
fn initial_directions(v: &[[f64; 3]]) -> [[f64; 3]; 2] {
    let mut m = Matrix3::<f64>::zeros();
    for p in v {
        let x = Vector3::from(*p);
        m += x * x.transpose();
    }
    let eig = SymmetricEigen::new(m / v.len() as f64);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut e1: [f64; 3] = eig.eigenvectors.column(order[0]).into();
    let e2: [f64; 3] = eig.eigenvectors.column(order[1]).into();
    if e1.iter().sum::<f64>() < 0.0 {
        e1 = e1.map(|x| -x);
    }
    let mut angles: Vec<f64> = v.iter().map(|p| dot(p, &e2).atan2(dot(p, &e1))).collect();
    let lo = percentile(&mut angles, 1.0);
    let hi = percentile(&mut angles, 99.0);
    let dir = |phi: f64| {
        let d = [0, 1, 2].map(|i| phi.cos() * e1[i] + phi.sin() * e2[i]);
        unit(positive_part(d)).unwrap_or_else(|| unit(positive_part(e1)).unwrap_or([1.0 / 3f64.sqrt(); 3]))
    };
    [dir(lo), dir(hi)]
}

/// Best unit non-negative `w` for one column given the rest: maximizes `wᵀc`.
fn column_update(c: [f64; 3], current: [f64; 3]) -> [f64; 3] {
    if let Some(w) = unit(positive_part(c)) {
        return w;
    }
    if c.iter().all(|&x| x == 0.0) {
        return current;
    }
    let k = (0..3).max_by(|&a, &b| c[a].total_cmp(&c[b])).unwrap();
    let mut w = [0.0; 3];
    w[k] = 1.0;
    w
}

/// Basis fit plus the objective value after every alternating iteration.
#[derive(Clone, Debug)]
pub struct SnmfFit {
    pub basis: StainBasis,
    pub objective: Vec<f64>,
    /// True when the pixels span a single stain and the other column is a
    /// reference vector.
    pub single_stain: bool,
}

fn tissue_sample(od: &OdImage, params: &StainParams) -> Result<Vec<[f64; 3]>> {
    let tissue: Vec<[f64; 3]> = od.pixels.iter().copied().filter(|p| OdImage::magnitude(p) >= params.beta).collect();
    if tissue.len() < MIN_TISSUE_PIXELS {
        return Err(Error::BlankImage {
            tissue: tissue.len(),
            required: MIN_TISSUE_PIXELS,
        });
    }
    if tissue.len() <= params.max_pixels {
        return Ok(tissue);
    }
    let mut rng = RngStream::new(params.seed, "stain-subsample", 0, 0).rng();
    let mut picked = sample(&mut rng, tissue.len(), params.max_pixels).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| tissue[i]).collect())
}

fn single_stain_fit(v: &[[f64; 3]], seed_dir: [f64; 3], params: &StainParams) -> SnmfFit {
    let mut w = seed_dir;
    let mut trace = Vec::new();
    let mut prev = f64::INFINITY;
    for _ in 0..params.max_iters {
        let h: Vec<f64> = v.iter().map(|p| (dot(&w, p) - params.lambda / 2.0).max(0.0)).collect();
        let mut c = [0.0; 3];
        for (p, &hp) in v.iter().zip(&h) {
            for i in 0..3 {
                c[i] += p[i] * hp;
            }
        }
        w = column_update(c, w);
        let hs: Vec<[f64; 2]> = v.iter().map(|p| [(dot(&w, p) - params.lambda / 2.0).max(0.0), 0.0]).collect();
        let f = objective(v, &[w, [0.0; 3]], &hs, params.lambda);
        trace.push(f);
        if (prev - f).abs() <= params.tol * prev.abs().max(1e-300) {
            break;
        }
        prev = f;
    }
    let other = if dot(&w, &unit(HEMATOXYLIN_REF).unwrap()) < dot(&w, &unit(EOSIN_REF).unwrap()) {
        HEMATOXYLIN_REF
    } else {
        EOSIN_REF
    };
    SnmfFit {
        basis: StainBasis::ordered(w, unit(other).unwrap()),
        objective: trace,
        single_stain: true,
    }
}

/// Minimizes `‖V − W·H‖²_F + λ‖H‖₁` over tissue pixels by alternating an
/// exact per-pixel non-negative lasso for `H` with exact column-wise updates
/// of `W` under non-negativity and unit norm.
pub fn fit_stain_basis(od: &OdImage, params: &StainParams) -> Result<SnmfFit> {
    let v = tissue_sample(od, params)?;
    let mut w = initial_directions(&v);
    if dot(&w[0], &w[1]) > COLLINEAR_COS {
        return Ok(single_stain_fit(&v, w[0], params));
    }
    let mut h: Vec<[f64; 2]> = vec![[0.0; 2]; v.len()];
    let mut trace = Vec::with_capacity(params.max_iters);
    let mut prev = f64::INFINITY;
    for _ in 0..params.max_iters {
        let lasso = Lasso2::new(w, params.lambda);
        for (hp, p) in h.iter_mut().zip(&v) {
            *hp = lasso.solve(p);
        }
        // Sufficient statistics V·Hᵀ (3×2) and H·Hᵀ (2×2).
        let mut a = [[0.0; 3]; 2];
        let mut b = [[0.0; 2]; 2];
        for (p, hp) in v.iter().zip(&h) {
            for j in 0..2 {
                for i in 0..3 {
                    a[j][i] += p[i] * hp[j];
                }
                for k in 0..2 {
                    b[j][k] += hp[j] * hp[k];
                }
            }
        }
        for j in 0..2 {
            if b[j][j] == 0.0 {
                continue;
            }
            let o = 1 - j;
            let c = [0, 1, 2].map(|i| a[j][i] - w[o][i] * b[o][j]);
            w[j] = column_update(c, w[j]);
        }
        for col in &w {
            assert!(col.iter().all(|&x| x >= 0.0) && (norm(col) - 1.0).abs() < 1e-9, "stain column left the feasible set");
        }
        debug_assert!(h.iter().all(|p| p[0] >= 0.0 && p[1] >= 0.0));

        let f = objective(&v, &w, &h, params.lambda);
        trace.push(f);
        if (prev - f).abs() <= params.tol * prev.abs().max(1e-300) {
            break;
        }
        prev = f;
    }
    if dot(&w[0], &w[1]) > COLLINEAR_COS {
        return Ok(single_stain_fit(&v, w[0], params));
    }
    Ok(SnmfFit {
        basis: StainBasis::ordered(w[0], w[1]),
        objective: trace,
        single_stain: false,
    })
}

pub fn estimate_stain_basis(od: &OdImage, params: &StainParams) -> Result<StainBasis> {
    Ok(fit_stain_basis(od, params)?.basis)
}

/// Per-pixel densities (`[stain 0, stain 1]`) for every pixel of `od`.
pub fn compute_density(od: &OdImage, basis: &StainBasis, lambda: f64) -> Vec<[f64; 2]> {
    let lasso = Lasso2::new(basis.cols, lambda);
    od.pixels.iter().map(|p| lasso.solve(p)).collect()
}

/// `‖v − W·h‖² + λ(h₀ + h₁)` for one pixel.
pub fn pixel_objective(v: &[f64; 3], basis: &StainBasis, h: [f64; 2], lambda: f64) -> f64 {
    objective(std::slice::from_ref(v), &basis.cols, &[h], lambda)
}

/// Per-stain percentile of densities over the pixels where `mask` is set.
pub fn density_percentiles(density: &[[f64; 2]], mask: &[bool], p: f64) -> [f64; 2] {
    [0, 1].map(|j| {
        let mut vals: Vec<f64> = density.iter().zip(mask).filter(|(_, &m)| m).map(|(d, _)| d[j]).collect();
        percentile(&mut vals, p)
    })
}

/// Stain basis and density percentiles of a target image.
#[derive(Clone, Debug, PartialEq)]
pub struct StainModel {
    pub basis: StainBasis,
    pub p99: [f64; 2],
    /// CRC-32 of the target's decoded pixels, hex.
    pub target: String,
}

const MODEL_HEADER: &str = "htxc-stain 1";

impl StainModel {
    pub fn to_text(&self) -> String {
        let mut out = format!("{MODEL_HEADER}\nbasis");
        for v in self.basis.row_major() {
            write!(out, " {v:.8e}").unwrap();
        }
        write!(out, "\np99 {:.8e} {:.8e}\ntarget {}\n", self.p99[0], self.p99[1], self.target).unwrap();
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::invalid(format!("stain model: {what}"));
        let mut lines = text.lines();
        if lines.next() != Some(MODEL_HEADER) {
            return Err(bad("missing header"));
        }
        let mut basis = None;
        let mut p99 = None;
        let mut target = String::new();
        for line in lines {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let nums = || parts.clone().map(str::parse::<f64>).collect::<std::result::Result<Vec<_>, _>>();
            match key {
                "basis" => {
                    let v: [f64; 6] = nums().ok().and_then(|v| v.try_into().ok()).ok_or_else(|| bad("basis needs 6 numbers"))?;
                    // Nine significant digits leave the norm off by ~1e-9; renormalize.
                    let a = unit([v[0], v[2], v[4]]).ok_or_else(|| bad("zero stain vector"))?;
                    let b = unit([v[1], v[3], v[5]]).ok_or_else(|| bad("zero stain vector"))?;
                    basis = Some(StainBasis::new(a, b)?);
                }
                "p99" => {
                    let v: [f64; 2] = nums().ok().and_then(|v| v.try_into().ok()).ok_or_else(|| bad("p99 needs 2 numbers"))?;
                    p99 = Some(v);
                }
                "target" => target = parts.next().unwrap_or_default().to_owned(),
                "" => {}
                other => return Err(bad(&format!("unknown key {other:?}"))),
            }
        }
        Ok(StainModel {
            basis: basis.ok_or_else(|| bad("missing basis"))?,
            p99: p99.ok_or_else(|| bad("missing p99"))?,
            target,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

pub fn fit_target(img: &RgbImage, params: &StainParams) -> Result<StainModel> {
    let od = rgb_to_od(img);
    let basis = estimate_stain_basis(&od, params)?;
    let density = compute_density(&od, &basis, params.density_lambda);
    let p99 = density_percentiles(&density, &od.tissue_mask(params.beta), params.percentile);
    if p99.iter().any(|&p| p <= 0.0) {
        log::warn!("target image shows a single stain; density percentiles {p99:?}");
    }
    Ok(StainModel {
        basis,
        p99,
        target: format!("{:08x}", crc32fast::hash(img.as_raw())),
    })
}

#[derive(Clone, Debug)]
pub struct Normalized {
    pub image: RgbImage,
    /// Too little tissue to fit a basis; `image` is the unchanged input.
    pub blank: bool,
}

/// Rebuilds `img` with the target basis after scaling each stain's
/// densities so their percentile matches the target's. Background pixels
/// are copied through.
pub fn normalize_image(img: &RgbImage, model: &StainModel, params: &StainParams) -> Result<Normalized> {
    let od = rgb_to_od(img);
    let basis = match estimate_stain_basis(&od, params) {
        Ok(b) => b,
        Err(Error::BlankImage { tissue, .. }) => {
            log::warn!("passing through an image with only {tissue} tissue pixels");
            return Ok(Normalized {
                image: img.clone(),
                blank: true,
            });
        }
        Err(e) => return Err(e),
    };
    let mask = od.tissue_mask(params.beta);
    let density = compute_density(&od, &basis, params.density_lambda);
    let src = density_percentiles(&density, &mask, params.percentile);
    let scale = [0, 1].map(|j| if src[j] > 1e-9 { model.p99[j] / src[j] } else { 1.0 });

    let mut out = img.clone();
    for ((px, d), &tissue) in out.pixels_mut().zip(&density).zip(&mask) {
        if tissue {
            let od = model.basis.reconstruct([d[0] * scale[0], d[1] * scale[1]]);
            px.0 = od.map(od_to_channel);
        }
    }
    Ok(Normalized { image: out, blank: false })
}
