//! Raw forward/backward kernels over flat slices.
//!
//! Convolution lowers to im2col plus a single-precision GEMM; the batch is
//! processed in chunks so the column buffer stays bounded.

use super::pooled_len;

/// Column-buffer budget in floats per im2col chunk.
const COL_BUDGET: usize = 1 << 22;

/// `c = a · b + beta · c` for strided row/column-major views.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: output out of bounds");
    // SAFETY: every index touched by sgemm is bounded by the asserts above and
    // `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Shapes of one convolution, validated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// `None` when the channel counts disagree or the output would be empty.
    pub fn new(input: [usize; 4], weight: [usize; 4], stride: usize, padding: usize) -> Option<Self> {
        let [batch, in_channels, height, width] = input;
        let [out_channels, wc, kernel_h, kernel_w] = weight;
        if wc != in_channels {
            return None;
        }
        let out_h = pooled_len(height, kernel_h, stride, padding, false)?;
        let out_w = pooled_len(width, kernel_w, stride, padding, false)?;
        Some(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn chunk(&self) -> usize {
        let per_sample = self.patch() * self.out_plane();
        (COL_BUDGET / per_sample.max(1)).clamp(1, self.batch.max(1))
    }

    /// Source index along one axis, or `None` when it falls in the padding.
    #[inline]
    fn source(&self, out: usize, k: usize, len: usize) -> Option<usize> {
        let pos = out * self.stride + k;
        (pos >= self.padding && pos - self.padding < len).then(|| pos - self.padding)
    }

    fn im2col(&self, input: &[f32], first: usize, count: usize, col: &mut [f32]) {
        let plane = self.height * self.width;
        let ohw = self.out_plane();
        let cols = count * ohw;
        for c in 0..self.in_channels {
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let dst_row = &mut col[row * cols..(row + 1) * cols];
                    for b in 0..count {
                        let src = &input[((first + b) * self.in_channels + c) * plane..][..plane];
                        let dst = &mut dst_row[b * ohw..(b + 1) * ohw];
                        for oy in 0..self.out_h {
                            let out_row = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                            match self.source(oy, ki, self.height) {
                                None => out_row.fill(0.0),
                                Some(iy) => {
                                    let line = &src[iy * self.width..(iy + 1) * self.width];
                                    for (ox, v) in out_row.iter_mut().enumerate() {
                                        *v = match self.source(ox, kj, self.width) {
                                            Some(ix) => line[ix],
                                            None => 0.0,
                                        };
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], first: usize, count: usize, dinput: &mut [f32]) {
        let plane = self.height * self.width;
        let ohw = self.out_plane();
        let cols = count * ohw;
        for c in 0..self.in_channels {
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let src_row = &col[row * cols..(row + 1) * cols];
                    for b in 0..count {
                        let dst = &mut dinput[((first + b) * self.in_channels + c) * plane..][..plane];
                        let src = &src_row[b * ohw..(b + 1) * ohw];
                        for oy in 0..self.out_h {
                            let Some(iy) = self.source(oy, ki, self.height) else {
                                continue;
                            };
                            let line = &mut dst[iy * self.width..(iy + 1) * self.width];
                            for (ox, &g) in src[oy * self.out_w..(oy + 1) * self.out_w].iter().enumerate() {
                                if let Some(ix) = self.source(ox, kj, self.width) {
                                    line[ix] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward pass; `out` is NCHW with the geometry's output shape.
pub fn conv2d_forward(geo: &ConvGeometry, input: &[f32], weight: &[f32], bias: &[f32], out: &mut [f32]) {
    let patch = geo.patch();
    let ohw = geo.out_plane();
    let oc = geo.out_channels;
    let chunk = geo.chunk();
    let mut col = vec![0.0f32; patch * chunk * ohw];
    let mut tmp = vec![0.0f32; oc * chunk * ohw];
    let mut first = 0;
    while first < geo.batch {
        let count = chunk.min(geo.batch - first);
        let cols = count * ohw;
        geo.im2col(input, first, count, &mut col);
        gemm(oc, patch, cols, weight, patch, 1, &col, cols, 1, 0.0, &mut tmp, cols, 1);
        for b in 0..count {
            let dst = &mut out[(first + b) * oc * ohw..][..oc * ohw];
            for o in 0..oc {
                let src = &tmp[o * cols + b * ohw..][..ohw];
                let bo = bias[o];
                for (d, &s) in dst[o * ohw..(o + 1) * ohw].iter_mut().zip(src) {
                    *d = s + bo;
                }
            }
        }
        first += count;
    }
}

/// Accumulates gradients into whichever of `dinput`, `dweight`, `dbias` are requested.
pub fn conv2d_backward(
    geo: &ConvGeometry,
    input: &[f32],
    weight: &[f32],
    dout: &[f32],
    mut dinput: Option<&mut [f32]>,
    mut dweight: Option<&mut [f32]>,
    dbias: Option<&mut [f32]>,
) {
    let patch = geo.patch();
    let ohw = geo.out_plane();
    let oc = geo.out_channels;

    if let Some(db) = dbias {
        for b in 0..geo.batch {
            for (o, acc) in db.iter_mut().enumerate() {
                let s: f32 = dout[(b * oc + o) * ohw..][..ohw].iter().sum();
                *acc += s;
            }
        }
    }
    if dinput.is_none() && dweight.is_none() {
        return;
    }

    let chunk = geo.chunk();
    let mut col = vec![0.0f32; patch * chunk * ohw];
    let mut dout_t = vec![0.0f32; oc * chunk * ohw];
    let mut first = 0;
    while first < geo.batch {
        let count = chunk.min(geo.batch - first);
        let cols = count * ohw;
        for b in 0..count {
            let src = &dout[(first + b) * oc * ohw..][..oc * ohw];
            for o in 0..oc {
                dout_t[o * cols + b * ohw..][..ohw].copy_from_slice(&src[o * ohw..(o + 1) * ohw]);
            }
        }
        if let Some(dw) = dweight.as_deref_mut() {
            geo.im2col(input, first, count, &mut col);
            gemm(oc, cols, patch, &dout_t, cols, 1, &col, 1, cols, 1.0, dw, patch, 1);
        }
        if let Some(dx) = dinput.as_deref_mut() {
            gemm(patch, oc, cols, weight, 1, patch, &dout_t, cols, 1, 0.0, &mut col, cols, 1);
            geo.col2im(&col, first, count, dx);
        }
        first += count;
    }
}

/// Max pooling without padding; `argmax` receives the in-plane index of each winner.
///
/// Ties resolve to the first element in row-major window order.
#[allow(clippy::too_many_arguments)]
pub fn maxpool2d_forward(
    dims: [usize; 4],
    kernel: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    input: &[f32],
    out: &mut [f32],
    argmax: &mut [u32],
) {
    let [n, c, h, w] = dims;
    for plane_idx in 0..n * c {
        let src = &input[plane_idx * h * w..][..h * w];
        let base = plane_idx * out_h * out_w;
        for oy in 0..out_h {
            let y0 = oy * stride;
            let y1 = (y0 + kernel).min(h);
            for ox in 0..out_w {
                let x0 = ox * stride;
                let x1 = (x0 + kernel).min(w);
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = y0 * w + x0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let v = src[y * w + x];
                        if v > best {
                            best = v;
                            best_idx = y * w + x;
                        }
                    }
                }
                out[base + oy * out_w + ox] = best;
                argmax[base + oy * out_w + ox] = best_idx as u32;
            }
        }
    }
}

pub fn maxpool2d_backward(dims: [usize; 4], out_plane: usize, argmax: &[u32], dout: &[f32], dinput: &mut [f32]) {
    let [n, c, h, w] = dims;
    for plane_idx in 0..n * c {
        let dst = &mut dinput[plane_idx * h * w..][..h * w];
        let base = plane_idx * out_plane;
        for (&g, &idx) in dout[base..base + out_plane].iter().zip(&argmax[base..base + out_plane]) {
            dst[idx as usize] += g;
        }
    }
}

/// `y = x · wᵀ + b` for `x: n×f`, `w: g×f`.
pub fn linear_forward(n: usize, f: usize, g: usize, x: &[f32], w: &[f32], b: &[f32], y: &mut [f32]) {
    gemm(n, f, g, x, f, 1, w, 1, f, 0.0, y, g, 1);
    for row in y.chunks_exact_mut(g) {
        for (v, &bias) in row.iter_mut().zip(b) {
            *v += bias;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    n: usize,
    f: usize,
    g: usize,
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
    db: Option<&mut [f32]>,
) {
    if let Some(dx) = dx {
        gemm(n, g, f, dy, g, 1, w, f, 1, 1.0, dx, f, 1);
    }
    if let Some(dw) = dw {
        gemm(g, n, f, dy, 1, g, x, f, 1, 1.0, dw, f, 1);
    }
    if let Some(db) = db {
        for row in dy.chunks_exact(g) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(geo: &ConvGeometry, x: &[f32], w: &[f32], b: &[f32]) -> Vec<f32> {
        let [n, o, oh, ow] = geo.output_shape();
        let mut out = vec![0.0; n * o * oh * ow];
        for bi in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[oc];
                        for c in 0..geo.in_channels {
                            for ki in 0..geo.kernel_h {
                                for kj in 0..geo.kernel_w {
                                    let iy = (oy * geo.stride + ki) as isize - geo.padding as isize;
                                    let ix = (ox * geo.stride + kj) as isize - geo.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= geo.height as isize || ix >= geo.width as isize {
                                        continue;
                                    }
                                    let xv = x[((bi * geo.in_channels + c) * geo.height + iy as usize) * geo.width
                                        + ix as usize];
                                    let wv = w[((oc * geo.in_channels + c) * geo.kernel_h + ki) * geo.kernel_w + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for &(k, s, p) in &[(1, 1, 0), (3, 1, 1), (3, 2, 0), (7, 2, 0), (2, 3, 1)] {
            let geo = ConvGeometry::new([3, 2, 9, 8], [4, 2, k, k], s, p).unwrap();
            let x: Vec<f32> = (0..3 * 2 * 9 * 8).map(|i| ((i * 37 % 17) as f32 - 8.0) / 7.0).collect();
            let w: Vec<f32> = (0..4 * 2 * k * k).map(|i| ((i * 13 % 11) as f32 - 5.0) / 5.0).collect();
            let b = [0.1, -0.2, 0.3, 0.0];
            let mut out = vec![0.0; geo.output_shape().iter().product()];
            conv2d_forward(&geo, &x, &w, &b, &mut out);
            let want = naive_conv(&geo, &x, &w, &b);
            for (a, e) in out.iter().zip(&want) {
                assert!((a - e).abs() < 1e-4, "k={k} s={s} p={p}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn maxpool_prefers_first_of_ties() {
        let x = [1.0, 1.0, 1.0, 1.0];
        let mut out = [0.0];
        let mut arg = [9];
        maxpool2d_forward([1, 1, 2, 2], 2, 2, 1, 1, &x, &mut out, &mut arg);
        assert_eq!(arg[0], 0);
    }
}
