//! Raw numeric kernels over flat row-major slices.
//!
//! These functions know nothing about tapes. They are generic over the float
//! type so the benchmark harness can drive the same message-passing code in
//! `f32` while training runs in `f64`.

use num_traits::Float;
use rayon::prelude::*;

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output extents, or `None` when the kernel does not fit.
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        let ph = self.height + 2 * self.padding;
        let pw = self.width + 2 * self.padding;
        if self.stride == 0 || ph < self.kernel || pw < self.kernel {
            return None;
        }
        Some((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }
}

/// Range of output indices `o` for which `o * stride + tap - padding` lands in `[0, extent)`.
fn valid_range(out_len: usize, extent: usize, tap: usize, stride: usize, padding: usize) -> (usize, usize) {
    // smallest o with o*stride + tap >= padding
    let lo = if tap >= padding {
        0
    } else {
        (padding - tap).div_ceil(stride)
    };
    // largest o with o*stride + tap - padding <= extent - 1
    let limit = extent + padding;
    if tap >= limit {
        return (0, 0);
    }
    let hi = ((limit - 1 - tap) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub fn conv2d_forward<T: Float>(input: &[T], kernel: &[T], bias: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = g.output_hw().expect("conv geometry checked by caller");
    let (h, w, k) = (g.height, g.width, g.kernel);
    let mut out = vec![T::zero(); g.batch * g.out_channels * ho * wo];
    let cols: Vec<(usize, usize)> = (0..k).map(|kw| valid_range(wo, w, kw, g.stride, g.padding)).collect();
    let rows: Vec<(usize, usize)> = (0..k).map(|kh| valid_range(ho, h, kh, g.stride, g.padding)).collect();
    for b in 0..g.batch {
        for co in 0..g.out_channels {
            let o_plane = &mut out[(b * g.out_channels + co) * ho * wo..][..ho * wo];
            o_plane.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..g.in_channels {
                let i_plane = &input[(b * g.in_channels + ci) * h * w..][..h * w];
                let k_base = (co * g.in_channels + ci) * k * k;
                for kh in 0..k {
                    let (oy0, oy1) = rows[kh];
                    for kw in 0..k {
                        let wgt = kernel[k_base + kh * k + kw];
                        let (ox0, ox1) = cols[kw];
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + kh - g.padding;
                            let o_row = &mut o_plane[oy * wo..][ox0..ox1];
                            let i_row = &i_plane[iy * w..];
                            let ix0 = ox0 * g.stride + kw - g.padding;
                            if g.stride == 1 {
                                for (o, &x) in o_row.iter_mut().zip(&i_row[ix0..]) {
                                    *o = *o + wgt * x;
                                }
                            } else {
                                for (j, o) in o_row.iter_mut().enumerate() {
                                    *o = *o + wgt * i_row[ix0 + j * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeometry,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = g.output_hw().expect("conv geometry checked by caller");
    let (h, w, k) = (g.height, g.width, g.kernel);
    let mut g_in = vec![0.0; input.len()];
    let mut g_k = vec![0.0; kernel.len()];
    let mut g_b = vec![0.0; g.out_channels];
    let cols: Vec<(usize, usize)> = (0..k).map(|kw| valid_range(wo, w, kw, g.stride, g.padding)).collect();
    let rows: Vec<(usize, usize)> = (0..k).map(|kh| valid_range(ho, h, kh, g.stride, g.padding)).collect();
    for b in 0..g.batch {
        for co in 0..g.out_channels {
            let go_plane = &grad_out[(b * g.out_channels + co) * ho * wo..][..ho * wo];
            g_b[co] += go_plane.iter().sum::<f64>();
            for ci in 0..g.in_channels {
                let in_off = (b * g.in_channels + ci) * h * w;
                let k_base = (co * g.in_channels + ci) * k * k;
                for kh in 0..k {
                    let (oy0, oy1) = rows[kh];
                    for kw in 0..k {
                        let (ox0, ox1) = cols[kw];
                        if ox0 >= ox1 {
                            continue;
                        }
                        let wgt = kernel[k_base + kh * k + kw];
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + kh - g.padding;
                            let go_row = &go_plane[oy * wo..][ox0..ox1];
                            let ix0 = ox0 * g.stride + kw - g.padding;
                            let row_off = in_off + iy * w;
                            if g.stride == 1 {
                                let i_row = &input[row_off + ix0..][..go_row.len()];
                                let gi_row = &mut g_in[row_off + ix0..][..go_row.len()];
                                for ((gi, &x), &go) in gi_row.iter_mut().zip(i_row).zip(go_row) {
                                    acc += x * go;
                                    *gi += wgt * go;
                                }
                            } else {
                                for (j, &go) in go_row.iter().enumerate() {
                                    let idx = row_off + ix0 + j * g.stride;
                                    acc += input[idx] * go;
                                    g_in[idx] += wgt * go;
                                }
                            }
                        }
                        g_k[k_base + kh * k + kw] += acc;
                    }
                }
            }
        }
    }
    (g_in, g_k, g_b)
}

/// `y = x · wᵀ + bias` for `x: rows x in`, `w: out x in`.
pub fn linear_forward<T: Float + Send + Sync>(
    x: &[T],
    w: &[T],
    bias: &[T],
    rows: usize,
    in_dim: usize,
    out_dim: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); rows * out_dim];
    for (x_row, y_row) in x.chunks_exact(in_dim).zip(y.chunks_exact_mut(out_dim)) {
        linear_row(x_row, w, bias, y_row, in_dim);
    }
    y
}

/// Row-parallel variant of [`linear_forward`]. Each output row is computed by
/// exactly one worker, so results are identical to the serial kernel.
pub fn linear_forward_par<T: Float + Send + Sync>(
    x: &[T],
    w: &[T],
    bias: &[T],
    rows: usize,
    in_dim: usize,
    out_dim: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); rows * out_dim];
    y.par_chunks_exact_mut(out_dim)
        .zip(x.par_chunks_exact(in_dim))
        .for_each(|(y_row, x_row)| linear_row(x_row, w, bias, y_row, in_dim));
    y
}

#[inline]
fn linear_row<T: Float>(x_row: &[T], w: &[T], bias: &[T], y_row: &mut [T], in_dim: usize) {
    for (o, (yv, w_row)) in y_row.iter_mut().zip(w.chunks_exact(in_dim)).enumerate() {
        let mut acc = bias[o];
        for (&a, &b) in x_row.iter().zip(w_row) {
            acc = acc + a * b;
        }
        *yv = acc;
    }
}

/// Returns `(grad_x, grad_w, grad_bias)` for [`linear_forward`].
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    grad_y: &[f64],
    rows: usize,
    in_dim: usize,
    out_dim: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; rows * in_dim];
    let mut gw = vec![0.0; out_dim * in_dim];
    let mut gb = vec![0.0; out_dim];
    for r in 0..rows {
        let x_row = &x[r * in_dim..][..in_dim];
        let gy_row = &grad_y[r * out_dim..][..out_dim];
        let gx_row = &mut gx[r * in_dim..][..in_dim];
        for (o, &gy) in gy_row.iter().enumerate() {
            if gy == 0.0 {
                continue;
            }
            gb[o] += gy;
            let w_row = &w[o * in_dim..][..in_dim];
            let gw_row = &mut gw[o * in_dim..][..in_dim];
            for i in 0..in_dim {
                gx_row[i] += gy * w_row[i];
                gw_row[i] += gy * x_row[i];
            }
        }
    }
    (gx, gw, gb)
}

/// Plain `a · b` for `a: m x k`, `b: k x n`.
pub fn matmul<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..][..n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

pub fn transpose<T: Copy>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = Vec::with_capacity(a.len());
    for c in 0..cols {
        for r in 0..rows {
            t.push(a[r * cols + c]);
        }
    }
    t
}

/// Mean of source rows over each destination's in-edges (CSR by destination).
/// Destinations without in-edges get a zero row.
pub fn scatter_mean<T: Float + Send + Sync>(
    x: &[T],
    channels: usize,
    offsets: &[usize],
    sources: &[u32],
    parallel: bool,
) -> Vec<T> {
    let n = offsets.len() - 1;
    let mut out = vec![T::zero(); n * channels];
    let row = |dst: usize, out_row: &mut [T]| {
        let (s, e) = (offsets[dst], offsets[dst + 1]);
        if s == e {
            return;
        }
        for &src in &sources[s..e] {
            let x_row = &x[src as usize * channels..][..channels];
            for (o, &v) in out_row.iter_mut().zip(x_row) {
                *o = *o + v;
            }
        }
        let inv = T::one() / T::from(e - s).unwrap();
        out_row.iter_mut().for_each(|o| *o = *o * inv);
    };
    if parallel {
        out.par_chunks_exact_mut(channels)
            .enumerate()
            .for_each(|(dst, out_row)| row(dst, out_row));
    } else {
        out.chunks_exact_mut(channels)
            .enumerate()
            .for_each(|(dst, out_row)| row(dst, out_row));
    }
    out
}

pub fn scatter_mean_backward(grad_out: &[f64], channels: usize, offsets: &[usize], sources: &[u32]) -> Vec<f64> {
    let mut g = vec![0.0; grad_out.len()];
    for dst in 0..offsets.len() - 1 {
        let (s, e) = (offsets[dst], offsets[dst + 1]);
        if s == e {
            continue;
        }
        let inv = 1.0 / (e - s) as f64;
        let go_row = &grad_out[dst * channels..][..channels];
        for &src in &sources[s..e] {
            let g_row = &mut g[src as usize * channels..][..channels];
            for (gv, &go) in g_row.iter_mut().zip(go_row) {
                *gv += go * inv;
            }
        }
    }
    g
}

/// Elementwise max over in-edges. Returns the pooled rows and, per output
/// element, the source row that won (`u32::MAX` for empty neighborhoods).
/// Ties go to the earliest source in CSR order.
pub fn scatter_max(x: &[f64], channels: usize, offsets: &[usize], sources: &[u32]) -> (Vec<f64>, Vec<u32>) {
    let n = offsets.len() - 1;
    let mut out = vec![0.0; n * channels];
    let mut arg = vec![u32::MAX; n * channels];
    for dst in 0..n {
        let (s, e) = (offsets[dst], offsets[dst + 1]);
        for &src in &sources[s..e] {
            let x_row = &x[src as usize * channels..][..channels];
            for c in 0..channels {
                let slot = dst * channels + c;
                if arg[slot] == u32::MAX || x_row[c] > out[slot] {
                    out[slot] = x_row[c];
                    arg[slot] = src;
                }
            }
        }
    }
    (out, arg)
}

/// Permute `B x C x H x W` into node rows `(B·H·W) x C`.
pub fn nchw_to_rows<T: Copy + Default>(x: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::default(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &x[(bi * c + ci) * hw..][..hw];
            for (p, &v) in plane.iter().enumerate() {
                out[(bi * hw + p) * c + ci] = v;
            }
        }
    }
    out
}

/// Inverse of [`nchw_to_rows`].
pub fn rows_to_nchw<T: Copy + Default>(x: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::default(); x.len()];
    for bi in 0..b {
        for p in 0..hw {
            let row = &x[(bi * hw + p) * c..][..c];
            for (ci, &v) in row.iter().enumerate() {
                out[(bi * c + ci) * hw + p] = v;
            }
        }
    }
    out
}

/// Per-axis bilinear sampling taps for an integer upscale with half-pixel
/// centers: output index `o` samples source coordinate
/// `max(0, (o + 0.5) / factor - 0.5)`.
#[derive(Clone, Debug)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    pub fn new(src_len: usize, factor: usize) -> Self {
        let out_len = src_len * factor;
        let mut taps = AxisTaps {
            lo: Vec::with_capacity(out_len),
            hi: Vec::with_capacity(out_len),
            frac: Vec::with_capacity(out_len),
        };
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(src_len - 1);
            let hi = if lo + 1 < src_len { lo + 1 } else { lo };
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.frac.push(src - lo as f64);
        }
        taps
    }
}

pub fn upsample_bilinear(x: &[f64], planes: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let ty = AxisTaps::new(h, factor);
    let tx = AxisTaps::new(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * ho * wo..][..ho * wo];
        for oy in 0..ho {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..wo {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                // lerp form keeps constant fields exactly constant
                let (a, b) = (src[y0 * w + x0], src[y0 * w + x1]);
                let (c, d) = (src[y1 * w + x0], src[y1 * w + x1]);
                let top = a + (b - a) * fx;
                let bot = c + (d - c) * fx;
                dst[oy * wo + ox] = top + (bot - top) * fy;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward(grad_out: &[f64], planes: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let ty = AxisTaps::new(h, factor);
    let tx = AxisTaps::new(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    let mut g = vec![0.0; planes * h * w];
    for p in 0..planes {
        let go = &grad_out[p * ho * wo..][..ho * wo];
        let gi = &mut g[p * h * w..][..h * w];
        for oy in 0..ho {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..wo {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let v = go[oy * wo + ox];
                gi[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                gi[y0 * w + x1] += v * (1.0 - fy) * fx;
                gi[y1 * w + x0] += v * fy * (1.0 - fx);
                gi[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    g
}

/// Single-head dense softmax attention `softmax(Q Kᵀ / sqrt(d)) V` with
/// `Q = K = V = x` (`n x d`). Quadratic in `n` in time and memory.
pub fn dense_self_attention<T: Float>(x: &[T], n: usize, d: usize) -> Vec<T> {
    let scale = T::one() / T::from(d).unwrap().sqrt();
    let mut scores = vec![T::zero(); n * n];
    for i in 0..n {
        let qi = &x[i * d..][..d];
        for j in 0..n {
            let kj = &x[j * d..][..d];
            let mut acc = T::zero();
            for (&a, &b) in qi.iter().zip(kj) {
                acc = acc + a * b;
            }
            scores[i * n + j] = acc * scale;
        }
    }
    for row in scores.chunks_exact_mut(n) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total = total + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    matmul(&scores, x, n, n, d)
}
