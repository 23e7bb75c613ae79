//! Raw NHWC kernels behind the graph ops.
//!
//! Convolutions lower to GEMM through an im2col buffer built one band of
//! output rows at a time, which bounds scratch memory at full image size.

use crate::element::Element;
use crate::error::{Error, Result};

/// Upper bound on scratch elements per im2col band.
const COL_BUDGET: usize = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding that keeps `ceil(H / stride)` rows; an odd remainder goes bottom/right.
    Same,
    Valid,
}

/// Geometry of a forward convolution `N x H x W x Cin -> N x OH x OW x Cout`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x_shape: [usize; 4], k_shape: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let [n, h, w, cin] = x_shape;
        let &[kh, kw, kcin, cout] = k_shape else {
            return Err(Error::invalid_shape(
                "conv2d",
                k_shape,
                "kernel must be kH x kW x Cin x Cout",
            ));
        };
        if kcin != cin {
            return Err(Error::shape("conv2d", &x_shape, k_shape));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::invalid_shape(
                        "conv2d",
                        k_shape,
                        "same padding needs odd kernel dims",
                    ));
                }
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::shape("conv2d", &x_shape, k_shape));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad_top,
            pad_left,
            oh,
            ow,
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    fn band_rows(&self) -> usize {
        (COL_BUDGET / (self.ow * self.patch_len()).max(1)).clamp(1, self.oh)
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.oh, self.ow, self.cout]
    }
}

/// Fills `col` with patches for output rows `[r0, r1)` of sample `img`.
fn im2col<E: Element>(x: &[E], g: &ConvGeom, img: usize, r0: usize, r1: usize, col: &mut [E]) {
    let kc = g.patch_len();
    let x_img = &x[img * g.h * g.w * g.cin..(img + 1) * g.h * g.w * g.cin];
    let mut p = 0;
    for oy in r0..r1 {
        for ox in 0..g.ow {
            let row = &mut col[p * kc..(p + 1) * kc];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    let dst = &mut row[(ky * g.kw + kx) * g.cin..(ky * g.kw + kx + 1) * g.cin];
                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        dst.fill(E::zero());
                    } else {
                        let src = (iy as usize * g.w + ix as usize) * g.cin;
                        dst.copy_from_slice(&x_img[src..src + g.cin]);
                    }
                }
            }
            p += 1;
        }
    }
}

/// Scatter-adds patch gradients for output rows `[r0, r1)` back into `dx`.
fn col2im<E: Element>(col: &[E], g: &ConvGeom, img: usize, r0: usize, r1: usize, dx: &mut [E]) {
    let kc = g.patch_len();
    let dx_img = &mut dx[img * g.h * g.w * g.cin..(img + 1) * g.h * g.w * g.cin];
    let mut p = 0;
    for oy in r0..r1 {
        for ox in 0..g.ow {
            let row = &col[p * kc..(p + 1) * kc];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = &row[(ky * g.kw + kx) * g.cin..(ky * g.kw + kx + 1) * g.cin];
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    for (d, &s) in dx_img[dst..dst + g.cin].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
            p += 1;
        }
    }
}

pub fn conv2d_forward<E: Element>(x: &[E], g: &ConvGeom, k: &[E], bias: Option<&[E]>) -> Vec<E> {
    let mut out = vec![E::zero(); g.n * g.oh * g.ow * g.cout];
    if g.is_pointwise() {
        E::gemm(g.n * g.h * g.w, g.cin, g.cout, x, false, k, false, &mut out, false);
    } else {
        let kc = g.patch_len();
        let band = g.band_rows();
        let mut col = vec![E::zero(); band * g.ow * kc];
        for img in 0..g.n {
            let mut r0 = 0;
            while r0 < g.oh {
                let r1 = (r0 + band).min(g.oh);
                let rows = (r1 - r0) * g.ow;
                im2col(x, g, img, r0, r1, &mut col);
                let o = (img * g.oh + r0) * g.ow * g.cout;
                E::gemm(
                    rows,
                    kc,
                    g.cout,
                    &col,
                    false,
                    k,
                    false,
                    &mut out[o..o + rows * g.cout],
                    false,
                );
                r0 = r1;
            }
        }
    }
    if let Some(b) = bias {
        for px in out.chunks_exact_mut(g.cout) {
            for (v, &bv) in px.iter_mut().zip(b) {
                *v = *v + bv;
            }
        }
    }
    out
}

/// Gradient of a convolution with respect to its input.
pub fn conv2d_backward_data<E: Element>(dy: &[E], g: &ConvGeom, k: &[E]) -> Vec<E> {
    let mut dx = vec![E::zero(); g.n * g.h * g.w * g.cin];
    if g.is_pointwise() {
        E::gemm(g.n * g.h * g.w, g.cout, g.cin, dy, false, k, true, &mut dx, false);
        return dx;
    }
    let kc = g.patch_len();
    let band = g.band_rows();
    let mut col = vec![E::zero(); band * g.ow * kc];
    for img in 0..g.n {
        let mut r0 = 0;
        while r0 < g.oh {
            let r1 = (r0 + band).min(g.oh);
            let rows = (r1 - r0) * g.ow;
            let o = (img * g.oh + r0) * g.ow * g.cout;
            E::gemm(
                rows,
                g.cout,
                kc,
                &dy[o..o + rows * g.cout],
                false,
                k,
                true,
                &mut col,
                false,
            );
            col2im(&col, g, img, r0, r1, &mut dx);
            r0 = r1;
        }
    }
    dx
}

/// Gradient of a convolution with respect to its kernel.
pub fn conv2d_backward_kernel<E: Element>(x: &[E], g: &ConvGeom, dy: &[E]) -> Vec<E> {
    let kc = g.patch_len();
    let mut dk = vec![E::zero(); kc * g.cout];
    if g.is_pointwise() {
        E::gemm(g.cin, g.n * g.h * g.w, g.cout, x, true, dy, false, &mut dk, false);
        return dk;
    }
    let band = g.band_rows();
    let mut col = vec![E::zero(); band * g.ow * kc];
    for img in 0..g.n {
        let mut r0 = 0;
        while r0 < g.oh {
            let r1 = (r0 + band).min(g.oh);
            let rows = (r1 - r0) * g.ow;
            im2col(x, g, img, r0, r1, &mut col);
            let o = (img * g.oh + r0) * g.ow * g.cout;
            E::gemm(
                kc,
                rows,
                g.cout,
                &col,
                true,
                &dy[o..o + rows * g.cout],
                false,
                &mut dk,
                true,
            );
            r0 = r1;
        }
    }
    dk
}

/// Per-channel sum over every pixel of an NHWC buffer.
pub fn channel_sums<E: Element>(dy: &[E], c: usize) -> Vec<E> {
    let mut acc = vec![0.0f64; c];
    for px in dy.chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a += v.as_f64();
        }
    }
    acc.into_iter().map(E::from_f64).collect()
}

/// Strictly greater, with NaN beating any number so it propagates.
fn beats<E: Element>(v: E, best: E) -> bool {
    v > best || (v.is_nan() && !best.is_nan())
}

/// Non-overlapping `size x size` max pooling; returns values and flat argmax indices.
pub fn maxpool_forward<E: Element>(x: &[E], shape: [usize; 4], size: usize) -> (Vec<E>, Vec<u32>) {
    let [n, h, w, c] = shape;
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_i = ((img * h + oy * size) * w + ox * size) * c + ch;
                    let mut best = x[best_i];
                    for dy in 0..size {
                        for dx in 0..size {
                            let i = ((img * h + oy * size + dy) * w + ox * size + dx) * c + ch;
                            // strict comparison keeps the first maximum in scan order
                            if beats(x[i], best) {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
    }
    (out, arg)
}

pub fn channel_max_forward<E: Element>(x: &[E], c: usize) -> (Vec<E>, Vec<u32>) {
    let mut out = Vec::with_capacity(x.len() / c);
    let mut arg = Vec::with_capacity(x.len() / c);
    for px in x.chunks_exact(c) {
        let mut best = 0;
        for (i, &v) in px.iter().enumerate().skip(1) {
            if beats(v, px[best]) {
                best = i;
            }
        }
        out.push(px[best]);
        arg.push(best as u32);
    }
    (out, arg)
}

pub fn channel_avg_forward<E: Element>(x: &[E], c: usize) -> Vec<E> {
    let inv = 1.0 / c as f64;
    x.chunks_exact(c)
        .map(|px| E::from_f64(px.iter().map(|v| v.as_f64()).sum::<f64>() * inv))
        .collect()
}

/// Batch statistics per channel: (mean, biased variance).
pub fn channel_moments<E: Element>(x: &[E], c: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (x.len() / c) as f64;
    let mut mean = vec![0.0f64; c];
    for px in x.chunks_exact(c) {
        for (a, &v) in mean.iter_mut().zip(px) {
            *a += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0f64; c];
    for px in x.chunks_exact(c) {
        for ((a, &v), mu) in var.iter_mut().zip(px).zip(&mean) {
            let d = v.as_f64() - mu;
            *a += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}
