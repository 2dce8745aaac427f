//! Forward and backward kernels over flat NCHW buffers.
//!
//! Batch loops run sequentially so every reduction has a fixed order.

use super::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0 && self.stride == 1
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let pixels = g.pixels();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let pixels = g.pixels();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let (ckk, pixels) = (g.ckk(), g.pixels());
    let mut out = vec![T::zero(); g.n * g.f * pixels];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ckk * pixels]
    };
    for b in 0..g.n {
        let xb = &x[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
        let cols_ref: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let ob = &mut out[b * g.f * pixels..(b + 1) * g.f * pixels];
        if let Some(bias) = bias {
            for (f, chunk) in ob.chunks_mut(pixels).enumerate() {
                chunk.fill(bias[f]);
            }
        }
        unsafe {
            T::gemm(
                g.f,
                ckk,
                pixels,
                T::one(),
                weight.as_ptr(),
                ckk as isize,
                1,
                cols_ref.as_ptr(),
                pixels as isize,
                1,
                if bias.is_some() { T::one() } else { T::zero() },
                ob.as_mut_ptr(),
                pixels as isize,
                1,
            );
        }
    }
    out
}

/// Returns `(dx, dweight, dbias)`; `dx` is only computed when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (ckk, pixels) = (g.ckk(), g.pixels());
    let mut dw = vec![T::zero(); g.f * ckk];
    let mut db = vec![T::zero(); g.f];
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ckk * pixels]
    };
    let mut dcols = vec![T::zero(); if want_dx { ckk * pixels } else { 0 }];
    for b in 0..g.n {
        let xb = &x[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
        let dyb = &dy[b * g.f * pixels..(b + 1) * g.f * pixels];
        let cols_ref: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        for (f, chunk) in dyb.chunks(pixels).enumerate() {
            db[f] += chunk.iter().copied().sum::<T>();
        }
        unsafe {
            // dW[f, r] += sum_p dY[f, p] * cols[r, p]
            T::gemm(
                g.f,
                pixels,
                ckk,
                T::one(),
                dyb.as_ptr(),
                pixels as isize,
                1,
                cols_ref.as_ptr(),
                1,
                pixels as isize,
                T::one(),
                dw.as_mut_ptr(),
                ckk as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
            let target: *mut T = if g.is_pointwise() {
                dxb.as_mut_ptr()
            } else {
                dcols.as_mut_ptr()
            };
            unsafe {
                // dcols[r, p] = sum_f W[f, r] * dY[f, p]
                T::gemm(
                    ckk,
                    g.f,
                    pixels,
                    T::one(),
                    weight.as_ptr(),
                    1,
                    ckk as isize,
                    dyb.as_ptr(),
                    pixels as isize,
                    1,
                    T::zero(),
                    target,
                    pixels as isize,
                    1,
                );
            }
            if !g.is_pointwise() {
                col2im(&dcols, g, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Kernel-2, stride-2 transposed convolution; weight layout `[C, F, 2, 2]`.
pub(crate) fn up2_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    [n, c, h, w]: [usize; 4],
    f: usize,
) -> Vec<T> {
    let pixels = h * w;
    let f4 = f * 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * f * oh * ow];
    let mut tmp = vec![T::zero(); f4 * pixels];
    for b in 0..n {
        let xb = &x[b * c * pixels..(b + 1) * c * pixels];
        unsafe {
            // tmp[(f,a,b), p] = sum_c W[c, (f,a,b)] * X[c, p]
            T::gemm(
                f4,
                c,
                pixels,
                T::one(),
                weight.as_ptr(),
                1,
                f4 as isize,
                xb.as_ptr(),
                pixels as isize,
                1,
                T::zero(),
                tmp.as_mut_ptr(),
                pixels as isize,
                1,
            );
        }
        let ob = &mut out[b * f * oh * ow..(b + 1) * f * oh * ow];
        for fo in 0..f {
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &tmp[((fo * 2 + a) * 2 + bb) * pixels..][..pixels];
                    for i in 0..h {
                        let dst = &mut ob[fo * oh * ow + (2 * i + a) * ow..][..ow];
                        for j in 0..w {
                            dst[2 * j + bb] = row[i * w + j] + bias[fo];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn up2_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    [n, c, h, w]: [usize; 4],
    f: usize,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let pixels = h * w;
    let f4 = f * 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dw = vec![T::zero(); c * f4];
    let mut db = vec![T::zero(); f];
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dtmp = vec![T::zero(); f4 * pixels];
    for b in 0..n {
        let xb = &x[b * c * pixels..(b + 1) * c * pixels];
        let dyb = &dy[b * f * oh * ow..(b + 1) * f * oh * ow];
        for fo in 0..f {
            db[fo] += dyb[fo * oh * ow..(fo + 1) * oh * ow].iter().copied().sum::<T>();
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &mut dtmp[((fo * 2 + a) * 2 + bb) * pixels..][..pixels];
                    for i in 0..h {
                        let src = &dyb[fo * oh * ow + (2 * i + a) * ow..][..ow];
                        for j in 0..w {
                            row[i * w + j] = src[2 * j + bb];
                        }
                    }
                }
            }
        }
        unsafe {
            // dW[c, r] += sum_p X[c, p] * dtmp[r, p]
            T::gemm(
                c,
                pixels,
                f4,
                T::one(),
                xb.as_ptr(),
                pixels as isize,
                1,
                dtmp.as_ptr(),
                1,
                pixels as isize,
                T::one(),
                dw.as_mut_ptr(),
                f4 as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * c * pixels..(b + 1) * c * pixels];
            unsafe {
                T::gemm(
                    c,
                    f4,
                    pixels,
                    T::one(),
                    weight.as_ptr(),
                    f4 as isize,
                    1,
                    dtmp.as_ptr(),
                    pixels as isize,
                    1,
                    T::zero(),
                    dxb.as_mut_ptr(),
                    pixels as isize,
                    1,
                );
            }
        }
    }
    (dx, dw, db)
}

/// Per-channel statistics saved by a train-mode batch norm.
#[derive(Clone, Debug)]
pub(crate) struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Biased batch variance.
    pub batch_var: Vec<T>,
}

pub(crate) fn batch_norm_train<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    [n, c, h, w]: [usize; 4],
    eps: T,
) -> (Vec<T>, BnSaved<T>) {
    let hw = h * w;
    let m = T::from_f64((n * hw) as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    let mut batch_mean = vec![T::zero(); c];
    let mut batch_var = vec![T::zero(); c];
    for ch in 0..c {
        let planes = (0..n).map(|b| (b * c + ch) * hw);
        let mut sum = T::zero();
        for off in planes.clone() {
            sum += x[off..off + hw].iter().copied().sum::<T>();
        }
        let mean = sum / m;
        let mut sq = T::zero();
        for off in planes.clone() {
            sq += x[off..off + hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
        }
        let var = sq / m;
        let istd = T::one() / (var + eps).sqrt();
        for off in planes {
            for i in off..off + hw {
                let xh = (x[i] - mean) * istd;
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
        inv_std[ch] = istd;
        batch_mean[ch] = mean;
        batch_var[ch] = var;
    }
    (
        y,
        BnSaved {
            xhat,
            inv_std,
            batch_mean,
            batch_var,
        },
    )
}

/// Returns `(dx, dgamma, dbeta)` for train-mode normalization.
pub(crate) fn batch_norm_train_backward<T: Scalar>(
    dy: &[T],
    gamma: &[T],
    saved: &BnSaved<T>,
    [n, c, h, w]: [usize; 4],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = h * w;
    let m = T::from_f64((n * hw) as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for (&d, &x) in dy[off..off + hw].iter().zip(&saved.xhat[off..off + hw]) {
                sum_dy += d;
                sum_dy_xhat += d * x;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * saved.inv_std[ch] / m;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dx[i] = scale * (m * dy[i] - sum_dy - saved.xhat[i] * sum_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn max_pool2_forward<T: Scalar>(x: &[T], [n, c, h, w]: [usize; 4]) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let cands = [
                    base + 2 * i * w + 2 * j,
                    base + 2 * i * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ];
                let mut best = cands[0];
                for &cand in &cands[1..] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn softmax_channels<T: Scalar>(x: &[T], [n, c, h, w]: [usize; 4]) -> Vec<T> {
    let hw = h * w;
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut max = T::neg_infinity();
            for ch in 0..c {
                max = max.max(x[base + ch * hw + p]);
            }
            let mut denom = T::zero();
            for ch in 0..c {
                let e = (x[base + ch * hw + p] - max).exp();
                y[base + ch * hw + p] = e;
                denom += e;
            }
            for ch in 0..c {
                y[base + ch * hw + p] = y[base + ch * hw + p] / denom;
            }
        }
    }
    y
}

pub(crate) fn softmax_channels_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    [n, c, h, w]: [usize; 4],
) -> Vec<T> {
    let hw = h * w;
    let mut dx = vec![T::zero(); y.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut dot = T::zero();
            for ch in 0..c {
                let i = base + ch * hw + p;
                dot += y[i] * dy[i];
            }
            for ch in 0..c {
                let i = base + ch * hw + p;
                dx[i] = y[i] * (dy[i] - dot);
            }
        }
    }
    dx
}
