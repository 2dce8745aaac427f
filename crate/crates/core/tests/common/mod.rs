//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use lupi_core::imaging::{GrayImage, MaskImage};
use lupi_core::nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Six nested loops over (n, f, oy, ox, c, ki, kj); bias added last.
pub fn conv2d_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    pad: usize,
    stride: usize,
) -> Tensor<f64> {
    let [n, c, h, wd] = x.dims4().unwrap();
    let [f, _, k, _] = w.dims4().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for bn in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((bn * c + ch) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((fo * c + ch) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[((bn * f + fo) * oh + oy) * ow + ox] = acc + b[fo];
                }
            }
        }
    }
    Tensor::new(vec![n, f, oh, ow], out).unwrap()
}

/// Scatter definition of the kernel-2 stride-2 transposed convolution.
pub fn up2_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
    let [n, c, h, wd] = x.dims4().unwrap();
    let f = w.shape()[1];
    let mut out = vec![0.0; n * f * 4 * h * wd];
    for bn in 0..n {
        for fo in 0..f {
            for i in 0..2 * h {
                for j in 0..2 * wd {
                    let mut acc = b[fo];
                    for ch in 0..c {
                        acc += x.data()[((bn * c + ch) * h + i / 2) * wd + j / 2]
                            * w.data()[((ch * f + fo) * 2 + i % 2) * 2 + j % 2];
                    }
                    out[((bn * f + fo) * 2 * h + i) * 2 * wd + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, f, 2 * h, 2 * wd], out).unwrap()
}

/// Two-pass per-channel mean and biased variance.
pub fn channel_stats(x: &Tensor<f64>) -> Vec<(f64, f64)> {
    let [n, c, h, w] = x.dims4().unwrap();
    (0..c)
        .map(|ch| {
            let vals: Vec<f64> = (0..n)
                .flat_map(|b| (0..h * w).map(move |p| (b, p)))
                .map(|(b, p)| x.data()[(b * c + ch) * h * w + p])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            (mean, var)
        })
        .collect()
}

/// Random two-class distribution map of shape `[n, 2, h, w]`.
pub fn random_probs(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut data = vec![0.0; n * 2 * h * w];
    for b in 0..n {
        for p in 0..h * w {
            let q: f64 = rng.gen_range(0.02..0.98);
            data[b * 2 * h * w + p] = 1.0 - q;
            data[b * 2 * h * w + h * w + p] = q;
        }
    }
    Tensor::new(vec![n, 2, h, w], data).unwrap()
}

/// `(TP, FP, FN)` on the tumor class, pixel by pixel.
pub fn confusion_counts(pred: &[MaskImage], truth: &[MaskImage]) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fne) = (0, 0, 0);
    for (p, t) in pred.iter().zip(truth) {
        for y in 0..p.height() {
            for x in 0..p.width() {
                match (p.get(x, y), t.get(x, y)) {
                    (1, 1) => tp += 1,
                    (1, 0) => fp += 1,
                    (0, 1) => fne += 1,
                    _ => {}
                }
            }
        }
    }
    (tp, fp, fne)
}

/// Histogram equalization by direct counting: each pixel maps to the
/// fraction of pixels whose 256-bin index is not larger than its own.
pub fn equalize_oracle(img: &GrayImage) -> Vec<f64> {
    let bin = |v: f64| ((v * 256.0).floor() as usize).min(255);
    let n = img.data().len() as f64;
    img.data()
        .iter()
        .map(|&v| img.data().iter().filter(|&&u| bin(u) <= bin(v)).count() as f64 / n)
        .collect()
}

/// Percentile stretch computed from a freshly sorted copy with
/// numpy-style linear interpolation.
pub fn stretch_oracle(img: &GrayImage, p_low: f64, p_high: f64) -> Vec<f64> {
    let mut s = img.data().to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |p: f64| {
        let r = p / 100.0 * (s.len() - 1) as f64;
        let (lo, hi) = (r.floor() as usize, r.ceil() as usize);
        s[lo] + (s[hi] - s[lo]) * (r - lo as f64)
    };
    let (lo, hi) = (pct(p_low), pct(p_high));
    if hi <= lo {
        return vec![0.0; s.len()];
    }
    img.data()
        .iter()
        .map(|&v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
        .collect()
}
