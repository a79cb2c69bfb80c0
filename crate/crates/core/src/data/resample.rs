//! Separable bicubic resampling and PSNR.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Keys cubic coefficient.
pub const BICUBIC_A: f64 = -0.5;
/// Reported PSNR when two images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Cubic convolution kernel with parameter `a`.
pub fn cubic(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * a
    } else {
        0.0
    }
}

/// Normalized taps of one output sample: `(input index, weight)` with
/// out-of-range indices clamped to the edge.
#[derive(Debug, Clone)]
pub struct Taps(pub Vec<(usize, f64)>);

/// Taps for resampling an axis of `in_len` samples to `out_len`.
///
/// Pixel centers sit at half-integers. When shrinking with `antialias`, the
/// kernel is stretched by the scale factor so it also acts as a low-pass filter.
pub fn axis_taps(in_len: usize, out_len: usize, antialias: bool) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    let stretch = if antialias { scale.max(1.0) } else { 1.0 };
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = (center - support - 0.5).floor() as isize;
            let hi = (center + support + 0.5).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for j in lo..=hi {
                let w = cubic((j as f64 + 0.5 - center) / stretch, BICUBIC_A);
                if w == 0.0 {
                    continue;
                }
                total += w;
                let idx = j.clamp(0, in_len as isize - 1) as usize;
                match taps.iter_mut().find(|(k, _)| *k == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            for t in &mut taps {
                t.1 /= total;
            }
            Taps(taps)
        })
        .collect()
}

/// Bicubic resize of every channel to `out_h × out_w`, clipped to `[0, 1]`.
pub fn resize_bicubic<T: Scalar>(image: &Tensor<T>, out_h: usize, out_w: usize, antialias: bool) -> Result<Tensor<T>> {
    let s = image.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::config(format!("cannot resize {s} to {out_h}x{out_w}")));
    }
    let ty = axis_taps(s.h(), out_h, antialias);
    let tx = axis_taps(s.w(), out_w, antialias);
    let out_shape = Shape::new(s.n(), s.c(), out_h, out_w);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut rows = vec![0.0f64; s.h() * out_w];
    for plane in image.data().chunks_exact(s.plane()) {
        for y in 0..s.h() {
            let src = &plane[y * s.w()..(y + 1) * s.w()];
            for (x, taps) in tx.iter().enumerate() {
                rows[y * out_w + x] = taps.0.iter().map(|&(j, w)| w * src[j].to_f64()).sum();
            }
        }
        for taps in &ty {
            for x in 0..out_w {
                let v: f64 = taps.0.iter().map(|&(j, w)| w * rows[j * out_w + x]).sum();
                out.push(T::from_f64(v.clamp(0.0, 1.0)));
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Antialiased bicubic reduction by an integer factor.
pub fn bicubic_downsample<T: Scalar>(image: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if factor == 0 || !s.h().is_multiple_of(factor) || !s.w().is_multiple_of(factor) {
        return Err(Error::config(format!(
            "image {s} is not divisible by downsampling factor {factor}"
        )));
    }
    resize_bicubic(image, s.h() / factor, s.w() / factor, true)
}

/// Bicubic enlargement by an integer factor (the interpolation baseline).
pub fn bicubic_upsample<T: Scalar>(image: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if factor == 0 {
        return Err(Error::config("upsampling factor must be positive"));
    }
    resize_bicubic(image, s.h() * factor, s.w() * factor, true)
}

/// Mean squared error over all elements, accumulated in 64-bit.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "cannot compare images {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum();
    Ok(sum / a.numel() as f64)
}

/// `10·log10(peak² / MSE)` over all pixels and channels, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::config(format!("PSNR peak {peak} must be positive")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}
