//! Image pairs, ×4 bicubic degradation, patches and PSNR.

mod dataset;
mod png;
mod resample;
mod synthetic;

pub use dataset::{Batch, Dataset, Manifest, ManifestEntry, PatchDataset, Split, MANIFEST_NAME};
pub use png::{load_png, save_png};
pub use resample::{
    axis_taps, bicubic_downsample, bicubic_upsample, cubic, mse, psnr, resize_bicubic, Taps, BICUBIC_A, PSNR_CAP_DB,
};
pub use synthetic::{synthetic_image, write_synthetic_fixture};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Super-resolution factor of the degradation model.
pub const SCALE: usize = 4;

/// High-resolution image with its ×4 low-resolution counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair<T> {
    /// `1 × 3 × H × W`, values in `[0, 1]`.
    pub hr: Tensor<T>,
    /// `1 × 3 × H/4 × W/4`.
    pub lr: Tensor<T>,
    pub id: String,
    /// Top-left HR coordinate within the source image.
    pub origin: (usize, usize),
}

impl<T: Scalar> ImagePair<T> {
    /// Crop `hr` to dimensions divisible by 4 and synthesize the LR image.
    pub fn synthesize(id: impl Into<String>, hr: Tensor<T>) -> Result<Self> {
        let hr = crop_to_multiple(&hr, SCALE)?;
        let lr = bicubic_downsample(&hr, SCALE)?;
        Ok(Self {
            hr,
            lr,
            id: id.into(),
            origin: (0, 0),
        })
    }

    /// Pair an HR image with a supplied LR image after cropping both consistently.
    pub fn with_lr(id: impl Into<String>, hr: Tensor<T>, lr: Tensor<T>) -> Result<Self> {
        let id = id.into();
        let hr = crop_to_multiple(&hr, SCALE)?;
        let (h, w) = (hr.shape().h() / SCALE, hr.shape().w() / SCALE);
        let ls = lr.shape();
        if ls.c() != 3 || ls.h() < h || ls.w() < w {
            return Err(Error::config(format!(
                "{id}: low-resolution image {ls} does not match {}",
                hr.shape()
            )));
        }
        let lr = lr.crop(0, 0, h, w)?;
        Ok(Self {
            hr,
            lr,
            id,
            origin: (0, 0),
        })
    }
}

fn crop_to_multiple<T: Scalar>(image: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.n() != 1 || s.c() != 3 {
        return Err(Error::config(format!("expected a single RGB image, got {s}")));
    }
    let (h, w) = (s.h() / m * m, s.w() / m * m);
    if h == 0 || w == 0 {
        return Err(Error::config(format!("image {s} is smaller than {m}x{m}")));
    }
    if (h, w) == (s.h(), s.w()) {
        return Ok(image.clone());
    }
    image.crop(0, 0, h, w)
}

/// Clip every value to `[0, 1]`.
pub fn clip_unit<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    image.map(|v| T::from_f64(v.to_f64().clamp(0.0, 1.0)))
}

/// Number of patches [`extract_patches`] yields along one axis.
pub fn patches_along(len: usize, patch: usize, stride: usize) -> usize {
    if patch > len || stride == 0 {
        0
    } else {
        (len - patch) / stride + 1
    }
}

/// Regular grid of aligned HR/LR patches; partial edge patches are dropped.
///
/// `stride` must be a multiple of 4 so that every HR origin maps to an integer
/// LR coordinate.
pub fn extract_patches<T: Scalar>(pair: &ImagePair<T>, patch: usize, stride: usize) -> Result<Vec<ImagePair<T>>> {
    if patch == 0 || !patch.is_multiple_of(SCALE) {
        return Err(Error::config(format!(
            "patch size {patch} must be a positive multiple of {SCALE}"
        )));
    }
    if stride == 0 || !stride.is_multiple_of(SCALE) {
        return Err(Error::config(format!(
            "patch stride {stride} must be a positive multiple of {SCALE}"
        )));
    }
    let s = pair.hr.shape();
    let (ny, nx) = (patches_along(s.h(), patch, stride), patches_along(s.w(), patch, stride));
    let mut out = Vec::with_capacity(ny * nx);
    for iy in 0..ny {
        for ix in 0..nx {
            let (y, x) = (iy * stride, ix * stride);
            out.push(ImagePair {
                hr: pair.hr.crop(y, x, patch, patch)?,
                lr: pair.lr.crop(y / SCALE, x / SCALE, patch / SCALE, patch / SCALE)?,
                id: format!("{}@{y},{x}", pair.id),
                origin: (pair.origin.0 + y, pair.origin.1 + x),
            });
        }
    }
    Ok(out)
}

/// One of the eight square symmetries: bit 0 mirrors columns, bit 1 mirrors
/// rows, bit 2 transposes. Codes 0..8 cover all flips and 90° rotations.
pub fn dihedral<T: Scalar>(image: &Tensor<T>, code: u8) -> Tensor<T> {
    let s = image.shape();
    let transpose = code & 4 != 0;
    let out_shape = if transpose {
        crate::tensor::Shape::new(s.n(), s.c(), s.w(), s.h())
    } else {
        s
    };
    Tensor::from_fn(out_shape, |[n, c, y, x]| {
        let (mut sy, mut sx) = if transpose { (x, y) } else { (y, x) };
        if code & 1 != 0 {
            sx = s.w() - 1 - sx;
        }
        if code & 2 != 0 {
            sy = s.h() - 1 - sy;
        }
        image.at([n, c, sy, sx])
    })
}
