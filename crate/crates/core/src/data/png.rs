use std::path::Path;

use image::{ImageFormat, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Decode an 8-bit PNG into a `1 × 3 × H × W` tensor in `[0, 1]`.
///
/// Grayscale and alpha images are converted to RGB; alpha is dropped.
pub fn load_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader.set_format(ImageFormat::Png);
    let decoded = reader.decode().map_err(|e| image_error(path, e))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |[_, c, y, x]| {
        T::from_f64(raw[(y * w + x) * 3 + c] as f64 / 255.0)
    }))
}

/// Encode the first batch item as an 8-bit RGB PNG, rounding half up.
pub fn save_png<T: Scalar>(image: &Tensor<T>, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.c() != 3 || s.n() == 0 {
        return Err(Error::config(format!("cannot save {s} as an RGB image")));
    }
    let (h, w) = (s.h(), s.w());
    let mut raw = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image.at([0, c, y, x]).to_f64();
                if !v.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite pixel at ({y},{x}) saving {}",
                        path.display()
                    )));
                }
                raw[(y * w + x) * 3 + c] = (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
        }
    }
    let buf = RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| image_error(path, "bad dimensions"))?;
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => image_error(path, other),
    })
}
