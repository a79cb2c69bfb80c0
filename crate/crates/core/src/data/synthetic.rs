use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::save_png;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

struct Rect {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
}

impl Rect {
    fn random(size: usize, rng: &mut impl Rng) -> Self {
        let h = rng.random_range(size / 3..=size / 2);
        let w = rng.random_range(size / 3..=size / 2);
        Self {
            y: rng.random_range(0..=size - h),
            x: rng.random_range(0..=size - w),
            h,
            w,
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        (self.y..self.y + self.h).contains(&y) && (self.x..self.x + self.w).contains(&x)
    }
}

/// Procedural test image: a linear color gradient under one rectangle of
/// black-and-white stripes and one black-and-white checkerboard.
///
/// Stripes and cells are at least two low-resolution pixels wide, so ×4
/// downsampling blurs their edges without erasing them.
pub fn synthetic_image(size: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let (c0, c1) = (color(rng), color(rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let n = size as f64;
    let ramp = |y: usize, x: usize| ((y as f64 - n / 2.0) * dy + (x as f64 - n / 2.0) * dx) / n + 0.5;

    let stripes = Rect::random(size, rng);
    let half = rng.random_range(8..=16usize);
    let orient = rng.random_range(0..3usize);
    let checker = Rect::random(size, rng);
    let cell = rng.random_range(8..=16usize);
    let (oy, ox) = (rng.random_range(0..cell), rng.random_range(0..cell));
    let (black, white) = ([0.0; 3], [1.0; 3]);

    Tensor::from_fn(Shape::new(1, 3, size, size), |[_, c, y, x]| {
        let px = if checker.contains(y, x) {
            if ((y + oy) / cell + (x + ox) / cell) % 2 == 0 {
                black
            } else {
                white
            }
        } else if stripes.contains(y, x) {
            let u = match orient {
                0 => y,
                1 => x,
                _ => (x + y) / 2,
            };
            if (u / half) % 2 == 0 {
                black
            } else {
                white
            }
        } else {
            mix(c0, c1, ramp(y, x))
        };
        px[c].clamp(0.0, 1.0)
    })
}

/// Write `count` images `img_000.png, ...` of side `size` into `dir`.
pub fn write_synthetic_fixture(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    if size < 8 || !size.is_multiple_of(4) {
        return Err(Error::config(format!(
            "fixture size {size} must be a multiple of 4, at least 8"
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let path = dir.join(format!("img_{i:03}.png"));
            save_png(&synthetic_image(size, &mut rng), &path)?;
            Ok(path)
        })
        .collect()
}
