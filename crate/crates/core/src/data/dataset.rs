use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dihedral, load_png, ImagePair, SCALE};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// File name looked up when a dataset directory is opened.
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// HR image, relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    /// Optional LR image; synthesized by bicubic downsampling when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_path: Option<PathBuf>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub images: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    /// Every `*.png` in `dir`, sorted by file name, the last tenth held out for validation.
    pub fn scan(dir: &Path) -> Result<Self> {
        let mut names: Vec<String> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
            .collect();
        names.sort();
        let n = names.len();
        let n_val = if n < 2 {
            0
        } else {
            ((n as f64 * 0.1).round() as usize).max(1)
        };
        let images = names
            .into_iter()
            .enumerate()
            .map(|(i, name)| ManifestEntry {
                id: name.trim_end_matches(".png").trim_end_matches(".PNG").to_string(),
                path: PathBuf::from(&name),
                lr_path: None,
                split: if i + n_val >= n { Split::Val } else { Split::Train },
            })
            .collect();
        Ok(Self {
            images,
            root: dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// A manifest file, or a directory holding `manifest.json` or bare PNGs.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let m = path.join(MANIFEST_NAME);
            if m.is_file() {
                Self::load(&m)
            } else {
                Self::scan(path)
            }
        } else {
            Self::load(path)
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

/// Decoded training and validation images.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub train: Vec<ImagePair<T>>,
    pub val: Vec<ImagePair<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let mut out = Self {
            train: Vec::new(),
            val: Vec::new(),
        };
        for e in &manifest.images {
            let hr = load_png(&manifest.resolve(&e.path))?;
            let pair = match &e.lr_path {
                Some(lr) => ImagePair::with_lr(&e.id, hr, load_png(&manifest.resolve(lr))?)?,
                None => ImagePair::synthesize(&e.id, hr)?,
            };
            match e.split {
                Split::Train => out.train.push(pair),
                Split::Val => out.val.push(pair),
            }
        }
        if out.train.is_empty() {
            return Err(Error::config(format!(
                "dataset at {} has no training images",
                manifest.root.display()
            )));
        }
        Ok(out)
    }

    pub fn open(path: &Path) -> Result<Self> {
        Self::load(&Manifest::open(path)?)
    }
}

/// Stacked LR inputs and HR targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub lr: Tensor<T>,
    pub hr: Tensor<T>,
}

/// Random aligned crops with optional flips and quarter turns.
///
/// The patches of epoch `e` depend only on the seed and `e`.
#[derive(Debug, Clone)]
pub struct PatchDataset<T> {
    images: Vec<ImagePair<T>>,
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub augment: bool,
    pub seed: u64,
}

impl<T: Scalar> PatchDataset<T> {
    /// Images smaller than the patch are left out.
    pub fn new(
        images: &[ImagePair<T>],
        patch_size: usize,
        patches_per_image: usize,
        augment: bool,
        seed: u64,
    ) -> Result<Self> {
        if patch_size == 0 || !patch_size.is_multiple_of(SCALE) {
            return Err(Error::config(format!(
                "patch size {patch_size} must be a positive multiple of {SCALE}"
            )));
        }
        if patches_per_image == 0 {
            return Err(Error::config("patches per image must be at least 1"));
        }
        let images: Vec<_> = images
            .iter()
            .filter(|p| p.hr.shape().h() >= patch_size && p.hr.shape().w() >= patch_size)
            .cloned()
            .collect();
        if images.is_empty() {
            return Err(Error::config(format!(
                "no training image holds a {patch_size}x{patch_size} patch"
            )));
        }
        Ok(Self {
            images,
            patch_size,
            patches_per_image,
            augment,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len() * self.patches_per_image
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn epoch_patches(&self, epoch: usize) -> Result<Vec<ImagePair<T>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let p = self.patch_size;
        let lp = p / SCALE;
        let mut out = Vec::with_capacity(self.len());
        for img in &self.images {
            let s = img.hr.shape();
            for _ in 0..self.patches_per_image {
                let y = SCALE * rng.random_range(0..=(s.h() - p) / SCALE);
                let x = SCALE * rng.random_range(0..=(s.w() - p) / SCALE);
                let code = if self.augment { rng.random_range(0..8u8) } else { 0 };
                out.push(ImagePair {
                    hr: dihedral(&img.hr.crop(y, x, p, p)?, code),
                    lr: dihedral(&img.lr.crop(y / SCALE, x / SCALE, lp, lp)?, code),
                    id: img.id.clone(),
                    origin: (y, x),
                });
            }
        }
        out.shuffle(&mut rng);
        Ok(out)
    }

    /// Patches of `epoch` grouped into batches; the last batch may be short.
    pub fn batches(&self, epoch: usize, batch_size: usize) -> Result<Vec<Batch<T>>> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        self.epoch_patches(epoch)?
            .chunks(batch_size)
            .map(|chunk| {
                let lr: Vec<_> = chunk.iter().map(|p| p.lr.clone()).collect();
                let hr: Vec<_> = chunk.iter().map(|p| p.hr.clone()).collect();
                Ok(Batch {
                    lr: Tensor::stack(&lr)?,
                    hr: Tensor::stack(&hr)?,
                })
            })
            .collect()
    }
}
