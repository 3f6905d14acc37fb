use rand::Rng;

use std::path::Path;

use super::image::{load_dir, load_image, Image};
use super::resize::bicubic_downsample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Aligned low/high resolution pair; `hr` dimensions are exactly `scale`
/// times those of `lr`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub lr: Image,
    pub hr: Image,
    pub scale: usize,
}

impl ImagePair {
    /// Crop `hr` to a multiple of `scale` and synthesise the LR image.
    pub fn from_hr(hr: &Image, scale: usize) -> Result<Self> {
        let w = hr.width - hr.width % scale;
        let h = hr.height - hr.height % scale;
        let hr = hr.crop(0, 0, w, h)?;
        let lr = bicubic_downsample(&hr, scale)?;
        Ok(ImagePair { lr, hr, scale })
    }

    pub fn new(lr: Image, hr: Image, scale: usize) -> Result<Self> {
        if hr.width != lr.width * scale || hr.height != lr.height * scale {
            return Err(Error::dim(
                "image_pair",
                format!("hr {}x{} is not {scale} x lr {}x{}", hr.width, hr.height, lr.width, lr.height),
            ));
        }
        Ok(ImagePair { lr, hr, scale })
    }
}

/// One of the eight flip/rotation symmetries of a square.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Augment {
    pub hflip: bool,
    /// Counter-clockwise quarter turns.
    pub rot: u8,
}

impl Augment {
    pub const IDENTITY: Augment = Augment { hflip: false, rot: 0 };

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Augment { hflip: rng.random::<bool>(), rot: rng.random_range(0..4u8) }
    }
}

/// Planar `3 × h × w` patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Patch {
    pub fn from_image(img: &Image, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        Ok(Patch { h, w, data: img.crop(x0, y0, w, h)?.to_planar() })
    }

    fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn hflip(&self) -> Patch {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..3 {
            for y in 0..self.h {
                for x in 0..self.w {
                    data.push(self.get(c, y, self.w - 1 - x));
                }
            }
        }
        Patch { h: self.h, w: self.w, data }
    }

    /// One counter-clockwise quarter turn.
    pub fn rot90(&self) -> Patch {
        let (h, w) = (self.w, self.h);
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(self.get(c, x, self.w - 1 - y));
                }
            }
        }
        Patch { h, w, data }
    }

    pub fn augment(&self, a: Augment) -> Patch {
        let mut p = if a.hflip { self.hflip() } else { self.clone() };
        for _ in 0..a.rot {
            p = p.rot90();
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub lr: Patch,
    pub hr: Patch,
    /// Top-left corners `(x, y)` in the source images.
    pub lr_origin: (usize, usize),
    pub hr_origin: (usize, usize),
}

/// `n` random aligned patch pairs with LR side `patch`.
pub fn sample_patches<R: Rng + ?Sized>(pair: &ImagePair, patch: usize, n: usize, rng: &mut R) -> Result<Vec<PatchPair>> {
    if patch == 0 || patch > pair.lr.width || patch > pair.lr.height {
        return Err(Error::param("patch", format!("{patch} does not fit LR image {}x{}", pair.lr.width, pair.lr.height)));
    }
    let s = pair.scale;
    (0..n)
        .map(|_| {
            let x = rng.random_range(0..=pair.lr.width - patch);
            let y = rng.random_range(0..=pair.lr.height - patch);
            Ok(PatchPair {
                lr: Patch::from_image(&pair.lr, x, y, patch, patch)?,
                hr: Patch::from_image(&pair.hr, x * s, y * s, patch * s, patch * s)?,
                lr_origin: (x, y),
                hr_origin: (x * s, y * s),
            })
        })
        .collect()
}

/// Apply the same symmetry to both halves of a pair.
pub fn augment(p: &PatchPair, a: Augment) -> PatchPair {
    PatchPair { lr: p.lr.augment(a), hr: p.hr.augment(a), lr_origin: p.lr_origin, hr_origin: p.hr_origin }
}

/// Training pairs with batch assembly.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub pairs: Vec<ImagePair>,
}

impl Dataset {
    pub fn from_hr(images: &[Image], scale: usize) -> Result<Self> {
        let pairs = images.iter().map(|im| ImagePair::from_hr(im, scale)).collect::<Result<_>>()?;
        Ok(Dataset { pairs })
    }

    /// Load a directory of HR images. With the DIV2K layout (`HR/` plus
    /// optional `LR_bicubic/X{s}/<stem>x{s}.ppm`) provided LR images are
    /// used where present; everything else is synthesised.
    pub fn load(dir: &Path, scale: usize) -> Result<Self> {
        let hr_dir = dir.join("HR");
        if !hr_dir.is_dir() {
            let images: Vec<Image> = load_dir(dir)?.into_iter().map(|(_, im)| im).collect();
            if images.is_empty() {
                return Err(Error::io(dir, "no .ppm images"));
            }
            return Self::from_hr(&images, scale);
        }
        let lr_dir = dir.join("LR_bicubic").join(format!("X{scale}"));
        let mut pairs = Vec::new();
        for (name, hr) in load_dir(&hr_dir)? {
            let stem = name.rsplit_once('.').map_or(name.as_str(), |(s, _)| s);
            let lr_path = lr_dir.join(format!("{stem}x{scale}.ppm"));
            pairs.push(if lr_path.is_file() {
                let lr = load_image(&lr_path)?;
                let hr = hr.crop(0, 0, lr.width * scale, lr.height * scale)?;
                ImagePair::new(lr, hr, scale)?
            } else {
                ImagePair::from_hr(&hr, scale)?
            });
        }
        if pairs.is_empty() {
            return Err(Error::io(&hr_dir, "no .ppm images"));
        }
        Ok(Dataset { pairs })
    }

    pub fn scale(&self) -> usize {
        self.pairs.first().map_or(1, |p| p.scale)
    }

    /// Per-channel mean of all HR pixels on the `[0, 255]` scale.
    pub fn rgb_mean(&self) -> [f64; 3] {
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for p in &self.pairs {
            for px in p.hr.data.chunks(3) {
                for c in 0..3 {
                    sum[c] += px[c] as f64;
                }
            }
            n += p.hr.width * p.hr.height;
        }
        sum.map(|s| s / n.max(1) as f64)
    }

    /// Random batch: each patch comes from a uniformly drawn image, then a
    /// random symmetry when `augment_patches` is set.
    pub fn batch<R: Rng + ?Sized>(&self, batch: usize, patch: usize, augment_patches: bool, rng: &mut R) -> Result<(Tensor, Tensor)> {
        if self.pairs.is_empty() {
            return Err(Error::param("dataset", "no images"));
        }
        let s = self.scale();
        let mut lr = Vec::with_capacity(batch * 3 * patch * patch);
        let mut hr = Vec::with_capacity(batch * 3 * patch * patch * s * s);
        for _ in 0..batch {
            let pair = &self.pairs[rng.random_range(0..self.pairs.len())];
            let mut p = sample_patches(pair, patch, 1, rng)?.remove(0);
            if augment_patches {
                p = augment(&p, Augment::random(rng));
            }
            lr.extend(p.lr.data);
            hr.extend(p.hr.data);
        }
        Ok((
            Tensor::new(vec![batch, 3, patch, patch], lr)?,
            Tensor::new(vec![batch, 3, patch * s, patch * s], hr)?,
        ))
    }
}
