//! Image corpora and random-crop batch sampling.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;

use crate::error::{Error, Result};
use crate::imageio::{self, from_rgb};
use crate::tensor::{FeatureMap, ImagePlane};

/// Draws per sample before giving up on a corpus full of unreadable files.
const MAX_ATTEMPTS: usize = 32;

/// Sorted list of readable-looking image files in one directory.
#[derive(Clone, Debug)]
pub struct Corpus {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Corpus {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let entries = fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
        let mut files = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&root, e))?.path();
            if path.is_file() && imageio::is_image_path(&path) {
                files.push(path);
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(Error::EmptyCorpus(root));
        }
        Ok(Corpus { root, files })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// One `crop x crop` patch from a uniformly chosen image. Files that fail
    /// to decode are skipped with a warning.
    pub fn sample(
        &self,
        crop: usize,
        max_short_side: usize,
        rng: &mut impl Rng,
    ) -> Result<ImagePlane<f32>> {
        for _ in 0..MAX_ATTEMPTS {
            let path = &self.files[rng.random_range(0..self.files.len())];
            match imageio::load_rgb_image(path) {
                Ok(img) => {
                    return Ok(random_crop(
                        &fit_short_side(&img, crop, max_short_side),
                        crop,
                        rng,
                    ))
                }
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        Err(Error::Invalid(format!(
            "no readable image in {} after {MAX_ATTEMPTS} draws",
            self.root.display()
        )))
    }

    pub fn batch(
        &self,
        n: usize,
        crop: usize,
        max_short_side: usize,
        rng: &mut impl Rng,
    ) -> Result<ImagePlane<f32>> {
        let items: Result<Vec<_>> = (0..n)
            .map(|_| self.sample(crop, max_short_side, rng))
            .collect();
        FeatureMap::stack(&items?)
    }
}

/// Rescale so the short side lies in `[min_side, max_side]`, keeping aspect.
pub fn fit_short_side(img: &RgbImage, min_side: usize, max_side: usize) -> RgbImage {
    let (w, h) = img.dimensions();
    let short = w.min(h) as usize;
    let target = short.clamp(min_side, max_side.max(min_side));
    if target == short {
        return img.clone();
    }
    let scale = target as f64 / short as f64;
    let nw = ((w as f64 * scale).round() as u32).max(min_side as u32);
    let nh = ((h as f64 * scale).round() as u32).max(min_side as u32);
    imageops::resize(img, nw, nh, FilterType::Triangle)
}

/// Uniform `crop x crop` window; the image must be at least that large.
pub fn random_crop(img: &RgbImage, crop: usize, rng: &mut impl Rng) -> ImagePlane<f32> {
    let (w, h) = img.dimensions();
    let c = crop as u32;
    assert!(w >= c && h >= c, "image {w}x{h} smaller than crop {crop}");
    let x = rng.random_range(0..=w - c);
    let y = rng.random_range(0..=h - c);
    from_rgb(&imageops::crop_imm(img, x, y, c, c).to_image())
}
