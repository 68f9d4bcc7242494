//! Conversion between image files and [`ImagePlane`]s.

use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, ImagePlane};

pub fn from_rgb(img: &RgbImage) -> ImagePlane<f32> {
    let (w, h) = img.dimensions();
    FeatureMap::from_fn([1, 3, h as usize, w as usize], |[_, c, y, x]| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

/// Batch entry `b`, clamped to `[0, 1]` and rounded to 8 bits.
pub fn to_rgb(plane: &ImagePlane<f32>, b: usize) -> RgbImage {
    let (h, w) = (plane.height(), plane.width());
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| {
            (plane.at(b, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    })
}

pub fn load_rgb_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<ImagePlane<f32>> {
    Ok(from_rgb(&load_rgb_image(path)?))
}

pub fn save_rgb(path: impl AsRef<Path>, plane: &ImagePlane<f32>) -> Result<()> {
    let path = path.as_ref();
    to_rgb(plane, 0).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Whether `path` has an extension this crate reads.
pub fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_round_trip() {
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([x as u8 * 50, y as u8 * 80, 7]));
        let plane = from_rgb(&img);
        assert_eq!(plane.shape(), [1, 3, 3, 5]);
        assert_eq!(to_rgb(&plane, 0), img);
    }

    #[test]
    fn extensions() {
        assert!(is_image_path(Path::new("a/frame_001.PNG")));
        assert!(is_image_path(Path::new("x.jpeg")));
        assert!(!is_image_path(Path::new("notes.txt")));
    }
}
