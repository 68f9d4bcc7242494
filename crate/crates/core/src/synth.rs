//! Procedural stand-ins for photo and painting corpora, and synthetic
//! video clips with known motion.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::ImagePlane;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Smooth shaded scenes with a few soft-edged objects.
    Photo,
    /// High-contrast periodic textures in a small palette.
    Painting,
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn smoothstep(edge: f32, x: f32) -> f32 {
    let t = ((x + edge) / (2.0 * edge)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn to_pixel(v: [f32; 3]) -> Rgb<u8> {
    Rgb(v.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
}

pub fn photo(width: u32, height: u32, rng: &mut impl Rng) -> RgbImage {
    let top = random_color(rng);
    let bottom = random_color(rng);
    let (fx, fy, phase) = (
        rng.random_range(0.5..2.0f32),
        rng.random_range(0.5..2.0f32),
        rng.random_range(0.0..2.0 * PI),
    );
    struct Blob {
        cx: f32,
        cy: f32,
        rx: f32,
        ry: f32,
        color: [f32; 3],
        rect: bool,
    }
    let blobs: Vec<Blob> = (0..rng.random_range(3..7))
        .map(|_| Blob {
            cx: rng.random_range(0.0..1.0),
            cy: rng.random_range(0.0..1.0),
            rx: rng.random_range(0.08..0.35),
            ry: rng.random_range(0.08..0.35),
            color: random_color(rng),
            rect: rng.random_bool(0.4),
        })
        .collect();
    let (w, h) = (width as f32, height as f32);
    let grain: Vec<f32> = (0..width * height)
        .map(|_| rng.random_range(-0.01..0.01))
        .collect();
    RgbImage::from_fn(width, height, |x, y| {
        let (u, v) = (x as f32 / w, y as f32 / h);
        let shade = 0.08 * (2.0 * PI * (fx * u + fy * v) + phase).sin();
        let mut px: [f32; 3] = std::array::from_fn(|c| top[c] * (1.0 - v) + bottom[c] * v + shade);
        for b in &blobs {
            let (dx, dy) = ((u - b.cx) / b.rx, (v - b.cy) / b.ry);
            let d = if b.rect {
                dx.abs().max(dy.abs())
            } else {
                (dx * dx + dy * dy).sqrt()
            };
            // soft edge about 1.5 px wide
            let a = 1.0 - smoothstep(1.5 / (b.rx * w), d - 1.0);
            for c in 0..3 {
                px[c] = px[c] * (1.0 - a) + b.color[c] * a;
            }
        }
        let g = grain[(y * width + x) as usize];
        to_pixel(px.map(|c| c + g))
    })
}

pub fn painting(width: u32, height: u32, rng: &mut impl Rng) -> RgbImage {
    let palette = [random_color(rng), random_color(rng), random_color(rng)];
    let pattern = rng.random_range(0..4);
    let period = rng.random_range(4.0..16.0f32);
    let angle = rng.random_range(0.0..PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let centers: Vec<(f32, f32, f32)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..width as f32),
                rng.random_range(0.0..height as f32),
                rng.random_range(3.0..12.0),
            )
        })
        .collect();
    let strokes: Vec<f32> = (0..width * height)
        .map(|_| rng.random_range(-0.06..0.06))
        .collect();
    RgbImage::from_fn(width, height, |x, y| {
        let (fx, fy) = (x as f32, y as f32);
        let t = match pattern {
            0 => (2.0 * PI * (fx * ca + fy * sa) / period).sin(),
            1 => {
                let p = period as u32;
                if ((x / p) + (y / p)).is_multiple_of(2) {
                    1.0
                } else {
                    -1.0
                }
            }
            2 => {
                let (cx, cy, _) = centers[0];
                (((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() * 2.0 * PI / period).sin()
            }
            _ => {
                centers
                    .iter()
                    .map(|&(cx, cy, r)| {
                        (-((fx - cx).powi(2) + (fy - cy).powi(2)) / (2.0 * r * r)).exp()
                    })
                    .sum::<f32>()
                    * 2.0
                    - 1.0
            }
        };
        let t = (t + strokes[(y * width + x) as usize]).clamp(-1.0, 1.0);
        let (lo, hi, k) = if t < 0.0 {
            (palette[0], palette[1], t + 1.0)
        } else {
            (palette[1], palette[2], t)
        };
        to_pixel(std::array::from_fn(|c| lo[c] * (1.0 - k) + hi[c] * k))
    })
}

pub fn generate(kind: Kind, width: u32, height: u32, rng: &mut impl Rng) -> RgbImage {
    match kind {
        Kind::Photo => photo(width, height, rng),
        Kind::Painting => painting(width, height, rng),
    }
}

/// Write `count` PNGs named `img_0000.png`, ... into `dir`.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    kind: Kind,
    count: usize,
    width: u32,
    height: u32,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let path = dir.join(format!("img_{i:04}.png"));
            generate(kind, width, height, &mut rng)
                .save(&path)
                .map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?;
            Ok(path)
        })
        .collect()
}

/// `frames` windows of `width x height` sliding right by `step` pixels per
/// frame across `scene`.
pub fn panning_clip(
    scene: &RgbImage,
    frames: usize,
    width: u32,
    height: u32,
    step: u32,
) -> Vec<ImagePlane<f32>> {
    assert!(
        scene.width() >= width + step * frames.saturating_sub(1) as u32 && scene.height() >= height,
        "scene too small for the requested pan"
    );
    (0..frames)
        .map(|t| {
            let x0 = t as u32 * step;
            let view = image::imageops::crop_imm(scene, x0, 0, width, height).to_image();
            imageio::from_rgb(&view)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        let a = photo(32, 24, &mut ChaCha8Rng::seed_from_u64(1));
        let b = photo(32, 24, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(a.dimensions(), (32, 24));
        let p = painting(20, 20, &mut ChaCha8Rng::seed_from_u64(2));
        assert_ne!(p, painting(20, 20, &mut ChaCha8Rng::seed_from_u64(3)));
    }

    #[test]
    fn panning_frames_are_shifted_windows() {
        let scene = photo(40, 16, &mut ChaCha8Rng::seed_from_u64(4));
        let clip = panning_clip(&scene, 3, 16, 16, 2);
        assert_eq!(clip.len(), 3);
        assert_eq!(clip[1].at(0, 0, 5, 0), clip[0].at(0, 0, 5, 2));
        assert_eq!(clip[2].at(0, 2, 9, 3), clip[0].at(0, 2, 9, 7));
    }
}
