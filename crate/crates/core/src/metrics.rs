//! Video stability measurements.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::losses::{gaussian_noise, Generator};
use crate::tensor::{FeatureMap, ImagePlane};

/// Adjacent-frame differences of one clip.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoherenceReport {
    /// Mean absolute difference between frame `t` and `t - 1`, for t >= 1.
    pub diff_series: Vec<f64>,
    pub mean_diff: f64,
    /// Population variance of `diff_series`.
    pub var_diff: f64,
    /// Per-pair `[1, 1, H, W]` maps of the channel-averaged absolute
    /// difference.
    #[serde(skip)]
    pub heatmaps: Option<Vec<FeatureMap<f32>>>,
}

/// `mean_diff(stylized) / mean_diff(input)`, guarded for static input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DiffRatio {
    Finite(f64),
    /// Both clips are static.
    Static,
    /// Static input but changing output.
    Unbounded,
}

impl DiffRatio {
    pub fn value(self) -> Option<f64> {
        match self {
            DiffRatio::Finite(r) => Some(r),
            _ => None,
        }
    }
}

impl Serialize for DiffRatio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            DiffRatio::Finite(r) => s.serialize_f64(*r),
            DiffRatio::Static => s.serialize_str("static"),
            DiffRatio::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoherenceComparison {
    pub input: CoherenceReport,
    pub stylized: CoherenceReport,
    pub ratio: DiffRatio,
}

fn check_pair(a: &ImagePlane<f32>, b: &ImagePlane<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::MixedResolution(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean absolute difference over every pixel and channel.
pub fn mean_abs_diff(a: &ImagePlane<f32>, b: &ImagePlane<f32>) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum();
    Ok(sum / a.len().max(1) as f64)
}

/// Channel-averaged `|a - b|` as a `[B, 1, H, W]` map.
pub fn diff_heatmap(a: &ImagePlane<f32>, b: &ImagePlane<f32>) -> Result<FeatureMap<f32>> {
    check_pair(a, b)?;
    let [n, c, h, w] = a.shape();
    Ok(FeatureMap::from_fn([n, 1, h, w], |[bi, _, y, x]| {
        (0..c)
            .map(|ch| (a.at(bi, ch, y, x) - b.at(bi, ch, y, x)).abs())
            .sum::<f32>()
            / c as f32
    }))
}

fn report(frames: &[ImagePlane<f32>], heatmaps: bool) -> Result<CoherenceReport> {
    if frames.len() < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 frames, got {}",
            frames.len()
        )));
    }
    let pairs = frames.windows(2);
    let diff_series = pairs
        .clone()
        .map(|p| mean_abs_diff(&p[1], &p[0]))
        .collect::<Result<Vec<_>>>()?;
    let n = diff_series.len() as f64;
    let mean_diff = diff_series.iter().sum::<f64>() / n;
    let var_diff = diff_series
        .iter()
        .map(|d| (d - mean_diff).powi(2))
        .sum::<f64>()
        / n;
    let heatmaps = if heatmaps {
        Some(
            pairs
                .map(|p| diff_heatmap(&p[1], &p[0]))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(CoherenceReport {
        diff_series,
        mean_diff,
        var_diff,
        heatmaps,
    })
}

pub fn frame_diffs(frames: &[ImagePlane<f32>]) -> Result<CoherenceReport> {
    report(frames, false)
}

pub fn frame_diffs_with_heatmaps(frames: &[ImagePlane<f32>]) -> Result<CoherenceReport> {
    report(frames, true)
}

pub fn diff_ratio(stylized_mean: f64, input_mean: f64) -> DiffRatio {
    match (input_mean == 0.0, stylized_mean == 0.0) {
        (false, _) => DiffRatio::Finite(stylized_mean / input_mean),
        (true, true) => DiffRatio::Static,
        (true, false) => DiffRatio::Unbounded,
    }
}

pub fn compare_coherence(
    input: &[ImagePlane<f32>],
    stylized: &[ImagePlane<f32>],
) -> Result<CoherenceComparison> {
    if input.len() != stylized.len() {
        return Err(Error::Invalid(format!(
            "{} input frames but {} stylized frames",
            input.len(),
            stylized.len()
        )));
    }
    let input = frame_diffs(input)?;
    let stylized = frame_diffs(stylized)?;
    let ratio = diff_ratio(stylized.mean_diff, input.mean_diff);
    Ok(CoherenceComparison {
        input,
        stylized,
        ratio,
    })
}

/// Mean absolute output change when `content` receives fresh Gaussian noise
/// of standard deviation `sigma`, averaged over `trials` draws.
pub fn illumination_probe(
    model: &impl Generator<f32>,
    content: &ImagePlane<f32>,
    style: &ImagePlane<f32>,
    sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Invalid(
            "illumination probe needs at least one trial".into(),
        ));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!(
            "noise sigma must be >= 0, got {sigma}"
        )));
    }
    let clean = model.generate(content, style)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..trials {
        let mut noisy = content.clone();
        noisy.add_assign(&gaussian_noise(content.shape(), sigma, &mut rng));
        total += mean_abs_diff(&model.generate(&noisy, style)?, &clean)?;
    }
    Ok(total / trials as f64)
}

/// Save each heatmap of `report` as an 8-bit grayscale PNG named
/// `heat_NNNN.png` after the later frame of its pair.
pub fn write_heatmaps(report: &CoherenceReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let maps = report
        .heatmaps
        .as_ref()
        .ok_or_else(|| Error::Invalid("report was computed without heatmaps".into()))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    maps.iter()
        .enumerate()
        .map(|(i, m)| {
            let path = dir.join(format!("heat_{:04}.png", i + 1));
            let img = GrayImage::from_fn(m.width() as u32, m.height() as u32, |x, y| {
                Luma([(m.at(0, 0, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
            });
            img.save(&path).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flat(v: f32) -> ImagePlane<f32> {
        FeatureMap::filled([1, 3, 4, 5], v)
    }

    #[test]
    fn identical_frames_have_zero_diff() {
        let r = frame_diffs(&[flat(0.3), flat(0.3), flat(0.3)]).unwrap();
        assert_eq!(r.diff_series, vec![0.0, 0.0]);
        assert_eq!((r.mean_diff, r.var_diff), (0.0, 0.0));
    }

    #[test]
    fn black_to_white_is_one() {
        let r = frame_diffs(&[flat(0.0), flat(1.0)]).unwrap();
        assert_eq!(r.diff_series, vec![1.0]);
    }

    #[test]
    fn equal_steps_have_zero_variance() {
        let r = frame_diffs(&[flat(0.1), flat(0.35), flat(0.6)]).unwrap();
        assert!((r.mean_diff - 0.25).abs() < 1e-7);
        assert!(r.var_diff < 1e-14);
        let r = frame_diffs(&[flat(0.0), flat(0.2), flat(0.8)]).unwrap();
        assert!((r.mean_diff - 0.4).abs() < 1e-7);
        assert!((r.var_diff - 0.04).abs() < 1e-7);
    }

    #[test]
    fn too_few_frames() {
        assert!(frame_diffs(&[flat(0.0)]).is_err());
        assert!(frame_diffs(&[flat(0.0), FeatureMap::zeros([1, 3, 4, 4])]).is_err());
    }

    #[test]
    fn ratio_sentinels() {
        let clip = [flat(0.0), flat(0.5), flat(0.1)];
        assert_eq!(
            compare_coherence(&clip, &clip).unwrap().ratio,
            DiffRatio::Finite(1.0)
        );
        let still = [flat(0.2), flat(0.2)];
        let c = compare_coherence(&still, &still).unwrap();
        assert_eq!(c.ratio, DiffRatio::Static);
        assert_eq!(serde_json::to_string(&c.ratio).unwrap(), "\"static\"");
        assert_eq!(
            compare_coherence(&still, &clip[..2]).unwrap().ratio,
            DiffRatio::Unbounded
        );
        assert!(compare_coherence(&clip, &still).is_err());
    }

    #[test]
    fn heatmap_averages_channels() {
        let a = FeatureMap::from_fn([1, 3, 2, 2], |[_, c, y, x]| (c + y + x) as f32 * 0.1);
        let b = FeatureMap::zeros([1, 3, 2, 2]);
        let r = frame_diffs_with_heatmaps(&[b, a.clone()]).unwrap();
        let map = &r.heatmaps.as_ref().unwrap()[0];
        assert_eq!(map.shape(), [1, 1, 2, 2]);
        assert!((map.at(0, 0, 1, 1) - 0.3).abs() < 1e-6);
        let dir = tempfile::tempdir().unwrap();
        let written = write_heatmaps(&r, dir.path()).unwrap();
        assert_eq!(written, vec![dir.path().join("heat_0001.png")]);
    }

    #[test]
    fn zero_noise_probe_is_exactly_zero() {
        let model = |c: &ImagePlane<f32>, _: &ImagePlane<f32>| Ok(c.clamp01());
        let c = FeatureMap::from_fn([1, 3, 8, 8], |[_, ch, y, x]| {
            ((ch + y * x) % 7) as f32 / 7.0
        });
        assert_eq!(illumination_probe(&model, &c, &c, 0.0, 3, 1).unwrap(), 0.0);
        assert!(illumination_probe(&model, &c, &c, 0.1, 0, 1).is_err());
    }

    #[test]
    fn identity_probe_matches_half_normal_mean() {
        let model = |c: &ImagePlane<f32>, _: &ImagePlane<f32>| Ok(c.clone());
        let c = FeatureMap::filled([1, 3, 64, 64], 0.5);
        let sigma = 0.01;
        let probe = illumination_probe(&model, &c, &c, sigma, 8, 7).unwrap();
        let expected = sigma * (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (probe / expected - 1.0).abs() < 0.01,
            "{probe} vs {expected}"
        );
        assert_eq!(
            probe,
            illumination_probe(&model, &c, &c, sigma, 8, 7).unwrap()
        );
    }

    fn clip() -> impl Strategy<Value = Vec<ImagePlane<f32>>> {
        prop::collection::vec(prop::collection::vec(0.0f32..1.0, 12), 2..6).prop_map(|frames| {
            frames
                .into_iter()
                .map(|v| FeatureMap::from_vec([1, 3, 2, 2], v).unwrap())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn duplicating_the_first_frame_prepends_a_zero(frames in clip()) {
            let base = frame_diffs(&frames).unwrap();
            let mut longer = vec![frames[0].clone()];
            longer.extend(frames.iter().cloned());
            let r = frame_diffs(&longer).unwrap();
            prop_assert_eq!(r.diff_series[0], 0.0);
            prop_assert_eq!(&r.diff_series[1..], &base.diff_series[..]);
            prop_assert!(r.mean_diff >= 0.0 && r.var_diff >= 0.0);
            prop_assert_eq!(r.diff_series.len(), longer.len() - 1);
        }
    }
}
