//! Image and frame-directory stylization, and the inference timing harness.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::imageio;
use crate::model::Stylizer;
use crate::tensor::{FeatureMap, ImagePlane};

/// Seconds per image reported for a 16 GB TitanX GPU, by size.
pub const REFERENCE_SECONDS: [(usize, f64); 3] = [(256, 0.013), (512, 0.015), (1024, 0.019)];

/// Frames of a video stored as same-sized images in one directory, in
/// lexicographic file-name order.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    paths: Vec<PathBuf>,
    width: u32,
    height: u32,
}

impl FrameSequence {
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_file() && imageio::is_image_path(&path) {
                paths.push(path);
            }
        }
        paths.sort();
        Self::from_paths(paths).map_err(|e| match e {
            Error::Invalid(_) => Error::EmptyCorpus(dir.to_path_buf()),
            other => other,
        })
    }

    pub fn from_paths(paths: Vec<PathBuf>) -> Result<Self> {
        let first = paths
            .first()
            .ok_or_else(|| Error::Invalid("no frames".into()))?;
        let dims = |p: &Path| {
            image::image_dimensions(p).map_err(|source| Error::Image {
                path: p.to_path_buf(),
                source,
            })
        };
        let (width, height) = dims(first)?;
        let mut offenders = Vec::new();
        for p in &paths[1..] {
            let (w, h) = dims(p)?;
            if (w, h) != (width, height) {
                offenders.push(format!("{} is {w}x{h}", p.display()));
            }
        }
        if !offenders.is_empty() {
            return Err(Error::MixedResolution(format!(
                "expected {width}x{height} like {}: {}",
                first.display(),
                offenders.join(", ")
            )));
        }
        Ok(FrameSequence {
            paths,
            width,
            height,
        })
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn load(&self, index: usize) -> Result<ImagePlane<f32>> {
        imageio::load_rgb(&self.paths[index])
    }

    pub fn load_all(&self) -> Result<Vec<ImagePlane<f32>>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

pub fn stylize_image(
    model: &Stylizer<f32>,
    content: impl AsRef<Path>,
    style: impl AsRef<Path>,
    out: impl AsRef<Path>,
) -> Result<ImagePlane<f32>> {
    let c = imageio::load_rgb(content)?;
    let s = imageio::load_rgb(style)?;
    let y = model.stylize(&c, &s)?;
    imageio::save_rgb(out, &y)?;
    Ok(y)
}

/// Stylize every frame independently against one style image. Output files
/// keep the input file stems, as PNG, in `out_dir`.
pub fn stylize_video(
    model: &Stylizer<f32>,
    frames: &FrameSequence,
    style: &ImagePlane<f32>,
    out_dir: impl AsRef<Path>,
) -> Result<FrameSequence> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let code = model.encode_style(style)?;
    let outputs: Vec<PathBuf> = frames
        .paths()
        .iter()
        .map(|p| {
            let stem = p.file_stem().unwrap_or_default();
            out_dir.join(stem).with_extension("png")
        })
        .collect();
    (0..frames.len()).into_par_iter().try_for_each(|i| {
        let y = model.stylize_with(&frames.load(i)?, &code)?;
        imageio::save_rgb(&outputs[i], &y)
    })?;
    FrameSequence::from_paths(outputs)
}

/// In-memory counterpart of [`stylize_video`].
pub fn stylize_frames(
    model: &Stylizer<f32>,
    frames: &[ImagePlane<f32>],
    style: &ImagePlane<f32>,
) -> Result<Vec<ImagePlane<f32>>> {
    let code = model.encode_style(style)?;
    frames
        .par_iter()
        .map(|f| model.stylize_with(f, &code))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingRow {
    pub size: usize,
    pub runs: usize,
    pub mean_seconds: f64,
    pub median_seconds: f64,
    /// Published GPU figure for this size, when there is one.
    pub reference_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingReport {
    pub hardware: String,
    pub warmup: usize,
    pub rows: Vec<TimingRow>,
}

impl TimingReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "hardware: {}\n{:>6} {:>11} {:>11} {:>11}\n",
            self.hardware, "size", "mean s", "median s", "reference s"
        );
        for r in &self.rows {
            let reference = r
                .reference_seconds
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "-".into());
            s += &format!(
                "{:>6} {:>11.4} {:>11.4} {:>11}\n",
                r.size, r.mean_seconds, r.median_seconds, reference
            );
        }
        s
    }

    /// Medians never decrease as the size grows.
    pub fn is_monotone(&self) -> bool {
        let mut rows: Vec<_> = self.rows.iter().collect();
        rows.sort_by_key(|r| r.size);
        rows.windows(2)
            .all(|w| w[0].median_seconds <= w[1].median_seconds)
    }
}

/// CPU model name and core count, from `/proc/cpuinfo` where available.
pub fn hardware_descriptor() -> String {
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let model = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    format!("{model}, {cores} thread(s)")
}

fn test_pattern(size: usize, phase: usize) -> ImagePlane<f32> {
    FeatureMap::from_fn([1, 3, size, size], |[_, c, y, x]| {
        (((x * 7 + y * 13 + c * 29 + phase) % 97) as f32) / 96.0
    })
}

/// Wall-clock seconds for one full stylization (both encodes, fusion,
/// decode) of a `size x size` content and style pair.
pub fn benchmark(
    model: &Stylizer<f32>,
    sizes: &[usize],
    runs: usize,
    warmup: usize,
) -> Result<TimingReport> {
    if runs == 0 {
        return Err(Error::Invalid(
            "benchmark needs at least one measured run".into(),
        ));
    }
    let mut rows = Vec::new();
    for &size in sizes {
        let content = test_pattern(size, 0);
        let style = test_pattern(size, 41);
        for _ in 0..warmup {
            model.stylize(&content, &style)?;
        }
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            let t = Instant::now();
            let y = model.stylize(&content, &style)?;
            times.push(t.elapsed().as_secs_f64());
            std::hint::black_box(y);
        }
        let mean_seconds = times.iter().sum::<f64>() / runs as f64;
        times.sort_by(f64::total_cmp);
        let median_seconds = if runs % 2 == 1 {
            times[runs / 2]
        } else {
            (times[runs / 2 - 1] + times[runs / 2]) / 2.0
        };
        rows.push(TimingRow {
            size,
            runs,
            mean_seconds,
            median_seconds,
            reference_seconds: REFERENCE_SECONDS
                .iter()
                .find(|(s, _)| *s == size)
                .map(|(_, v)| *v),
        });
    }
    Ok(TimingReport {
        hardware: hardware_descriptor(),
        warmup,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecLayout, Depth, Encoder};
    use crate::mcc::FusionMode;
    use std::sync::Arc;

    fn model() -> Stylizer<f32> {
        let enc = Arc::new(Encoder::random(CodecLayout::narrow(4), 1));
        Stylizer::new(enc, Depth::Deep, FusionMode::MultiChannel, 2)
    }

    fn write_frames(dir: &Path, frames: &[ImagePlane<f32>]) {
        fs::create_dir_all(dir).unwrap();
        for (i, f) in frames.iter().enumerate() {
            imageio::save_rgb(dir.join(format!("frame_{i:03}.png")), f).unwrap();
        }
    }

    #[test]
    fn arbitrary_sizes_are_preserved() {
        let m = model();
        let c = test_pattern(40, 1).slice_batch(0..1);
        let c = crate::model::crop_to(&c, 37, 29);
        let y = m.stylize(&c, &test_pattern(24, 3)).unwrap();
        assert_eq!(y.shape(), [1, 3, 37, 29]);
    }

    #[test]
    fn image_command_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        imageio::save_rgb(dir.path().join("c.png"), &test_pattern(32, 0)).unwrap();
        imageio::save_rgb(dir.path().join("s.png"), &test_pattern(32, 9)).unwrap();
        for out in ["a.png", "b.png"] {
            stylize_image(
                &m,
                dir.path().join("c.png"),
                dir.path().join("s.png"),
                dir.path().join(out),
            )
            .unwrap();
        }
        assert_eq!(
            fs::read(dir.path().join("a.png")).unwrap(),
            fs::read(dir.path().join("b.png")).unwrap()
        );
    }

    #[test]
    fn static_and_reversed_clips() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let style = test_pattern(16, 5);
        let still = vec![test_pattern(16, 2); 3];
        write_frames(&dir.path().join("still"), &still);
        let seq = FrameSequence::from_dir(dir.path().join("still")).unwrap();
        let out = stylize_video(&m, &seq, &style, dir.path().join("still_out")).unwrap();
        let bytes: Vec<_> = out.paths().iter().map(|p| fs::read(p).unwrap()).collect();
        assert!(bytes.windows(2).all(|w| w[0] == w[1]));

        let clip: Vec<_> = (0..4).map(|i| test_pattern(16, i * 3)).collect();
        let forward = stylize_frames(&m, &clip, &style).unwrap();
        let reversed: Vec<_> = clip.iter().rev().cloned().collect();
        let mut backward = stylize_frames(&m, &reversed, &style).unwrap();
        backward.reverse();
        assert_eq!(forward, backward);
    }

    #[test]
    fn mixed_resolutions_name_the_offenders() {
        let dir = tempfile::tempdir().unwrap();
        write_frames(dir.path(), &[test_pattern(16, 0), test_pattern(16, 1)]);
        imageio::save_rgb(dir.path().join("frame_009.png"), &test_pattern(20, 0)).unwrap();
        match FrameSequence::from_dir(dir.path()) {
            Err(Error::MixedResolution(msg)) => assert!(msg.contains("frame_009.png"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            FrameSequence::from_dir(empty.path()),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn benchmark_reports_reference_row() {
        let m = model();
        assert!(benchmark(&m, &[16], 0, 0).is_err());
        let r = benchmark(&m, &[16, 256], 1, 0).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0].reference_seconds, None);
        assert_eq!(r.rows[1].reference_seconds, Some(0.013));
        assert!(!r.hardware.is_empty());
        assert!(r.to_table().contains("0.013"));
    }
}
