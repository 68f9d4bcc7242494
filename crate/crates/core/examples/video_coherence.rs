//! Stylize a synthetic panning clip frame by frame and compare its
//! adjacent-frame differences with the input's, then probe sensitivity to
//! illumination noise.

use std::path::Path;
use std::sync::Arc;

use mccnet::codec::{CodecLayout, Depth, Encoder};
use mccnet::mcc::FusionMode;
use mccnet::model::Stylizer;
use mccnet::synth;
use mccnet::{imageio, metrics, stylize};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run_example(
    model: &Stylizer<f32>,
    heatmaps: Option<&Path>,
) -> mccnet::Result<metrics::CoherenceComparison> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let scene = synth::photo(64 + 2 * 19, 64, &mut rng);
    let clip = synth::panning_clip(&scene, 20, 64, 64, 2);
    let style = imageio::from_rgb(&synth::painting(64, 64, &mut rng));
    let out = stylize::stylize_frames(model, &clip, &style)?;
    let cmp = metrics::compare_coherence(&clip, &out)?;
    println!(
        "input mean diff {:.4}, stylized {:.4} (var {:.2e}), ratio {:?}",
        cmp.input.mean_diff, cmp.stylized.mean_diff, cmp.stylized.var_diff, cmp.ratio
    );
    if let Some(dir) = heatmaps {
        let written = metrics::write_heatmaps(&metrics::frame_diffs_with_heatmaps(&out)?, dir)?;
        println!("wrote {} heatmaps to {}", written.len(), dir.display());
    }
    let probe = metrics::illumination_probe(model, &clip[0], &style, 0.01, 5, 0)?;
    println!("illumination probe at sigma 0.01: {probe:.5}");
    Ok(cmp)
}

fn main() -> mccnet::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(ckpt) => mccnet::trainer::Checkpoint::load(ckpt)?.model,
        None => Stylizer::new(
            Arc::new(Encoder::random(CodecLayout::narrow(8), 0)),
            Depth::Deep,
            FusionMode::MultiChannel,
            0,
        ),
    };
    run_example(&model, Some(Path::new("heatmaps")))?;
    Ok(())
}
