//! Inference timing at several square sizes.
//!
//! ```text
//! cargo run --example benchmark -- [checkpoint]
//! ```

use std::sync::Arc;

use mccnet::codec::{CodecLayout, Depth, Encoder};
use mccnet::mcc::FusionMode;
use mccnet::model::Stylizer;
use mccnet::stylize::{self, TimingReport};

pub fn run_example(
    model: &Stylizer<f32>,
    sizes: &[usize],
    runs: usize,
) -> mccnet::Result<TimingReport> {
    let report = stylize::benchmark(model, sizes, runs, 1)?;
    print!("{}", report.to_table());
    println!("medians non-decreasing: {}", report.is_monotone());
    Ok(report)
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
    run_example(&model, &[256, 512, 1024], 10)?;
    Ok(())
}
