//! Train the desk-scale recipe on procedurally generated corpora and
//! stylize one image with the result.
//!
//! ```text
//! cargo run --example desk_training -- [steps] [out_dir]
//! ```

use std::path::{Path, PathBuf};

use mccnet::config::TrainConfig;
use mccnet::stylize;
use mccnet::synth::{self, Kind};
use mccnet::trainer::{self, Checkpoint};

pub fn run_example(steps: u64, out: &Path) -> mccnet::Result<Checkpoint> {
    let content = synth::write_corpus(out.join("content"), Kind::Photo, 100, 96, 96, 1)?;
    let style = synth::write_corpus(out.join("style"), Kind::Painting, 20, 96, 96, 2)?;
    let mut config = TrainConfig::desk(out.join("content"), out.join("style"));
    config.steps = steps;
    config.out_dir = Some(out.join("run"));
    println!("{}", config.to_text());
    let ckpt = trainer::fit(config)?;
    let records = trainer::read_metrics(out.join("run").join("metrics.jsonl"))?;
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        println!(
            "total loss {:.3} at step {} -> {:.3} at step {}",
            first.loss.total, first.step, last.loss.total, last.step
        );
    }
    let reloaded = Checkpoint::load(out.join("run").join("latest.mccw"))?;
    stylize::stylize_image(
        &reloaded.model,
        &content[0],
        &style[0],
        out.join("stylized.png"),
    )?;
    println!("wrote {}", out.join("stylized.png").display());
    Ok(ckpt)
}

fn main() -> mccnet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(500);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("desk_run"));
    run_example(steps, &out)?;
    Ok(())
}
