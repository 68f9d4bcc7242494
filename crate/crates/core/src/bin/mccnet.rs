use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mccnet::codec::{CodecLayout, Depth, Encoder};
use mccnet::config::TrainConfig;
use mccnet::mcc::FusionMode;
use mccnet::metrics::{self, diff_ratio};
use mccnet::stylize::{self, FrameSequence};
use mccnet::synth::{self, Kind};
use mccnet::trainer::{self, Checkpoint};
use mccnet::{imageio, Error, Result};

#[derive(Parser)]
#[command(
    name = "mccnet",
    version,
    about = "Multi-channel correlation style transfer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a decoder and fusion module from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override one config key, e.g. `--set steps=100`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    #[command(subcommand)]
    Stylize(StylizeCommand),
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Write a seeded random encoder with the VGG19 topology.
    InitEncoder {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        base_width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a procedural image corpus.
    Synth {
        #[arg(long, value_parser = ["photo", "painting"])]
        kind: String,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Must agree with the checkpoint when given.
    #[arg(long)]
    mode: Option<FusionMode>,
    /// Must agree with the checkpoint when given.
    #[arg(long)]
    depth: Option<Depth>,
}

#[derive(Subcommand)]
enum StylizeCommand {
    Image {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stylize a directory of same-sized frames.
    Video {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time full stylization at several square sizes.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Adjacent-frame differences of a frame directory.
    Coherence {
        #[arg(long)]
        frames: PathBuf,
        /// Input clip the frames were stylized from; adds the ratio.
        #[arg(long)]
        against: Option<PathBuf>,
        #[arg(long)]
        heatmaps: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_model(args: &ModelArgs) -> Result<mccnet::model::Stylizer<f32>> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    if let Some(mode) = args.mode.filter(|m| *m != ckpt.config.mode) {
        return Err(Error::Config(format!(
            "--mode {mode} contradicts the checkpoint's {}",
            ckpt.config.mode
        )));
    }
    if let Some(depth) = args.depth.filter(|d| *d != ckpt.config.depth) {
        return Err(Error::Config(format!(
            "--depth {depth} contradicts the checkpoint's {}",
            ckpt.config.depth
        )));
    }
    Ok(ckpt.model)
}

fn write_json(path: &PathBuf, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides } => {
            let mut cfg = TrainConfig::load(&config)?;
            for kv in overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            let ckpt = trainer::fit(cfg)?;
            println!("finished at step {}", ckpt.step);
        }
        Command::Stylize(StylizeCommand::Image {
            content,
            style,
            model,
            out,
        }) => {
            stylize::stylize_image(&load_model(&model)?, content, style, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Stylize(StylizeCommand::Video {
            frames,
            style,
            model,
            out,
        }) => {
            let model = load_model(&model)?;
            let seq = FrameSequence::from_dir(&frames)?;
            let written = stylize::stylize_video(&model, &seq, &imageio::load_rgb(&style)?, &out)?;
            println!("wrote {} frames to {}", written.len(), out.display());
        }
        Command::Stylize(StylizeCommand::Bench {
            model,
            sizes,
            runs,
            warmup,
            json,
        }) => {
            let report = stylize::benchmark(&load_model(&model)?, &sizes, runs, warmup)?;
            print!("{}", report.to_table());
            if let Some(path) = json {
                write_json(
                    &path,
                    &serde_json::to_value(&report).expect("report serializes"),
                )?;
            }
        }
        Command::Metrics(MetricsCommand::Coherence {
            frames,
            against,
            heatmaps,
            out,
        }) => {
            let clip = FrameSequence::from_dir(&frames)?.load_all()?;
            let report = if heatmaps.is_some() {
                metrics::frame_diffs_with_heatmaps(&clip)?
            } else {
                metrics::frame_diffs(&clip)?
            };
            let heatmap_paths = match &heatmaps {
                Some(dir) => Some(metrics::write_heatmaps(&report, dir)?),
                None => None,
            };
            let mut value = json!({
                "frames": clip.len(),
                "diff_series": report.diff_series,
                "mean_diff": report.mean_diff,
                "var_diff": report.var_diff,
                "heatmaps": heatmap_paths,
            });
            if let Some(dir) = against {
                let input = FrameSequence::from_dir(&dir)?.load_all()?;
                if input.len() != clip.len() {
                    return Err(Error::Invalid(format!(
                        "{} frames against {} input frames",
                        clip.len(),
                        input.len()
                    )));
                }
                let base = metrics::frame_diffs(&input)?;
                let obj = value.as_object_mut().expect("object literal");
                obj.insert("input_diff_series".into(), json!(base.diff_series));
                obj.insert("input_mean_diff".into(), json!(base.mean_diff));
                obj.insert("input_var_diff".into(), json!(base.var_diff));
                obj.insert(
                    "ratio".into(),
                    json!(diff_ratio(report.mean_diff, base.mean_diff)),
                );
            }
            write_json(&out, &value)?;
            println!(
                "mean_diff {:.6} var_diff {:.6}",
                report.mean_diff, report.var_diff
            );
        }
        Command::InitEncoder {
            out,
            base_width,
            seed,
        } => {
            Encoder::random(CodecLayout::narrow(base_width), seed).save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Synth {
            kind,
            count,
            size,
            seed,
            out,
        } => {
            let kind = if kind == "photo" {
                Kind::Photo
            } else {
                Kind::Painting
            };
            let files = synth::write_corpus(&out, kind, count, size, size, seed)?;
            println!("wrote {} images to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
