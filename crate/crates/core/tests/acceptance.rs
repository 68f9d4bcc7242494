//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Run with `cargo test --test acceptance`.

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use mccnet::codec::Depth;
use mccnet::config::TrainConfig;
use mccnet::imageio;
use mccnet::losses::{self, LossTerms, LossWeights};
use mccnet::mcc::{self, FusionMode, MccParams};
use mccnet::metrics;
use mccnet::model::Stylizer;
use mccnet::stylize::{self, FrameSequence};
use mccnet::synth::{self, Kind};
use mccnet::trainer::{read_metrics, LossRecord, Trainer};
use mccnet::{FeatureMap, ImagePlane};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const SMOOTHING: usize = 10;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_map<T: mccnet::Scalar>(shape: [usize; 4], rng: &mut impl Rng) -> FeatureMap<T> {
    FeatureMap::from_fn(shape, |_| T::of(rng.random_range(-2.0..2.0)))
}

fn random_params<T: mccnet::Scalar>(channels: usize, rng: &mut impl Rng) -> MccParams<T> {
    let mut p = MccParams::<T>::new(channels, rng.random());
    p.mixer
        .iter_mut()
        .for_each(|w| *w = T::of(rng.random_range(-0.5..0.5)));
    p
}

fn a1_oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let c = [1, 4, 16][trial % 3];
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let f_c = random_map::<f64>([1, c, h, w], &mut rng);
        let f_s = random_map::<f64>([1, c, h, w], &mut rng);
        let energy = mcc::channel_energy(&f_s);
        for i in 0..c {
            let route = mcc::correlation_route(f_c.plane(0, i), f_s.plane(0, i))
                .map_err(|e| e.to_string())?;
            for (r, x) in route.iter().zip(f_c.plane(0, i)) {
                let closed = energy.sample(0)[i] * x;
                worst = worst.max((r - closed).abs() / closed.abs().max(1e-300));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        worst < 1e-5 && secs < 10.0,
        format!("max relative error {worst:.2e} over 100 pairs, {secs:.2} s"),
    )
}

fn a2_content_alignment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let c = [1, 4, 16, 64][trial % 4];
        let mode = if trial % 2 == 0 {
            FusionMode::MultiChannel
        } else {
            FusionMode::ChannelWise
        };
        let p = random_params::<f32>(c, &mut rng);
        let f_c = random_map::<f32>([2, c, 6, 5], &mut rng);
        let f_s = random_map::<f32>([1, c, 4, 7], &mut rng);
        let (_, trace) =
            mcc::mcc_forward_traced(&f_c, &f_s, &p, mode).map_err(|e| e.to_string())?;
        for b in 0..2 {
            for i in 0..c {
                let ratios: Vec<f64> = trace
                    .fused
                    .plane(b, i)
                    .iter()
                    .zip(trace.content_branch.plane(b, i))
                    .filter(|(_, x)| x.abs() > 1e-3)
                    .map(|(f, x)| *f as f64 / *x as f64)
                    .collect();
                if ratios.len() < 2 {
                    continue;
                }
                let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let scale = ratios.iter().map(|r| r.abs()).sum::<f64>() / ratios.len() as f64;
                worst = worst.max((hi - lo) / scale.max(1e-12));
            }
        }
    }
    check(
        worst < 1e-5,
        format!("max per-channel ratio spread {worst:.2e} over 100 trials"),
    )
}

fn a3_coherence_migration(model: &Stylizer<f32>, scratch: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    let mut tightest = 0.0f64;
    for trial in 0..100 {
        let c = [1, 4, 16][trial % 3];
        let mode = if trial % 2 == 0 {
            FusionMode::MultiChannel
        } else {
            FusionMode::ChannelWise
        };
        let p = random_params::<f64>(c, &mut rng);
        let f_s = random_map::<f64>([1, c, 5, 5], &mut rng);
        let branch = random_map::<f64>([1, c, 6, 6], &mut rng);
        let scale = 10f64.powf(rng.random_range(-4.0..1.0));
        let delta = random_map::<f64>([1, c, 6, 6], &mut rng).scaled(scale);
        let gains = mcc::gains(&p, &f_s, mode).map_err(|e| e.to_string())?;
        let mut moved = branch.clone();
        moved.add_assign(&delta);
        let mut diff = mcc::fuse(&moved, &gains);
        diff.add_assign(&mcc::fuse(&branch, &gains).scaled(-1.0));
        let bound = mcc::lipschitz_bound(&p, &f_s, mode).map_err(|e| e.to_string())?;
        let used = diff.l2_norm() / (bound * delta.l2_norm());
        tightest = tightest.max(used);
        if used > 1.0 + 1e-12 {
            violations += 1;
        }
    }

    let frame = imageio::from_rgb(&synth::photo(48, 40, &mut rng));
    let style = imageio::from_rgb(&synth::painting(48, 48, &mut rng));
    let dir = scratch.join("a3_still");
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    for i in 0..5 {
        imageio::save_rgb(dir.join(format!("frame_{i:03}.png")), &frame)
            .map_err(|e| e.to_string())?;
    }
    let seq = FrameSequence::from_dir(&dir).map_err(|e| e.to_string())?;
    let out = stylize::stylize_video(model, &seq, &style, scratch.join("a3_out"))
        .map_err(|e| e.to_string())?;
    let bytes: Vec<Vec<u8>> = out.paths().iter().map(|p| fs::read(p).unwrap()).collect();
    let identical = bytes.windows(2).all(|w| w[0] == w[1]);
    check(
        violations == 0 && identical,
        format!(
            "{violations} violations in 100 perturbations (max ||dF||/(L||d||) = {tightest:.6}); \
             identical frames byte-identical: {identical}"
        ),
    )
}

fn a5_losses_and_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let enc = Arc::new(mccnet::codec::Encoder::random(
        mccnet::codec::CodecLayout::narrow(8),
        5,
    ));
    let img: ImagePlane<f32> = FeatureMap::from_fn([2, 3, 32, 32], |_| rng.random_range(0.0..1.0));
    let style: ImagePlane<f32> =
        FeatureMap::from_fn([2, 3, 32, 32], |_| rng.random_range(0.0..1.0));
    let content = losses::content_loss(&img, &img, &enc).map_err(|e| e.to_string())?;
    let style_l = losses::style_loss(&style, &style, &enc).map_err(|e| e.to_string())?;
    let echo = |c: &ImagePlane<f32>, _: &ImagePlane<f32>| Ok(c.clone());
    let identity = losses::identity_loss(&echo, &img, &style).map_err(|e| e.to_string())?;
    let model = Stylizer::new(enc.clone(), Depth::Deep, FusionMode::MultiChannel, 1);
    let illumination = losses::illumination_loss(&model, &img, &style, 0.0, &mut rng)
        .map_err(|e| e.to_string())?;
    let zeros = [content, style_l, identity, illumination];

    let m = common::model(Depth::Deep, FusionMode::MultiChannel);
    let b = common::batch(11);
    let mut errors = Vec::new();
    for (i, term) in ["content", "style", "identity", "illumination"]
        .iter()
        .enumerate()
    {
        errors.push(common::directional_error(
            &m,
            &b,
            &common::only(term),
            500 + i as u64,
        ));
    }
    errors.push(common::directional_error(
        &m,
        &b,
        &LossWeights::default(),
        600,
    ));
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    check(
        zeros.iter().all(|&z| z == 0.0) && worst < 1e-3,
        format!(
            "identity cases (content, style, identity, illumination) = {zeros:?}; \
             max gradient relative error {worst:.2e}"
        ),
    )
}

fn smoothed(history: &[LossRecord], step: usize, f: impl Fn(&LossRecord) -> f64) -> f64 {
    let window = &history[step.saturating_sub(SMOOTHING)..step];
    window.iter().map(f).sum::<f64>() / window.len() as f64
}

const EVAL_BATCHES: u64 = 4;

struct Run {
    trainer: Trainer,
    history: Vec<LossRecord>,
    seconds: f64,
    checksum_before: String,
    /// Mean terms on fixed evaluation batches at step 10 and at the end.
    eval_early: LossTerms,
    eval_final: LossTerms,
}

/// Mean loss terms over batches no training step draws.
fn evaluate(trainer: &Trainer) -> Result<LossTerms, String> {
    let mut sum = LossTerms::default();
    for k in 0..EVAL_BATCHES {
        let batch = trainer
            .batch_for(1_000_000 + k)
            .map_err(|e| e.to_string())?;
        let t = trainer
            .model()
            .loss_terms(&batch)
            .map_err(|e| e.to_string())?;
        sum.content += t.content / EVAL_BATCHES as f64;
        sum.style += t.style / EVAL_BATCHES as f64;
        sum.identity += t.identity / EVAL_BATCHES as f64;
        sum.illumination += t.illumination / EVAL_BATCHES as f64;
    }
    Ok(sum)
}

fn desk_run(
    corpora: &Path,
    out: &Path,
    adjust: impl FnOnce(&mut TrainConfig),
) -> Result<Run, String> {
    let mut cfg = TrainConfig::desk(corpora.join("content"), corpora.join("style"));
    cfg.seed = 7;
    cfg.out_dir = Some(out.to_path_buf());
    adjust(&mut cfg);
    let mut trainer = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let checksum_before = trainer.model().encoder().checksum();
    let t = Instant::now();
    trainer
        .run_until(SMOOTHING as u64, |_| {})
        .map_err(|e| e.to_string())?;
    let mut seconds = t.elapsed().as_secs_f64();
    let eval_early = evaluate(&trainer)?;
    let t = Instant::now();
    trainer.run(|_| {}).map_err(|e| e.to_string())?;
    seconds += t.elapsed().as_secs_f64();
    let eval_final = evaluate(&trainer)?;
    let history = read_metrics(out.join("metrics.jsonl")).map_err(|e| e.to_string())?;
    Ok(Run {
        trainer,
        history,
        seconds,
        checksum_before,
        eval_early,
        eval_final,
    })
}

struct Progress {
    total: (f64, f64),
    content: (f64, f64),
    identity: (f64, f64),
}

fn progress(run: &Run) -> Progress {
    let end = run.history.len();
    let pair = |f: fn(&LossRecord) -> f64| {
        (
            smoothed(&run.history, SMOOTHING, f),
            smoothed(&run.history, end, f),
        )
    };
    Progress {
        total: pair(|r| r.loss.total),
        content: pair(|r| r.loss.content),
        identity: pair(|r| r.loss.identity),
    }
}

fn a4_training_smoke(run: &Run) -> Outcome {
    let p = progress(run);
    let (e0, e1) = (run.eval_early, run.eval_final);
    let steps_ok = run.history.len() == 500 && run.history.last().map(|r| r.step) == Some(500);
    let checksum_ok = run.trainer.model().encoder().checksum() == run.checksum_before;
    check(
        steps_ok
            && p.total.1 < 0.7 * p.total.0
            && e1.content < e0.content
            && e1.identity < e0.identity
            && checksum_ok
            && run.seconds <= 1800.0,
        format!(
            "smoothed total {:.3} -> {:.3} (x{:.3}); on fixed evaluation batches content {:.4} -> {:.4}, \
             identity {:.4} -> {:.4} (training-curve windows: content {:.4} -> {:.4}, identity {:.4} -> {:.4}); \
             encoder unchanged: {checksum_ok}; {:.0} s",
            p.total.0,
            p.total.1,
            p.total.1 / p.total.0,
            e0.content,
            e1.content,
            e0.identity,
            e1.identity,
            p.content.0,
            p.content.1,
            p.identity.0,
            p.identity.1,
            run.seconds
        ),
    )
}

fn a6_video_stability(model: &Stylizer<f32>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let scene = synth::photo(64 + 2 * 29, 64, &mut rng);
    let clip = synth::panning_clip(&scene, 30, 64, 64, 2);
    let style = imageio::from_rgb(&synth::painting(64, 64, &mut rng));
    let out = stylize::stylize_frames(model, &clip, &style).map_err(|e| e.to_string())?;
    let cmp = metrics::compare_coherence(&clip, &out).map_err(|e| e.to_string())?;
    let still = vec![clip[0].clone(); 30];
    let still_out = stylize::stylize_frames(model, &still, &style).map_err(|e| e.to_string())?;
    let still_diff = metrics::frame_diffs(&still_out)
        .map_err(|e| e.to_string())?
        .mean_diff;
    let ratio = cmp.ratio.value();
    check(
        ratio.is_some_and(|r| r.is_finite() && r <= 3.0) && still_diff == 0.0,
        format!(
            "pan mean diff input {:.4} stylized {:.4} (var {:.2e}), ratio {:?}; static clip diff {still_diff}",
            cmp.input.mean_diff, cmp.stylized.mean_diff, cmp.stylized.var_diff, cmp.ratio
        ),
    )
}

fn probe_inputs() -> (ImagePlane<f32>, ImagePlane<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let c: Vec<_> = (0..4)
        .map(|_| imageio::from_rgb(&synth::photo(64, 64, &mut rng)))
        .collect();
    let s: Vec<_> = (0..4)
        .map(|_| imageio::from_rgb(&synth::painting(64, 64, &mut rng)))
        .collect();
    (
        FeatureMap::stack(&c).unwrap(),
        FeatureMap::stack(&s).unwrap(),
    )
}

fn a7_illumination(with: &Stylizer<f32>, without: &Run) -> Outcome {
    let (c, s) = probe_inputs();
    let probe = |m: &Stylizer<f32>| {
        metrics::illumination_probe(m, &c, &s, 0.01, 20, 77).map_err(|e| e.to_string())
    };
    let a = probe(with)?;
    let b = probe(without.trainer.model())?;
    check(
        a < b,
        format!(
            "probe at sigma 0.01 over 20 trials: with illumination loss {a:.6}, without {b:.6}"
        ),
    )
}

fn a8_ablation_modes(multi: &Run, channel_wise: &Run, shallow: &Run) -> Outcome {
    let finite = |r: &Run| r.history.iter().all(|h| h.loss.total.is_finite());
    let cw = progress(channel_wise);
    let sh = progress(shallow);
    let cw_ok = finite(channel_wise) && cw.total.1 < 0.7 * cw.total.0;

    let trained = multi.trainer.model();
    let mut mcc_params = trained.mcc().clone();
    mcc_params.set_mixer_identity();
    let twin = |mode| {
        Stylizer::from_parts(
            trained.encoder().clone(),
            trained.decoder().clone(),
            mcc_params.clone(),
            mode,
        )
        .map_err(|e| e.to_string())
    };
    let (c, s) = probe_inputs();
    let a = twin(FusionMode::MultiChannel)?
        .stylize(&c, &s)
        .map_err(|e| e.to_string())?;
    let b = twin(FusionMode::ChannelWise)?
        .stylize(&c, &s)
        .map_err(|e| e.to_string())?;
    let identical = a == b;

    let model = shallow.trainer.model();
    let layout = model.layout();
    let feat = model
        .encoder()
        .encode(&c, Depth::Shallow)
        .map_err(|e| e.to_string())?
        .into_deepest();
    let expected_feat = [4, layout.channels(Depth::Shallow.deepest()), 16, 16];
    let out = model.stylize(&c, &s).map_err(|e| e.to_string())?;
    let odd = odd_input();
    let odd_out = model
        .stylize(&odd, &s.slice_batch(0..1))
        .map_err(|e| e.to_string())?;
    let shapes_ok =
        feat.shape() == expected_feat && out.shape() == c.shape() && odd_out.shape() == odd.shape();
    let shallow_ok =
        finite(shallow) && shallow.history.len() == 500 && sh.total.1 < 0.7 * sh.total.0;
    check(
        cw_ok && identical && shapes_ok && shallow_ok,
        format!(
            "channel_wise total {:.3} -> {:.3}; identity mixer outputs identical: {identical}; \
             shallow total {:.3} -> {:.3}, relu3_1 feature {:?}, shapes ok: {shapes_ok}",
            cw.total.0,
            cw.total.1,
            sh.total.0,
            sh.total.1,
            feat.shape()
        ),
    )
}

fn odd_input() -> ImagePlane<f32> {
    FeatureMap::from_fn([1, 3, 37, 50], |[_, c, y, x]| {
        ((c * 3 + y + 2 * x) % 17) as f32 / 16.0
    })
}

fn a9_timing(model: &Stylizer<f32>) -> Outcome {
    let report = stylize::benchmark(model, &[256, 512, 1024], 10, 2).map_err(|e| e.to_string())?;
    let table = report.to_table();
    println!("{}", table.trim_end());
    let reference = report.rows.iter().all(|r| r.reference_seconds.is_some());
    let medians: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{}: {:.4} s", r.size, r.median_seconds))
        .collect();
    check(
        report.is_monotone() && reference && report.rows.iter().all(|r| r.runs >= 10),
        format!(
            "medians {} on {}; reference row present: {reference}",
            medians.join(", "),
            report.hardware
        ),
    )
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => Err(format!(
            "panicked: {}",
            e.downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    }
}

fn report(results: &mut Vec<bool>, id: &str, name: &str, outcome: Outcome) {
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{id} {tag} {name}: {detail}");
    results.push(outcome.is_ok());
}

fn write_corpora(root: &Path) -> mccnet::Result<()> {
    synth::write_corpus(root.join("content"), Kind::Photo, 100, 96, 96, 101)?;
    synth::write_corpus(root.join("style"), Kind::Painting, 20, 96, 96, 202)?;
    Ok(())
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let scratch = tempfile::tempdir().expect("temporary directory");
    let root: PathBuf = scratch.path().to_path_buf();
    let mut results = Vec::new();

    report(
        &mut results,
        "A1",
        "MCC oracle equivalence",
        guarded(a1_oracle_equivalence),
    );
    report(
        &mut results,
        "A2",
        "content alignment",
        guarded(a2_content_alignment),
    );
    let untrained = Stylizer::new(
        Arc::new(mccnet::codec::Encoder::random(
            mccnet::codec::CodecLayout::narrow(8),
            0,
        )),
        Depth::Deep,
        FusionMode::MultiChannel,
        0,
    );
    report(
        &mut results,
        "A3",
        "coherence migration",
        guarded(|| a3_coherence_migration(&untrained, &root)),
    );

    let multi = write_corpora(&root)
        .map_err(|e| format!("could not build the desk corpora: {e}"))
        .and_then(|()| guarded(|| desk_run(&root, &root.join("multi"), |_| {})));
    match &multi {
        Ok(run) => report(
            &mut results,
            "A4",
            "desk training smoke",
            guarded(|| a4_training_smoke(run)),
        ),
        Err(e) => report(&mut results, "A4", "desk training smoke", Err(e.clone())),
    }
    report(
        &mut results,
        "A5",
        "loss identities and gradients",
        guarded(a5_losses_and_gradients),
    );
    match &multi {
        Ok(run) => {
            let model = run.trainer.model();
            report(
                &mut results,
                "A6",
                "video stability",
                guarded(|| a6_video_stability(model)),
            );
            let without =
                guarded(|| desk_run(&root, &root.join("no_illum"), |c| c.loss.illumination = 0.0));
            report(
                &mut results,
                "A7",
                "illumination ablation direction",
                without.and_then(|w| guarded(|| a7_illumination(model, &w))),
            );
            let cw = guarded(|| {
                desk_run(&root, &root.join("channel_wise"), |c| {
                    c.mode = FusionMode::ChannelWise
                })
            });
            let sh =
                guarded(|| desk_run(&root, &root.join("shallow"), |c| c.depth = Depth::Shallow));
            report(
                &mut results,
                "A8",
                "ablation modes",
                cw.and_then(|cw| sh.and_then(|sh| guarded(|| a8_ablation_modes(run, &cw, &sh)))),
            );
            report(
                &mut results,
                "A9",
                "timing harness",
                guarded(|| a9_timing(model)),
            );
        }
        Err(e) => {
            for (id, name) in [
                ("A6", "video stability"),
                ("A7", "illumination ablation direction"),
                ("A8", "ablation modes"),
                ("A9", "timing harness"),
            ] {
                report(
                    &mut results,
                    id,
                    name,
                    Err(format!("needs the desk model: {e}")),
                );
            }
        }
    }

    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
