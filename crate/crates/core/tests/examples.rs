//! Runs the fast examples end to end.

use std::sync::Arc;

#[allow(dead_code)]
#[path = "../examples/codec_shapes.rs"]
mod codec_shapes;

#[allow(dead_code)]
#[path = "../examples/mcc_fusion.rs"]
mod mcc_fusion;

#[allow(dead_code)]
#[path = "../examples/loss_terms.rs"]
mod loss_terms;

#[allow(dead_code)]
#[path = "../examples/desk_training.rs"]
mod desk_training;

#[allow(dead_code)]
#[path = "../examples/video_coherence.rs"]
mod video_coherence;

#[allow(dead_code)]
#[path = "../examples/benchmark.rs"]
mod benchmark;

#[test]
fn codec_shapes_example() {
    codec_shapes::run_example().unwrap();
}

#[test]
fn mcc_fusion_example() {
    mcc_fusion::run_example().unwrap();
}

#[test]
fn loss_terms_example() {
    loss_terms::run_example().unwrap();
}

#[test]
fn short_training_feeds_the_video_and_benchmark_examples() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = desk_training::run_example(3, dir.path()).unwrap();
    assert_eq!(ckpt.step, 3);
    assert!(dir.path().join("stylized.png").exists());
    let cmp = video_coherence::run_example(&ckpt.model, Some(&dir.path().join("heat"))).unwrap();
    assert!(cmp.ratio.value().is_some_and(f64::is_finite));
    let report = benchmark::run_example(&ckpt.model, &[32, 64], 1).unwrap();
    assert_eq!(report.rows.len(), 2);
    let untrained = mccnet::model::Stylizer::new(
        Arc::new(mccnet::codec::Encoder::random(
            mccnet::codec::CodecLayout::narrow(4),
            0,
        )),
        mccnet::codec::Depth::Shallow,
        mccnet::mcc::FusionMode::ChannelWise,
        0,
    );
    video_coherence::run_example(&untrained, None).unwrap();
}
