//! The four training losses of an untrained generator on one random batch,
//! and their weighted total.

use std::sync::Arc;

use mccnet::codec::{CodecLayout, Depth, Encoder};
use mccnet::losses::{self, LossWeights};
use mccnet::mcc::FusionMode;
use mccnet::model::{Stylizer, TrainBatch};
use mccnet::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> mccnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let encoder = Arc::new(Encoder::random(CodecLayout::narrow(8), 0));
    let model = Stylizer::new(encoder, Depth::Deep, FusionMode::MultiChannel, 0);
    let shape = [2, 3, 32, 32];
    let batch = TrainBatch {
        content: FeatureMap::from_fn(shape, |_| rng.random_range(0.0..1.0)),
        style: FeatureMap::from_fn(shape, |_| rng.random_range(0.0..1.0)),
        noise: losses::gaussian_noise(shape, 0.01, &mut rng),
    };
    let terms = model.loss_terms(&batch)?;
    let weights = LossWeights::default();
    let bundle = losses::total_loss(terms, &weights)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&bundle).expect("plain numbers")
    );
    let ablation = losses::total_loss(terms, &weights.without_illumination())?;
    println!("without illumination: {:.4}", ablation.total);
    Ok(())
}

fn main() -> mccnet::Result<()> {
    run_example()
}
