//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::sync::Arc;

use mccnet::codec::{CodecLayout, Depth, Encoder};
use mccnet::losses::{self, LossWeights};
use mccnet::mcc::FusionMode;
use mccnet::model::{Stylizer, TrainBatch};
use mccnet::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn batch(seed: u64) -> TrainBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 3, 16, 16];
    TrainBatch {
        content: FeatureMap::from_fn(shape, |_| rng.random_range(0.0..1.0)),
        style: FeatureMap::from_fn(shape, |_| rng.random_range(0.0..1.0)),
        noise: losses::gaussian_noise(shape, 0.05, &mut rng),
    }
}

pub fn weighted(terms: &losses::LossTerms, w: &LossWeights) -> f64 {
    losses::total_loss(*terms, w).unwrap().total
}

/// Directional derivative along a random unit direction: analytic vs
/// central difference. Returns the relative error.
pub fn directional_error(
    model: &Stylizer<f64>,
    batch: &TrainBatch<f64>,
    w: &LossWeights,
    seed: u64,
) -> f64 {
    let (_, grads) = model.loss_and_grads(batch, w).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir: Vec<Vec<f64>> = grads
        .slices()
        .iter()
        .map(|s| s.iter().map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let norm = dir.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let analytic: f64 = grads
        .slices()
        .iter()
        .zip(&dir)
        .map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b / norm).sum::<f64>())
        .sum();
    let h = 1e-6;
    let shifted = |sign: f64| {
        let mut m = model.clone();
        for (p, d) in m.parameters_mut().into_iter().zip(&dir) {
            for (x, v) in p.iter_mut().zip(d) {
                *x += sign * h * v / norm;
            }
        }
        weighted(&m.loss_terms(batch).unwrap(), w)
    };
    let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
    assert!(analytic != 0.0, "degenerate direction");
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-12)
}

pub fn only(term: &str) -> LossWeights {
    let mut w = LossWeights {
        content: 0.0,
        style: 0.0,
        identity: 0.0,
        illumination: 0.0,
    };
    match term {
        "content" => w.content = 1.0,
        "style" => w.style = 1.0,
        "identity" => w.identity = 1.0,
        "illumination" => w.illumination = 1.0,
        _ => unreachable!(),
    }
    w
}

pub fn model(depth: Depth, mode: FusionMode) -> Stylizer<f64> {
    let enc = Arc::new(Encoder::random(CodecLayout::narrow(8), 5).cast::<f64>());
    Stylizer::new(enc, depth, mode, 6)
}
