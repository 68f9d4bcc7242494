//! Multi-channel correlation fusion on random features: per-channel gains,
//! the explicit correlation-matrix cross-check, and the Lipschitz bound.

use mccnet::mcc::{self, FusionMode, MccParams};
use mccnet::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> mccnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let channels = 4;
    let f_c: FeatureMap<f64> =
        FeatureMap::from_fn([1, channels, 6, 6], |_| rng.random_range(-1.0..1.0));
    let f_s: FeatureMap<f64> =
        FeatureMap::from_fn([1, channels, 5, 7], |_| rng.random_range(-1.0..1.0));
    let params = MccParams::<f64>::new(channels, 9);

    for mode in [FusionMode::MultiChannel, FusionMode::ChannelWise] {
        let g = mcc::gains(&params, &f_s, mode)?;
        let bound = mcc::lipschitz_bound(&params, &f_s, mode)?;
        println!("{mode}: gains {:.4?}, bound {bound:.4}", g.for_content(0));
    }

    let (_, trace) = mcc::mcc_forward_traced(&f_c, &f_s, &params, FusionMode::MultiChannel)?;
    let ratio = trace.fused.at(0, 2, 1, 1) / trace.content_branch.at(0, 2, 1, 1);
    println!(
        "fused / content at channel 2: {ratio:.6} (gain {:.6})",
        trace.gains.for_content(0)[2]
    );

    let energy = mcc::channel_energy(&f_c);
    let route = mcc::correlation_route(f_c.plane(0, 0), f_c.plane(0, 0))?;
    let closed = energy.sample(0)[0] * f_c.plane(0, 0)[0];
    println!(
        "correlation route {:.6} vs energy scaling {closed:.6}",
        route[0]
    );
    Ok(())
}

fn main() -> mccnet::Result<()> {
    run_example()
}
