//! Encode an image with the stand-in VGG19 encoder at both depths, list the
//! tap shapes, and decode back to the input size.

use mccnet::codec::{CodecLayout, Decoder, Depth, Encoder};
use mccnet::FeatureMap;

pub fn run_example() -> mccnet::Result<()> {
    let layout = CodecLayout::narrow(8);
    let encoder = Encoder::random(layout, 0);
    let image = FeatureMap::from_fn([1, 3, 48, 64], |[_, c, y, x]| {
        ((x + 2 * y + 7 * c) % 23) as f32 / 22.0
    });
    for depth in [Depth::Deep, Depth::Shallow] {
        let taps = encoder.encode(&image, depth)?;
        for (tag, f) in &taps.taps {
            println!("{depth:>8} {tag}: {:?}", f.shape());
        }
        let decoded = Decoder::new(layout, depth, 1).decode(taps.deepest())?;
        println!("{depth:>8} decoded: {:?}", decoded.shape());
        assert_eq!(decoded.shape(), image.shape());
    }
    println!("encoder sha256 {}", encoder.checksum());
    Ok(())
}

fn main() -> mccnet::Result<()> {
    run_example()
}
