//! Frozen VGG19 encoder taps and the trainable mirror decoder.
//!
//! The encoder runs VGG19 through `relu4_1` (or `relu3_1` for the shallow
//! codec). Every 3x3 convolution uses reflection padding, downsampling is
//! 2x2 max pooling, and the decoder mirrors each pooling with
//! nearest-neighbour upsampling followed by a 3x3 convolution.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{self, Conv2d, ConvGrad};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, ImagePlane};
use crate::weights::WeightFile;

/// Smallest height/width accepted by [`Encoder::encode`].
pub const MIN_SIDE: usize = 16;

/// ImageNet statistics expected by torchvision's VGG19 weights.
const RGB_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const RGB_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerTag {
    Relu1_1,
    Relu2_1,
    Relu3_1,
    Relu4_1,
}

impl LayerTag {
    pub const ALL: [LayerTag; 4] = [
        LayerTag::Relu1_1,
        LayerTag::Relu2_1,
        LayerTag::Relu3_1,
        LayerTag::Relu4_1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerTag::Relu1_1 => "relu1_1",
            LayerTag::Relu2_1 => "relu2_1",
            LayerTag::Relu3_1 => "relu3_1",
            LayerTag::Relu4_1 => "relu4_1",
        }
    }

    /// 1-based block index `k`; the tap sits at `1 / 2^(k-1)` resolution.
    pub fn level(self) -> u32 {
        self as u32 + 1
    }
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which tap the codec bottleneck sits at.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Depth {
    /// `relu4_1`, 1/8 resolution.
    #[default]
    Deep,
    /// `relu3_1`, 1/4 resolution.
    Shallow,
}

impl Depth {
    pub fn deepest(self) -> LayerTag {
        match self {
            Depth::Deep => LayerTag::Relu4_1,
            Depth::Shallow => LayerTag::Relu3_1,
        }
    }

    /// Spatial reduction between the image and the bottleneck feature.
    pub fn factor(self) -> usize {
        1 << (self.deepest().level() - 1)
    }

    pub fn name(self) -> &'static str {
        match self {
            Depth::Deep => "deep",
            Depth::Shallow => "shallow",
        }
    }
}

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Depth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deep" | "relu4_1" => Ok(Depth::Deep),
            "shallow" | "relu3_1" => Ok(Depth::Shallow),
            other => Err(Error::Config(format!(
                "unknown depth `{other}` (expected deep or shallow)"
            ))),
        }
    }
}

/// Channel widths of the codec. VGG19 has a base width of 64, giving
/// 64/128/256/512 channels at the four taps; narrower layouts keep the
/// topology and divide every width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CodecLayout {
    pub base_width: usize,
}

impl Default for CodecLayout {
    fn default() -> Self {
        Self::vgg19()
    }
}

impl CodecLayout {
    pub const fn vgg19() -> Self {
        CodecLayout { base_width: 64 }
    }

    pub const fn narrow(base_width: usize) -> Self {
        CodecLayout { base_width }
    }

    pub fn channels(self, tag: LayerTag) -> usize {
        self.base_width << (tag.level() - 1)
    }

    /// `(name, in, out)` for every encoder convolution, in order.
    fn encoder_convs(self) -> Vec<(&'static str, usize, usize)> {
        let [c1, c2, c3, c4] = LayerTag::ALL.map(|t| self.channels(t));
        vec![
            ("conv1_1", 3, c1),
            ("conv1_2", c1, c1),
            ("conv2_1", c1, c2),
            ("conv2_2", c2, c2),
            ("conv3_1", c2, c3),
            ("conv3_2", c3, c3),
            ("conv3_3", c3, c3),
            ("conv3_4", c3, c3),
            ("conv4_1", c3, c4),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    Conv(usize),
    Relu,
    Pool,
    Upsample,
    Tap(LayerTag),
}

fn encoder_ops(depth: Depth) -> Vec<Op> {
    use Op::*;
    let mut ops = vec![
        Conv(0),
        Relu,
        Tap(LayerTag::Relu1_1),
        Conv(1),
        Relu,
        Pool,
        Conv(2),
        Relu,
        Tap(LayerTag::Relu2_1),
        Conv(3),
        Relu,
        Pool,
        Conv(4),
        Relu,
        Tap(LayerTag::Relu3_1),
    ];
    if depth == Depth::Deep {
        ops.extend([
            Conv(5),
            Relu,
            Conv(6),
            Relu,
            Conv(7),
            Relu,
            Pool,
            Conv(8),
            Relu,
            Tap(LayerTag::Relu4_1),
        ]);
    }
    ops
}

/// Activations recorded by a traced forward pass: `acts[i]` is the input
/// of op `i`, the last entry is the final output.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    ops: Vec<Op>,
    acts: Vec<FeatureMap<T>>,
    argmax: Vec<Vec<u32>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &FeatureMap<T> {
        self.acts.last().expect("trace has an output")
    }
}

fn run_ops<T: Scalar>(
    convs: &[Conv2d<T>],
    ops: &[Op],
    x: FeatureMap<T>,
    taps: &mut BTreeMap<LayerTag, FeatureMap<T>>,
    mut trace: Option<&mut Trace<T>>,
) -> FeatureMap<T> {
    let mut cur = x;
    for &op in ops {
        let next = match op {
            Op::Conv(i) => convs[i].forward(&cur),
            Op::Relu => layers::relu(&cur),
            Op::Pool => {
                let (y, idx) = layers::max_pool2(&cur);
                if let Some(t) = trace.as_deref_mut() {
                    t.argmax.push(idx);
                }
                y
            }
            Op::Upsample => layers::upsample2(&cur),
            Op::Tap(tag) => {
                taps.insert(tag, cur.clone());
                cur.clone()
            }
        };
        match trace.as_deref_mut() {
            Some(t) => t.acts.push(std::mem::replace(&mut cur, next)),
            None => cur = next,
        }
    }
    if let Some(t) = trace {
        t.ops = ops.to_vec();
        t.acts.push(cur.clone());
    }
    cur
}

fn backprop_ops<T: Scalar>(
    convs: &[Conv2d<T>],
    trace: &Trace<T>,
    dout: Option<&FeatureMap<T>>,
    tap_grads: &BTreeMap<LayerTag, FeatureMap<T>>,
    mut grads: Option<&mut [ConvGrad<T>]>,
) -> FeatureMap<T> {
    let mut g = match dout {
        Some(d) => d.clone(),
        None => FeatureMap::zeros(trace.output().shape()),
    };
    let mut pools = trace.argmax.len();
    for (i, &op) in trace.ops.iter().enumerate().rev() {
        let input = &trace.acts[i];
        g = match op {
            Op::Conv(ci) => {
                let grad = grads.as_deref_mut().map(|gs| &mut gs[ci]);
                // the first op's input gradient is the caller's result
                convs[ci]
                    .backward(input, &g, true, grad)
                    .expect("input gradient requested")
            }
            Op::Relu => layers::relu_backward(&trace.acts[i + 1], &g),
            Op::Pool => {
                pools -= 1;
                layers::max_pool2_backward(input.shape(), &trace.argmax[pools], &g)
            }
            Op::Upsample => layers::upsample2_backward(&g),
            Op::Tap(tag) => {
                if let Some(tg) = tap_grads.get(&tag) {
                    g.add_assign(tg);
                }
                g
            }
        };
    }
    g
}

/// Encoder activations at the named taps, up to the codec depth.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderTaps<T = f32> {
    pub depth: Depth,
    pub taps: BTreeMap<LayerTag, FeatureMap<T>>,
}

impl<T: Scalar> EncoderTaps<T> {
    pub fn get(&self, tag: LayerTag) -> Option<&FeatureMap<T>> {
        self.taps.get(&tag)
    }

    /// The bottleneck feature the decoder consumes.
    pub fn deepest(&self) -> &FeatureMap<T> {
        &self.taps[&self.depth.deepest()]
    }

    pub fn into_deepest(mut self) -> FeatureMap<T> {
        self.taps
            .remove(&self.depth.deepest())
            .expect("deepest tap present")
    }
}

fn check_image<T: Scalar>(img: &ImagePlane<T>) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            found: img.channels(),
        });
    }
    if img.height() < MIN_SIDE || img.width() < MIN_SIDE {
        return Err(Error::TooSmall {
            height: img.height(),
            width: img.width(),
            min: MIN_SIDE,
        });
    }
    Ok(())
}

/// The frozen feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T = f32> {
    layout: CodecLayout,
    convs: Vec<Conv2d<T>>,
}

/// Read VGG19 encoder weights from an `MCCW1` file.
pub fn load_encoder(path: impl AsRef<Path>, layout: CodecLayout) -> Result<Encoder<f32>> {
    Encoder::from_weights(&WeightFile::read(path)?, layout)
}

impl Encoder<f32> {
    /// Pull `encoder.<conv>.weight|bias` records, checking each against the
    /// layout's expected shapes.
    pub fn from_weights(file: &WeightFile, layout: CodecLayout) -> Result<Self> {
        let mut convs = Vec::new();
        for (name, cin, cout) in layout.encoder_convs() {
            let mut conv = Conv2d::zeros(cin, cout, 3);
            conv.weight = file
                .f32(&format!("encoder.{name}.weight"), &[cout, cin, 3, 3])?
                .to_vec();
            conv.bias = file.f32(&format!("encoder.{name}.bias"), &[cout])?.to_vec();
            convs.push(conv);
        }
        Ok(Encoder { layout, convs })
    }

    /// A seeded He-initialized stand-in with the VGG19 topology, for when
    /// pretrained weights are unavailable.
    pub fn random(layout: CodecLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = layout
            .encoder_convs()
            .into_iter()
            .map(|(_, cin, cout)| {
                let mut conv = Conv2d::uniform(cin, cout, 3, 6f64.sqrt(), &mut rng);
                conv.bias.iter_mut().for_each(|b| *b *= 0.05);
                conv
            })
            .collect();
        Encoder { layout, convs }
    }
}

impl<T: Scalar> Encoder<T> {
    pub fn layout(&self) -> CodecLayout {
        self.layout
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            layout: self.layout,
            convs: self.convs.iter().map(|c| c.cast()).collect(),
        }
    }

    /// `(name, conv)` pairs in network order.
    pub fn convs(&self) -> impl Iterator<Item = (&'static str, &Conv2d<T>)> {
        self.layout
            .encoder_convs()
            .into_iter()
            .map(|(n, _, _)| n)
            .zip(self.convs.iter())
    }

    pub fn write_records(&self, file: &mut WeightFile) {
        for (name, conv) in self.convs() {
            file.push_f32(
                format!("encoder.{name}.weight"),
                &conv.weight_shape(),
                conv.weight.iter().map(|v| v.as_f64() as f32).collect(),
            );
            file.push_f32(
                format!("encoder.{name}.bias"),
                &[conv.out_channels],
                conv.bias.iter().map(|v| v.as_f64() as f32).collect(),
            );
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = WeightFile::new();
        self.write_records(&mut file);
        file.write(path)
    }

    /// SHA-256 over the little-endian `f64` image of every parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for conv in &self.convs {
            for v in conv.weight.iter().chain(&conv.bias) {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn preprocess(&self, img: &ImagePlane<T>) -> FeatureMap<T> {
        let mut x = img.clone();
        for b in 0..x.batch() {
            for c in 0..3 {
                let (m, s) = (T::of(RGB_MEAN[c]), T::of(RGB_STD[c]));
                x.plane_mut(b, c).iter_mut().for_each(|v| *v = (*v - m) / s);
            }
        }
        x
    }

    pub fn encode(&self, img: &ImagePlane<T>, depth: Depth) -> Result<EncoderTaps<T>> {
        check_image(img)?;
        let mut taps = BTreeMap::new();
        run_ops(
            &self.convs,
            &encoder_ops(depth),
            self.preprocess(img),
            &mut taps,
            None,
        );
        Ok(EncoderTaps { depth, taps })
    }

    /// Like [`encode`](Self::encode) but records what
    /// [`backward`](Self::backward) needs.
    pub fn encode_traced(
        &self,
        img: &ImagePlane<T>,
        depth: Depth,
    ) -> Result<(EncoderTaps<T>, Trace<T>)> {
        check_image(img)?;
        let mut taps = BTreeMap::new();
        let mut trace = Trace {
            ops: Vec::new(),
            acts: Vec::new(),
            argmax: Vec::new(),
        };
        run_ops(
            &self.convs,
            &encoder_ops(depth),
            self.preprocess(img),
            &mut taps,
            Some(&mut trace),
        );
        Ok((EncoderTaps { depth, taps }, trace))
    }

    /// Gradient with respect to the input image, given gradients at any
    /// subset of the taps. Encoder weights receive no gradient.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        tap_grads: &BTreeMap<LayerTag, FeatureMap<T>>,
    ) -> ImagePlane<T> {
        let mut g = backprop_ops(&self.convs, trace, None, tap_grads, None);
        for b in 0..g.batch() {
            for c in 0..3 {
                let s = T::of(RGB_STD[c]);
                g.plane_mut(b, c).iter_mut().for_each(|v| *v = *v / s);
            }
        }
        g
    }
}

/// The trainable mirror of the encoder, from the bottleneck tap back to RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T = f32> {
    layout: CodecLayout,
    depth: Depth,
    names: Vec<&'static str>,
    convs: Vec<Conv2d<T>>,
    ops: Vec<Op>,
}

impl<T: Scalar> Decoder<T> {
    fn plan(layout: CodecLayout, depth: Depth) -> (Vec<(&'static str, usize, usize)>, Vec<Op>) {
        let mut mirrored: Vec<_> = layout
            .encoder_convs()
            .into_iter()
            .rev()
            .map(|(name, cin, cout)| (name, cout, cin))
            .collect();
        if depth == Depth::Shallow {
            // drop conv4_1 ..= conv3_2
            mirrored.drain(..4);
        }
        let mut ops = Vec::new();
        let last = mirrored.len() - 1;
        for (i, (name, _, _)) in mirrored.iter().enumerate() {
            ops.push(Op::Conv(i));
            if i != last {
                ops.push(Op::Relu);
            }
            if matches!(*name, "conv4_1" | "conv3_1" | "conv2_1") {
                ops.push(Op::Upsample);
            }
        }
        (mirrored, ops)
    }

    /// Fresh decoder with uniform fan-in initialization.
    pub fn new(layout: CodecLayout, depth: Depth, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (plan, ops) = Self::plan(layout, depth);
        Decoder {
            layout,
            depth,
            names: plan.iter().map(|p| p.0).collect(),
            convs: plan
                .iter()
                .map(|&(_, cin, cout)| Conv2d::uniform(cin, cout, 3, 1.0, &mut rng))
                .collect(),
            ops,
        }
    }

    pub fn from_weights(file: &WeightFile, layout: CodecLayout, depth: Depth) -> Result<Self> {
        let (plan, ops) = Self::plan(layout, depth);
        let mut convs = Vec::new();
        for &(name, cin, cout) in &plan {
            let mut conv = Conv2d::zeros(cin, cout, 3);
            conv.weight = file
                .f32(&format!("decoder.{name}.weight"), &[cout, cin, 3, 3])?
                .iter()
                .map(|&v| T::of(v as f64))
                .collect();
            conv.bias = file
                .f32(&format!("decoder.{name}.bias"), &[cout])?
                .iter()
                .map(|&v| T::of(v as f64))
                .collect();
            convs.push(conv);
        }
        Ok(Decoder {
            layout,
            depth,
            names: plan.iter().map(|p| p.0).collect(),
            convs,
            ops,
        })
    }

    pub fn write_records(&self, file: &mut WeightFile) {
        for (name, conv) in self.names.iter().zip(&self.convs) {
            file.push_f32(
                format!("decoder.{name}.weight"),
                &conv.weight_shape(),
                conv.weight.iter().map(|v| v.as_f64() as f32).collect(),
            );
            file.push_f32(
                format!("decoder.{name}.bias"),
                &[conv.out_channels],
                conv.bias.iter().map(|v| v.as_f64() as f32).collect(),
            );
        }
    }

    pub fn layout(&self) -> CodecLayout {
        self.layout
    }

    pub fn depth(&self) -> Depth {
        self.depth
    }

    pub fn input_channels(&self) -> usize {
        self.layout.channels(self.depth.deepest())
    }

    pub fn output_channels(&self) -> usize {
        self.convs.last().map_or(0, |c| c.out_channels)
    }

    pub fn cast<U: Scalar>(&self) -> Decoder<U> {
        Decoder {
            layout: self.layout,
            depth: self.depth,
            names: self.names.clone(),
            convs: self.convs.iter().map(|c| c.cast()).collect(),
            ops: self.ops.clone(),
        }
    }

    pub fn convs(&self) -> &[Conv2d<T>] {
        &self.convs
    }

    pub(crate) fn convs_mut(&mut self) -> &mut [Conv2d<T>] {
        &mut self.convs
    }

    pub fn conv_names(&self) -> &[&'static str] {
        &self.names
    }

    pub fn zero_grads(&self) -> Vec<ConvGrad<T>> {
        self.convs.iter().map(ConvGrad::zeros_like).collect()
    }

    fn check_feature(&self, f: &FeatureMap<T>) -> Result<()> {
        if f.channels() != self.input_channels() {
            return Err(Error::ChannelMismatch {
                expected: self.input_channels(),
                found: f.channels(),
            });
        }
        if f.height() < 2 || f.width() < 2 {
            return Err(Error::Shape(format!(
                "bottleneck feature {}x{} is below 2x2",
                f.height(),
                f.width()
            )));
        }
        Ok(())
    }

    /// Decode to an image clamped into `[0, 1]`.
    pub fn decode(&self, f: &FeatureMap<T>) -> Result<ImagePlane<T>> {
        Ok(self.decode_raw(f)?.clamp01())
    }

    /// Decoder output before clamping; training losses use this.
    pub fn decode_raw(&self, f: &FeatureMap<T>) -> Result<ImagePlane<T>> {
        self.check_feature(f)?;
        Ok(run_ops(
            &self.convs,
            &self.ops,
            f.clone(),
            &mut BTreeMap::new(),
            None,
        ))
    }

    pub fn decode_traced(&self, f: &FeatureMap<T>) -> Result<Trace<T>> {
        self.check_feature(f)?;
        let mut trace = Trace {
            ops: Vec::new(),
            acts: Vec::new(),
            argmax: Vec::new(),
        };
        run_ops(
            &self.convs,
            &self.ops,
            f.clone(),
            &mut BTreeMap::new(),
            Some(&mut trace),
        );
        Ok(trace)
    }

    /// Accumulate parameter gradients for `dout` (gradient of the raw output)
    /// and return the gradient with respect to the input feature.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        dout: &ImagePlane<T>,
        grads: &mut [ConvGrad<T>],
    ) -> FeatureMap<T> {
        backprop_ops(
            &self.convs,
            trace,
            Some(dout),
            &BTreeMap::new(),
            Some(grads),
        )
    }
}
