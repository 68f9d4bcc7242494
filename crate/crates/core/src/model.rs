//! The full generator: frozen encoder, MCC fusion, trainable decoder.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::codec::{CodecLayout, Decoder, Depth, Encoder, Trace, MIN_SIDE};
use crate::error::{Error, Result};
use crate::layers::ConvGrad;
use crate::losses::{self, Generator, LossTerms, LossWeights, CONTENT_TAP};
use crate::mcc::{self, FusionMode, FusionTrace, MccGrads, MccParams};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, ImagePlane};
use crate::weights::WeightFile;

/// Encoder-MCC-decoder style transfer network.
#[derive(Clone, Debug)]
pub struct Stylizer<T: Scalar = f32> {
    encoder: Arc<Encoder<T>>,
    decoder: Decoder<T>,
    mcc: MccParams<T>,
    mode: FusionMode,
}

/// Style representation reusable across many content frames.
#[derive(Clone, Debug)]
pub struct StyleCode<T> {
    feature: FeatureMap<T>,
    branch: FeatureMap<T>,
}

/// One training example batch with its illumination perturbation.
#[derive(Clone, Debug)]
pub struct TrainBatch<T> {
    pub content: ImagePlane<T>,
    pub style: ImagePlane<T>,
    /// Added to `content` for the illumination pair; same shape.
    pub noise: FeatureMap<T>,
}

/// Gradients for every trainable parameter of a [`Stylizer`].
#[derive(Clone, Debug)]
pub struct ModelGrads<T> {
    pub decoder: Vec<ConvGrad<T>>,
    pub mcc: MccGrads<T>,
}

impl<T: Scalar> ModelGrads<T> {
    /// Flat views in [`Stylizer::parameters_mut`] order.
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for g in &self.decoder {
            out.push(&g.weight);
            out.push(&g.bias);
        }
        let m = &self.mcc;
        out.extend([
            m.proj_c.weight.as_slice(),
            m.proj_c.bias.as_slice(),
            m.proj_s.weight.as_slice(),
            m.proj_s.bias.as_slice(),
            m.mixer.as_slice(),
            m.proj_out.weight.as_slice(),
            m.proj_out.bias.as_slice(),
        ]);
        out
    }
}

struct Pass<T> {
    fusion: FusionTrace<T>,
    decoded: Trace<T>,
}

impl<T: Scalar> Stylizer<T> {
    pub fn new(encoder: Arc<Encoder<T>>, depth: Depth, mode: FusionMode, seed: u64) -> Self {
        let layout = encoder.layout();
        let channels = layout.channels(depth.deepest());
        Stylizer {
            decoder: Decoder::new(layout, depth, seed),
            mcc: MccParams::new(channels, seed.wrapping_add(0x9e37_79b9)),
            encoder,
            mode,
        }
    }

    pub fn from_parts(
        encoder: Arc<Encoder<T>>,
        decoder: Decoder<T>,
        mcc: MccParams<T>,
        mode: FusionMode,
    ) -> Result<Self> {
        if decoder.layout() != encoder.layout() {
            return Err(Error::Invalid("decoder and encoder layouts differ".into()));
        }
        if mcc.channels() != decoder.input_channels() {
            return Err(Error::ChannelMismatch {
                expected: decoder.input_channels(),
                found: mcc.channels(),
            });
        }
        Ok(Stylizer {
            encoder,
            decoder,
            mcc,
            mode,
        })
    }

    /// Read decoder and MCC parameters written by [`write_records`](Self::write_records).
    pub fn from_weights(
        encoder: Arc<Encoder<T>>,
        file: &WeightFile,
        depth: Depth,
        mode: FusionMode,
    ) -> Result<Self> {
        let layout = encoder.layout();
        let decoder = Decoder::from_weights(file, layout, depth)?;
        let mcc = MccParams::from_weights(file, layout.channels(depth.deepest()))?;
        Self::from_parts(encoder, decoder, mcc, mode)
    }

    pub fn write_records(&self, file: &mut WeightFile) {
        self.decoder.write_records(file);
        self.mcc.write_records(file);
    }

    pub fn encoder(&self) -> &Arc<Encoder<T>> {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder<T> {
        &self.decoder
    }

    pub fn mcc(&self) -> &MccParams<T> {
        &self.mcc
    }

    pub fn mcc_mut(&mut self) -> &mut MccParams<T> {
        &mut self.mcc
    }

    pub fn depth(&self) -> Depth {
        self.decoder.depth()
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn layout(&self) -> CodecLayout {
        self.encoder.layout()
    }

    pub fn cast<U: Scalar>(&self) -> Stylizer<U> {
        Stylizer {
            encoder: Arc::new(self.encoder.cast()),
            decoder: self.decoder.cast(),
            mcc: self.mcc.cast(),
            mode: self.mode,
        }
    }

    /// Trainable tensors as flat slices: decoder convolutions (weight, bias)
    /// in network order, then the MCC projections and mixer.
    pub fn parameters_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for conv in self.decoder.convs_mut() {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
        }
        let m = &mut self.mcc;
        out.push(&mut m.proj_c.weight);
        out.push(&mut m.proj_c.bias);
        out.push(&mut m.proj_s.weight);
        out.push(&mut m.proj_s.bias);
        out.push(&mut m.mixer);
        out.push(&mut m.proj_out.weight);
        out.push(&mut m.proj_out.bias);
        out
    }

    /// Checkpoint tags matching [`parameters_mut`](Self::parameters_mut).
    pub fn parameter_tags(&self) -> Vec<String> {
        let mut tags = Vec::new();
        for name in self.decoder.conv_names() {
            tags.push(format!("decoder.{name}.weight"));
            tags.push(format!("decoder.{name}.bias"));
        }
        for t in [
            "mcc.proj_c",
            "mcc.proj_c.bias",
            "mcc.proj_s",
            "mcc.proj_s.bias",
            "mcc.mixer",
            "mcc.proj_out",
            "mcc.proj_out.bias",
        ] {
            tags.push(t.to_string());
        }
        tags
    }

    pub fn zero_grads(&self) -> ModelGrads<T> {
        ModelGrads {
            decoder: self.decoder.zero_grads(),
            mcc: self.mcc.zero_grads(),
        }
    }

    pub fn encode_style(&self, style: &ImagePlane<T>) -> Result<StyleCode<T>> {
        let feature = self.encoder.encode(style, self.depth())?.into_deepest();
        let branch = mcc::style_branch(&self.mcc, &feature)?;
        Ok(StyleCode { feature, branch })
    }

    /// Stylize with a precomputed style. Any content size of at least
    /// [`MIN_SIDE`] is accepted: the image is reflect-padded up to a multiple
    /// of the codec stride and the result cropped back.
    pub fn stylize_with(
        &self,
        content: &ImagePlane<T>,
        style: &StyleCode<T>,
    ) -> Result<ImagePlane<T>> {
        let [_, _, h, w] = content.shape();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::TooSmall {
                height: h,
                width: w,
                min: MIN_SIDE,
            });
        }
        let factor = self.depth().factor();
        let padded = pad_reflect_to(
            content,
            h.div_ceil(factor) * factor,
            w.div_ceil(factor) * factor,
        );
        let fc = self.encoder.encode(&padded, self.depth())?.into_deepest();
        let branch = mcc::content_branch(&self.mcc, &fc)?;
        let (fused, _) = mcc::fuse_branches(&self.mcc, branch, style.branch.clone(), self.mode);
        let out = self.decoder.decode(&fused)?;
        Ok(crop_to(&out, h, w))
    }

    pub fn stylize(&self, content: &ImagePlane<T>, style: &ImagePlane<T>) -> Result<ImagePlane<T>> {
        self.stylize_with(content, &self.encode_style(style)?)
    }

    /// Fused feature for the current parameters (before decoding).
    pub fn fuse_features(&self, f_c: &FeatureMap<T>, f_s: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        mcc::mcc_forward(f_c, f_s, &self.mcc, self.mode)
    }

    fn run_pass(&self, f_c: &FeatureMap<T>, f_s: &FeatureMap<T>) -> Result<Pass<T>> {
        let (fused, fusion) = mcc::mcc_forward_traced(f_c, f_s, &self.mcc, self.mode)?;
        let decoded = self.decoder.decode_traced(&fused)?;
        Ok(Pass { fusion, decoded })
    }

    fn backward_pass(
        &self,
        pass: &Pass<T>,
        f_c: &FeatureMap<T>,
        f_s: &FeatureMap<T>,
        dout: &ImagePlane<T>,
        grads: &mut ModelGrads<T>,
    ) {
        let dfused = self
            .decoder
            .backward(&pass.decoded, dout, &mut grads.decoder);
        mcc::mcc_backward(
            &self.mcc,
            &pass.fusion,
            f_c,
            f_s,
            self.mode,
            &dfused,
            &mut grads.mcc,
        );
    }

    /// Loss terms on the raw (unclamped) decoder outputs.
    pub fn loss_terms(&self, batch: &TrainBatch<T>) -> Result<LossTerms> {
        Ok(self.evaluate(batch, None)?.0)
    }

    /// Loss terms and the gradient of their weighted total.
    pub fn loss_and_grads(
        &self,
        batch: &TrainBatch<T>,
        weights: &LossWeights,
    ) -> Result<(LossTerms, ModelGrads<T>)> {
        let (terms, grads) = self.evaluate(batch, Some(weights))?;
        Ok((terms, grads.expect("gradients requested")))
    }

    fn evaluate(
        &self,
        batch: &TrainBatch<T>,
        weights: Option<&LossWeights>,
    ) -> Result<(LossTerms, Option<ModelGrads<T>>)> {
        let TrainBatch {
            content,
            style,
            noise,
        } = batch;
        if content.shape() != noise.shape() {
            return Err(Error::Shape("noise must match the content batch".into()));
        }
        let depth = self.depth();
        let deepest = depth.deepest();
        let enc = &self.encoder;
        let taps_c = enc.encode(content, Depth::Deep)?;
        let taps_s = enc.encode(style, Depth::Deep)?;
        let fc = &taps_c.taps[&deepest];
        let fs = &taps_s.taps[&deepest];
        let mut noisy = content.clone();
        noisy.add_assign(noise);
        let fcn = enc.encode(&noisy, depth)?.into_deepest();

        let cs = self.run_pass(fc, fs)?;
        let cc = self.run_pass(fc, fc)?;
        let ss = self.run_pass(fs, fs)?;
        let csn = self.run_pass(&fcn, fs)?;
        let (i_cs, i_cc, i_ss, i_csn) = (
            cs.decoded.output(),
            cc.decoded.output(),
            ss.decoded.output(),
            csn.decoded.output(),
        );

        let (taps_cs, enc_trace) = enc.encode_traced(i_cs, Depth::Deep)?;
        let (content_v, content_g) =
            losses::content_distance(&taps_cs.taps[&CONTENT_TAP], &taps_c.taps[&CONTENT_TAP])?;
        let (style_v, style_g) = losses::style_distance(&taps_cs, &taps_s)?;
        let (id_c, id_c_g) = losses::mse_with_grad(i_cc, content)?;
        let (id_s, id_s_g) = losses::mse_with_grad(i_ss, style)?;
        let (illum_v, illum_g) = losses::mse_with_grad(i_cs, i_csn)?;
        let terms = LossTerms {
            content: content_v,
            style: style_v,
            identity: id_c + id_s,
            illumination: illum_v,
        };
        let Some(w) = weights else {
            return Ok((terms, None));
        };

        let mut grads = self.zero_grads();
        let mut d_cs = FeatureMap::zeros(i_cs.shape());
        if w.content != 0.0 || w.style != 0.0 {
            let mut tap_grads = BTreeMap::new();
            for (tag, g) in style_g {
                tap_grads.insert(tag, g.scaled(T::of(w.style)));
            }
            tap_grads
                .get_mut(&CONTENT_TAP)
                .expect("style taps include the content tap")
                .add_assign(&content_g.scaled(T::of(w.content)));
            d_cs.add_assign(&enc.backward(&enc_trace, &tap_grads));
        }
        if w.illumination != 0.0 {
            let il = illum_g.scaled(T::of(w.illumination));
            d_cs.add_assign(&il);
            self.backward_pass(&csn, &fcn, fs, &il.scaled(-T::one()), &mut grads);
        }
        self.backward_pass(&cs, fc, fs, &d_cs, &mut grads);
        if w.identity != 0.0 {
            let k = T::of(w.identity);
            self.backward_pass(&cc, fc, fc, &id_c_g.scaled(k), &mut grads);
            self.backward_pass(&ss, fs, fs, &id_s_g.scaled(k), &mut grads);
        }
        Ok((terms, Some(grads)))
    }
}

impl<T: Scalar> Generator<T> for Stylizer<T> {
    fn generate(&self, content: &ImagePlane<T>, style: &ImagePlane<T>) -> Result<ImagePlane<T>> {
        let code = self.encode_style(style)?;
        let frames: Result<Vec<_>> = (0..content.batch())
            .map(|b| self.stylize_with(&content.slice_batch(b..b + 1), &code_for(&code, b)))
            .collect();
        FeatureMap::stack(&frames?)
    }
}

fn code_for<T: Scalar>(code: &StyleCode<T>, b: usize) -> StyleCode<T> {
    if code.feature.batch() == 1 {
        code.clone()
    } else {
        StyleCode {
            feature: code.feature.slice_batch(b..b + 1),
            branch: code.branch.slice_batch(b..b + 1),
        }
    }
}

/// Reflect-pad on the bottom and right edges up to `h x w`.
pub fn pad_reflect_to<T: Scalar>(img: &FeatureMap<T>, h: usize, w: usize) -> FeatureMap<T> {
    let [n, c, ih, iw] = img.shape();
    if (ih, iw) == (h, w) {
        return img.clone();
    }
    assert!(
        h >= ih && w >= iw && h < 2 * ih && w < 2 * iw,
        "padding larger than the image"
    );
    let fold = |i: usize, len: usize| if i < len { i } else { 2 * len - 2 - i };
    FeatureMap::from_fn([n, c, h, w], |[b, ch, y, x]| {
        img.at(b, ch, fold(y, ih), fold(x, iw))
    })
}

/// Top-left `h x w` window.
pub fn crop_to<T: Scalar>(img: &FeatureMap<T>, h: usize, w: usize) -> FeatureMap<T> {
    let [n, c, ih, iw] = img.shape();
    if (ih, iw) == (h, w) {
        return img.clone();
    }
    FeatureMap::from_fn([n, c, h, w], |[b, ch, y, x]| img.at(b, ch, y, x))
}
