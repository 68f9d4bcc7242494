//! Perceptual, identity and illumination losses.
//!
//! Every `||.||` below is a mean squared error: averaged over all elements,
//! so magnitudes do not depend on resolution or batch size.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{Depth, Encoder, EncoderTaps, LayerTag};
use crate::error::{Error, Result};
use crate::layers::channel_moments;
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, ImagePlane};

/// Added to the variance before the square root in style statistics.
pub const STYLE_EPS: f64 = 1e-5;

/// Taps compared by the style loss.
pub const STYLE_TAPS: [LayerTag; 4] = LayerTag::ALL;

/// Tap compared by the content loss.
pub const CONTENT_TAP: LayerTag = LayerTag::Relu4_1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub content: f64,
    pub style: f64,
    pub identity: f64,
    pub illumination: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            content: 4.0,
            style: 15.0,
            identity: 70.0,
            illumination: 3000.0,
        }
    }
}

impl LossWeights {
    /// Configuration without the illumination term.
    pub fn without_illumination(self) -> Self {
        LossWeights {
            illumination: 0.0,
            ..self
        }
    }
}

/// The four unweighted loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub content: f64,
    pub style: f64,
    pub identity: f64,
    pub illumination: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub content: f64,
    pub style: f64,
    pub identity: f64,
    pub illumination: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn terms(&self) -> LossTerms {
        LossTerms {
            content: self.content,
            style: self.style,
            identity: self.identity,
            illumination: self.illumination,
        }
    }
}

pub fn total_loss(terms: LossTerms, weights: &LossWeights) -> Result<LossBundle> {
    for (term, v) in [
        ("content", terms.content),
        ("style", terms.style),
        ("identity", terms.identity),
        ("illumination", terms.illumination),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term, step: None });
        }
    }
    Ok(LossBundle {
        content: terms.content,
        style: terms.style,
        identity: terms.identity,
        illumination: terms.illumination,
        total: weights.content * terms.content
            + weights.style * terms.style
            + weights.identity * terms.identity
            + weights.illumination * terms.illumination,
    })
}

fn same_shape<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared error and its gradient with respect to `a`.
pub fn mse_with_grad<T: Scalar>(
    a: &FeatureMap<T>,
    b: &FeatureMap<T>,
) -> Result<(f64, FeatureMap<T>)> {
    same_shape(a, b)?;
    let n = a.len().max(1) as f64;
    let scale = T::of(2.0 / n);
    let mut grad = a.clone();
    let mut sum = 0.0;
    for (g, &t) in grad.as_mut_slice().iter_mut().zip(b.as_slice()) {
        let d = *g - t;
        sum += d.as_f64() * d.as_f64();
        *g = d * scale;
    }
    Ok((sum / n, grad))
}

pub fn mse<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<f64> {
    Ok(mse_with_grad(a, b)?.0)
}

/// Content distance between two tap activations, with the gradient for
/// `generated`.
pub fn content_distance<T: Scalar>(
    generated: &FeatureMap<T>,
    target: &FeatureMap<T>,
) -> Result<(f64, FeatureMap<T>)> {
    mse_with_grad(generated, target)
}

/// Per-channel mean/std distance for one tap. `target` may carry a single
/// batch entry shared by every generated entry.
pub fn statistics_distance<T: Scalar>(
    generated: &FeatureMap<T>,
    target: &FeatureMap<T>,
) -> Result<(f64, FeatureMap<T>)> {
    let [b, c, _, _] = generated.shape();
    if target.channels() != c || (target.batch() != b && target.batch() != 1) {
        return Err(Error::Shape(format!(
            "style statistics {:?} vs {:?}",
            generated.shape(),
            target.shape()
        )));
    }
    let eps = T::of(STYLE_EPS);
    let gm = channel_moments(generated);
    let tm = channel_moments(target);
    let count = (b * c) as f64;
    let n = T::of(generated.plane_len() as f64);
    let mut value = 0.0;
    let mut grad = generated.clone();
    for bi in 0..b {
        let tb = if target.batch() == 1 { 0 } else { bi };
        for ci in 0..c {
            let (mu, var) = gm[bi * c + ci];
            let (tmu, tvar) = tm[tb * c + ci];
            let sigma = (var + eps).sqrt();
            let tsigma = (tvar + eps).sqrt();
            let (dmu, dsigma) = (mu - tmu, sigma - tsigma);
            value += (dmu.as_f64().powi(2) + dsigma.as_f64().powi(2)) / count;
            let gmu = T::of(2.0 / count) * dmu / n;
            let gsig = T::of(2.0 / count) * dsigma / (n * sigma);
            grad.plane_mut(bi, ci)
                .iter_mut()
                .for_each(|x| *x = gmu + gsig * (*x - mu));
        }
    }
    Ok((value, grad))
}

/// Style distance summed over [`STYLE_TAPS`], with per-tap gradients.
pub fn style_distance<T: Scalar>(
    generated: &EncoderTaps<T>,
    target: &EncoderTaps<T>,
) -> Result<(f64, BTreeMap<LayerTag, FeatureMap<T>>)> {
    let mut total = 0.0;
    let mut grads = BTreeMap::new();
    for tag in STYLE_TAPS {
        let missing = || Error::Invalid(format!("style loss needs tap {tag}"));
        let g = generated.get(tag).ok_or_else(missing)?;
        let t = target.get(tag).ok_or_else(missing)?;
        let (v, grad) = statistics_distance(g, t)?;
        total += v;
        grads.insert(tag, grad);
    }
    Ok((total, grads))
}

pub fn content_loss<T: Scalar>(
    stylized: &ImagePlane<T>,
    content: &ImagePlane<T>,
    encoder: &Encoder<T>,
) -> Result<f64> {
    same_shape(stylized, content)?;
    let a = encoder.encode(stylized, Depth::Deep)?;
    let b = encoder.encode(content, Depth::Deep)?;
    Ok(content_distance(&a.taps[&CONTENT_TAP], &b.taps[&CONTENT_TAP])?.0)
}

pub fn style_loss<T: Scalar>(
    stylized: &ImagePlane<T>,
    style: &ImagePlane<T>,
    encoder: &Encoder<T>,
) -> Result<f64> {
    let a = encoder.encode(stylized, Depth::Deep)?;
    let b = encoder.encode(style, Depth::Deep)?;
    Ok(style_distance(&a, &b)?.0)
}

/// Anything mapping a (content, style) pair to a stylized image.
pub trait Generator<T: Scalar = f32> {
    fn generate(&self, content: &ImagePlane<T>, style: &ImagePlane<T>) -> Result<ImagePlane<T>>;
}

impl<T, F> Generator<T> for F
where
    T: Scalar,
    F: Fn(&ImagePlane<T>, &ImagePlane<T>) -> Result<ImagePlane<T>>,
{
    fn generate(&self, content: &ImagePlane<T>, style: &ImagePlane<T>) -> Result<ImagePlane<T>> {
        self(content, style)
    }
}

/// Reconstruction error when content and style are the same image.
pub fn identity_loss<T: Scalar>(
    model: &impl Generator<T>,
    content: &ImagePlane<T>,
    style: &ImagePlane<T>,
) -> Result<f64> {
    let cc = model.generate(content, content)?;
    let ss = model.generate(style, style)?;
    Ok(mse(&cc, content)? + mse(&ss, style)?)
}

/// Zero-mean Gaussian noise of standard deviation `sigma`.
pub fn gaussian_noise<T: Scalar>(
    shape: [usize; 4],
    sigma: f64,
    rng: &mut impl Rng,
) -> FeatureMap<T> {
    if sigma == 0.0 {
        return FeatureMap::zeros(shape);
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    FeatureMap::from_fn(shape, |_| T::of(normal.sample(rng)))
}

/// Output change when the content image receives one draw of Gaussian noise.
pub fn illumination_loss<T: Scalar>(
    model: &impl Generator<T>,
    content: &ImagePlane<T>,
    style: &ImagePlane<T>,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!(
            "noise sigma must be >= 0, got {sigma}"
        )));
    }
    let mut noisy = content.clone();
    noisy.add_assign(&gaussian_noise(content.shape(), sigma, rng));
    let clean = model.generate(content, style)?;
    let perturbed = model.generate(&noisy, style)?;
    mse(&clean, &perturbed)
}
