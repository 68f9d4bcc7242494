//! Multi-channel correlation fusion of content and style features.
//!
//! Both inputs are instance-normalized and projected by 1x1 convolutions.
//! The style branch is reduced to per-channel energies (sums of squares,
//! divided by the number of style positions); a bias-free linear mixer turns
//! those energies into one gain per content channel, and every content
//! channel is scaled by its gain:
//!
//! ```text
//! g_i     = 1 + sum_k w_ik * e_k        (multi-channel)
//! g_i     = 1 + e_i                     (channel-wise)
//! fused_i = g_i * content_i
//! out     = proj_out(fused)
//! ```
//!
//! Because `fused` is a per-channel multiple of the content branch, small
//! changes in the content feature cannot be amplified by more than
//! `max_i |g_i|` at the fusion stage; see [`lipschitz_bound`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{self, Conv2d, ConvGrad};
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;
use crate::weights::WeightFile;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// Gains mix the energies of every style channel.
    #[default]
    MultiChannel,
    /// Each content channel only sees its own style channel's energy.
    ChannelWise,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::MultiChannel => "multi_channel",
            FusionMode::ChannelWise => "channel_wise",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi_channel" => Ok(FusionMode::MultiChannel),
            "channel_wise" => Ok(FusionMode::ChannelWise),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected multi_channel or channel_wise)"
            ))),
        }
    }
}

/// Per-channel instance normalization, `eps = 1e-5`, no affine terms.
pub fn normalize<T: Scalar>(f: &FeatureMap<T>) -> FeatureMap<T> {
    layers::instance_norm(f, NORM_EPS)
}

/// Sum of squared activations of every style channel, per batch entry.
///
/// This is the squared-activation "energy" of a channel: no square root is
/// taken.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelEnergy<T = f32> {
    batch: usize,
    channels: usize,
    positions: usize,
    values: Vec<T>,
}

impl<T: Scalar> ChannelEnergy<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Style positions `N` each sum ran over.
    pub fn positions(&self) -> usize {
        self.positions
    }

    /// Energies of batch entry `b`, one per channel.
    pub fn sample(&self, b: usize) -> &[T] {
        &self.values[b * self.channels..(b + 1) * self.channels]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    /// Energies divided by `N`, the resolution-independent form the mixer
    /// consumes.
    pub fn per_position(&self) -> Vec<T> {
        let n = T::of(self.positions as f64);
        self.values.iter().map(|&e| e / n).collect()
    }
}

pub fn channel_energy<T: Scalar>(f_s: &FeatureMap<T>) -> ChannelEnergy<T> {
    let values = (0..f_s.batch())
        .flat_map(|b| (0..f_s.channels()).map(move |c| (b, c)))
        .map(|(b, c)| f_s.plane(b, c).iter().map(|&v| v * v).sum())
        .collect();
    ChannelEnergy {
        batch: f_s.batch(),
        channels: f_s.channels(),
        positions: f_s.plane_len(),
        values,
    }
}

/// Rearranged style for one channel through the explicit `N x N`
/// correlation matrix: `CO = c^T s`, result `s CO^T`.
///
/// Quadratic in memory; it exists to cross-check the closed form
/// `(sum_j s_j^2) * c`.
pub fn correlation_route(content: &[f64], style: &[f64]) -> Result<Vec<f64>> {
    if content.len() != style.len() {
        return Err(Error::Shape(format!(
            "content channel has {} positions, style channel {}",
            content.len(),
            style.len()
        )));
    }
    let n = content.len();
    // co[a][b] = c_a * s_b
    let co: Vec<f64> = content
        .iter()
        .flat_map(|&c| style.iter().map(move |&s| c * s))
        .collect();
    // (s CO^T)[a] = sum_b s_b * CO^T[b][a] = sum_b s_b * co[a][b]
    Ok((0..n)
        .map(|a| (0..n).map(|b| style[b] * co[a * n + b]).sum())
        .collect())
}

/// Learnable parameters of the fusion module.
#[derive(Clone, Debug, PartialEq)]
pub struct MccParams<T = f32> {
    pub proj_c: Conv2d<T>,
    pub proj_s: Conv2d<T>,
    /// `C x C`, row `i` holds the weights `w_ik` feeding content channel `i`.
    pub mixer: Vec<T>,
    pub proj_out: Conv2d<T>,
}

/// Gradients matching [`MccParams`] field by field.
#[derive(Clone, Debug, PartialEq)]
pub struct MccGrads<T> {
    pub proj_c: ConvGrad<T>,
    pub proj_s: ConvGrad<T>,
    pub mixer: Vec<T>,
    pub proj_out: ConvGrad<T>,
}

impl<T: Scalar> MccGrads<T> {
    pub fn add_assign(&mut self, other: &MccGrads<T>) {
        self.proj_c.add_assign(&other.proj_c);
        self.proj_s.add_assign(&other.proj_s);
        for (a, &b) in self.mixer.iter_mut().zip(&other.mixer) {
            *a += b;
        }
        self.proj_out.add_assign(&other.proj_out);
    }
}

const PROJ_NOISE: f64 = 0.01;

impl<T: Scalar> MccParams<T> {
    /// Projections start at identity plus small noise; mixer weights are
    /// uniform in `+-1/sqrt(C)`.
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj_c = Conv2d::near_identity(channels, PROJ_NOISE, &mut rng);
        let proj_s = Conv2d::near_identity(channels, PROJ_NOISE, &mut rng);
        let proj_out = Conv2d::near_identity(channels, PROJ_NOISE, &mut rng);
        let bound = 1.0 / (channels as f64).sqrt();
        let mixer = (0..channels * channels)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        MccParams {
            proj_c,
            proj_s,
            mixer,
            proj_out,
        }
    }

    pub fn channels(&self) -> usize {
        self.proj_c.in_channels
    }

    pub fn set_mixer_identity(&mut self) {
        let c = self.channels();
        for i in 0..c {
            for k in 0..c {
                self.mixer[i * c + k] = if i == k { T::one() } else { T::zero() };
            }
        }
    }

    pub fn zero_grads(&self) -> MccGrads<T> {
        MccGrads {
            proj_c: ConvGrad::zeros_like(&self.proj_c),
            proj_s: ConvGrad::zeros_like(&self.proj_s),
            mixer: vec![T::zero(); self.mixer.len()],
            proj_out: ConvGrad::zeros_like(&self.proj_out),
        }
    }

    pub fn cast<U: Scalar>(&self) -> MccParams<U> {
        MccParams {
            proj_c: self.proj_c.cast(),
            proj_s: self.proj_s.cast(),
            mixer: self.mixer.iter().map(|v| U::of(v.as_f64())).collect(),
            proj_out: self.proj_out.cast(),
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.proj_c, &self.proj_s, &self.proj_out]
            .iter()
            .all(|c| c.weight.iter().chain(&c.bias).all(|v| v.is_finite()))
            && self.mixer.iter().all(|v| v.is_finite())
    }

    pub fn write_records(&self, file: &mut WeightFile) {
        let f32s = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<_>>();
        let c = self.channels();
        for (tag, conv) in [
            ("mcc.proj_c", &self.proj_c),
            ("mcc.proj_s", &self.proj_s),
            ("mcc.proj_out", &self.proj_out),
        ] {
            file.push_f32(tag, &conv.weight_shape(), f32s(&conv.weight));
            file.push_f32(format!("{tag}.bias"), &[c], f32s(&conv.bias));
        }
        file.push_f32("mcc.mixer", &[c, c], f32s(&self.mixer));
    }

    pub fn from_weights(file: &WeightFile, channels: usize) -> Result<Self> {
        let c = channels;
        let conv = |tag: &str| -> Result<Conv2d<T>> {
            let mut conv = Conv2d::zeros(c, c, 1);
            conv.weight = file
                .f32(tag, &[c, c, 1, 1])?
                .iter()
                .map(|&v| T::of(v as f64))
                .collect();
            conv.bias = file
                .f32(&format!("{tag}.bias"), &[c])?
                .iter()
                .map(|&v| T::of(v as f64))
                .collect();
            Ok(conv)
        };
        Ok(MccParams {
            proj_c: conv("mcc.proj_c")?,
            proj_s: conv("mcc.proj_s")?,
            mixer: file
                .f32("mcc.mixer", &[c, c])?
                .iter()
                .map(|&v| T::of(v as f64))
                .collect(),
            proj_out: conv("mcc.proj_out")?,
        })
    }

    fn check(&self, f: &FeatureMap<T>) -> Result<()> {
        if f.channels() != self.channels() {
            return Err(Error::ChannelMismatch {
                expected: self.channels(),
                found: f.channels(),
            });
        }
        Ok(())
    }
}

/// One gain per (style batch entry, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct Gains<T> {
    pub batch: usize,
    pub channels: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> Gains<T> {
    /// Gains applied to content batch entry `b`; a single style entry is
    /// shared by the whole content batch.
    pub fn for_content(&self, b: usize) -> &[T] {
        let s = if self.batch == 1 { 0 } else { b };
        &self.values[s * self.channels..(s + 1) * self.channels]
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .map(|g| g.as_f64().abs())
            .fold(0.0, f64::max)
    }
}

/// Intermediate values of one fusion pass.
#[derive(Clone, Debug)]
pub struct FusionTrace<T> {
    pub content_branch: FeatureMap<T>,
    pub style_branch: FeatureMap<T>,
    /// Per-position energies of the style branch, `B_s x C`.
    pub energy: Vec<T>,
    pub gains: Gains<T>,
    pub fused: FeatureMap<T>,
}

/// Style branch `proj_s(normalize(f_s))`.
pub fn style_branch<T: Scalar>(
    params: &MccParams<T>,
    f_s: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    params.check(f_s)?;
    Ok(params.proj_s.forward(&normalize(f_s)))
}

/// Content branch `proj_c(normalize(f_c))`.
pub fn content_branch<T: Scalar>(
    params: &MccParams<T>,
    f_c: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    params.check(f_c)?;
    Ok(params.proj_c.forward(&normalize(f_c)))
}

/// Gains computed from an already projected style branch.
pub fn gains_from_branch<T: Scalar>(
    params: &MccParams<T>,
    style_branch: &FeatureMap<T>,
    mode: FusionMode,
) -> (Vec<T>, Gains<T>) {
    let c = params.channels();
    let energy = channel_energy(style_branch).per_position();
    let mut values = Vec::with_capacity(energy.len());
    for e in energy.chunks(c) {
        for i in 0..c {
            let mixed = match mode {
                FusionMode::MultiChannel => {
                    let row = &params.mixer[i * c..(i + 1) * c];
                    row.iter().zip(e).map(|(&w, &ek)| w * ek).sum::<T>()
                }
                FusionMode::ChannelWise => e[i],
            };
            values.push(T::one() + mixed);
        }
    }
    let gains = Gains {
        batch: style_branch.batch(),
        channels: c,
        values,
    };
    (energy, gains)
}

pub fn gains<T: Scalar>(
    params: &MccParams<T>,
    f_s: &FeatureMap<T>,
    mode: FusionMode,
) -> Result<Gains<T>> {
    Ok(gains_from_branch(params, &style_branch(params, f_s)?, mode).1)
}

/// The fusion stage: scale channel `i` of every content entry by its gain.
pub fn fuse<T: Scalar>(content_branch: &FeatureMap<T>, gains: &Gains<T>) -> FeatureMap<T> {
    let mut out = content_branch.clone();
    for b in 0..out.batch() {
        let g = gains.for_content(b).to_vec();
        for (i, &gi) in g.iter().enumerate() {
            out.plane_mut(b, i).iter_mut().for_each(|v| *v *= gi);
        }
    }
    out
}

fn check_batches<T: Scalar>(f_c: &FeatureMap<T>, f_s: &FeatureMap<T>) -> Result<()> {
    if f_s.batch() != 1 && f_s.batch() != f_c.batch() {
        return Err(Error::Shape(format!(
            "style batch {} must be 1 or match content batch {}",
            f_s.batch(),
            f_c.batch()
        )));
    }
    Ok(())
}

/// Fused feature for content `f_c` and style `f_s` (same channel count;
/// spatial sizes may differ). Output has the content feature's shape.
pub fn mcc_forward<T: Scalar>(
    f_c: &FeatureMap<T>,
    f_s: &FeatureMap<T>,
    params: &MccParams<T>,
    mode: FusionMode,
) -> Result<FeatureMap<T>> {
    Ok(mcc_forward_traced(f_c, f_s, params, mode)?.0)
}

pub fn mcc_forward_traced<T: Scalar>(
    f_c: &FeatureMap<T>,
    f_s: &FeatureMap<T>,
    params: &MccParams<T>,
    mode: FusionMode,
) -> Result<(FeatureMap<T>, FusionTrace<T>)> {
    check_batches(f_c, f_s)?;
    let style = style_branch(params, f_s)?;
    let content = content_branch(params, f_c)?;
    Ok(fuse_branches(params, content, style, mode))
}

/// Fusion from precomputed branches; lets callers reuse one style branch
/// across many content inputs.
pub fn fuse_branches<T: Scalar>(
    params: &MccParams<T>,
    content_branch: FeatureMap<T>,
    style_branch: FeatureMap<T>,
    mode: FusionMode,
) -> (FeatureMap<T>, FusionTrace<T>) {
    let (energy, gains) = gains_from_branch(params, &style_branch, mode);
    let fused = fuse(&content_branch, &gains);
    let out = params.proj_out.forward(&fused);
    let trace = FusionTrace {
        content_branch,
        style_branch,
        energy,
        gains,
        fused,
    };
    (out, trace)
}

/// Accumulate parameter gradients of one fusion pass given `dout`.
///
/// Inputs come from the frozen encoder, so no gradient flows back to them.
pub fn mcc_backward<T: Scalar>(
    params: &MccParams<T>,
    trace: &FusionTrace<T>,
    f_c: &FeatureMap<T>,
    f_s: &FeatureMap<T>,
    mode: FusionMode,
    dout: &FeatureMap<T>,
    grads: &mut MccGrads<T>,
) {
    let c = params.channels();
    let dfused = params
        .proj_out
        .backward(&trace.fused, dout, true, Some(&mut grads.proj_out))
        .expect("input gradient requested");

    // fused = g * content: split the gradient between gains and content.
    let mut dcontent = dfused.clone();
    let mut dgains = vec![T::zero(); trace.gains.values.len()];
    for b in 0..dfused.batch() {
        let s = if trace.gains.batch == 1 { 0 } else { b };
        let g = trace.gains.for_content(b).to_vec();
        for i in 0..c {
            let upstream = dfused.plane(b, i);
            let content = trace.content_branch.plane(b, i);
            dgains[s * c + i] += upstream
                .iter()
                .zip(content)
                .map(|(&u, &x)| u * x)
                .sum::<T>();
            dcontent.plane_mut(b, i).iter_mut().for_each(|v| *v *= g[i]);
        }
    }

    params
        .proj_c
        .backward(&normalize(f_c), &dcontent, false, Some(&mut grads.proj_c));

    // g_i = 1 + sum_k w_ik e_k  (or 1 + e_i)
    let mut denergy = vec![T::zero(); trace.energy.len()];
    for (s, (dg, e)) in dgains.chunks(c).zip(trace.energy.chunks(c)).enumerate() {
        let de = &mut denergy[s * c..(s + 1) * c];
        match mode {
            FusionMode::MultiChannel => {
                for i in 0..c {
                    for k in 0..c {
                        grads.mixer[i * c + k] += dg[i] * e[k];
                        de[k] += params.mixer[i * c + k] * dg[i];
                    }
                }
            }
            FusionMode::ChannelWise => de.copy_from_slice(dg),
        }
    }

    // e_k = sum_p s_kp^2 / N
    let n = T::of(trace.style_branch.plane_len() as f64);
    let two = T::of(2.0);
    let mut dstyle = trace.style_branch.clone();
    for b in 0..dstyle.batch() {
        for k in 0..c {
            let scale = two * denergy[b * c + k] / n;
            dstyle.plane_mut(b, k).iter_mut().for_each(|v| *v *= scale);
        }
    }
    params
        .proj_s
        .backward(&normalize(f_s), &dstyle, false, Some(&mut grads.proj_s));
}

/// `max_i |g_i|` for the given style: the factor by which the fusion stage
/// can stretch a change in the content branch.
pub fn lipschitz_bound<T: Scalar>(
    params: &MccParams<T>,
    f_s: &FeatureMap<T>,
    mode: FusionMode,
) -> Result<f64> {
    Ok(gains(params, f_s, mode)?.max_abs())
}
