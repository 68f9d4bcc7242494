//! Convolution, pooling and resampling primitives with explicit backward
//! passes.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

/// Upper bound on im2col scratch per chunk, in elements.
const COLUMN_BUDGET: usize = 1 << 22;

/// Reflect an index in `-1..=len` back into `0..len`.
#[inline]
fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= len {
        2 * len - 2 - i
    } else {
        i
    };
    r as usize
}

/// Square convolution with stride 1. 3x3 kernels use reflection
/// padding of one pixel; 1x1 kernels need none.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out x in x kernel x kernel`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Accumulated parameter gradients for one [`Conv2d`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvGrad<T> {
    pub fn zeros_like(conv: &Conv2d<T>) -> Self {
        ConvGrad {
            weight: vec![T::zero(); conv.weight.len()],
            bias: vec![T::zero(); conv.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ConvGrad<T>) {
        for (a, &b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, &b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels");
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// Weights and biases drawn from `U(-b, b)` with `b = gain / sqrt(fan_in)`.
    pub fn uniform(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel);
        let bound = gain / ((in_channels * kernel * kernel) as f64).sqrt();
        for w in conv.weight.iter_mut().chain(conv.bias.iter_mut()) {
            *w = T::of(rng.random_range(-bound..bound));
        }
        conv
    }

    /// 1x1 convolution equal to the identity plus `U(-noise, noise)` jitter.
    pub fn near_identity(channels: usize, noise: f64, rng: &mut impl Rng) -> Self {
        let mut conv = Self::zeros(channels, channels, 1);
        for o in 0..channels {
            for i in 0..channels {
                let base = if o == i { 1.0 } else { 0.0 };
                let jitter = if noise > 0.0 {
                    rng.random_range(-noise..noise)
                } else {
                    0.0
                };
                conv.weight[o * channels + i] = T::of(base + jitter);
            }
        }
        conv
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ]
    }

    fn taps(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            weight: self.weight.iter().map(|v| U::of(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channels");
        let mut y = FeatureMap::zeros([n, self.out_channels, h, w]);
        let hw = h * w;
        for b in 0..n {
            let xs = x.sample(b);
            let ys = y.sample_mut(b);
            if self.kernel == 1 {
                T::gemm(
                    self.out_channels,
                    c,
                    hw,
                    T::one(),
                    &self.weight,
                    c,
                    1,
                    xs,
                    hw,
                    1,
                    T::zero(),
                    ys,
                    hw,
                    1,
                );
            } else {
                let padded = pad_reflect(xs, c, h, w);
                for (r0, r1) in row_chunks(self.taps(), h, w) {
                    let cols = im2col(&padded, c, w, r0, r1);
                    let m = (r1 - r0) * w;
                    T::gemm(
                        self.out_channels,
                        self.taps(),
                        m,
                        T::one(),
                        &self.weight,
                        self.taps(),
                        1,
                        &cols,
                        m,
                        1,
                        T::zero(),
                        &mut ys[r0 * w..],
                        hw,
                        1,
                    );
                }
            }
            for (o, plane) in ys.chunks_mut(hw).enumerate() {
                let bias = self.bias[o];
                plane.iter_mut().for_each(|v| *v += bias);
            }
        }
        y
    }

    /// Backpropagate `dy` through the convolution applied to `x`.
    ///
    /// Parameter gradients accumulate into `grad` when given; the input
    /// gradient is returned when `input_grad` is set.
    pub fn backward(
        &self,
        x: &FeatureMap<T>,
        dy: &FeatureMap<T>,
        input_grad: bool,
        mut grad: Option<&mut ConvGrad<T>>,
    ) -> Option<FeatureMap<T>> {
        let [n, c, h, w] = x.shape();
        assert_eq!(dy.shape(), [n, self.out_channels, h, w], "conv dy shape");
        let hw = h * w;
        let k = self.taps();
        let mut dx = input_grad.then(|| FeatureMap::zeros(x.shape()));
        for b in 0..n {
            let dys = dy.sample(b);
            if let Some(g) = grad.as_deref_mut() {
                for (o, plane) in dys.chunks(hw).enumerate() {
                    g.bias[o] += plane.iter().copied().sum::<T>();
                }
            }
            if self.kernel == 1 {
                if let Some(g) = grad.as_deref_mut() {
                    T::gemm(
                        self.out_channels,
                        hw,
                        c,
                        T::one(),
                        dys,
                        hw,
                        1,
                        x.sample(b),
                        1,
                        hw,
                        T::one(),
                        &mut g.weight,
                        c,
                        1,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    T::gemm(
                        c,
                        self.out_channels,
                        hw,
                        T::one(),
                        &self.weight,
                        1,
                        c,
                        dys,
                        hw,
                        1,
                        T::zero(),
                        dx.sample_mut(b),
                        hw,
                        1,
                    );
                }
                continue;
            }
            let padded = pad_reflect(x.sample(b), c, h, w);
            let mut dpadded = dx.as_ref().map(|_| vec![T::zero(); padded.len()]);
            for (r0, r1) in row_chunks(k, h, w) {
                let m = (r1 - r0) * w;
                if let Some(g) = grad.as_deref_mut() {
                    let cols = im2col(&padded, c, w, r0, r1);
                    T::gemm(
                        self.out_channels,
                        m,
                        k,
                        T::one(),
                        &dys[r0 * w..],
                        hw,
                        1,
                        &cols,
                        1,
                        m,
                        T::one(),
                        &mut g.weight,
                        k,
                        1,
                    );
                }
                if let Some(dp) = dpadded.as_mut() {
                    let mut dcols = vec![T::zero(); k * m];
                    T::gemm(
                        k,
                        self.out_channels,
                        m,
                        T::one(),
                        &self.weight,
                        1,
                        k,
                        &dys[r0 * w..],
                        hw,
                        1,
                        T::zero(),
                        &mut dcols,
                        m,
                        1,
                    );
                    col2im_add(&dcols, dp, c, w, r0, r1);
                }
            }
            if let (Some(dp), Some(dx)) = (dpadded, dx.as_mut()) {
                unpad_reflect_add(&dp, dx.sample_mut(b), c, h, w);
            }
        }
        dx
    }
}

fn row_chunks(taps: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    let rows = (COLUMN_BUDGET / (taps * w).max(1)).clamp(1, h);
    (0..h)
        .step_by(rows)
        .map(|r0| (r0, (r0 + rows).min(h)))
        .collect()
}

fn pad_reflect<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    assert!(h >= 2 && w >= 2, "reflection padding needs at least 2x2");
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![T::zero(); c * ph * pw];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ph * pw..(ch + 1) * ph * pw];
        for py in 0..ph {
            let sy = reflect(py as isize - 1, h);
            let row = &src[sy * w..(sy + 1) * w];
            let drow = &mut dst[py * pw..(py + 1) * pw];
            drow[1..=w].copy_from_slice(row);
            drow[0] = row[1];
            drow[w + 1] = row[w - 2];
        }
    }
    out
}

fn unpad_reflect_add<T: Scalar>(dp: &[T], dx: &mut [T], c: usize, h: usize, w: usize) {
    let (ph, pw) = (h + 2, w + 2);
    for ch in 0..c {
        let src = &dp[ch * ph * pw..(ch + 1) * ph * pw];
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for py in 0..ph {
            let sy = reflect(py as isize - 1, h);
            for px in 0..pw {
                let sx = reflect(px as isize - 1, w);
                dst[sy * w + sx] += src[py * pw + px];
            }
        }
    }
}

/// Unfold output rows `r0..r1` of a padded `c x (h+2) x (w+2)` block into a
/// `(c*9) x ((r1-r0)*w)` matrix.
fn im2col<T: Scalar>(padded: &[T], c: usize, w: usize, r0: usize, r1: usize) -> Vec<T> {
    let pw = w + 2;
    let ph_len = padded.len() / c;
    let m = (r1 - r0) * w;
    let mut cols = vec![T::zero(); c * 9 * m];
    for ch in 0..c {
        let plane = &padded[ch * ph_len..(ch + 1) * ph_len];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 3 + ky) * 3 + kx) * m..][..m];
                for y in r0..r1 {
                    let src = &plane[(y + ky) * pw + kx..][..w];
                    row[(y - r0) * w..(y - r0 + 1) * w].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &[T], padded: &mut [T], c: usize, w: usize, r0: usize, r1: usize) {
    let pw = w + 2;
    let ph_len = padded.len() / c;
    let m = (r1 - r0) * w;
    for ch in 0..c {
        let plane = &mut padded[ch * ph_len..(ch + 1) * ph_len];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 3 + ky) * 3 + kx) * m..][..m];
                for y in r0..r1 {
                    let dst = &mut plane[(y + ky) * pw + kx..][..w];
                    for (d, &s) in dst.iter_mut().zip(&row[(y - r0) * w..(y - r0 + 1) * w]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub fn relu<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of ReLU given its output `y`.
pub fn relu_backward<T: Scalar>(y: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
    let data = y
        .as_slice()
        .iter()
        .zip(dy.as_slice())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    FeatureMap::from_vec(y.shape(), data).expect("relu_backward shape")
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// Returns the pooled map and the argmax offset within each input plane.
pub fn max_pool2<T: Scalar>(x: &FeatureMap<T>) -> (FeatureMap<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = FeatureMap::zeros([n, c, oh, ow]);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = y.plane_mut(b, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (2 * oy) * w + 2 * ox;
                    for cand in [best + 1, best + w, best + w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    dst[oy * ow + ox] = src[best];
                    idx.push(best as u32);
                }
            }
        }
    }
    (y, idx)
}

pub fn max_pool2_backward<T: Scalar>(
    input_shape: [usize; 4],
    argmax: &[u32],
    dy: &FeatureMap<T>,
) -> FeatureMap<T> {
    let [n, c, _, _] = input_shape;
    let mut dx = FeatureMap::zeros(input_shape);
    let per = dy.plane_len();
    for b in 0..n {
        for ch in 0..c {
            let g = dy.plane(b, ch);
            let ids = &argmax[(b * c + ch) * per..(b * c + ch + 1) * per];
            let dst = dx.plane_mut(b, ch);
            for (&i, &v) in ids.iter().zip(g) {
                dst[i as usize] += v;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let [n, c, h, w] = x.shape();
    let mut y = FeatureMap::zeros([n, c, 2 * h, 2 * w]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = y.plane_mut(b, ch);
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Scalar>(dy: &FeatureMap<T>) -> FeatureMap<T> {
    let [n, c, h2, w2] = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = FeatureMap::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let src = dy.plane(b, ch);
            let dst = dx.plane_mut(b, ch);
            for yy in 0..h2 {
                for xx in 0..w2 {
                    dst[(yy / 2) * w + xx / 2] += src[yy * w2 + xx];
                }
            }
        }
    }
    dx
}

/// Per-sample, per-channel mean and population variance.
pub fn channel_moments<T: Scalar>(x: &FeatureMap<T>) -> Vec<(T, T)> {
    let n = T::of(x.plane_len() as f64);
    (0..x.batch())
        .flat_map(|b| (0..x.channels()).map(move |c| (b, c)))
        .map(|(b, c)| {
            let plane = x.plane(b, c);
            let mean = plane.iter().copied().sum::<T>() / n;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            (mean, var)
        })
        .collect()
}

/// Instance normalization without affine terms.
pub fn instance_norm<T: Scalar>(x: &FeatureMap<T>, eps: f64) -> FeatureMap<T> {
    let eps = T::of(eps);
    let moments = channel_moments(x);
    let mut y = x.clone();
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let (mean, var) = moments[b * x.channels() + c];
            let inv = T::one() / (var + eps).sqrt();
            y.plane_mut(b, c)
                .iter_mut()
                .for_each(|v| *v = (*v - mean) * inv);
        }
    }
    y
}
