//! Dense `batch x channels x height x width` activation blocks.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A 4-D activation block stored contiguously in NCHW order.
///
/// Images are feature maps with three channels holding RGB in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    shape: [usize; 4],
    data: Vec<T>,
}

/// Images are feature maps with three RGB channels.
pub type ImagePlane<T = f32> = FeatureMap<T>;

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: [usize; 4], value: T) -> Self {
        FeatureMap {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{} values cannot fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(FeatureMap { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([b, ch, y, x]));
                    }
                }
            }
        }
        FeatureMap { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Spatial positions per channel.
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    fn offset(&self, b: usize, c: usize) -> usize {
        (b * self.shape[1] + c) * self.plane_len()
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(b, c) + y * self.shape[3] + x]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        let o = self.offset(b, c) + y * self.shape[3] + x;
        self.data[o] = v;
    }

    /// All channels of one batch entry, `channels * height * width` values.
    pub fn sample(&self, b: usize) -> &[T] {
        let len = self.shape[1] * self.plane_len();
        &self.data[b * len..(b + 1) * len]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [T] {
        let len = self.shape[1] * self.plane_len();
        &mut self.data[b * len..(b + 1) * len]
    }

    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let o = self.offset(b, c);
        &self.data[o..o + self.plane_len()]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let o = self.offset(b, c);
        let n = self.plane_len();
        &mut self.data[o..o + n]
    }

    /// Copy of batch entries `range`.
    pub fn slice_batch(&self, range: std::ops::Range<usize>) -> Self {
        let len = self.shape[1] * self.plane_len();
        FeatureMap {
            shape: [range.len(), self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[range.start * len..range.end * len].to_vec(),
        }
    }

    /// Concatenate along the batch axis.
    pub fn stack(items: &[FeatureMap<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero feature maps".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(|f| f.len()).sum());
        let mut n = 0;
        for item in items {
            let [bn, bc, bh, bw] = item.shape;
            if (bc, bh, bw) != (c, h, w) {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    item.shape, first.shape
                )));
            }
            n += bn;
            data.extend_from_slice(&item.data);
        }
        Ok(FeatureMap {
            shape: [n, c, h, w],
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &FeatureMap<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm.
    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &FeatureMap<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}
