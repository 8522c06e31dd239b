use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

/// Floating point element type of the network.
///
/// Training runs in `f32`; `f64` instantiations exist so gradient checks can
/// use finite differences at tight tolerances.
pub trait Real:
    num_traits::Float
    + Default
    + Debug
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `self * b + c`, fused when the target has FMA.
    #[inline(always)]
    fn madd(self, b: Self, c: Self) -> Self {
        if cfg!(target_feature = "fma") {
            self.mul_add(b, c)
        } else {
            self * b + c
        }
    }
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense `(batch, channels, nx, ny, nz)` tensor, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Real> Tensor5<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor5 {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor5 { shape, data })
    }

    pub fn from_fn(shape: [usize; 5], mut f: impl FnMut([usize; 5]) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for b in 0..shape[0] {
            for c in 0..shape[1] {
                for z in 0..shape[4] {
                    for y in 0..shape[3] {
                        for x in 0..shape[2] {
                            data.push(f([b, c, x, y, z]));
                        }
                    }
                }
            }
        }
        Tensor5 { shape, data }
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn nvox(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 5]) -> usize {
        let [_, c, nx, ny, nz] = self.shape;
        (((idx[0] * c + idx[1]) * nz + idx[4]) * ny + idx[3]) * nx + idx[2]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 5]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 5], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Contiguous slice of one channel of one batch item.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let n = self.nvox();
        let o = (b * self.shape[1] + c) * n;
        &self.data[o..o + n]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let n = self.nvox();
        let o = (b * self.shape[1] + c) * n;
        &mut self.data[o..o + n]
    }

    pub fn add_assign(&mut self, other: &Tensor5<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor5<T> {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor5<U> {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }

    /// Channel-wise concatenation `a ⊕ b`.
    pub fn concat_channels(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<Tensor5<T>> {
        if a.shape[0] != b.shape[0] || a.spatial() != b.spatial() {
            return Err(Error::ShapeMismatch(format!(
                "cannot concatenate {:?} and {:?}",
                a.shape, b.shape
            )));
        }
        let [n, ca, ..] = a.shape;
        let cb = b.shape[1];
        let v = a.nvox();
        let mut data = Vec::with_capacity(n * (ca + cb) * v);
        for bi in 0..n {
            data.extend_from_slice(&a.data[bi * ca * v..(bi + 1) * ca * v]);
            data.extend_from_slice(&b.data[bi * cb * v..(bi + 1) * cb * v]);
        }
        let mut shape = a.shape;
        shape[1] = ca + cb;
        Ok(Tensor5 { shape, data })
    }

    /// Splits channels `[0, at)` and `[at, C)`; inverse of [`concat_channels`](Self::concat_channels).
    pub fn split_channels(&self, at: usize) -> (Tensor5<T>, Tensor5<T>) {
        let [n, c, ..] = self.shape;
        let v = self.nvox();
        let mut a = Vec::with_capacity(n * at * v);
        let mut b = Vec::with_capacity(n * (c - at) * v);
        for bi in 0..n {
            let base = bi * c * v;
            a.extend_from_slice(&self.data[base..base + at * v]);
            b.extend_from_slice(&self.data[base + at * v..base + c * v]);
        }
        let mut sa = self.shape;
        sa[1] = at;
        let mut sb = self.shape;
        sb[1] = c - at;
        (Tensor5 { shape: sa, data: a }, Tensor5 { shape: sb, data: b })
    }
}
