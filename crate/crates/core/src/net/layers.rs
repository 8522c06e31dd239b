//! Pointwise, pooling and resampling layers with their backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Real, Tensor5};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    let s = T::from_f64(LEAKY_SLOPE);
    x.map(|v| if v > T::zero() { v } else { s * v })
}

/// In-place variant used by the network's conv blocks.
pub fn leaky_relu_inplace<T: Real>(x: &mut Tensor5<T>) {
    let s = T::from_f64(LEAKY_SLOPE);
    for v in x.data_mut() {
        if *v <= T::zero() {
            *v *= s;
        }
    }
}

/// Gradient through leaky ReLU given the layer input (or its output: the
/// sign is the same for a positive slope).
pub fn leaky_relu_backward<T: Real>(x: &Tensor5<T>, grad: &mut Tensor5<T>) {
    let s = T::from_f64(LEAKY_SLOPE);
    for (g, &v) in grad.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g *= s;
        }
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`. `None` means the layer is the identity.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(len: usize, rate: f64, training: bool, rng: &mut R) -> Option<Vec<T>> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
    if !training || rate == 0.0 {
        return None;
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    Some(
        (0..len)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect(),
    )
}

/// Applies a mask from [`dropout_mask`]; also serves as the backward pass.
pub fn apply_mask<T: Real>(x: &mut Tensor5<T>, mask: Option<&[T]>) {
    if let Some(m) = mask {
        for (v, &k) in x.data_mut().iter_mut().zip(m) {
            *v *= k;
        }
    }
}

pub fn dropout<T: Real, R: Rng + ?Sized>(x: &Tensor5<T>, rate: f64, training: bool, rng: &mut R) -> Tensor5<T> {
    let mask = dropout_mask::<T, R>(x.len(), rate, training, rng);
    let mut y = x.clone();
    apply_mask(&mut y, mask.as_deref());
    y
}

/// 2×2×2 max pooling with stride 2. Returns the pooled tensor and, per
/// output element, the flat input offset of the first maximal element
/// (scan order x, then y, then z).
pub fn maxpool3d<T: Real>(x: &Tensor5<T>) -> Result<(Tensor5<T>, Vec<usize>)> {
    let [n, c, nx, ny, nz] = x.shape();
    if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 {
        return Err(Error::OddSpatialDims([nx, ny, nz]));
    }
    let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
    let mut out = Tensor5::zeros([n, c, ox, oy, oz]);
    let mut arg = Vec::with_capacity(out.len());
    let data = x.data();
    let mut o = 0;
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * nx * ny * nz;
            for k in 0..oz {
                for j in 0..oy {
                    for i in 0..ox {
                        let mut best = base + ((2 * k) * ny + 2 * j) * nx + 2 * i;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let p = base + ((2 * k + dz) * ny + 2 * j + dy) * nx + 2 * i + dx;
                                    if data[p] > data[best] {
                                        best = p;
                                    }
                                }
                            }
                        }
                        out.data_mut()[o] = data[best];
                        arg.push(best);
                        o += 1;
                    }
                }
            }
        }
    }
    Ok((out, arg))
}

/// Routes each pooled gradient to its recorded argmax.
pub fn maxpool3d_backward<T: Real>(in_shape: [usize; 5], arg: &[usize], grad: &Tensor5<T>) -> Tensor5<T> {
    let mut gx = Tensor5::zeros(in_shape);
    for (&p, &g) in arg.iter().zip(grad.data()) {
        gx.data_mut()[p] += g;
    }
    gx
}

/// Source taps for output index `i` of a 2× upsampling along an axis of
/// length `n`: centers map to `(i + 0.5) / 2 - 0.5`, clamped to the grid.
#[inline]
fn up_taps(i: usize, n: usize) -> (usize, usize, f64) {
    let m = i / 2;
    if i % 2 == 0 {
        // m - 0.25
        if m == 0 { (0, 0, 0.0) } else { (m - 1, m, 0.75) }
    } else {
        // m + 0.25
        if m + 1 >= n { (m, m, 0.0) } else { (m, m + 1, 0.25) }
    }
}

/// Doubles one spatial axis (`axis` 0 = x, 1 = y, 2 = z).
fn upsample_axis<T: Real>(x: &Tensor5<T>, axis: usize) -> Tensor5<T> {
    let [n, c, nx, ny, nz] = x.shape();
    let mut shape = x.shape();
    shape[2 + axis] *= 2;
    let mut out = Tensor5::zeros(shape);
    let dims = [nx, ny, nz];
    let len = dims[axis];
    // element stride along the axis and the block structure around it
    let inner: usize = dims[..axis].iter().product();
    let outer = n * c * dims[axis + 1..].iter().product::<usize>();
    let src = x.data();
    let dst = out.data_mut();
    let taps: Vec<(usize, usize, T, T)> = (0..2 * len)
        .map(|i| {
            let (a, b, w) = up_taps(i, len);
            (a, b, T::from_f64(1.0 - w), T::from_f64(w))
        })
        .collect();
    for o in 0..outer {
        let sb = o * len * inner;
        let db = o * 2 * len * inner;
        for (i, &(a, b, wa, wb)) in taps.iter().enumerate() {
            let ra = &src[sb + a * inner..sb + (a + 1) * inner];
            let rb = &src[sb + b * inner..sb + (b + 1) * inner];
            let d = &mut dst[db + i * inner..db + (i + 1) * inner];
            for ((d, &va), &vb) in d.iter_mut().zip(ra).zip(rb) {
                *d = wa * va + wb * vb;
            }
        }
    }
    out
}

/// Transpose of [`upsample_axis`].
fn upsample_axis_backward<T: Real>(g: &Tensor5<T>, axis: usize) -> Tensor5<T> {
    let mut shape = g.shape();
    shape[2 + axis] /= 2;
    let mut out = Tensor5::zeros(shape);
    let [n, c, nx, ny, nz] = shape;
    let dims = [nx, ny, nz];
    let len = dims[axis];
    let inner: usize = dims[..axis].iter().product();
    let outer = n * c * dims[axis + 1..].iter().product::<usize>();
    let src = g.data();
    let dst = out.data_mut();
    for o in 0..outer {
        let sb = o * 2 * len * inner;
        let db = o * len * inner;
        for i in 0..2 * len {
            let (a, b, w) = up_taps(i, len);
            let (wa, wb) = (T::from_f64(1.0 - w), T::from_f64(w));
            for q in 0..inner {
                let v = src[sb + i * inner + q];
                dst[db + a * inner + q] += wa * v;
                dst[db + b * inner + q] += wb * v;
            }
        }
    }
    out
}

/// Trilinear 2× upsampling of all spatial axes.
pub fn upsample_trilinear<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    let y = upsample_axis(x, 0);
    let y = upsample_axis(&y, 1);
    upsample_axis(&y, 2)
}

pub fn upsample_trilinear_backward<T: Real>(g: &Tensor5<T>) -> Result<Tensor5<T>> {
    let [_, _, nx, ny, nz] = g.shape();
    if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 {
        return Err(Error::OddSpatialDims([nx, ny, nz]));
    }
    let g = upsample_axis_backward(g, 2);
    let g = upsample_axis_backward(&g, 1);
    Ok(upsample_axis_backward(&g, 0))
}

/// He-normal samples with standard deviation `sqrt(2 / fan_in)`.
pub fn he_init<T: Real, R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    assert!(fan_in > 0, "fan_in must be positive");
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    (0..len).map(|_| T::from_f64(normal.sample(rng))).collect()
}
