//! Same-padded 3D cross-correlation.
//!
//! Each channel is copied into a zero-padded buffer laid out flat, so a
//! kernel tap becomes a constant offset into that buffer. Output positions
//! are computed over the contiguous flat range spanning the interior; the
//! values that land on border positions are discarded. This turns the
//! convolution into long runs of fused multiply-adds over contiguous memory
//! with a block of output channels held in accumulators.

use super::tensor::{Real, Tensor5};
use crate::error::{Error, Result};

/// Lanes per accumulator row.
const CH: usize = 32;
/// Output channels per register block.
const NB: usize = 8;

struct PadLayout {
    dims: [usize; 3],
    pdims: [usize; 3],
    r: usize,
    /// Per-channel stride, padded volume plus `CH` slack.
    stride: usize,
    offs: Vec<isize>,
    p0: usize,
    p1: usize,
}

impl PadLayout {
    fn new(dims: [usize; 3], ks: usize) -> Self {
        let r = ks / 2;
        let pdims = [dims[0] + 2 * r, dims[1] + 2 * r, dims[2] + 2 * r];
        let vp = pdims[0] * pdims[1] * pdims[2];
        let (px, pxy) = (pdims[0] as isize, (pdims[0] * pdims[1]) as isize);
        let ri = r as isize;
        let mut offs = Vec::with_capacity(ks * ks * ks);
        for oz in 0..ks as isize {
            for oy in 0..ks as isize {
                for ox in 0..ks as isize {
                    offs.push((oz - ri) * pxy + (oy - ri) * px + (ox - ri));
                }
            }
        }
        let at = |x: usize, y: usize, z: usize| (z * pdims[1] + y) * pdims[0] + x;
        PadLayout {
            dims,
            pdims,
            r,
            stride: vp + CH,
            offs,
            p0: at(r, r, r),
            p1: at(dims[0] + r - 1, dims[1] + r - 1, dims[2] + r - 1),
        }
    }

    #[inline]
    fn padded_index(&self, x: usize, y: usize, z: usize) -> usize {
        ((z + self.r) * self.pdims[1] + y + self.r) * self.pdims[0] + x + self.r
    }

    /// Copies channels of batch item `b` into a fresh zero-padded buffer.
    fn pad<T: Real>(&self, t: &Tensor5<T>, b: usize) -> Vec<T> {
        let c = t.channels();
        let mut buf = vec![T::zero(); c * self.stride];
        let [nx, ny, nz] = self.dims;
        for ch in 0..c {
            let src = t.plane(b, ch);
            let dst = &mut buf[ch * self.stride..];
            for z in 0..nz {
                for y in 0..ny {
                    let s = (z * ny + y) * nx;
                    let d = self.padded_index(0, y, z);
                    dst[d..d + nx].copy_from_slice(&src[s..s + nx]);
                }
            }
        }
        buf
    }

    /// Copies the interior of a padded buffer into batch item `b` of `t`.
    fn unpad<T: Real>(&self, buf: &[T], t: &mut Tensor5<T>, b: usize) {
        let c = t.channels();
        let [nx, ny, nz] = self.dims;
        for ch in 0..c {
            let src = &buf[ch * self.stride..];
            let dst = t.plane_mut(b, ch);
            for z in 0..nz {
                for y in 0..ny {
                    let d = (z * ny + y) * nx;
                    let s = self.padded_index(0, y, z);
                    dst[d..d + nx].copy_from_slice(&src[s..s + nx]);
                }
            }
        }
    }
}

/// `out[co][p] = bias[co] + Σ_ci Σ_t w[co][ci][t] · inp[ci][p + offs[t]]`
/// for output channels `co0..co0 + N`.
#[allow(clippy::too_many_arguments)]
fn correlate_block<T: Real, const N: usize>(
    lay: &PadLayout,
    inp: &[T],
    cin: usize,
    w: &[T],
    bias: &[T],
    co0: usize,
    out: &mut [T],
) {
    let taps = lay.offs.len();
    let stride = lay.stride;
    // weights of this block as [ci][t][b]
    let mut wb = vec![T::zero(); cin * taps * N];
    for ci in 0..cin {
        for t in 0..taps {
            for b in 0..N {
                wb[(ci * taps + t) * N + b] = w[((co0 + b) * cin + ci) * taps + t];
            }
        }
    }
    let mut p = lay.p0;
    while p <= lay.p1 {
        let mut acc = [[T::zero(); CH]; N];
        for (b, row) in acc.iter_mut().enumerate() {
            *row = [bias[co0 + b]; CH];
        }
        for ci in 0..cin {
            let base = ci * stride + p;
            let wci = &wb[ci * taps * N..(ci + 1) * taps * N];
            for (&d, wt) in lay.offs.iter().zip(wci.chunks_exact(N)) {
                let s = (base as isize + d) as usize;
                let src: &[T; CH] = inp[s..s + CH].try_into().unwrap();
                let wt: &[T; N] = wt.try_into().unwrap();
                for (row, &wv) in acc.iter_mut().zip(wt) {
                    for l in 0..CH {
                        row[l] = wv.madd(src[l], row[l]);
                    }
                }
            }
        }
        for (b, row) in acc.iter().enumerate() {
            let o = (co0 + b) * stride + p;
            out[o..o + CH].copy_from_slice(row);
        }
        p += CH;
    }
}

fn correlate<T: Real>(lay: &PadLayout, inp: &[T], cin: usize, w: &[T], bias: &[T], cout: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cout * lay.stride];
    let mut co = 0;
    while co + NB <= cout {
        correlate_block::<T, NB>(lay, inp, cin, w, bias, co, &mut out);
        co += NB;
    }
    while co < cout {
        correlate_block::<T, 1>(lay, inp, cin, w, bias, co, &mut out);
        co += 1;
    }
    out
}

/// Positions per tile in the kernel-gradient pass; sized so one tile of
/// gradient rows plus the input halo of one channel stays in L1.
const PB: usize = 512;

/// `acc[b][l] += Σ_k g[b][k + l] · src[k + l]` over `k = 0, CH, .. < n`.
///
/// # Safety
/// `src` and every `g[b]` must be valid for `n.next_multiple_of(CH)` reads.
#[inline(always)]
unsafe fn dot_rows<T: Real, const N: usize>(acc: &mut [[T; CH]; N], g: &[*const T; N], src: *const T, n: usize) {
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
    if N == NB && std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() {
        // SAFETY: T is f32 and N == NB, so the casts only rename types.
        unsafe {
            return dot_rows_avx512(
                &mut *(acc as *mut [[T; CH]; N] as *mut [[f32; CH]; NB]),
                &*(g as *const [*const T; N] as *const [*const f32; NB]),
                src as *const f32,
                n,
            );
        }
    }
    let mut k = 0;
    while k < n {
        for (row, &gp) in acc.iter_mut().zip(g) {
            for l in 0..CH {
                unsafe { row[l] = (*gp.add(k + l)).madd(*src.add(k + l), row[l]) };
            }
        }
        k += CH;
    }
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
#[inline(always)]
unsafe fn dot_rows_avx512(acc: &mut [[f32; CH]; NB], g: &[*const f32; NB], src: *const f32, n: usize) {
    use std::arch::x86_64::*;
    unsafe {
        let mut a = [_mm512_setzero_ps(); 2 * NB];
        for b in 0..NB {
            a[2 * b] = _mm512_loadu_ps(acc[b].as_ptr());
            a[2 * b + 1] = _mm512_loadu_ps(acc[b].as_ptr().add(16));
        }
        let mut k = 0;
        while k < n {
            let s0 = _mm512_loadu_ps(src.add(k));
            let s1 = _mm512_loadu_ps(src.add(k + 16));
            for b in 0..NB {
                a[2 * b] = _mm512_fmadd_ps(_mm512_loadu_ps(g[b].add(k)), s0, a[2 * b]);
                a[2 * b + 1] = _mm512_fmadd_ps(_mm512_loadu_ps(g[b].add(k + 16)), s1, a[2 * b + 1]);
            }
            k += CH;
        }
        for b in 0..NB {
            _mm512_storeu_ps(acc[b].as_mut_ptr(), a[2 * b]);
            _mm512_storeu_ps(acc[b].as_mut_ptr().add(16), a[2 * b + 1]);
        }
    }
}

/// `dw[co][ci][t] += Σ_p gout[co][p] · inp[ci][p + offs[t]]` for output
/// channels `co0..co0 + N`; `gout` must be zero outside the interior.
///
/// Lane-wise partial sums live in `part` across tiles and are reduced once
/// at the end.
fn weight_grad_block<T: Real, const N: usize>(
    lay: &PadLayout,
    inp: &[T],
    cin: usize,
    gout: &[T],
    co0: usize,
    dw: &mut [T],
) {
    let taps = lay.offs.len();
    let stride = lay.stride;
    // p1 + CH <= stride keeps every chunk of a tile inside its channel
    debug_assert!(lay.p1 + CH <= stride);
    assert!(inp.len() >= cin * stride && gout.len() >= (co0 + N) * stride);
    let mut part = vec![[[T::zero(); CH]; N]; cin * taps];
    let mut tile = lay.p0;
    while tile <= lay.p1 {
        let n = (tile + PB).min(lay.p1 + 1) - tile;
        let g: [*const T; N] = std::array::from_fn(|b| gout[(co0 + b) * stride + tile..].as_ptr());
        for ci in 0..cin {
            for (t, &d) in lay.offs.iter().enumerate() {
                let s0 = ((ci * stride + tile) as isize + d) as usize;
                debug_assert!(s0 + n.next_multiple_of(CH) <= inp.len());
                // SAFETY: offsets stay within the channel's padded block
                // (checked above), so every chunk read is in bounds.
                unsafe { dot_rows(&mut part[ci * taps + t], &g, inp[s0..].as_ptr(), n) };
            }
        }
        tile += n;
    }
    for ci in 0..cin {
        for t in 0..taps {
            for (b, row) in part[ci * taps + t].iter().enumerate() {
                dw[((co0 + b) * cin + ci) * taps + t] += row.iter().fold(T::zero(), |a, &x| a + x);
            }
        }
    }
}

fn weight_grad<T: Real>(lay: &PadLayout, inp: &[T], cin: usize, gout: &[T], cout: usize, dw: &mut [T]) {
    let mut co = 0;
    while co + NB <= cout {
        weight_grad_block::<T, NB>(lay, inp, cin, gout, co, dw);
        co += NB;
    }
    if co < cout {
        // zero-extend the remaining channels to a full block
        let rem = cout - co;
        let stride = lay.stride;
        let mut g = vec![T::zero(); NB * stride];
        g[..rem * stride].copy_from_slice(&gout[co * stride..cout * stride]);
        let per = cin * lay.offs.len();
        let mut tmp = vec![T::zero(); NB * per];
        weight_grad_block::<T, NB>(lay, inp, cin, &g, 0, &mut tmp);
        for (d, &t) in dw[co * per..].iter_mut().zip(&tmp[..rem * per]) {
            *d += t;
        }
    }
}

fn check_shapes<T: Real>(input: &Tensor5<T>, weight: &[T], bias: &[T], cout: usize, ks: usize) -> Result<usize> {
    if ks % 2 == 0 {
        return Err(Error::ShapeMismatch(format!("kernel size {ks} is not odd")));
    }
    let cin = input.channels();
    if weight.len() != cout * cin * ks * ks * ks || bias.len() != cout {
        return Err(Error::ShapeMismatch(format!(
            "kernel of {} values / bias of {} for {cin}->{cout} channels, size {ks}",
            weight.len(),
            bias.len()
        )));
    }
    Ok(cin)
}

/// Forward pass. `weight` is laid out `[cout][cin][kz][ky][kx]`.
pub fn conv3d_forward<T: Real>(
    input: &Tensor5<T>,
    weight: &[T],
    bias: &[T],
    cout: usize,
    ks: usize,
) -> Result<Tensor5<T>> {
    let cin = check_shapes(input, weight, bias, cout, ks)?;
    let lay = PadLayout::new(input.spatial(), ks);
    let [n, _, nx, ny, nz] = input.shape();
    let mut out = Tensor5::zeros([n, cout, nx, ny, nz]);
    for b in 0..n {
        let padded = lay.pad(input, b);
        let res = correlate(&lay, &padded, cin, weight, bias, cout);
        lay.unpad(&res, &mut out, b);
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor5<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Backward pass: gradients with respect to input (if requested), kernel and bias.
pub fn conv3d_backward<T: Real>(
    input: &Tensor5<T>,
    weight: &[T],
    grad_out: &Tensor5<T>,
    ks: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let cout = grad_out.channels();
    let cin = input.channels();
    if grad_out.spatial() != input.spatial() || grad_out.batch() != input.batch() {
        return Err(Error::ShapeMismatch(format!(
            "grad {:?} vs input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let taps = ks * ks * ks;
    if weight.len() != cout * cin * taps {
        return Err(Error::ShapeMismatch("kernel size".into()));
    }
    let lay = PadLayout::new(input.spatial(), ks);

    // Transposed, spatially flipped kernel for the input gradient.
    let flipped: Vec<T> = if need_input {
        let mut f = vec![T::zero(); weight.len()];
        for co in 0..cout {
            for ci in 0..cin {
                for t in 0..taps {
                    f[(ci * cout + co) * taps + (taps - 1 - t)] = weight[(co * cin + ci) * taps + t];
                }
            }
        }
        f
    } else {
        Vec::new()
    };
    let zero_bias = vec![T::zero(); cin];

    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); cout];
    let mut din = need_input.then(|| Tensor5::zeros(input.shape()));
    for b in 0..input.batch() {
        let padded_in = lay.pad(input, b);
        let padded_g = lay.pad(grad_out, b);
        weight_grad(&lay, &padded_in, cin, &padded_g, cout, &mut dw);
        for (co, slot) in db.iter_mut().enumerate() {
            *slot += grad_out.plane(b, co).iter().fold(T::zero(), |a, &x| a + x);
        }
        if let Some(din) = din.as_mut() {
            let res = correlate(&lay, &padded_g, cout, &flipped, &zero_bias, cin);
            lay.unpad(&res, din, b);
        }
    }
    Ok(ConvGrads {
        input: din,
        weight: dw,
        bias: db,
    })
}
