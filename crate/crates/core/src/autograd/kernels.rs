//! Dense kernels over contiguous NCHW buffers shared by the tape forward and
//! backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::scalar::Scalar;

/// Unfolds one `c x h x w` image into a `(c*k*k) x (h*w)` column matrix for a
/// stride-1 "same" convolution with zero padding `pad`.
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, out: &mut [T]) {
    let hw = h * w;
    debug_assert_eq!(out.len(), c * k * k * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * hw..(row + 1) * hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let line = &mut dst[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into an image.
pub fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, out: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out = a * b` (or `out += a * b` when `accumulate`) on row-major slices.
pub fn matmul_into<T: Scalar>(
    a: ArrayView2<'_, T>,
    b: ArrayView2<'_, T>,
    mut out: ArrayViewMut2<'_, T>,
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    general_mat_mul(T::one(), &a, &b, beta, &mut out);
}

/// 2x2 max pooling with stride 2. Returns the winning offset (0..4) per output
/// element; ties go to the earliest element in row-major order.
pub fn maxpool2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u8>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = 2 * oy * w + 2 * ox;
                let cand = [plane[base], plane[base + 1], plane[base + w], plane[base + w + 1]];
                let mut best = 0u8;
                for (i, v) in cand.iter().enumerate().skip(1) {
                    if *v > cand[best as usize] {
                        best = i as u8;
                    }
                }
                out.push(cand[best as usize]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(g: &[T], arg: &[u8], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (p * oh + oy) * ow + ox;
                let a = arg[o] as usize;
                let idx = p * h * w + (2 * oy + a / 2) * w + 2 * ox + a % 2;
                out[idx] = out[idx] + g[o];
            }
        }
    }
    out
}

/// Non-overlapping `k x k` mean pooling; `h` and `w` must be multiples of `k`.
pub fn avgpool_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::from_f64((k * k) as f64);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..h {
            for x_ in 0..w {
                let o = (p * oh + y / k) * ow + x_ / k;
                out[o] = out[o] + x[(p * h + y) * w + x_];
            }
        }
    }
    out.iter_mut().for_each(|v| *v = *v * inv);
    out
}

pub fn avgpool_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::from_f64((k * k) as f64);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for x_ in 0..w {
                out[(p * h + y) * w + x_] = g[(p * oh + y / k) * ow + x_ / k] * inv;
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for y in 0..oh {
            let row = &x[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
            for x_ in 0..ow {
                out.push(row[x_ / 2]);
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for x_ in 0..ow {
                let o = (p * h + y / 2) * w + x_ / 2;
                out[o] = out[o] + g[(p * oh + y) * ow + x_];
            }
        }
    }
    out
}

/// Per-group normalisation `(x - mean) / (std + eps)` over contiguous groups of
/// `len` elements. `std` is the population standard deviation.
pub fn instance_norm_forward<T: Scalar>(x: &[T], len: usize, eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let groups = x.len() / len;
    let n = T::from_f64(len as f64);
    let mut out = Vec::with_capacity(x.len());
    let mut means = Vec::with_capacity(groups);
    let mut stds = Vec::with_capacity(groups);
    for gi in 0..groups {
        let seg = &x[gi * len..(gi + 1) * len];
        let mean = seg.iter().copied().sum::<T>() / n;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let std = var.sqrt();
        let denom = std + eps;
        out.extend(seg.iter().map(|&v| (v - mean) / denom));
        means.push(mean);
        stds.push(std);
    }
    (out, means, stds)
}

pub fn instance_norm_backward<T: Scalar>(
    x: &[T],
    g: &[T],
    len: usize,
    eps: T,
    means: &[T],
    stds: &[T],
) -> Vec<T> {
    let n = T::from_f64(len as f64);
    let mut out = Vec::with_capacity(x.len());
    for (gi, (&mean, &std)) in means.iter().zip(stds).enumerate() {
        let xs = &x[gi * len..(gi + 1) * len];
        let gs = &g[gi * len..(gi + 1) * len];
        let s = std + eps;
        let g_mean = gs.iter().copied().sum::<T>() / n;
        let dot = xs.iter().zip(gs).map(|(&xv, &gv)| (xv - mean) * gv).sum::<T>();
        let coef = if std > T::zero() { dot / (n * std * s * s) } else { T::zero() };
        out.extend(
            xs.iter()
                .zip(gs)
                .map(|(&xv, &gv)| (gv - g_mean) / s - (xv - mean) * coef),
        );
    }
    out
}
