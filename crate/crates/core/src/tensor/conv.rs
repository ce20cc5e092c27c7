//! Convolution and upsampling kernels on raw `[C, H, W]` slices.

use super::graph::{axpy, dot};
use super::Real;

/// Valid `(start, end)` range of output rows/cols for a tap offset `off`,
/// i.e. positions `p` with `0 <= p + off < n`.
#[inline]
fn tap_range(n: usize, off: isize) -> (usize, usize) {
    let start = (-off).max(0) as usize;
    let end = (n as isize - off.max(0)).max(0) as usize;
    (start.min(n), end.max(start.min(n)))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward<T: Real>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    cout: usize,
    k: usize,
    bias: &[T],
) -> Vec<T> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut out = vec![T::zero(); cout * hw];
    let per_channel = |co: usize, oc: &mut [T]| {
        oc.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..cin {
            let ic = &input[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = tap_range(h, dy);
                for kx in 0..k {
                    let wv = kernel[((co * cin + ci) * k + ky) * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let dx = kx as isize - pad;
                    let (x0, x1) = tap_range(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let src = &ic[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                        let dst = &mut oc[y * w + x0..y * w + x1];
                        axpy(wv, src, dst);
                    }
                }
            }
        }
    };
    for_each_channel(&mut out, hw, per_channel);
    out
}

/// Returns `(grad_input, grad_kernel, grad_bias)`, each only when requested.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub(crate) fn conv2d_backward<T: Real>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    cout: usize,
    k: usize,
    grad_out: &[T],
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let hw = h * w;
    let pad = (k / 2) as isize;

    let grad_input = want_input.then(|| {
        let mut gi = vec![T::zero(); cin * hw];
        let per_channel = |ci: usize, gc: &mut [T]| {
            for co in 0..cout {
                let go = &grad_out[co * hw..(co + 1) * hw];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = tap_range(h, dy);
                    for kx in 0..k {
                        let wv = kernel[((co * cin + ci) * k + ky) * k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let dx = kx as isize - pad;
                        let (x0, x1) = tap_range(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let src = &go[y * w + x0..y * w + x1];
                            let start = sy * w + (x0 as isize + dx) as usize;
                            axpy(wv, src, &mut gc[start..start + (x1 - x0)]);
                        }
                    }
                }
            }
        };
        for_each_channel(&mut gi, hw, per_channel);
        gi
    });

    let grad_kernel = want_kernel.then(|| {
        let kk = cin * k * k;
        let mut gk = vec![T::zero(); cout * kk];
        let per_out = |co: usize, gkc: &mut [T]| {
            let go = &grad_out[co * hw..(co + 1) * hw];
            for ci in 0..cin {
                let ic = &input[ci * hw..(ci + 1) * hw];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = tap_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = tap_range(w, dx);
                        let mut acc = T::zero();
                        if x0 < x1 {
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let src = &ic[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                                acc += dot(&go[y * w + x0..y * w + x1], src);
                            }
                        }
                        gkc[(ci * k + ky) * k + kx] = acc;
                    }
                }
            }
        };
        for_each_channel(&mut gk, kk, per_out);
        gk
    });

    let grad_bias = want_bias.then(|| {
        (0..cout)
            .map(|co| grad_out[co * hw..(co + 1) * hw].iter().copied().sum())
            .collect()
    });

    (grad_input, grad_kernel, grad_bias)
}

fn for_each_channel<T: Real, F>(data: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Source taps `(i0, i1, frac)` for each of the `2n` outputs along one axis.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample2x_forward<T: Real>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    let mut rowbuf = vec![T::zero(); ow];
    for ch in 0..c {
        let ic = &input[ch * h * w..(ch + 1) * h * w];
        let oc = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        // Horizontal pass per source row, then blend rows vertically.
        let horiz: Vec<Vec<T>> = (0..h)
            .map(|y| {
                let r = &ic[y * w..(y + 1) * w];
                tx.iter()
                    .map(|&(i0, i1, f)| {
                        let f = T::of(f);
                        r[i0] * (T::one() - f) + r[i1] * f
                    })
                    .collect()
            })
            .collect();
        for (oy, &(i0, i1, f)) in ty.iter().enumerate() {
            let f = T::of(f);
            for ((dst, &a), &b) in rowbuf.iter_mut().zip(&horiz[i0]).zip(&horiz[i1]) {
                *dst = a * (T::one() - f) + b * f;
            }
            oc[oy * ow..(oy + 1) * ow].copy_from_slice(&rowbuf);
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(grad_out: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut gi = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let go = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        // Undo the vertical blend into per-source-row buffers of width 2w.
        let mut rows = vec![vec![T::zero(); ow]; h];
        for (oy, &(i0, i1, f)) in ty.iter().enumerate() {
            let f = T::of(f);
            let g = &go[oy * ow..(oy + 1) * ow];
            axpy(T::one() - f, g, &mut rows[i0]);
            axpy(f, g, &mut rows[i1]);
        }
        let gc = &mut gi[ch * h * w..(ch + 1) * h * w];
        for (y, row) in rows.iter().enumerate() {
            for (ox, &(i0, i1, f)) in tx.iter().enumerate() {
                let f = T::of(f);
                gc[y * w + i0] += row[ox] * (T::one() - f);
                gc[y * w + i1] += row[ox] * f;
            }
        }
    }
    gi
}
