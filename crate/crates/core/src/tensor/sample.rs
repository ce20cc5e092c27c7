//! Bilinear lookups into `[D, R_a, R_b]` feature planes.

use super::Real;

/// Clamped lattice position along an axis of `r` nodes: `(i0, i1, frac)`.
#[inline]
fn axis_taps<T: Real>(u: T, r: usize) -> (usize, usize, T) {
    if r <= 1 {
        return (0, 0, T::zero());
    }
    let pos = u.max(T::zero()).min(T::one()) * T::of((r - 1) as f64);
    let i0 = (pos.floor().to_usize().unwrap_or(0)).min(r - 2);
    (i0, i0 + 1, pos - T::of(i0 as f64))
}

#[inline]
fn corners<T: Real>(ua: T, ub: T, ra: usize, rb: usize) -> [(usize, T); 4] {
    let (a0, a1, fa) = axis_taps(ua, ra);
    let (b0, b1, fb) = axis_taps(ub, rb);
    let one = T::one();
    [
        (a0 * rb + b0, (one - fa) * (one - fb)),
        (a0 * rb + b1, (one - fa) * fb),
        (a1 * rb + b0, fa * (one - fb)),
        (a1 * rb + b1, fa * fb),
    ]
}

pub(crate) fn grid_sample_forward<T: Real>(plane: &[T], d: usize, ra: usize, rb: usize, coords: &[T]) -> Vec<T> {
    let n = coords.len() / 2;
    let area = ra * rb;
    let mut out = vec![T::zero(); n * d];
    for (q, orow) in out.chunks_mut(d.max(1)).enumerate().take(n) {
        let cs = corners(coords[2 * q], coords[2 * q + 1], ra, rb);
        for (c, o) in orow.iter_mut().enumerate() {
            let base = &plane[c * area..(c + 1) * area];
            *o = cs.iter().fold(T::zero(), |acc, &(i, wt)| acc + base[i] * wt);
        }
    }
    out
}

pub(crate) fn grid_sample_backward<T: Real>(grad_out: &[T], d: usize, ra: usize, rb: usize, coords: &[T]) -> Vec<T> {
    let n = coords.len() / 2;
    let area = ra * rb;
    let mut gp = vec![T::zero(); d * area];
    for q in 0..n {
        let cs = corners(coords[2 * q], coords[2 * q + 1], ra, rb);
        for c in 0..d {
            let g = grad_out[q * d + c];
            if g == T::zero() {
                continue;
            }
            let base = &mut gp[c * area..(c + 1) * area];
            for &(i, wt) in &cs {
                base[i] += g * wt;
            }
        }
    }
    gp
}
