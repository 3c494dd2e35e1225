//! Blocked STSS kernels.
//!
//! Features are normalised once (`O(THWC)`); degenerate vectors become
//! exact zeros so that every similarity reduces to a single dot product. Work
//! is split over query rows `(t, h)`: all queries in a row share the same
//! neighbour row for a given `(l, u)`, so both rows stay hot in cache while
//! the `(w, v)` loops run. Since `S[x, o] = S[x + o, -o]`, the forward pass
//! only evaluates half of each window.

use super::{SimilarityPolicy, WindowSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::real::Real;
use crate::tensor::Tensor;

/// Dot product with four independent f64 accumulators.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k].f64() * y[k].f64();
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x.f64() * y.f64();
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Unit-normalised copy of `f` plus per-position inverse norms (0 for
/// degenerate vectors).
pub(crate) fn normalize<T: Real>(f: &Tensor<T>, policy: SimilarityPolicy) -> (Vec<T>, Vec<T>) {
    let c = f.last_dim();
    let mut unit = vec![T::zero(); f.len()];
    let mut inv = vec![T::zero(); f.len() / c];
    for ((src, dst), r) in f.data().chunks(c).zip(unit.chunks_mut(c)).zip(inv.iter_mut()) {
        let norm = dot(src, src).sqrt();
        if norm > policy.norm_eps {
            let k = 1.0 / norm;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = T::of(s.f64() * k);
            }
            *r = T::of(k);
        }
    }
    (unit, inv)
}

fn check_input<T: Real>(f: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(Error::dim("stss input", s, &[0, 0, 0, 0]));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Range of neighbour indices `i + o - r` that stay inside `0..n`, as an
/// offset-index range `o`.
#[inline]
fn valid_offsets(i: usize, r: usize, n: usize, extent: usize) -> std::ops::Range<usize> {
    let lo = r.saturating_sub(i);
    let hi = (n + r - i).min(extent);
    lo..hi
}

/// Offsets are numbered `k = (l * U + u) * V + v`, so the mirror of `k` is
/// `P - 1 - k` and the centre is `(P - 1) / 2`. Only offsets above the
/// centre are computed; the rest are read back from the neighbour that owns
/// the mirrored pair.
pub fn stss_forward_raw<T: Real>(
    f: &Tensor<T>,
    window: WindowSpec,
    policy: SimilarityPolicy,
    exec: Exec,
) -> Result<Tensor<T>> {
    let (nt, nh, nw, c) = check_input(f)?;
    let (el, eu, ev) = window.extents();
    let (rl, ru, rv) = window.radii();
    let (unit, inv) = normalize(f, policy);
    let per_query = el * eu * ev;
    let centre = per_query / 2;
    let half_len = per_query - centre - 1;
    let (lo, hi) = (-T::one(), T::one());

    // pass 1: upper half of every window
    let mut half = vec![T::zero(); nt * nh * nw * half_len];
    if half_len > 0 {
        exec.chunks_mut(&mut half, nw * half_len, |th, row_half| {
            let (t, h) = (th / nh, th % nh);
            let qrow = &unit[(t * nh + h) * nw * c..(t * nh + h + 1) * nw * c];
            for l in valid_offsets(t, rl, nt, el).filter(|&l| l >= rl) {
                let tt = t + l - rl;
                for u in valid_offsets(h, ru, nh, eu).filter(|&u| l > rl || u >= ru) {
                    let hh = h + u - ru;
                    let nrow = &unit[(tt * nh + hh) * nw * c..(tt * nh + hh + 1) * nw * c];
                    let v_min = if l == rl && u == ru { rv + 1 } else { 0 };
                    for w in 0..nw {
                        if inv[(t * nh + h) * nw + w] == T::zero() {
                            continue;
                        }
                        let q = &qrow[w * c..(w + 1) * c];
                        let base = w * half_len + (l * eu + u) * ev;
                        let vs = valid_offsets(w, rv, nw, ev);
                        for v in vs.start.max(v_min)..vs.end {
                            let ww = w + v - rv;
                            let s = T::of(dot(q, &nrow[ww * c..(ww + 1) * c]));
                            row_half[base + v - centre - 1] = s.max(lo).min(hi);
                        }
                    }
                }
            }
        });
    }

    // pass 2: scatter the upper half, gather the lower half from neighbours
    let mut out = Tensor::zeros(&[nt, nh, nw, el, eu, ev]);
    exec.chunks_mut(out.data_mut(), nw * per_query, |th, row_out| {
        let (t, h) = (th / nh, th % nh);
        let x0 = (t * nh + h) * nw;
        for l in valid_offsets(t, rl, nt, el) {
            let tt = t + l - rl;
            for u in valid_offsets(h, ru, nh, eu) {
                let y0 = (tt * nh + (h + u - ru)) * nw;
                for w in 0..nw {
                    let row = &mut row_out[w * per_query..(w + 1) * per_query];
                    for v in valid_offsets(w, rv, nw, ev) {
                        let k = (l * eu + u) * ev + v;
                        if k > centre {
                            row[k] = half[(x0 + w) * half_len + k - centre - 1];
                        } else if k < centre {
                            let y = y0 + w + v - rv;
                            row[k] = half[y * half_len + per_query - 2 - k - centre];
                        } else if inv[x0 + w] != T::zero() {
                            // exact self-match
                            row[k] = T::one();
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradient of `sum(ds * S)` w.r.t. `f`, written as a gather so each output
/// position is owned by one worker:
///
/// ```text
/// G[x, o]  = ds[x, o] + ds[x + o, -o]
/// dF[x]    = r_x * ( sum_o G[x, o] n_{x+o}  -  (sum_o G[x, o] S[x, o]) n_x )
/// ```
///
/// with `n` the unit vectors and `r_x = 1 / |F[x]|`.
pub fn stss_backward_raw<T: Real>(
    f: &Tensor<T>,
    window: WindowSpec,
    policy: SimilarityPolicy,
    ds: &Tensor<T>,
    exec: Exec,
) -> Result<Tensor<T>> {
    let (nt, nh, nw, c) = check_input(f)?;
    let (el, eu, ev) = window.extents();
    let (rl, ru, rv) = window.radii();
    let expect = [nt, nh, nw, el, eu, ev];
    if ds.shape() != expect {
        return Err(Error::dim("stss backward", ds.shape(), &expect));
    }
    let (unit, inv) = normalize(f, policy);
    let per_query = el * eu * ev;
    let dsd = ds.data();
    let mut df = Tensor::zeros(f.shape());

    exec.chunks_mut(df.data_mut(), nw * c, |th, row_out| {
        let (t, h) = (th / nh, th % nh);
        let mut acc = vec![0.0f64; c];
        for w in 0..nw {
            let x = (t * nh + h) * nw + w;
            let rx = inv[x];
            if rx == T::zero() {
                continue;
            }
            let nx = &unit[x * c..(x + 1) * c];
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut self_coef = 0.0f64;
            for l in valid_offsets(t, rl, nt, el) {
                let tt = t + l - rl;
                for u in valid_offsets(h, ru, nh, eu) {
                    let hh = h + u - ru;
                    for v in valid_offsets(w, rv, nw, ev) {
                        let ww = w + v - rv;
                        let y = (tt * nh + hh) * nw + ww;
                        if inv[y] == T::zero() {
                            continue;
                        }
                        let fwd = (l * eu + u) * ev + v;
                        let rev = ((el - 1 - l) * eu + (eu - 1 - u)) * ev + (ev - 1 - v);
                        let g = dsd[x * per_query + fwd].f64() + dsd[y * per_query + rev].f64();
                        if g == 0.0 {
                            continue;
                        }
                        let ny = &unit[y * c..(y + 1) * c];
                        let s = dot(nx, ny).clamp(-1.0, 1.0);
                        for (a, &n) in acc.iter_mut().zip(ny) {
                            *a += g * n.f64();
                        }
                        self_coef += g * s;
                    }
                }
            }
            let r = rx.f64();
            for ((o, &a), &n) in row_out[w * c..(w + 1) * c].iter_mut().zip(&acc).zip(nx) {
                *o = T::of(r * (a - self_coef * n.f64()));
            }
        }
    });
    Ok(df)
}

/// Multiply-add count of the forward transform, counting every window slot.
pub fn stss_flops(shape: &[usize], window: WindowSpec) -> u64 {
    let positions: usize = shape[..shape.len() - 1].iter().product();
    2 * (positions * window.volume() * shape[shape.len() - 1]) as u64
}
