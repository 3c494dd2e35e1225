//! 3x3 cross-correlation over (H, W), stride 1, zero padding 1.
//!
//! Input `[.., H, W, Cin]` (every leading axis is a batch axis), kernel
//! `[3, 3, Cin, Cout]`, bias `[Cout]`.

use super::Tensor;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::real::Real;

struct Dims {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
}

fn dims<T: Real>(x: &Tensor<T>, k: &Tensor<T>) -> Result<Dims> {
    let xs = x.shape();
    let r = xs.len();
    if r < 3 {
        return Err(Error::dim("conv2d_3x3 input", xs, &[1, 1, 1, 1]));
    }
    let s = k.shape();
    if s.len() != 4 || s[0] != 3 || s[1] != 3 {
        return Err(Error::dim("conv2d_3x3 kernel", s, &[3, 3, xs[r - 1], xs[r - 1]]));
    }
    if s[2] != xs[r - 1] {
        return Err(Error::dim("conv2d_3x3", xs, s));
    }
    Ok(Dims {
        n: xs[..r - 3].iter().product(),
        h: xs[r - 3],
        w: xs[r - 2],
        cin: s[2],
        cout: s[3],
    })
}

pub fn conv2d_3x3<T: Real>(x: &Tensor<T>, k: &Tensor<T>, b: &Tensor<T>, exec: Exec) -> Result<Tensor<T>> {
    let d = dims(x, k)?;
    if b.shape() != [d.cout] {
        return Err(Error::dim("conv2d_3x3 bias", b.shape(), &[d.cout]));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d.cout;
    let mut y = Tensor::zeros(&shape);
    let (xd, kd, bd) = (x.data(), k.data(), b.data());
    let row_len = d.w * d.cout;
    // one output row (n, h) per chunk
    exec.chunks_mut(y.data_mut(), row_len, |nh, out| {
        let (n, h) = (nh / d.h, nh % d.h);
        let mut acc = vec![0.0f64; d.cout];
        for (wi, ypix) in out.chunks_mut(d.cout).enumerate() {
            for (a, &bv) in acc.iter_mut().zip(bd) {
                *a = bv.f64();
            }
            for kh in 0..3 {
                let Some(ih) = (h + kh).checked_sub(1).filter(|&v| v < d.h) else { continue };
                for kw in 0..3 {
                    let Some(iw) = (wi + kw).checked_sub(1).filter(|&v| v < d.w) else { continue };
                    let xo = ((n * d.h + ih) * d.w + iw) * d.cin;
                    let ko = (kh * 3 + kw) * d.cin * d.cout;
                    for (ci, &xv) in xd[xo..xo + d.cin].iter().enumerate() {
                        let krow = &kd[ko + ci * d.cout..ko + (ci + 1) * d.cout];
                        let xv = xv.f64();
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a += xv * kv.f64();
                        }
                    }
                }
            }
            for (yv, &a) in ypix.iter_mut().zip(&acc) {
                *yv = T::of(a);
            }
        }
    });
    Ok(y)
}

/// Returns `(dx, dk, db)`.
pub fn conv2d_3x3_backward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    dy: &Tensor<T>,
    exec: Exec,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = dims(x, k)?;
    let mut expect = x.shape().to_vec();
    *expect.last_mut().unwrap() = d.cout;
    if dy.shape() != expect.as_slice() {
        return Err(Error::dim("conv2d_3x3 backward dy", dy.shape(), &expect));
    }
    let (xd, kd, gd) = (x.data(), k.data(), dy.data());

    // dx[n,ih,iw,ci] = sum over taps of k[kh,kw,ci,:] . dy[n, ih-kh+1, iw-kw+1, :]
    let mut dx = Tensor::zeros(x.shape());
    exec.chunks_mut(dx.data_mut(), d.w * d.cin, |nh, out| {
        let (n, ih) = (nh / d.h, nh % d.h);
        for (iw, dpix) in out.chunks_mut(d.cin).enumerate() {
            for kh in 0..3 {
                let Some(oh) = (ih + 1).checked_sub(kh).filter(|&v| v < d.h) else { continue };
                for kw in 0..3 {
                    let Some(ow) = (iw + 1).checked_sub(kw).filter(|&v| v < d.w) else { continue };
                    let go = ((n * d.h + oh) * d.w + ow) * d.cout;
                    let g = &gd[go..go + d.cout];
                    let ko = (kh * 3 + kw) * d.cin * d.cout;
                    for (ci, dv) in dpix.iter_mut().enumerate() {
                        let krow = &kd[ko + ci * d.cout..ko + (ci + 1) * d.cout];
                        *dv += krow.iter().zip(g).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
        }
    });

    // dk[kh,kw,ci,:] = sum over outputs of x[n, h+kh-1, w+kw-1, ci] * dy[n,h,w,:]
    let mut dk = Tensor::zeros(k.shape());
    exec.chunks_mut(dk.data_mut(), d.cin * d.cout, |tap, out| {
        let (kh, kw) = (tap / 3, tap % 3);
        for n in 0..d.n {
            for h in 0..d.h {
                let Some(ih) = (h + kh).checked_sub(1).filter(|&v| v < d.h) else { continue };
                for w in 0..d.w {
                    let Some(iw) = (w + kw).checked_sub(1).filter(|&v| v < d.w) else { continue };
                    let xo = ((n * d.h + ih) * d.w + iw) * d.cin;
                    let go = ((n * d.h + h) * d.w + w) * d.cout;
                    let g = &gd[go..go + d.cout];
                    for (ci, &xv) in xd[xo..xo + d.cin].iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        for (a, &gv) in out[ci * d.cout..(ci + 1) * d.cout].iter_mut().zip(g) {
                            *a += xv * gv;
                        }
                    }
                }
            }
        }
    });

    let mut db = Tensor::zeros(&[d.cout]);
    for g in gd.chunks(d.cout) {
        for (a, &v) in db.data_mut().iter_mut().zip(g) {
            *a += v;
        }
    }
    Ok((dx, dk, db))
}
