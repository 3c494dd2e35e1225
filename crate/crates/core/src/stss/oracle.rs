use super::{SimilarityPolicy, WindowSpec};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Direct evaluation: six nested loops over query and offset, a fresh cosine
/// (dot and both norms) for every entry, no normalisation reuse.
pub fn stss_oracle_raw<T: Real>(
    f: &Tensor<T>,
    window: WindowSpec,
    policy: SimilarityPolicy,
) -> Result<Tensor<T>> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(Error::dim("stss oracle input", s, &[0, 0, 0, 0]));
    }
    let (nt, nh, nw, c) = (s[0] as isize, s[1] as isize, s[2] as isize, s[3]);
    let (el, eu, ev) = window.extents();
    let (rl, ru, rv) = window.radii();
    let (rl, ru, rv) = (rl as isize, ru as isize, rv as isize);
    let fd = f.data();
    let at = |t: isize, h: isize, w: isize| {
        let o = (((t * nh + h) * nw + w) as usize) * c;
        &fd[o..o + c]
    };
    let mut out = Tensor::zeros(&[s[0], s[1], s[2], el, eu, ev]);
    let mut k = 0;
    for t in 0..nt {
        for h in 0..nh {
            for w in 0..nw {
                for l in -rl..=rl {
                    for u in -ru..=ru {
                        for v in -rv..=rv {
                            let (tt, hh, ww) = (t + l, h + u, w + v);
                            let inside = (0..nt).contains(&tt) && (0..nh).contains(&hh) && (0..nw).contains(&ww);
                            if inside {
                                let a = at(t, h, w);
                                let b = at(tt, hh, ww);
                                let mut ab = 0.0f64;
                                let mut aa = 0.0f64;
                                let mut bb = 0.0f64;
                                for i in 0..c {
                                    ab += a[i].f64() * b[i].f64();
                                    aa += a[i].f64() * a[i].f64();
                                    bb += b[i].f64() * b[i].f64();
                                }
                                let (na, nb) = (aa.sqrt(), bb.sqrt());
                                if na > policy.norm_eps && nb > policy.norm_eps {
                                    out.data_mut()[k] = T::of((ab / (na * nb)).clamp(-1.0, 1.0));
                                }
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
