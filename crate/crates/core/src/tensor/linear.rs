use super::{rows_cols, Tensor};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::real::Real;

const ROW_BLOCK: usize = 64;

fn check<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if w.rank() != 2 {
        return Err(Error::dim("linear weight", w.shape(), &[x.last_dim(), b.len()]));
    }
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    if x.last_dim() != cin {
        return Err(Error::dim("linear", x.shape(), w.shape()));
    }
    if b.shape() != [cout] {
        return Err(Error::dim("linear bias", b.shape(), &[cout]));
    }
    Ok((rows_cols(x.shape()).0, cin, cout))
}

/// `y[.., j] = sum_i x[.., i] * w[i, j] + b[j]` with `w` stored `[cin, cout]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, exec: Exec) -> Result<Tensor<T>> {
    let (rows, cin, cout) = check(x, w, b)?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    let mut y = Tensor::zeros(&shape);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    exec.chunks_mut(y.data_mut(), ROW_BLOCK * cout, |blk, out| {
        let mut acc = vec![0.0f64; cout];
        for (r, yrow) in out.chunks_mut(cout).enumerate() {
            let row = blk * ROW_BLOCK + r;
            for (a, &bv) in acc.iter_mut().zip(bd) {
                *a = bv.f64();
            }
            let xrow = &xd[row * cin..(row + 1) * cin];
            for (i, &xi) in xrow.iter().enumerate() {
                if xi == T::zero() {
                    continue;
                }
                let (xi, wrow) = (xi.f64(), &wd[i * cout..(i + 1) * cout]);
                for (a, &wj) in acc.iter_mut().zip(wrow) {
                    *a += xi * wj.f64();
                }
            }
            for (yj, &a) in yrow.iter_mut().zip(&acc) {
                *yj = T::of(a);
            }
        }
    });
    debug_assert_eq!(rows * cout, y.len());
    Ok(y)
}

/// Returns `(dx, dw, db)` for upstream gradient `dy`.
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    exec: Exec,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if w.rank() != 2 || x.last_dim() != w.shape()[0] {
        return Err(Error::dim("linear backward", x.shape(), w.shape()));
    }
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let mut expect = x.shape().to_vec();
    *expect.last_mut().unwrap() = cout;
    if dy.shape() != expect.as_slice() {
        return Err(Error::dim("linear backward dy", dy.shape(), &expect));
    }
    let rows = rows_cols(x.shape()).0;
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());

    let mut dx = Tensor::zeros(x.shape());
    exec.chunks_mut(dx.data_mut(), ROW_BLOCK * cin, |blk, out| {
        for (r, dxrow) in out.chunks_mut(cin).enumerate() {
            let row = blk * ROW_BLOCK + r;
            let grow = &gd[row * cout..(row + 1) * cout];
            for (i, dxi) in dxrow.iter_mut().enumerate() {
                let wrow = &wd[i * cout..(i + 1) * cout];
                *dxi = wrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
            }
        }
    });

    let mut dw = Tensor::zeros(w.shape());
    exec.chunks_mut(dw.data_mut(), cout, |i, dwrow| {
        for row in 0..rows {
            let xi = xd[row * cin + i];
            if xi == T::zero() {
                continue;
            }
            let grow = &gd[row * cout..(row + 1) * cout];
            for (a, &g) in dwrow.iter_mut().zip(grow) {
                *a += xi * g;
            }
        }
    });

    let mut db = Tensor::zeros(&[cout]);
    for grow in gd.chunks(cout) {
        for (a, &g) in db.data_mut().iter_mut().zip(grow) {
            *a += g;
        }
    }
    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    /// Triple-loop oracle.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (cin, cout) = (w.shape()[0], w.shape()[1]);
        let rows = x.len() / cin;
        let mut y = vec![0.0; rows * cout];
        for r in 0..rows {
            for j in 0..cout {
                let mut s = b.data()[j];
                for i in 0..cin {
                    s += x.data()[r * cin + i] * w.data()[i * cout + j];
                }
                y[r * cout + j] = s;
            }
        }
        y
    }

    #[test]
    fn identity_weights() {
        let y = linear(&t(&[2], &[1.0, 2.0]), &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), &t(&[2], &[0.0, 0.0]), Exec::Sequential).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn hand_sum() {
        let y = linear(&t(&[2], &[1.0, 1.0]), &t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), &t(&[2], &[0.0, 0.0]), Exec::Sequential).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0]);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::uniform(&[3, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[5, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[4], -1.0, 1.0, &mut rng);
        for exec in [Exec::Sequential, Exec::Parallel] {
            let y = linear(&x, &w, &b, exec).unwrap();
            for (a, e) in y.data().iter().zip(naive(&x, &w, &b)) {
                assert!((a - e).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let err = linear(&Tensor::<f32>::zeros(&[2, 3]), &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[2]), Exec::Sequential).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }
}
