//! Per-channel batch normalization over every leading position of an
//! `[.., D]` tensor.

use super::{rows_cols, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub mode: BnMode,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Batch statistics (population variance); empty in eval mode.
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

impl<T: Real> BnCache<T> {
    /// Running statistics after folding in this batch with [`BN_MOMENTUM`].
    pub fn updated_running(&self, rmean: &Tensor<T>, rvar: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        if self.mode == BnMode::Eval {
            return (rmean.clone(), rvar.clone());
        }
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        let mean = Tensor::from_fn(rmean.shape(), |c| keep * rmean.data()[c] + m * self.batch_mean[c]);
        let var = Tensor::from_fn(rvar.shape(), |c| keep * rvar.data()[c] + m * self.batch_var[c]);
        (mean, var)
    }
}

pub fn batchnorm2d<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    rmean: &Tensor<T>,
    rvar: &Tensor<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (rows, d) = rows_cols(x.shape());
    for p in [gamma, beta, rmean, rvar] {
        if p.shape() != [d] {
            return Err(Error::dim("batchnorm2d", x.shape(), p.shape()));
        }
    }
    let xd = x.data();
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        BnMode::Train => {
            if rows < 2 {
                return Err(Error::Degenerate(format!(
                    "batch norm in train mode needs at least 2 positions per channel, got {rows}"
                )));
            }
            let mut sum = vec![0.0f64; d];
            for row in xd.chunks(d) {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v.f64();
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
            let mut sq = vec![0.0f64; d];
            for row in xd.chunks(d) {
                for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    let c = v.f64() - m;
                    *s += c * c;
                }
            }
            (mean, sq.iter().map(|s| s / rows as f64).collect())
        }
        BnMode::Eval => (
            rmean.data().iter().map(|v| v.f64()).collect(),
            rvar.data().iter().map(|v| v.f64()).collect(),
        ),
    };
    let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + BN_EPS).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();

    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for ((xrow, hrow), yrow) in xd
        .chunks(d)
        .zip(xhat.data_mut().chunks_mut(d))
        .zip(y.data_mut().chunks_mut(d))
    {
        for c in 0..d {
            let h = (xrow[c] - mean_t[c]) * inv_std[c];
            hrow[c] = h;
            yrow[c] = gamma.data()[c] * h + beta.data()[c];
        }
    }
    let (batch_mean, batch_var) = match mode {
        BnMode::Train => (mean_t, var.iter().map(|&v| T::of(v)).collect()),
        BnMode::Eval => (Vec::new(), Vec::new()),
    };
    Ok((
        y,
        BnCache {
            mode,
            xhat,
            inv_std,
            batch_mean,
            batch_var,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm2d_backward<T: Real>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if dy.shape() != cache.xhat.shape() {
        return Err(Error::dim("batchnorm2d backward", dy.shape(), cache.xhat.shape()));
    }
    let (rows, d) = rows_cols(dy.shape());
    let mut sum_dy = vec![0.0f64; d];
    let mut sum_dy_xhat = vec![0.0f64; d];
    for (g, h) in dy.data().chunks(d).zip(cache.xhat.data().chunks(d)) {
        for c in 0..d {
            sum_dy[c] += g[c].f64();
            sum_dy_xhat[c] += g[c].f64() * h[c].f64();
        }
    }
    let dgamma = Tensor::from_fn(&[d], |c| T::of(sum_dy_xhat[c]));
    let dbeta = Tensor::from_fn(&[d], |c| T::of(sum_dy[c]));
    let mut dx = Tensor::zeros(dy.shape());
    let n = T::of(rows as f64);
    for ((g, h), out) in dy
        .data()
        .chunks(d)
        .zip(cache.xhat.data().chunks(d))
        .zip(dx.data_mut().chunks_mut(d))
    {
        for c in 0..d {
            let scale = gamma.data()[c] * cache.inv_std[c];
            out[c] = match cache.mode {
                BnMode::Train => {
                    scale / n * (n * g[c] - T::of(sum_dy[c]) - h[c] * T::of(sum_dy_xhat[c]))
                }
                BnMode::Eval => scale * g[c],
            };
        }
    }
    Ok((dx, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(d: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        (Tensor::full(&[d], 1.0), Tensor::zeros(&[d]), Tensor::zeros(&[d]), Tensor::full(&[d], 1.0))
    }

    #[test]
    fn constant_channels_map_to_beta() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 3, 2], |i| if i % 2 == 0 { 4.0 } else { -1.5 });
        let gamma = Tensor::new(&[2], vec![2.0, 3.0]).unwrap();
        let beta = Tensor::new(&[2], vec![0.25, -0.5]).unwrap();
        let (_, _, rm, rv) = unit(2);
        let (y, cache) = batchnorm2d(&x, &gamma, &beta, &rm, &rv, BnMode::Train).unwrap();
        assert!(cache.xhat.data().iter().all(|&v| v == 0.0));
        for row in y.data().chunks(2) {
            assert_eq!(row, &[0.25, -0.5]);
        }
    }

    #[test]
    fn normalized_input_passes_through() {
        // per channel: values {-1, 1} repeated -> mean 0, population var 1
        let x = Tensor::<f64>::from_fn(&[1, 2, 4, 3], |i| if (i / 3) % 2 == 0 { 1.0 } else { -1.0 });
        let (g, b, rm, rv) = unit(3);
        let (y, _) = batchnorm2d(&x, &g, &b, &rm, &rv, BnMode::Train).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() <= 1e-5);
    }

    #[test]
    fn output_statistics_follow_gamma_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::<f64>::uniform(&[3, 4, 4, 2], -3.0, 5.0, &mut rng);
        let gamma = Tensor::new(&[2], vec![1.5, 0.5]).unwrap();
        let beta = Tensor::new(&[2], vec![-0.3, 2.0]).unwrap();
        let (_, _, rm, rv) = unit(2);
        let (y, _) = batchnorm2d(&x, &gamma, &beta, &rm, &rv, BnMode::Train).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = y.data().iter().skip(c).step_by(2).copied().collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!((mean - beta.data()[c]).abs() <= 1e-4);
            // eps in the denominator shrinks the std slightly
            assert!((std - gamma.data()[c]).abs() <= 1e-4, "{std}");
        }
    }

    #[test]
    fn single_position_train_is_degenerate() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 2]);
        let p = Tensor::<f32>::zeros(&[2]);
        assert!(matches!(
            batchnorm2d(&x, &p, &p, &p, &p, BnMode::Train),
            Err(Error::Degenerate(_))
        ));
        assert!(batchnorm2d(&x, &p, &p, &p, &Tensor::full(&[2], 1.0), BnMode::Eval).is_ok());
    }

    #[test]
    fn running_stats_use_momentum() {
        let x = Tensor::<f64>::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let (g, b, rm, rv) = unit(1);
        let (_, cache) = batchnorm2d(&x, &g, &b, &rm, &rv, BnMode::Train).unwrap();
        let (m, v) = cache.updated_running(&rm, &rv);
        assert!((m.data()[0] - 0.2).abs() < 1e-12);
        assert!((v.data()[0] - (0.9 + 0.1)).abs() < 1e-12);
    }
}
