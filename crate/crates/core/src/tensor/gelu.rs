use super::Tensor;
use crate::real::Real;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const CUBIC: f64 = 0.044715;

/// Tanh approximation `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
#[inline]
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(SQRT_2_OVER_PI) * (x + T::of(CUBIC) * x * x * x);
    half * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_scalar_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let k = T::of(SQRT_2_OVER_PI);
    let th = (k * (x + T::of(CUBIC) * x * x * x)).tanh();
    let du = k * (T::one() + T::of(3.0 * CUBIC) * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn gelu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(x.shape(), dy.shape());
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&a, &g)| gelu_scalar_grad(a) * g)
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixed_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-4);
        assert!(gelu_scalar(-10.0f64).abs() < 1e-4);
    }

    #[test]
    fn derivative_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-5;
        for _ in 0..200 {
            let x: f64 = rng.gen_range(-4.0..4.0);
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            let an = gelu_scalar_grad(x);
            let rel = (fd - an).abs() / an.abs().max(1e-3);
            assert!(rel <= 1e-5, "x={x} fd={fd} an={an}");
        }
    }
}
