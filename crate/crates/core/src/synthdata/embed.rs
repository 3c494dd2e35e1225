use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::stss::FeatureMap;
use crate::tensor::Tensor;

/// Patch side in pixels.
pub const PATCH: usize = 4;

/// Frozen random projection of flattened `4 x 4` patches to `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed {
    /// `[16, C]`, patch pixels in row-major order.
    pub weight: Tensor<f64>,
    pub bias: Tensor<f64>,
}

impl PatchEmbed {
    /// Weights uniform in `(-1/4, 1/4)`, zero bias.
    pub fn new(c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = PATCH * PATCH;
        let bound = 1.0 / (k as f64).sqrt();
        let weight = Tensor::from_fn(&[k, c], |_| rng.gen_range(-bound..bound));
        PatchEmbed {
            weight,
            bias: Tensor::zeros(&[c]),
        }
    }

    pub fn with_bias(mut self, bias: Tensor<f64>) -> Result<Self> {
        if bias.shape() != [self.channels()] {
            return Err(Error::dim("patch embed bias", bias.shape(), &[self.channels()]));
        }
        self.bias = bias;
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// `[T, H, W, 1]` pixels to a `[T, H/4, W/4, C]` feature map.
pub fn patch_embed<T: Real>(pixels: &Tensor<f64>, embed: &PatchEmbed) -> Result<FeatureMap<T>> {
    let s = pixels.shape();
    if s.len() != 4 || s[3] != 1 || !s[1].is_multiple_of(PATCH) || !s[2].is_multiple_of(PATCH) {
        return Err(Error::dim("patch_embed", s, &[0, PATCH, PATCH, 1]));
    }
    let (t, h, w) = (s[0], s[1], s[2]);
    let (gh, gw, c) = (h / PATCH, w / PATCH, embed.channels());
    let wt = embed.weight.data();
    let px = pixels.data();
    let mut out = Vec::with_capacity(t * gh * gw * c);
    for f in 0..t {
        for gy in 0..gh {
            for gx in 0..gw {
                let mut acc = embed.bias.data().to_vec();
                for py in 0..PATCH {
                    for pxl in 0..PATCH {
                        let v = px[(f * h + gy * PATCH + py) * w + gx * PATCH + pxl];
                        if v != 0.0 {
                            let row = &wt[(py * PATCH + pxl) * c..][..c];
                            for (a, &wv) in acc.iter_mut().zip(row) {
                                *a += v * wv;
                            }
                        }
                    }
                }
                out.extend(acc.into_iter().map(T::of));
            }
        }
    }
    FeatureMap::new(Tensor::new(&[t, gh, gw, c], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shape_and_zero_frames() {
        let e = PatchEmbed::new(6, 1);
        let f: FeatureMap<f64> = patch_embed(&Tensor::zeros(&[2, 32, 32, 1]), &e).unwrap();
        assert_eq!(f.dims(), (2, 8, 8, 6));
        let bias = Tensor::from_fn(&[6], |i| i as f64 - 2.0);
        let e = e.with_bias(bias.clone()).unwrap();
        let f: FeatureMap<f64> = patch_embed(&Tensor::zeros(&[1, 8, 8, 1]), &e).unwrap();
        for p in f.tensor().data().chunks(6) {
            assert_eq!(p, bias.data());
        }
    }

    #[test]
    fn indivisible_canvas() {
        let e = PatchEmbed::new(2, 0);
        let r: Result<FeatureMap<f64>> = patch_embed(&Tensor::zeros(&[1, 10, 8, 1]), &e);
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn patch_shuffle_commutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let px = Tensor::from_fn(&[1, 8, 12, 1], |_| rng.gen_range(0.0..1.0));
        let e = PatchEmbed::new(3, 2).with_bias(Tensor::full(&[3], 0.1)).unwrap();
        // grid is 2 x 3; send patch p to perm[p]
        let perm = [4usize, 0, 5, 2, 1, 3];
        let mut moved = Tensor::zeros(&[1, 8, 12, 1]);
        for (p, &q) in perm.iter().enumerate() {
            for y in 0..4 {
                for x in 0..4 {
                    let v = px.at(&[0, (p / 3) * 4 + y, (p % 3) * 4 + x, 0]);
                    moved.set(&[0, (q / 3) * 4 + y, (q % 3) * 4 + x, 0], v);
                }
            }
        }
        let a: FeatureMap<f64> = patch_embed(&px, &e).unwrap();
        let b: FeatureMap<f64> = patch_embed(&moved, &e).unwrap();
        for (p, &q) in perm.iter().enumerate() {
            for ch in 0..3 {
                assert_eq!(a.tensor().at(&[0, p / 3, p % 3, ch]), b.tensor().at(&[0, q / 3, q % 3, ch]));
            }
        }
    }
}
