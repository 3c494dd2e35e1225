use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ObjectMasks, SceneObject, SceneSpec, Shape, Trajectory, PATCH};
use crate::error::Result;
use crate::tensor::Tensor;

const GRID: usize = 8;

/// Two sets of three objects on a 32 x 32 canvas over 8 frames.
///
/// Objects `0..3` form set 1 and move horizontally, `3..6` form set 2 and
/// move vertically; object `k + 3` is the twin of `k` (same shape and
/// intensity). Every object fills one `4 x 4` patch cell and advances one
/// cell per frame. Set 1 uses rows and set 2 columns drawn from disjoint index
/// sets, so objects never meet.
#[derive(Debug, Clone)]
pub struct ToyScene {
    pub spec: SceneSpec,
    /// `[T, H, W, 1]`.
    pub pixels: Tensor<f64>,
    pub masks: ObjectMasks,
}

pub fn gen_toy_scene(seed: u64) -> Result<ToyScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shapes = Shape::ALL;
    shapes.shuffle(&mut rng);
    let intensities: Vec<f64> = (0..3).map(|_| rng.gen_range(0.4..=1.0)).collect();
    let mut lanes: Vec<usize> = (0..GRID).collect();
    lanes.shuffle(&mut rng);
    let (rows, cols) = (&lanes[..3], &lanes[3..6]);
    // both sets sweep the same way, so set 1 sits at (row, p(t)) and set 2
    // at (p(t), col); a meeting would need row == col
    let forward = rng.gen_bool(0.5);

    let cell = PATCH as f64;
    let centre = |i: usize| i as f64 * cell + cell / 2.0;
    let last = centre(GRID - 1);
    let mut objects = Vec::with_capacity(6);
    for k in 0..3 {
        let (x0, dx) = if forward { (centre(0), cell) } else { (last, -cell) };
        objects.push(SceneObject {
            shape: shapes[k],
            intensity: intensities[k],
            radius: cell / 2.0,
            trajectory: Trajectory::Translate {
                start: (centre(rows[k]), x0),
                dy: 0.0,
                dx,
            },
        });
    }
    for k in 0..3 {
        let (y0, dy) = if forward { (centre(0), cell) } else { (last, -cell) };
        objects.push(SceneObject {
            shape: shapes[k],
            intensity: intensities[k],
            radius: cell / 2.0,
            trajectory: Trajectory::Translate {
                start: (y0, centre(cols[k])),
                dy,
                dx: 0.0,
            },
        });
    }
    let spec = SceneSpec {
        canvas: (GRID * PATCH, GRID * PATCH),
        frames: GRID,
        objects,
    };
    let (pixels, masks) = spec.render()?;
    Ok(ToyScene { spec, pixels, masks })
}

impl ToyScene {
    pub const SET_SIZE: usize = 3;

    pub fn set_of(&self, object: usize) -> usize {
        object / Self::SET_SIZE
    }

    pub fn twin_of(&self, object: usize) -> usize {
        (object + Self::SET_SIZE) % (2 * Self::SET_SIZE)
    }

    /// `(T, H/4, W/4)` of the patch grid.
    pub fn grid(&self) -> (usize, usize, usize) {
        (self.spec.frames, self.spec.canvas.0 / PATCH, self.spec.canvas.1 / PATCH)
    }

    /// Per-object masks on the patch grid: a cell belongs to an object when
    /// any of its pixels does.
    pub fn patch_masks(&self) -> ObjectMasks {
        let (t, gh, gw) = self.grid();
        let (h, w) = self.spec.canvas;
        self.masks
            .iter()
            .map(|m| {
                let mut out = vec![false; t * gh * gw];
                for (i, _) in m.iter().enumerate().filter(|(_, &b)| b) {
                    let (f, y, x) = (i / (h * w), (i / w) % h, i % w);
                    out[(f * gh + y / PATCH) * gw + x / PATCH] = true;
                }
                out
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::super::mask_centroid;
    use super::*;

    #[test]
    fn deterministic() {
        let a = gen_toy_scene(3).unwrap();
        let b = gen_toy_scene(3).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.masks, b.masks);
        assert_ne!(gen_toy_scene(4).unwrap().pixels, a.pixels);
    }

    #[test]
    fn masks_disjoint_and_non_empty() {
        for seed in 0..10 {
            let s = gen_toy_scene(seed).unwrap();
            let plane = 32 * 32;
            for t in 0..8 {
                for m in &s.masks {
                    assert!(m[t * plane..(t + 1) * plane].iter().any(|&b| b));
                }
                for i in t * plane..(t + 1) * plane {
                    assert!(s.masks.iter().filter(|m| m[i]).count() <= 1);
                }
            }
            for m in s.patch_masks() {
                for t in 0..8 {
                    assert_eq!(m[t * 64..(t + 1) * 64].iter().filter(|&&b| b).count(), 1);
                }
            }
        }
    }

    #[test]
    fn twins_match_when_aligned() {
        let s = gen_toy_scene(7).unwrap();
        for k in 0..3 {
            let j = s.twin_of(k);
            let (ay, ax) = mask_centroid(&s.masks[k], (32, 32), 0).unwrap();
            let (by, bx) = mask_centroid(&s.masks[j], (32, 32), 0).unwrap();
            let (oy, ox) = ((by - ay) as isize, (bx - ax) as isize);
            for y in 0..32isize {
                for x in 0..32isize {
                    if s.masks[k][(y * 32 + x) as usize] {
                        let a = s.pixels.at(&[0, y as usize, x as usize, 0]);
                        let b = s.pixels.at(&[0, (y + oy) as usize, (x + ox) as usize, 0]);
                        assert_eq!(a, b);
                    }
                }
            }
        }
    }
}
