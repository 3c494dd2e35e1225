//! Deterministic synthetic clips: a two-set toy scene and a four-class
//! motion dataset, plus the frozen patch embedding that turns pixels into
//! feature maps.

mod disk;
mod embed;
mod motion;
mod toy;

pub use disk::{load_dataset, save_dataset, DatasetManifest, ManifestEntry};
pub use embed::{patch_embed, PatchEmbed, PATCH};
pub use motion::{gen_motion_dataset, gen_motion_dataset_with, motion_scene, probe_features, Label, MotionClip, MotionSpec};
pub use toy::{gen_toy_scene, ToyScene};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Cross];

    /// Whether a pixel centre at `(dy, dx)` from the object centre is inside.
    fn covers(self, r: f64, dy: f64, dx: f64) -> bool {
        match self {
            Shape::Circle => dy * dy + dx * dx < r * r,
            Shape::Square => dy.abs() < r && dx.abs() < r,
            Shape::Cross => {
                (dy.abs() < r && dx.abs() < r / 2.0) || (dx.abs() < r && dy.abs() < r / 2.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Clockwise as displayed (rows grow downwards).
    Cw,
    Ccw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    /// `start + t * (dy, dx)` in pixels.
    Translate { start: (f64, f64), dy: f64, dx: f64 },
    /// Angle `phase +/- t * angular_step` around `center`, in pixels.
    Circle {
        center: (f64, f64),
        radius: f64,
        phase: f64,
        angular_step: f64,
        direction: Direction,
    },
}

impl Trajectory {
    /// Object centre `(y, x)` at frame `t`.
    pub fn position(&self, t: usize) -> (f64, f64) {
        let t = t as f64;
        match *self {
            Trajectory::Translate { start, dy, dx } => (start.0 + t * dy, start.1 + t * dx),
            Trajectory::Circle {
                center,
                radius,
                phase,
                angular_step,
                direction,
            } => {
                // screen rows point down, so a growing angle turns clockwise
                let sign = if direction == Direction::Cw { 1.0 } else { -1.0 };
                let a = phase + sign * t * angular_step;
                (center.0 + radius * a.sin(), center.1 + radius * a.cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub intensity: f64,
    pub radius: f64,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// `(H, W)` in pixels.
    pub canvas: (usize, usize),
    pub frames: usize,
    pub objects: Vec<SceneObject>,
}

/// Per-object masks over `T * H * W` pixels.
pub type ObjectMasks = Vec<Vec<bool>>;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas;
        if h == 0 || w == 0 || self.frames == 0 {
            return Err(Error::Config("canvas and frame count must be positive".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.intensity > 0.0 && o.intensity <= 1.0) || o.radius <= 0.0 {
                return Err(Error::Config(format!("object {i}: intensity must be in (0, 1] and radius positive")));
            }
            for t in 0..self.frames {
                let (y, x) = o.trajectory.position(t);
                if y - o.radius < 0.0 || x - o.radius < 0.0 || y + o.radius > h as f64 || x + o.radius > w as f64 {
                    return Err(Error::Config(format!("object {i} leaves the canvas at frame {t}")));
                }
            }
        }
        Ok(())
    }

    /// Hard-edged grayscale rendering: pixels `[T, H, W, 1]` plus masks.
    /// Later objects paint over earlier ones.
    pub fn render(&self) -> Result<(Tensor<f64>, ObjectMasks)> {
        self.validate()?;
        let (h, w) = self.canvas;
        let plane = h * w;
        let mut pixels = vec![0.0; self.frames * plane];
        let mut masks = vec![vec![false; self.frames * plane]; self.objects.len()];
        for (k, o) in self.objects.iter().enumerate() {
            for t in 0..self.frames {
                let (cy, cx) = o.trajectory.position(t);
                let y0 = (cy - o.radius).floor().max(0.0) as usize;
                let x0 = (cx - o.radius).floor().max(0.0) as usize;
                let y1 = ((cy + o.radius).ceil() as usize).min(h);
                let x1 = ((cx + o.radius).ceil() as usize).min(w);
                for y in y0..y1 {
                    for x in x0..x1 {
                        if o.shape.covers(o.radius, y as f64 + 0.5 - cy, x as f64 + 0.5 - cx) {
                            let i = t * plane + y * w + x;
                            pixels[i] = o.intensity;
                            for (j, m) in masks.iter_mut().enumerate() {
                                m[i] = j == k;
                            }
                        }
                    }
                }
            }
        }
        Ok((Tensor::new(&[self.frames, h, w, 1], pixels)?, masks))
    }
}

/// Reverses the time axis of a `[T, ...]` tensor.
pub fn reverse_frames(x: &Tensor<f64>) -> Tensor<f64> {
    let t = x.shape()[0];
    let plane = x.len() / t;
    let mut data = Vec::with_capacity(x.len());
    for f in (0..t).rev() {
        data.extend_from_slice(&x.data()[f * plane..(f + 1) * plane]);
    }
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Mirrors a `[T, H, W, C]` tensor left to right.
pub fn mirror_horizontal(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let (w, c) = (s[2], s[3]);
    Tensor::from_fn(s, |i| {
        let ch = i % c;
        let col = (i / c) % w;
        let row_base = i - (col * c + ch);
        x.data()[row_base + (w - 1 - col) * c + ch]
    })
}

/// Centroid `(y, x)` of a mask restricted to frame `t`, if non-empty.
pub fn mask_centroid(mask: &[bool], canvas: (usize, usize), t: usize) -> Option<(f64, f64)> {
    let (h, w) = canvas;
    let frame = &mask[t * h * w..(t + 1) * h * w];
    let (mut n, mut sy, mut sx) = (0usize, 0.0, 0.0);
    for (i, _) in frame.iter().enumerate().filter(|(_, &m)| m) {
        n += 1;
        sy += (i / w) as f64 + 0.5;
        sx += (i % w) as f64 + 0.5;
    }
    (n > 0).then(|| (sy / n as f64, sx / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(shape: Shape, r: f64, traj: Trajectory) -> SceneSpec {
        SceneSpec {
            canvas: (16, 16),
            frames: 3,
            objects: vec![SceneObject {
                shape,
                intensity: 0.5,
                radius: r,
                trajectory: traj,
            }],
        }
    }

    #[test]
    fn patch_sized_shapes() {
        let still = Trajectory::Translate {
            start: (6.0, 6.0),
            dy: 0.0,
            dx: 4.0,
        };
        let count = |s| {
            let (_, m) = one(s, 2.0, still).render().unwrap();
            m[0][..256].iter().filter(|&&b| b).count()
        };
        assert_eq!(count(Shape::Square), 16);
        assert_eq!(count(Shape::Circle), 12);
        assert_eq!(count(Shape::Cross), 12);
        let (px, m) = one(Shape::Square, 2.0, still).render().unwrap();
        // frame 1: rows 4..8, cols 8..12
        for y in 0..16 {
            for x in 0..16 {
                let inside = (4..8).contains(&y) && (8..12).contains(&x);
                assert_eq!(m[0][256 + y * 16 + x], inside);
                assert_eq!(px.at(&[1, y, x, 0]), if inside { 0.5 } else { 0.0 });
            }
        }
    }

    #[test]
    fn leaving_the_canvas_is_rejected() {
        let fast = Trajectory::Translate {
            start: (6.0, 6.0),
            dy: 0.0,
            dx: 5.0,
        };
        assert!(matches!(one(Shape::Circle, 2.0, fast).render(), Err(Error::Config(_))));
    }

    #[test]
    fn clockwise_turns_right_on_screen() {
        let t = Trajectory::Circle {
            center: (8.0, 8.0),
            radius: 4.0,
            phase: 0.0,
            angular_step: std::f64::consts::FRAC_PI_2,
            direction: Direction::Cw,
        };
        // east, then south (larger row), as a clock hand does
        let (y0, x0) = t.position(0);
        let (y1, x1) = t.position(1);
        assert!((y0 - 8.0).abs() < 1e-12 && (x0 - 12.0).abs() < 1e-12);
        assert!((y1 - 12.0).abs() < 1e-12 && (x1 - 8.0).abs() < 1e-12);
    }

    #[test]
    fn reverse_and_mirror_are_involutions() {
        let x = Tensor::from_fn(&[3, 2, 4, 1], |i| i as f64);
        assert_eq!(reverse_frames(&reverse_frames(&x)), x);
        assert_eq!(mirror_horizontal(&mirror_horizontal(&x)), x);
        assert_eq!(mirror_horizontal(&x).at(&[1, 1, 0, 0]), x.at(&[1, 1, 3, 0]));
        assert_eq!(reverse_frames(&x).at(&[0, 1, 2, 0]), x.at(&[2, 1, 2, 0]));
    }
}
