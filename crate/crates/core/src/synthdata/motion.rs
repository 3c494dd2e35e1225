use std::f64::consts::{FRAC_PI_8, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mirror_horizontal, reverse_frames, Direction, SceneObject, SceneSpec, Shape, Trajectory};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Left = 0,
    Right = 1,
    Cw = 2,
    Ccw = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Left, Label::Right, Label::Cw, Label::Ccw];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Label> {
        Label::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Input(format!("label {i} out of range 0..4")))
    }

    /// Label of the time-reversed clip.
    pub fn reversed(self) -> Label {
        match self {
            Label::Left => Label::Right,
            Label::Right => Label::Left,
            Label::Cw => Label::Ccw,
            Label::Ccw => Label::Cw,
        }
    }

    /// Label of the left-right mirrored clip; same pairs as reversal.
    pub fn mirrored(self) -> Label {
        self.reversed()
    }
}

/// Sampling ranges for [`gen_motion_dataset_with`]; every pair is `(lo, hi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub canvas: (usize, usize),
    pub frames: usize,
    /// Horizontal pixels per frame for left/right clips.
    pub speed: (f64, f64),
    /// Vertical drift in pixels per frame for left/right clips, either sign.
    pub drift: (f64, f64),
    /// Radians per frame for rotating clips.
    pub angular_step: (f64, f64),
    pub orbit_radius: (f64, f64),
    pub object_radius: (f64, f64),
    pub intensity: (f64, f64),
}

impl Default for MotionSpec {
    fn default() -> Self {
        MotionSpec {
            canvas: (32, 32),
            frames: 8,
            speed: (1.5, 2.5),
            drift: (0.0, 1.0),
            angular_step: (FRAC_PI_8, PI / 5.0),
            orbit_radius: (6.0, 8.0),
            object_radius: (2.5, 4.0),
            intensity: (0.5, 1.0),
        }
    }
}

impl MotionSpec {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("speed", self.speed),
            ("drift", self.drift),
            ("angular_step", self.angular_step),
            ("orbit_radius", self.orbit_radius),
            ("object_radius", self.object_radius),
            ("intensity", self.intensity),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is empty")));
            }
        }
        if self.speed.0 < 1.0 {
            return Err(Error::Config(format!("speed must be at least 1 px/frame, got {}", self.speed.0)));
        }
        if self.angular_step.0 < FRAC_PI_8 {
            return Err(Error::Config(format!("angular step must be at least pi/8, got {}", self.angular_step.0)));
        }
        if self.object_radius.0 <= 0.0 || self.intensity.0 <= 0.0 || self.intensity.1 > 1.0 {
            return Err(Error::Config("object radius must be positive and intensity in (0, 1]".into()));
        }
        if self.drift.0 < 0.0 || self.drift.1 >= self.speed.0 {
            return Err(Error::Config("drift must be non-negative and slower than the horizontal speed".into()));
        }
        let (h, w) = self.canvas;
        let side = h.min(w) as f64;
        let r = self.object_radius.1;
        let travel = (self.frames.saturating_sub(1)) as f64 * self.speed.1;
        let rise = (self.frames.saturating_sub(1)) as f64 * self.drift.1;
        if travel + 2.0 * r > w as f64 || rise + 2.0 * r > h as f64 || 2.0 * (self.orbit_radius.1 + r) > side {
            return Err(Error::Config("motion does not fit on the canvas".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    /// `[T, H, W, 1]` in `[0, 1]`.
    pub pixels: Tensor<f64>,
    pub label: Label,
    /// Dataset seed; together with `index` it determines the clip.
    pub seed: u64,
    pub index: usize,
}

impl MotionClip {
    pub fn reversed(&self) -> MotionClip {
        MotionClip {
            pixels: reverse_frames(&self.pixels),
            label: self.label.reversed(),
            ..self.clone()
        }
    }

    pub fn mirrored(&self) -> MotionClip {
        MotionClip {
            pixels: mirror_horizontal(&self.pixels),
            label: self.label.mirrored(),
            ..self.clone()
        }
    }
}

fn sample(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// The scene behind clip `index` of a dataset.
pub fn motion_scene(spec: &MotionSpec, label: Label, seed: u64, index: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (h, w) = (spec.canvas.0 as f64, spec.canvas.1 as f64);
    let shape = Shape::ALL[rng.gen_range(0..3)];
    let intensity = sample(&mut rng, spec.intensity);
    let r = sample(&mut rng, spec.object_radius);
    let trajectory = match label {
        Label::Left | Label::Right => {
            let speed = sample(&mut rng, spec.speed);
            let dx = if label == Label::Right { speed } else { -speed };
            let dy = sample(&mut rng, spec.drift) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            Trajectory::Translate {
                start: (0.0, 0.0),
                dy,
                dx,
            }
        }
        Label::Cw | Label::Ccw => Trajectory::Circle {
            center: (0.0, 0.0),
            radius: sample(&mut rng, spec.orbit_radius),
            phase: sample(&mut rng, (0.0, 2.0 * PI)),
            angular_step: sample(&mut rng, spec.angular_step),
            direction: if label == Label::Cw { Direction::Cw } else { Direction::Ccw },
        },
    };
    // place the swept bounding box uniformly, whatever the motion class
    let (mut y0, mut x0, mut y1, mut x1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for t in 0..spec.frames {
        let (y, x) = trajectory.position(t);
        (y0, x0, y1, x1) = (y0.min(y), x0.min(x), y1.max(y), x1.max(x));
    }
    let sy = sample(&mut rng, (r - y0, h - r - y1));
    let sx = sample(&mut rng, (r - x0, w - r - x1));
    let trajectory = match trajectory {
        Trajectory::Translate { dy, dx, .. } => Trajectory::Translate {
            start: (sy, sx),
            dy,
            dx,
        },
        Trajectory::Circle {
            radius,
            phase,
            angular_step,
            direction,
            ..
        } => Trajectory::Circle {
            center: (sy, sx),
            radius,
            phase,
            angular_step,
            direction,
        },
    };
    SceneSpec {
        canvas: spec.canvas,
        frames: spec.frames,
        objects: vec![SceneObject {
            shape,
            intensity,
            radius: r,
            trajectory,
        }],
    }
}

/// `4 * n_per_class` clips with the default [`MotionSpec`], labels in blocks
/// `[left; n], [right; n], [cw; n], [ccw; n]`.
pub fn gen_motion_dataset(n_per_class: usize, seed: u64) -> Result<Vec<MotionClip>> {
    gen_motion_dataset_with(&MotionSpec::default(), n_per_class, seed)
}

pub fn gen_motion_dataset_with(spec: &MotionSpec, n_per_class: usize, seed: u64) -> Result<Vec<MotionClip>> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    (0..Label::COUNT * n_per_class)
        .map(|index| {
            let label = Label::ALL[index / n_per_class];
            let (pixels, _) = motion_scene(spec, label, seed, index).render()?;
            Ok(MotionClip {
                pixels,
                label,
                seed,
                index,
            })
        })
        .collect()
}

/// Temporal mean frame, flattened; the appearance-only probe input.
pub fn probe_features(clip: &MotionClip) -> Vec<f64> {
    let s = clip.pixels.shape();
    let plane = s[1] * s[2] * s[3];
    let mut mean = vec![0.0; plane];
    for frame in clip.pixels.data().chunks(plane) {
        for (m, &p) in mean.iter_mut().zip(frame) {
            *m += p;
        }
    }
    mean.iter_mut().for_each(|m| *m /= s[0] as f64);
    mean
}
