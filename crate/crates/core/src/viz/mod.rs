//! Per-order STSS query maps and feature-norm maps rendered as binary PPM.
//!
//! File names follow `{prefix}_order{n}_q{t}-{h}-{w}_l{offset}.ppm` and
//! `{prefix}_norm_order{n}_t{t}.ppm`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::moss::OrderOutputs;
use crate::real::Real;
use crate::stss::{FeatureMap, StssTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Colormap {
    /// Blue through white to red, for signed similarities.
    Signed,
    /// Black to white, for norms.
    Norm,
}

impl Colormap {
    pub fn rgb(self, index: u8) -> [u8; 3] {
        match self {
            Colormap::Norm => [index; 3],
            Colormap::Signed => {
                let i = index as u32;
                if i < 128 {
                    let c = ((i * 255 + 63) / 127).min(255) as u8;
                    [c, c, 255]
                } else {
                    let c = (((255 - i) * 255 + 63) / 127).min(255) as u8;
                    [255, c, c]
                }
            }
        }
    }

    pub fn table(self) -> [[u8; 3]; 256] {
        let mut t = [[0; 3]; 256];
        for (i, e) in t.iter_mut().enumerate() {
            *e = self.rgb(i as u8);
        }
        t
    }

    /// Entry used for constant maps.
    pub fn degenerate_index(self) -> u8 {
        match self {
            Colormap::Signed => 128,
            Colormap::Norm => 0,
        }
    }
}

/// Query selection on the feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuerySelector {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub order: usize,
}

/// A `[H, W]` map with min-max normalisation onto a colormap.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub colormap: Colormap,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, colormap: Colormap) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::dim("heatmap", &[values.len()], &[height, width]));
        }
        Ok(Heatmap {
            height,
            width,
            values,
            colormap,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Colormap indices after min-max normalisation.
    pub fn indices(&self) -> Vec<u8> {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return vec![self.colormap.degenerate_index(); self.values.len()];
        }
        self.values
            .iter()
            .map(|&v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        let table = self.colormap.table();
        for i in self.indices() {
            out.extend_from_slice(&table[i as usize]);
        }
        out
    }
}

pub fn write_ppm(h: &Heatmap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, h.to_ppm()).map_err(|e| Error::io(path, e))
}

/// One heatmap per temporal offset: the `(U, V)` similarity patch of the
/// query placed around `(h, w)` on a zero canvas, clipped at the borders.
pub fn stss_maps_for<T: Real>(s: &StssTensor<T>, t: usize, h: usize, w: usize) -> Result<Vec<Heatmap>> {
    let (gt, gh, gw) = s.grid();
    if t >= gt || h >= gh || w >= gw {
        return Err(Error::Input(format!("query ({t}, {h}, {w}) outside grid ({gt}, {gh}, {gw})")));
    }
    let (rl, ru, rv) = s.window().radii();
    let (rl, ru, rv) = (rl as isize, ru as isize, rv as isize);
    (-rl..=rl)
        .map(|l| {
            let mut canvas = vec![0.0; gh * gw];
            for u in -ru..=ru {
                for v in -rv..=rv {
                    let (y, x) = (h as isize + u, w as isize + v);
                    if y >= 0 && x >= 0 && y < gh as isize && x < gw as isize {
                        canvas[y as usize * gw + x as usize] = s.get((t, h, w), (l, u, v)).f64();
                    }
                }
            }
            Heatmap::new(gh, gw, canvas, Colormap::Signed)
        })
        .collect()
}

pub fn stss_query_maps<T: Real>(outputs: &OrderOutputs<T>, q: QuerySelector) -> Result<Vec<Heatmap>> {
    let s = outputs
        .s
        .get(&q.order)
        .ok_or_else(|| Error::Input(format!("order {} not computed", q.order)))?;
    stss_maps_for(s, q.t, q.h, q.w)
}

/// `values[h, w] = |M[t, h, w, :]|`.
pub fn l2norm_map<T: Real>(m: &FeatureMap<T>, t: usize) -> Result<Heatmap> {
    let (tt, h, w, c) = m.dims();
    if t >= tt {
        return Err(Error::Input(format!("frame {t} outside 0..{tt}")));
    }
    let frame = &m.tensor().data()[t * h * w * c..(t + 1) * h * w * c];
    let values = frame.chunks(c).map(|p| p.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt()).collect();
    Heatmap::new(h, w, values, Colormap::Norm)
}

pub fn query_map_name(prefix: &str, q: QuerySelector, offset: isize) -> String {
    format!("{prefix}_order{}_q{}-{}-{}_l{offset}.ppm", q.order, q.t, q.h, q.w)
}

pub fn norm_map_name(prefix: &str, order: usize, t: usize) -> String {
    format!("{prefix}_norm_order{order}_t{t}.ppm")
}

/// Writes the query maps of every order in `orders` and the `M(n)` norm map
/// at the query frame. Returns the written paths in order.
pub fn render_query_set<T: Real>(
    outputs: &OrderOutputs<T>,
    t: usize,
    h: usize,
    w: usize,
    orders: &[usize],
    dir: impl AsRef<Path>,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for &order in orders {
        let q = QuerySelector { t, h, w, order };
        let maps = stss_query_maps(outputs, q)?;
        let rl = (maps.len() / 2) as isize;
        for (i, map) in maps.iter().enumerate() {
            let p = dir.join(query_map_name(prefix, q, i as isize - rl));
            write_ppm(map, &p)?;
            written.push(p);
        }
        if let Some(m) = outputs.m.get(&order) {
            let p = dir.join(norm_map_name(prefix, order, t));
            write_ppm(&l2norm_map(m, t)?, &p)?;
            written.push(p);
        }
    }
    Ok(written)
}
