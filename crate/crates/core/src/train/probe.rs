use crate::error::{Error, Result};

pub const PROBE_L2_GRID: [f64; 5] = [1e-3, 1e-2, 1e-1, 1.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub l2: f64,
    pub lr: f64,
    pub iters: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2: 1e-3,
            lr: 0.5,
            iters: 500,
        }
    }
}

/// Multinomial logistic regression on standardised features.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[classes][dim]`.
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

fn softmax(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

/// Full-batch gradient descent on the L2-regularised mean cross-entropy.
pub fn fit_probe(x: &[Vec<f64>], y: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Probe> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Input(format!("probe needs matching non-empty data, got {} rows and {} labels", x.len(), y.len())));
    }
    let dim = x[0].len();
    if x.iter().any(|r| r.len() != dim) || y.iter().any(|&k| k >= classes) {
        return Err(Error::Input("ragged probe features or label out of range".into()));
    }
    let n = x.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in x {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
    }
    let mut scale = vec![0.0; dim];
    for r in x {
        scale.iter_mut().zip(r).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
    }
    // constant features stay at zero after centring
    scale.iter_mut().for_each(|s| *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 });
    let xs: Vec<Vec<f64>> = x
        .iter()
        .map(|r| r.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s).collect())
        .collect();

    let mut probe = Probe {
        mean,
        scale,
        w: vec![vec![0.0; dim]; classes],
        b: vec![0.0; classes],
    };
    let mut p = vec![0.0; classes];
    for _ in 0..cfg.iters {
        let mut gw = vec![vec![0.0; dim]; classes];
        let mut gb = vec![0.0; classes];
        for (r, &label) in xs.iter().zip(y) {
            for k in 0..classes {
                p[k] = probe.b[k] + probe.w[k].iter().zip(r).map(|(a, b)| a * b).sum::<f64>();
            }
            softmax(&mut p);
            for k in 0..classes {
                let d = (p[k] - (k == label) as u8 as f64) / n;
                gb[k] += d;
                gw[k].iter_mut().zip(r).for_each(|(g, v)| *g += d * v);
            }
        }
        for k in 0..classes {
            for (w, g) in probe.w[k].iter_mut().zip(&gw[k]) {
                *w -= cfg.lr * (g + cfg.l2 * *w);
            }
            probe.b[k] -= cfg.lr * gb[k];
        }
    }
    Ok(probe)
}

/// Picks the L2 strength from `grid` by `folds`-fold cross-validation on
/// interleaved folds, then refits on all data.
pub fn fit_probe_cv(
    x: &[Vec<f64>],
    y: &[usize],
    classes: usize,
    base: &ProbeConfig,
    grid: &[f64],
    folds: usize,
) -> Result<(Probe, f64)> {
    if grid.is_empty() || folds < 2 || x.len() < folds {
        return Err(Error::Input("cross-validation needs a grid, >= 2 folds and one row per fold".into()));
    }
    let mut best = (f64::NEG_INFINITY, grid[0]);
    for &l2 in grid {
        let cfg = ProbeConfig { l2, ..*base };
        let mut hits = 0.0;
        for k in 0..folds {
            let split = |keep: bool| -> (Vec<Vec<f64>>, Vec<usize>) {
                (0..x.len()).filter(|i| (i % folds == k) != keep).map(|i| (x[i].clone(), y[i])).unzip()
            };
            let (xtr, ytr) = split(true);
            let (xva, yva) = split(false);
            hits += fit_probe(&xtr, &ytr, classes, &cfg)?.accuracy(&xva, &yva) * yva.len() as f64;
        }
        let acc = hits / x.len() as f64;
        if acc > best.0 {
            best = (acc, l2);
        }
    }
    let cfg = ProbeConfig { l2: best.1, ..*base };
    Ok((fit_probe(x, y, classes, &cfg)?, best.1))
}

impl Probe {
    pub fn predict(&self, x: &[f64]) -> usize {
        let z: Vec<f64> = self
            .w
            .iter()
            .zip(&self.b)
            .map(|(w, b)| {
                b + w
                    .iter()
                    .zip(x)
                    .zip(self.mean.iter().zip(&self.scale))
                    .map(|((w, v), (m, s))| w * (v - m) * s)
                    .sum::<f64>()
            })
            .collect();
        (0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b })
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        let hits = x.iter().zip(y).filter(|(r, &k)| self.predict(r) == k).count();
        hits as f64 / y.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_blobs_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let centres = [[2.0, 0.0], [-2.0, 0.0], [0.0, 2.0]];
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..150 {
            let k = i % 3;
            x.push(vec![centres[k][0] + rng.gen_range(-0.5..0.5), centres[k][1] + rng.gen_range(-0.5..0.5), 1.0]);
            y.push(k);
        }
        let p = fit_probe(&x, &y, 3, &ProbeConfig::default()).unwrap();
        assert_eq!(p.accuracy(&x, &y), 1.0);
    }

    #[test]
    fn noise_labels_stay_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gen = |rng: &mut ChaCha8Rng, n| -> (Vec<Vec<f64>>, Vec<usize>) {
            (0..n).map(|i| ((0..5).map(|_| rng.gen_range(0.0..1.0)).collect(), i % 4)).unzip()
        };
        let (x, y) = gen(&mut rng, 400);
        let (xt, yt) = gen(&mut rng, 400);
        let p = fit_probe(&x, &y, 4, &ProbeConfig::default()).unwrap();
        assert!(p.accuracy(&xt, &yt) < 0.35);
    }

    #[test]
    fn cross_validation_prefers_useful_regularisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y): (Vec<Vec<f64>>, Vec<usize>) = (0..120)
            .map(|i| {
                let k = i % 2;
                let mut r: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
                r[0] += if k == 0 { 1.5 } else { -1.5 };
                (r, k)
            })
            .unzip();
        let (p, l2) = fit_probe_cv(&x, &y, 2, &ProbeConfig::default(), &[1e-3, 1e-1], 4).unwrap();
        assert!([1e-3, 1e-1].contains(&l2));
        assert!(p.accuracy(&x, &y) > 0.8);
        assert!(fit_probe_cv(&x, &y, 2, &ProbeConfig::default(), &[], 4).is_err());
    }

    #[test]
    fn bad_input() {
        assert!(fit_probe(&[], &[], 2, &ProbeConfig::default()).is_err());
        assert!(fit_probe(&[vec![1.0]], &[3], 2, &ProbeConfig::default()).is_err());
    }
}
