//! Toy-scale supervised training of a motion classifier on top of MOSS.

mod checkpoint;
mod model;
mod probe;
mod run;

pub use checkpoint::Checkpoint;
pub use model::{Classifier, ModelConfig, NUM_CLASSES};
pub use probe::{fit_probe, fit_probe_cv, Probe, ProbeConfig, PROBE_L2_GRID};
pub use run::{evaluate, train_loop, EvalReport, MetricLine, RunOptions, Split, TrainOutcome};

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_frac: f64,
    pub label_smoothing: f64,
    pub batch: usize,
    pub iters: usize,
    pub seed: u64,
    /// Held-out evaluation period in iterations; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.15,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.1,
            label_smoothing: 0.1,
            batch: 16,
            iters: 300,
            seed: 0,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn warmup_iters(&self) -> usize {
        (self.warmup_frac * self.iters as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.batch == 0 {
            return Err(Error::Config("iters and batch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) || self.warmup_iters() >= self.iters {
            return Err(Error::Config(format!("warmup fraction {} leaves no decay phase", self.warmup_frac)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::Config("lr and weight decay must be >= 0, eps > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// The `train` command's configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Linear warmup from 0 to `cfg.lr`, then cosine decay towards 0.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_iters();
    if iter < warm {
        return cfg.lr * iter as f64 / warm as f64;
    }
    let progress = (iter - warm) as f64 / (cfg.iters - warm) as f64;
    0.5 * cfg.lr * (1.0 + (PI * progress.min(1.0)).cos())
}

/// Loss against the smoothed target `(1 - s) * onehot + s / K` and its
/// gradient `softmax(logits) - target`.
pub fn cross_entropy_smoothed(logits: &[f64], label: usize, smoothing: f64) -> Result<(f64, Vec<f64>)> {
    let k = logits.len();
    if label >= k {
        return Err(Error::Input(format!("label {label} out of range for {k} classes")));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Input(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(k);
    for (i, &z) in logits.iter().enumerate() {
        let target = smoothing / k as f64 + if i == label { 1.0 - smoothing } else { 0.0 };
        if target > 0.0 {
            loss -= target * (z - lse);
        }
        grad.push((z - lse).exp() - target);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter, kept in f64.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

/// One AdamW update of every trainable parameter from its stored gradient.
/// Weight decay is decoupled and applied before the Adam term.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut AdamState,
    t: usize,
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Input("optimizer steps count from 1".into()));
    }
    for (name, e) in store.iter() {
        if e.trainable && !e.grad.all_finite() {
            return Err(Error::NonFiniteGradient {
                name: name.to_string(),
                step: t,
            });
        }
    }
    let c1 = 1.0 - opt.beta1.powi(t as i32);
    let c2 = 1.0 - opt.beta2.powi(t as i32);
    for (name, e) in store.iter_mut().filter(|(_, e)| e.trainable) {
        let n = e.value.len();
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let grads = e.grad.data().to_vec();
        for (i, (p, g)) in e.value.data_mut().iter_mut().zip(grads).enumerate() {
            let g = g.f64();
            let mut theta = p.f64();
            theta -= lr * opt.weight_decay * theta;
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
            theta -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + opt.eps);
            *p = T::of(theta);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(theta: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("theta", Tensor::full(&[1], theta), true);
        s.accumulate_grad("theta", &Tensor::full(&[1], grad)).unwrap();
        s
    }

    fn opt(wd: f64) -> AdamW {
        AdamW {
            weight_decay: wd,
            ..TrainConfig::default().adamw()
        }
    }

    #[test]
    fn schedule_landmarks() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.warmup_iters(), 30);
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(30, &cfg), cfg.lr);
        assert!((lr_at(30 + 135, &cfg) - 0.5 * cfg.lr).abs() < 1e-9);
        assert!(lr_at(299, &cfg) < cfg.lr * 1e-3);
        assert!((0..300).all(|i| lr_at(i, &cfg) >= 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_frac: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let json = r#"{"iters": 10, "seed": 3}"#;
        let c: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!((c.iters, c.seed, c.batch), (10, 3, 16));
    }

    #[test]
    fn cross_entropy_cases() {
        let (l, g) = cross_entropy_smoothed(&[0.3; 4], 2, 0.0).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((g[2] + 0.75).abs() < 1e-12 && (g[0] - 0.25).abs() < 1e-12);
        let (l, _) = cross_entropy_smoothed(&[0.0, 60.0, 0.0, 0.0], 1, 0.0).unwrap();
        assert!(l < 1e-20);
        assert!(matches!(cross_entropy_smoothed(&[0.0; 4], 4, 0.1), Err(Error::Input(_))));
        let z = [0.4, -1.2, 2.0, 0.3];
        let (_, g) = cross_entropy_smoothed(&z, 0, 0.1).unwrap();
        for i in 0..4 {
            let h = 1e-6;
            let (mut a, mut b) = (z, z);
            a[i] += h;
            b[i] -= h;
            let fd = (cross_entropy_smoothed(&a, 0, 0.1).unwrap().0 - cross_entropy_smoothed(&b, 0, 0.1).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn adamw_hand_cases() {
        let mut s = scalar_store(1.0, 0.0);
        let mut st = AdamState::default();
        adamw_step(&mut s, &mut st, 1, 0.1, &opt(0.0)).unwrap();
        assert_eq!(s.value("theta").unwrap().data()[0], 1.0);

        let mut s = scalar_store(1.0, 1.0);
        adamw_step(&mut s, &mut AdamState::default(), 1, 0.1, &opt(0.0)).unwrap();
        assert!((s.value("theta").unwrap().data()[0] - 0.9).abs() < 1e-6);

        let mut s = scalar_store(1.0, 0.0);
        adamw_step(&mut s, &mut AdamState::default(), 1, 0.1, &opt(0.01)).unwrap();
        assert!((s.value("theta").unwrap().data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_nan() {
        let mut s = scalar_store(1.0, f64::NAN);
        let r = adamw_step(&mut s, &mut AdamState::default(), 7, 0.1, &opt(0.0));
        assert!(matches!(r, Err(Error::NonFiniteGradient { ref name, step: 7 }) if name == "theta"));
    }

    #[test]
    fn adamw_solves_a_quadratic() {
        // f = sum a_i (x_i - c_i)^2
        let (a, c) = ([1.0, 4.0, 0.5], [0.3, -2.0, 1.5]);
        let mut s = ParamStore::new();
        s.insert("x", Tensor::zeros(&[3]), true);
        let mut st = AdamState::default();
        for t in 1..=2000 {
            let x = s.value("x").unwrap().data().to_vec();
            let g: Vec<f64> = (0..3).map(|i| 2.0 * a[i] * (x[i] - c[i])).collect();
            s.zero_grads();
            s.accumulate_grad("x", &Tensor::new(&[3], g).unwrap()).unwrap();
            let lr = 0.05 * (1.0 - t as f64 / 2001.0);
            adamw_step(&mut s, &mut st, t, lr, &opt(0.0)).unwrap();
        }
        let x = s.value("x").unwrap();
        for i in 0..3 {
            assert!((x.data()[i] - c[i]).abs() < 1e-4, "{:?}", x.data());
        }
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut s = scalar_store(1.0, 1.0);
        s.insert("frozen", Tensor::full(&[2], 3.0), false);
        adamw_step(&mut s, &mut AdamState::default(), 1, 0.1, &opt(0.1)).unwrap();
        assert_eq!(s.value("frozen").unwrap().data(), &[3.0, 3.0]);
    }
}
