//! STSS encoding functions: maps from a `[T, H, W, L, U, V]` volume back to
//! a feature map.
//!
//! The learned encoder processes spatial structure first and fuses temporal
//! offsets last:
//!
//! 1. flatten each `(U, V)` similarity map and project it to `D` channels;
//! 2. refine every temporal-offset slice with the shared
//!    `conv3x3 -> batchnorm -> GELU` blocks over `(H, W)`;
//! 3. concatenate the `L` slices along channels (ascending offset);
//! 4. project `L * D` channels to `C`.
//!
//! Batch normalisation pools statistics over `T, H, W` and all `L` slices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::real::Real;
use crate::stss::{FeatureMap, StssTensor, WindowSpec};
use crate::tensor::{Mode, NodeId, OpGraph, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Learned,
    Vectorize,
    MeanPool,
}

/// Hyperparameters of one learned encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderSpec {
    pub window: WindowSpec,
    /// Internal width `D`.
    pub d: usize,
    /// Output width `C`.
    pub c: usize,
    pub blocks: usize,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.d == 0 || self.c == 0 {
            return Err(Error::Config(format!(
                "encoder needs D, C and block count >= 1, got D={} C={} blocks={}",
                self.d, self.c, self.blocks
            )));
        }
        Ok(())
    }
}

impl EncoderKind {
    /// Channel count of `g(S)` for a given window.
    pub fn out_channels(self, window: WindowSpec, c: usize) -> usize {
        match self {
            EncoderKind::Learned => c,
            EncoderKind::Vectorize => window.volume(),
            EncoderKind::MeanPool => window.l(),
        }
    }
}

/// Appends `g(S)` to a graph and returns the `[T, H, W, *]` node.
pub fn append_encoder<T: Real>(
    g: &mut OpGraph<T>,
    s: NodeId,
    kind: EncoderKind,
    spec: &EncoderSpec,
    prefix: &str,
) -> NodeId {
    let (l, u, v) = spec.window.extents();
    match kind {
        EncoderKind::Vectorize => g.reshape(s, 3, &[l * u * v]),
        EncoderKind::MeanPool => g.mean_trailing(s, 2),
        EncoderKind::Learned => {
            let flat = g.reshape(s, 4, &[u * v]);
            let spatial = g.linear(flat, &format!("{prefix}.spatial_fc"));
            // (T, H, W, L, D) -> (T, L, H, W, D): every (t, l) is one image
            let mut x = g.permute(spatial, &[0, 3, 1, 2, 4]);
            for i in 0..spec.blocks {
                let conv = g.conv3x3(x, &format!("{prefix}.block{i}.conv"));
                let bn = g.batchnorm(conv, &format!("{prefix}.block{i}.bn"));
                x = g.gelu(bn);
            }
            let back = g.permute(x, &[0, 2, 3, 1, 4]);
            let cat = g.reshape(back, 3, &[l * spec.d]);
            g.linear(cat, &format!("{prefix}.temporal_fc"))
        }
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` sample.
pub(crate) fn fan_in_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..=bound)))
}

/// Registers freshly initialised encoder parameters under `prefix`.
pub fn init_encoder<T: Real>(store: &mut ParamStore<T>, prefix: &str, spec: &EncoderSpec, rng: &mut impl Rng) {
    let (l, u, v) = spec.window.extents();
    let (d, c) = (spec.d, spec.c);
    store.insert(format!("{prefix}.spatial_fc.w"), fan_in_uniform(&[u * v, d], u * v, rng), true);
    store.insert(format!("{prefix}.spatial_fc.b"), fan_in_uniform(&[d], u * v, rng), true);
    for i in 0..spec.blocks {
        let p = format!("{prefix}.block{i}");
        store.insert(format!("{p}.conv.w"), fan_in_uniform(&[3, 3, d, d], 9 * d, rng), true);
        store.insert(format!("{p}.conv.b"), fan_in_uniform(&[d], 9 * d, rng), true);
        store.insert(format!("{p}.bn.gamma"), Tensor::full(&[d], T::one()), true);
        store.insert(format!("{p}.bn.beta"), Tensor::zeros(&[d]), true);
        store.insert(format!("{p}.bn.rmean"), Tensor::zeros(&[d]), false);
        store.insert(format!("{p}.bn.rvar"), Tensor::full(&[d], T::one()), false);
    }
    store.insert(format!("{prefix}.temporal_fc.w"), fan_in_uniform(&[l * d, c], l * d, rng), true);
    store.insert(format!("{prefix}.temporal_fc.b"), fan_in_uniform(&[c], l * d, rng), true);
}

/// Checks that the stored encoder parameters fit `spec`.
pub fn check_encoder_params<T: Real>(store: &ParamStore<T>, prefix: &str, spec: &EncoderSpec) -> Result<()> {
    spec.validate()?;
    let (l, u, v) = spec.window.extents();
    let (d, c) = (spec.d, spec.c);
    let mut expect = vec![
        (format!("{prefix}.spatial_fc.w"), vec![u * v, d]),
        (format!("{prefix}.spatial_fc.b"), vec![d]),
        (format!("{prefix}.temporal_fc.w"), vec![l * d, c]),
        (format!("{prefix}.temporal_fc.b"), vec![c]),
    ];
    for i in 0..spec.blocks {
        let p = format!("{prefix}.block{i}");
        expect.push((format!("{p}.conv.w"), vec![3, 3, d, d]));
        expect.push((format!("{p}.conv.b"), vec![d]));
        for s in ["gamma", "beta", "rmean", "rvar"] {
            expect.push((format!("{p}.bn.{s}"), vec![d]));
        }
    }
    for (name, shape) in expect {
        let have = store.value(&name)?;
        if have.shape() != shape.as_slice() {
            return Err(Error::Config(format!(
                "parameter `{name}` has shape {:?}, window ({l}, {u}, {v}) with D={d}, C={c} needs {shape:?}",
                have.shape()
            )));
        }
    }
    Ok(())
}

/// Runs the learned encoder once. Batch-norm running statistics are not
/// committed; use a graph directly for training.
pub fn encode_learned<T: Real>(
    s: &StssTensor<T>,
    store: &ParamStore<T>,
    prefix: &str,
    spec: &EncoderSpec,
    mode: Mode,
    exec: Exec,
) -> Result<FeatureMap<T>> {
    if s.window() != spec.window {
        return Err(Error::Config(format!(
            "STSS window {:?} does not match encoder window {:?}",
            s.window().extents(),
            spec.window.extents()
        )));
    }
    check_encoder_params(store, prefix, spec)?;
    let mut g = OpGraph::new();
    let x = g.input();
    append_encoder(&mut g, x, EncoderKind::Learned, spec, prefix);
    let out = g.forward(&[s.tensor().clone()], store, mode, exec)?;
    FeatureMap::new(out)
}

/// `g` as a plain reshape `(T, H, W, L, U, V) -> (T, H, W, L*U*V)`.
pub fn encode_vectorize<T: Real>(s: &StssTensor<T>) -> FeatureMap<T> {
    let (t, h, w) = s.grid();
    let data = s.tensor().clone().reshape(&[t, h, w, s.window().volume()]).expect("same volume");
    FeatureMap::new(data).expect("STSS values are finite")
}

/// Inverse of [`encode_vectorize`].
pub fn devectorize<T: Real>(m: &FeatureMap<T>, window: WindowSpec) -> Result<StssTensor<T>> {
    let (t, h, w, c) = m.dims();
    if c != window.volume() {
        return Err(Error::dim("devectorize", m.tensor().shape(), &[t, h, w, window.volume()]));
    }
    let (l, u, v) = window.extents();
    StssTensor::new(m.tensor().clone().reshape(&[t, h, w, l, u, v])?, window)
}

/// Mean over each `(U, V)` map, keeping one channel per temporal offset.
pub fn encode_mean_pool<T: Real>(s: &StssTensor<T>) -> FeatureMap<T> {
    let (t, h, w) = s.grid();
    let (l, u, v) = s.window().extents();
    let k = u * v;
    let inv = T::of(1.0 / k as f64);
    let data = s.tensor().data().chunks(k).map(|c| c.iter().copied().sum::<T>() * inv).collect();
    FeatureMap::new(Tensor::new(&[t, h, w, l], data).expect("shape")).expect("finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(l: usize, u: usize, v: usize, d: usize, c: usize) -> EncoderSpec {
        EncoderSpec {
            window: WindowSpec::new(l, u, v).unwrap(),
            d,
            c,
            blocks: 3,
        }
    }

    fn random_stss(shape: [usize; 3], w: WindowSpec, seed: u64) -> StssTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, u, v) = w.extents();
        StssTensor::new(Tensor::uniform(&[shape[0], shape[1], shape[2], l, u, v], -1.0, 1.0, &mut rng), w).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let sp = spec(3, 3, 3, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        init_encoder(&mut store, "enc1", &sp, &mut rng);
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            let shape = store.value(&n).unwrap().shape().to_vec();
            store.set_value(&n, Tensor::zeros(&shape)).unwrap();
        }
        let s = random_stss([2, 4, 4], sp.window, 1);
        for mode in [Mode::Train, Mode::Eval] {
            let m = encode_learned(&s, &store, "enc1", &sp, mode, Exec::Sequential).unwrap();
            assert_eq!(m.dims(), (2, 4, 4, 5));
            assert!(m.tensor().data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn learned_shape_contract() {
        let sp = spec(5, 3, 3, 6, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        init_encoder(&mut store, "enc2", &sp, &mut rng);
        let s = StssTensor::new(Tensor::<f32>::uniform(&[3, 4, 5, 5, 3, 3], -1.0, 1.0, &mut rng), sp.window).unwrap();
        let mut g = OpGraph::new();
        let x = g.input();
        let out = append_encoder(&mut g, x, EncoderKind::Learned, &sp, "enc2");
        g.forward(&[s.tensor().clone()], &store, Mode::Train, Exec::Sequential).unwrap();
        assert_eq!(g.value(x + 2).unwrap().shape(), &[3, 4, 5, 5, 6]);
        assert_eq!(g.value(out - 1).unwrap().shape(), &[3, 4, 5, 30]);
        assert_eq!(g.value(out).unwrap().shape(), &[3, 4, 5, 7]);
    }

    #[test]
    fn window_mismatch_is_config_error() {
        let sp = spec(3, 3, 3, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        init_encoder(&mut store, "enc1", &sp, &mut rng);
        let s = random_stss([1, 3, 3], WindowSpec::new(3, 5, 5).unwrap(), 0);
        assert!(matches!(
            encode_learned(&s, &store, "enc1", &sp, Mode::Eval, Exec::Sequential),
            Err(Error::Config(_))
        ));
        let wrong = EncoderSpec { d: 5, ..sp };
        let s = random_stss([1, 3, 3], sp.window, 0);
        assert!(matches!(
            encode_learned(&s, &store, "enc1", &wrong, Mode::Eval, Exec::Sequential),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn vectorize_is_a_bijective_reshape() {
        let w = WindowSpec::new(3, 3, 3).unwrap();
        let s = random_stss([3, 4, 4], w, 4);
        let m = encode_vectorize(&s);
        assert_eq!(m.dims(), (3, 4, 4, 27));
        assert_eq!(m.tensor().data(), s.tensor().data());
        assert_eq!(devectorize(&m, w).unwrap(), s);
    }

    #[test]
    fn mean_pool_cases() {
        let w = WindowSpec::new(3, 3, 5).unwrap();
        let c = StssTensor::new(Tensor::<f64>::full(&[2, 2, 2, 3, 3, 5], 0.25), w).unwrap();
        let m = encode_mean_pool(&c);
        assert_eq!(m.dims(), (2, 2, 2, 3));
        assert!(m.tensor().data().iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let imp = StssTensor::new(Tensor::<f64>::from_fn(&[1, 2, 2, 3, 3, 5], |i| if i % 15 == 7 { 1.0 } else { 0.0 }), w).unwrap();
        assert!(encode_mean_pool(&imp).tensor().data().iter().all(|&x| (x - 1.0 / 15.0).abs() < 1e-15));

        let s = random_stss([2, 3, 2], w, 8);
        let m = encode_mean_pool(&s);
        for t in 0..2 {
            for h in 0..3 {
                for x in 0..2 {
                    for l in 0..3 {
                        let mut sum = 0.0;
                        for u in 0..3 {
                            for v in 0..5 {
                                sum += s.tensor().at(&[t, h, x, l, u, v]);
                            }
                        }
                        assert!((m.tensor().at(&[t, h, x, l]) - sum / 15.0).abs() <= 1e-6);
                    }
                }
            }
        }
    }
}
