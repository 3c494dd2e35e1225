use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::fan_in_uniform;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::moss::{append_moss, init_params, MossConfig};
use crate::real::Real;
use crate::stss::{FeatureMap, WindowSpec};
use crate::synthdata::{patch_embed, MotionClip, PatchEmbed};
use crate::tensor::{Mode, OpGraph, ParamStore, Tensor};

pub const NUM_CLASSES: usize = 4;

/// Patch embedding, MOSS (or the visual path alone) and the classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub moss: MossConfig,
    /// Drop every STSS branch and keep `visual_fc` only.
    #[serde(default)]
    pub baseline: bool,
    /// GELU before the pooled linear head.
    #[serde(default = "yes")]
    pub head_gelu: bool,
    #[serde(default)]
    pub embed_seed: u64,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn new(moss: MossConfig) -> Self {
        ModelConfig {
            moss,
            baseline: false,
            head_gelu: true,
            embed_seed: 0,
        }
    }

    /// The motion-experiment model: `C = 16`, `D = 8`, three encoder
    /// blocks and a `(5, 5, 5)` window. An empty `orders` gives the baseline
    /// without STSS branches.
    pub fn toy(orders: &[usize]) -> Self {
        let moss = MossConfig {
            orders: if orders.is_empty() { vec![1] } else { orders.to_vec() },
            d: 8,
            c: 16,
            blocks: 3,
            ..Default::default()
        }
        .with_window(WindowSpec::new(5, 5, 5).expect("odd"));
        ModelConfig {
            baseline: orders.is_empty(),
            ..ModelConfig::new(moss)
        }
    }

    pub fn embed(&self) -> PatchEmbed {
        PatchEmbed::new(self.moss.c, self.embed_seed)
    }
}

/// A built classifier graph: `[T, H, W, C]` features to `NUM_CLASSES` logits.
#[derive(Debug, Clone)]
pub struct Classifier<T> {
    pub config: ModelConfig,
    graph: OpGraph<T>,
}

impl<T: Real> Classifier<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.moss.validate()?;
        let mut g = OpGraph::new();
        let f = g.input();
        let y = if config.baseline {
            g.linear(f, "visual_fc")
        } else {
            append_moss(&mut g, f, &config.moss)?.0
        };
        let h = if config.head_gelu { g.gelu(y) } else { y };
        let pooled = g.mean_rows(h);
        let logits = g.linear(pooled, "head");
        g.set_output(logits);
        Ok(Classifier { config, graph: g })
    }

    /// Fresh parameters: MOSS init plus a fan-in uniform head.
    pub fn init(&self, seed: u64) -> Result<ParamStore<T>> {
        let cfg = &self.config.moss;
        let mut store = if self.config.baseline {
            let full: ParamStore<T> = init_params(cfg, seed)?;
            let mut s = ParamStore::new();
            for name in ["visual_fc.w", "visual_fc.b"] {
                s.insert(name, full.value(name)?.clone(), true);
            }
            s
        } else {
            init_params(cfg, seed)?
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144);
        store.insert("head.w", fan_in_uniform(&[cfg.c, NUM_CLASSES], cfg.c, &mut rng), true);
        store.insert("head.b", fan_in_uniform(&[NUM_CLASSES], cfg.c, &mut rng), true);
        Ok(store)
    }

    pub fn graph(&self) -> &OpGraph<T> {
        &self.graph
    }

    pub fn features(&self, clip: &MotionClip) -> Result<FeatureMap<T>> {
        patch_embed(&clip.pixels, &self.config.embed())
    }

    /// Logits for one clip, using a private copy of the graph.
    pub fn logits(&self, f: &FeatureMap<T>, params: &ParamStore<T>, mode: Mode, exec: Exec) -> Result<Vec<f64>> {
        let mut g = self.graph.clone();
        Ok(g.forward(&[f.tensor().clone()], params, mode, exec)?.data().iter().map(|x| x.f64()).collect())
    }

    /// Forward and backward for one clip; the graph keeps the running
    /// statistics of the pass.
    pub(crate) fn step(
        &self,
        f: &FeatureMap<T>,
        label: usize,
        smoothing: f64,
        params: &ParamStore<T>,
        exec: Exec,
    ) -> Result<(f64, OpGraph<T>, crate::tensor::Backward<T>)> {
        let mut g = self.graph.clone();
        let out = g.forward(&[f.tensor().clone()], params, Mode::Train, exec)?;
        let z: Vec<f64> = out.data().iter().map(|x| x.f64()).collect();
        let (loss, dz) = super::cross_entropy_smoothed(&z, label, smoothing)?;
        if !loss.is_finite() {
            return Err(Error::Degenerate("non-finite loss".into()));
        }
        let dz = Tensor::new(&[NUM_CLASSES], dz.into_iter().map(T::of).collect())?;
        let bw = g.backward(&dz, params)?;
        Ok((loss, g, bw))
    }

    /// Forward FLOPs of one clip at the given feature shape.
    pub fn flops(&self, f: &FeatureMap<T>, params: &ParamStore<T>) -> Result<u64> {
        let mut g = self.graph.clone();
        g.forward(&[f.tensor().clone()], params, Mode::Eval, Exec::Sequential)?;
        Ok(g.flops())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::gen_motion_dataset;

    fn tiny(baseline: bool) -> ModelConfig {
        let moss = MossConfig {
            orders: vec![1],
            d: 2,
            c: 4,
            blocks: 1,
            ..Default::default()
        }
        .with_window(WindowSpec::new(3, 3, 3).unwrap());
        ModelConfig {
            baseline,
            ..ModelConfig::new(moss)
        }
    }

    #[test]
    fn baseline_has_no_branches() {
        let m = Classifier::<f64>::new(tiny(true)).unwrap();
        let p = m.init(0).unwrap();
        let names: Vec<&str> = p.names().collect();
        assert_eq!(names, ["head.b", "head.w", "visual_fc.b", "visual_fc.w"]);
        let full = Classifier::<f64>::new(tiny(false)).unwrap().init(0).unwrap();
        assert!(full.contains("enc1.spatial_fc.w") && full.contains("out_fc1.w"));
        assert_eq!(full.value("head.w").unwrap(), p.value("head.w").unwrap());
    }

    #[test]
    fn toy_presets() {
        let b = ModelConfig::toy(&[]);
        assert!(b.baseline && b.head_gelu);
        let m = ModelConfig::toy(&[1, 2]);
        assert!(!m.baseline);
        assert_eq!((m.moss.c, m.moss.d, m.moss.window_for(2).extents()), (16, 8, (5, 5, 5)));
    }

    #[test]
    fn logits_and_step() {
        let m = Classifier::<f64>::new(tiny(false)).unwrap();
        let p = m.init(1).unwrap();
        let clip = &gen_motion_dataset(1, 0).unwrap()[2];
        let f = m.features(clip).unwrap();
        assert_eq!(f.dims(), (8, 8, 8, 4));
        let z = m.logits(&f, &p, Mode::Eval, Exec::Sequential).unwrap();
        assert_eq!(z.len(), NUM_CLASSES);
        let (loss, _, bw) = m.step(&f, clip.label.index(), 0.1, &p, Exec::Sequential).unwrap();
        assert!(loss > 0.0);
        assert!(bw.params.contains_key("head.w") && bw.params.contains_key("enc1.block0.conv.w"));
        assert!(!bw.params.contains_key("enc1.block0.bn.rmean"));
    }
}
