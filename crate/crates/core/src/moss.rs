//! Recursive high-order STSS and the multi-order (MOSS) module.
//!
//! ```text
//! S(1) = f(F)
//! S(n) = f(fuse(g(n-1)(S(n-1)), F))        n >= 2
//! M(n) = g(n)(S(n))
//! MOSS(F) = visual_fc(F) + sum over active n of out_fc(n)(M(n))
//! ```
//!
//! `f` is the STSS transform, `g(n)` an independent encoder per order, and
//! `fuse` the identity under [`Fusion::NoFusion`]. Encoders exist for every
//! order up to the highest active one, since each order feeds the next; only
//! active orders contribute to the sum.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{append_encoder, fan_in_uniform, init_encoder, EncoderKind, EncoderSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::real::Real;
use crate::stss::{FeatureMap, SimilarityPolicy, StssTensor, WindowSpec};
use crate::tensor::{Backward, Mode, NodeId, OpGraph, ParamStore, Tensor};

pub const MAX_ORDER: usize = 4;

/// How `F` is mixed into `M(n-1)` before computing `S(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    NoFusion,
    Addition,
    Mlp,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitFlags {
    /// Zero every `out_fc(n)` weight and bias.
    pub zero_branch: bool,
    /// Start `visual_fc` at the identity.
    pub visual_identity: bool,
}

impl Default for InitFlags {
    fn default() -> Self {
        InitFlags {
            zero_branch: true,
            visual_identity: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MossConfig {
    pub orders: Vec<usize>,
    /// Window per order; orders without an entry use `(5, 9, 9)`.
    #[serde(default)]
    pub window: BTreeMap<usize, WindowSpec>,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default)]
    pub fusion: Fusion,
    #[serde(default)]
    pub encoder: EncoderKind,
    #[serde(default)]
    pub init: InitFlags,
    #[serde(default)]
    pub seed: u64,
}

fn default_blocks() -> usize {
    3
}

impl Default for MossConfig {
    fn default() -> Self {
        MossConfig {
            orders: vec![1, 2],
            window: BTreeMap::new(),
            d: 64,
            c: 64,
            blocks: 3,
            fusion: Fusion::NoFusion,
            encoder: EncoderKind::Learned,
            init: InitFlags::default(),
            seed: 0,
        }
    }
}

impl MossConfig {
    /// Same window for every order up to [`MAX_ORDER`].
    pub fn with_window(mut self, w: WindowSpec) -> Self {
        self.window = (1..=MAX_ORDER).map(|n| (n, w)).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.orders.is_empty() {
            return Err(Error::Config("at least one STSS order is required".into()));
        }
        if self.orders.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config(format!("orders must be strictly increasing, got {:?}", self.orders)));
        }
        if let Some(&bad) = self.orders.iter().find(|&&n| n == 0 || n > MAX_ORDER) {
            return Err(Error::Config(format!("order {bad} outside 1..={MAX_ORDER}")));
        }
        if self.d == 0 || self.c == 0 || self.blocks == 0 {
            return Err(Error::Config("D, C and blocks must be positive".into()));
        }
        if self.fusion == Fusion::Addition && self.max_order() >= 2 {
            for n in 1..self.max_order() {
                if self.m_channels(n) != self.c {
                    return Err(Error::Config(format!(
                        "addition fusion needs M({n}) to have C={} channels, it has {}",
                        self.c,
                        self.m_channels(n)
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn max_order(&self) -> usize {
        self.orders.last().copied().unwrap_or(0)
    }

    pub fn window_for(&self, order: usize) -> WindowSpec {
        self.window.get(&order).copied().unwrap_or_default()
    }

    pub fn encoder_spec(&self, order: usize) -> EncoderSpec {
        EncoderSpec {
            window: self.window_for(order),
            d: self.d,
            c: self.c,
            blocks: self.blocks,
        }
    }

    /// Channel count of `M(order)`.
    pub fn m_channels(&self, order: usize) -> usize {
        self.encoder.out_channels(self.window_for(order), self.c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: MossConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Cached `S(n)` and `M(n)` for every computed order.
#[derive(Debug, Clone)]
pub struct OrderOutputs<T> {
    pub s: BTreeMap<usize, StssTensor<T>>,
    pub m: BTreeMap<usize, FeatureMap<T>>,
}

/// Graph nodes of the high-order recursion, indexed by order.
#[derive(Debug, Clone, Default)]
pub struct OrderNodes {
    pub source: BTreeMap<usize, NodeId>,
    pub s: BTreeMap<usize, NodeId>,
    pub m: BTreeMap<usize, NodeId>,
}

fn check_order(n: usize) -> Result<()> {
    if n == 0 || n > MAX_ORDER {
        return Err(Error::Config(format!("STSS order must be in 1..={MAX_ORDER}, got {n}")));
    }
    Ok(())
}

/// Appends `fuse(M, F)` for computing order `order`.
pub fn append_fusion<T: Real>(g: &mut OpGraph<T>, m_prev: NodeId, f: NodeId, kind: Fusion, order: usize) -> NodeId {
    match kind {
        Fusion::NoFusion => m_prev,
        Fusion::Addition => g.add(m_prev, f),
        Fusion::Mlp => {
            let cat = g.concat(f, m_prev);
            let h = g.linear(cat, &format!("fuse{order}.fc1"));
            let a = g.gelu(h);
            g.linear(a, &format!("fuse{order}.fc2"))
        }
        Fusion::Conv => {
            let cat = g.concat(f, m_prev);
            g.conv3x3(cat, &format!("fuse{order}.conv"))
        }
    }
}

/// Appends `S(1..=up_to)` and `M(1..=up_to)` below feature node `f`.
pub fn append_high_order<T: Real>(
    g: &mut OpGraph<T>,
    f: NodeId,
    cfg: &MossConfig,
    up_to: usize,
) -> Result<OrderNodes> {
    check_order(up_to)?;
    let policy = SimilarityPolicy::default();
    let mut nodes = OrderNodes::default();
    let mut source = f;
    for n in 1..=up_to {
        if n >= 2 {
            source = append_fusion(g, nodes.m[&(n - 1)], f, cfg.fusion, n);
        }
        let s = g.stss(source, cfg.window_for(n), policy);
        g.label(s, format!("S{n}"));
        let m = append_encoder(g, s, cfg.encoder, &cfg.encoder_spec(n), &format!("enc{n}"));
        g.label(m, format!("M{n}"));
        nodes.source.insert(n, source);
        nodes.s.insert(n, s);
        nodes.m.insert(n, m);
    }
    Ok(nodes)
}

/// Appends the full module below `f` and returns the output node.
pub fn append_moss<T: Real>(g: &mut OpGraph<T>, f: NodeId, cfg: &MossConfig) -> Result<(NodeId, OrderNodes)> {
    cfg.validate()?;
    let nodes = append_high_order(g, f, cfg, cfg.max_order())?;
    let mut out = g.linear(f, "visual_fc");
    for &n in &cfg.orders {
        let branch = g.linear(nodes.m[&n], &format!("out_fc{n}"));
        out = g.add(out, branch);
    }
    g.label(out, "moss");
    Ok((out, nodes))
}

/// Fresh parameters for `cfg` given `F` with `cfg.c` channels. Deterministic
/// in `seed`.
pub fn init_params<T: Real>(cfg: &MossConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = cfg.c;
    if cfg.init.visual_identity {
        store.insert("visual_fc.w", Tensor::from_fn(&[c, c], |i| if i / c == i % c { T::one() } else { T::zero() }), true);
        store.insert("visual_fc.b", Tensor::zeros(&[c]), true);
    } else {
        store.insert("visual_fc.w", fan_in_uniform(&[c, c], c, &mut rng), true);
        store.insert("visual_fc.b", fan_in_uniform(&[c], c, &mut rng), true);
    }
    for n in 1..=cfg.max_order() {
        if n >= 2 {
            let cin = c + cfg.m_channels(n - 1);
            match cfg.fusion {
                Fusion::NoFusion | Fusion::Addition => {}
                Fusion::Mlp => {
                    store.insert(format!("fuse{n}.fc1.w"), fan_in_uniform(&[cin, c], cin, &mut rng), true);
                    store.insert(format!("fuse{n}.fc1.b"), fan_in_uniform(&[c], cin, &mut rng), true);
                    store.insert(format!("fuse{n}.fc2.w"), fan_in_uniform(&[c, c], c, &mut rng), true);
                    store.insert(format!("fuse{n}.fc2.b"), fan_in_uniform(&[c], c, &mut rng), true);
                }
                Fusion::Conv => {
                    store.insert(format!("fuse{n}.conv.w"), fan_in_uniform(&[3, 3, cin, c], 9 * cin, &mut rng), true);
                    store.insert(format!("fuse{n}.conv.b"), fan_in_uniform(&[c], 9 * cin, &mut rng), true);
                }
            }
        }
        if cfg.encoder == EncoderKind::Learned {
            init_encoder(&mut store, &format!("enc{n}"), &cfg.encoder_spec(n), &mut rng);
        }
        if cfg.orders.contains(&n) {
            let cm = cfg.m_channels(n);
            let (w, b) = if cfg.init.zero_branch {
                (Tensor::zeros(&[cm, c]), Tensor::zeros(&[c]))
            } else {
                (fan_in_uniform(&[cm, c], cm, &mut rng), fan_in_uniform(&[c], cm, &mut rng))
            };
            store.insert(format!("out_fc{n}.w"), w, true);
            store.insert(format!("out_fc{n}.b"), b, true);
        }
    }
    Ok(store)
}

/// A built MOSS graph together with its configuration.
#[derive(Debug, Clone)]
pub struct Moss<T> {
    cfg: MossConfig,
    graph: OpGraph<T>,
    nodes: OrderNodes,
}

impl<T: Real> Moss<T> {
    pub fn new(cfg: MossConfig) -> Result<Self> {
        let mut graph = OpGraph::new();
        let f = graph.input();
        graph.label(f, "F");
        let (out, nodes) = append_moss(&mut graph, f, &cfg)?;
        graph.set_output(out);
        Ok(Moss { cfg, graph, nodes })
    }

    pub fn config(&self) -> &MossConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &OpGraph<T> {
        &self.graph
    }

    pub fn forward(&mut self, f: &FeatureMap<T>, params: &ParamStore<T>, mode: Mode, exec: Exec) -> Result<FeatureMap<T>> {
        check_input_channels(f, &self.cfg)?;
        FeatureMap::new(self.graph.forward(&[f.tensor().clone()], params, mode, exec)?)
    }

    /// Gradients of `sum(d_out * MOSS(F))`; `inputs[0]` is `dF`.
    pub fn backward(&self, d_out: &Tensor<T>, params: &ParamStore<T>) -> Result<Backward<T>> {
        self.graph.backward(d_out, params)
    }

    pub fn outputs(&self) -> Result<OrderOutputs<T>> {
        collect_outputs(&self.graph, &self.nodes, &self.cfg)
    }

    pub fn flops(&self) -> u64 {
        self.graph.flops()
    }
}

fn check_input_channels<T: Real>(f: &FeatureMap<T>, cfg: &MossConfig) -> Result<()> {
    if f.dims().3 != cfg.c {
        return Err(Error::dim("moss input channels", f.tensor().shape(), &[cfg.c]));
    }
    Ok(())
}

fn collect_outputs<T: Real>(g: &OpGraph<T>, nodes: &OrderNodes, cfg: &MossConfig) -> Result<OrderOutputs<T>> {
    let missing = || Error::State("outputs requested before forward".into());
    let mut out = OrderOutputs {
        s: BTreeMap::new(),
        m: BTreeMap::new(),
    };
    for (&n, &id) in &nodes.s {
        out.s.insert(n, StssTensor::new(g.value(id).ok_or_else(missing)?.clone(), cfg.window_for(n))?);
    }
    for (&n, &id) in &nodes.m {
        out.m.insert(n, FeatureMap::new(g.value(id).ok_or_else(missing)?.clone())?);
    }
    Ok(out)
}

/// `MOSS(F)` in one call.
pub fn moss_forward<T: Real>(
    f: &FeatureMap<T>,
    cfg: &MossConfig,
    params: &ParamStore<T>,
    mode: Mode,
    exec: Exec,
) -> Result<FeatureMap<T>> {
    Moss::new(cfg.clone())?.forward(f, params, mode, exec)
}

/// `S(1..=up_to)` and `M(1..=up_to)`. Orders above `cfg`'s highest need
/// their encoder parameters in `params` (vectorize and mean-pool need none).
pub fn high_order_stss<T: Real>(
    f: &FeatureMap<T>,
    cfg: &MossConfig,
    params: &ParamStore<T>,
    up_to: usize,
    mode: Mode,
    exec: Exec,
) -> Result<OrderOutputs<T>> {
    check_order(up_to)?;
    let mut g = OpGraph::new();
    let fi = g.input();
    let nodes = append_high_order(&mut g, fi, cfg, up_to)?;
    g.forward(&[f.tensor().clone()], params, mode, exec)?;
    collect_outputs(&g, &nodes, cfg)
}

/// `fuse(M, F)` as a standalone map; parameters come from `fuse{order}.*`.
pub fn fuse_variant<T: Real>(
    m_prev: &FeatureMap<T>,
    f: &FeatureMap<T>,
    kind: Fusion,
    params: &ParamStore<T>,
    order: usize,
    exec: Exec,
) -> Result<FeatureMap<T>> {
    let (mt, mh, mw, mc) = m_prev.dims();
    let (ft, fh, fw, fc) = f.dims();
    if (mt, mh, mw) != (ft, fh, fw) || (kind == Fusion::Addition && mc != fc) {
        return Err(Error::dim("fuse_variant", m_prev.tensor().shape(), f.tensor().shape()));
    }
    if kind == Fusion::NoFusion {
        return Ok(m_prev.clone());
    }
    let mut g = OpGraph::new();
    let mi = g.input();
    let fi = g.input();
    append_fusion(&mut g, mi, fi, kind, order);
    let out = g.forward(&[m_prev.tensor().clone(), f.tensor().clone()], params, Mode::Eval, exec)?;
    FeatureMap::new(out)
}
