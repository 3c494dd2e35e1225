//! Verification harness shared by the CLI and the acceptance tests.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{append_encoder, init_encoder, EncoderKind, EncoderSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::moss::{append_moss, high_order_stss, init_params, Fusion, InitFlags, MossConfig};
use crate::stss::{stss_flops, stss_forward, stss_oracle, FeatureMap, SimilarityPolicy, StssTensor, WindowSpec};
use crate::synthdata::{gen_toy_scene, patch_embed, PatchEmbed, ToyScene};
use crate::tensor::{Mode, OpGraph, ParamStore, Tensor};

/// Outcome of the toy-scene separability test.
#[derive(Debug, Clone, PartialEq)]
pub struct Separability {
    pub queries: usize,
    pub passed: usize,
}

impl Separability {
    pub fn rate(&self) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            self.passed as f64 / self.queries as f64
        }
    }
}

/// Mean of `S[q, offset]` over window neighbours that fall inside `mask`
/// (on the `(T, H, W)` grid); `None` if none do.
pub fn masked_window_mean(s: &StssTensor<f64>, q: (usize, usize, usize), mask: &[bool]) -> Option<f64> {
    let (t, h, w) = s.grid();
    let (rl, ru, rv) = s.window().radii();
    let (mut sum, mut n) = (0.0, 0usize);
    for l in -(rl as isize)..=rl as isize {
        for u in -(ru as isize)..=ru as isize {
            for v in -(rv as isize)..=rv as isize {
                let (nt, nh, nw) = (q.0 as isize + l, q.1 as isize + u, q.2 as isize + v);
                if nt < 0 || nh < 0 || nw < 0 || nt >= t as isize || nh >= h as isize || nw >= w as isize {
                    continue;
                }
                if mask[(nt as usize * h + nh as usize) * w + nw as usize] {
                    sum += s.get(q, (l, u, v));
                    n += 1;
                }
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Window used by the toy separability test: one frame either side and the
/// whole 8 x 8 grid spatially.
pub fn toy_window() -> WindowSpec {
    WindowSpec::new(3, 15, 15).expect("odd")
}

/// Toy-scene features with a zero-bias patch embedding, so background
/// cells have zero norm.
pub fn toy_features(scene: &ToyScene, channels: usize, seed: u64) -> Result<FeatureMap<f64>> {
    patch_embed(&scene.pixels, &PatchEmbed::new(channels, seed))
}

/// For every object cell in every frame, checks that order 2 ranks the
/// same-motion objects above the same-appearance twin while order 1 ranks
/// them the other way round.
pub fn toy_separability(seed: u64, exec: Exec) -> Result<Separability> {
    let scene = gen_toy_scene(seed)?;
    let f = toy_features(&scene, 16, seed)?;
    let cfg = MossConfig {
        orders: vec![1, 2],
        encoder: EncoderKind::Vectorize,
        ..Default::default()
    }
    .with_window(toy_window());
    let out = high_order_stss(&f, &cfg, &ParamStore::new(), 2, Mode::Eval, exec)?;
    let (s1, s2) = (&out.s[&1], &out.s[&2]);
    let masks = scene.patch_masks();
    let (t, h, w) = scene.grid();
    let n_obj = masks.len();
    let mut result = Separability { queries: 0, passed: 0 };
    for a in 0..n_obj {
        let twin = &masks[scene.twin_of(a)];
        let mut same = vec![false; t * h * w];
        for b in (0..n_obj).filter(|&b| b != a && scene.set_of(b) == scene.set_of(a)) {
            for (s, &m) in same.iter_mut().zip(&masks[b]) {
                *s |= m;
            }
        }
        for (i, _) in masks[a].iter().enumerate().filter(|(_, &m)| m) {
            let q = (i / (h * w), (i / w) % h, i % w);
            let means = (
                masked_window_mean(s1, q, &same),
                masked_window_mean(s1, q, twin),
                masked_window_mean(s2, q, &same),
                masked_window_mean(s2, q, twin),
            );
            if let (Some(s1_same), Some(s1_twin), Some(s2_same), Some(s2_twin)) = means {
                result.queries += 1;
                if s2_same > s2_twin && s1_twin > s1_same {
                    result.passed += 1;
                }
            }
        }
    }
    Ok(result)
}

/// Windows covered by the oracle sweep.
pub const ORACLE_WINDOWS: [(usize, usize, usize); 4] = [(1, 3, 3), (3, 3, 3), (3, 5, 5), (5, 9, 9)];
/// Largest feature shape in the sweep.
pub const ORACLE_MAX_SHAPE: [usize; 4] = [8, 14, 14, 64];

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCase {
    pub shape: Vec<usize>,
    pub window: WindowSpec,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub cases: Vec<OracleCase>,
}

impl OracleReport {
    pub fn max_abs_diff(&self) -> f64 {
        self.cases.iter().map(|c| c.max_abs_diff).fold(0.0, f64::max)
    }
}

/// Blocked f32 forward against the literal oracle on `instances` random
/// feature maps. Windows cycle through [`ORACLE_WINDOWS`]; the first case
/// of each window uses [`ORACLE_MAX_SHAPE`], and about one case in three has
/// some zeroed positions.
pub fn oracle_sweep(instances: usize, seed: u64, exec: Exec) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(instances);
    for i in 0..instances {
        let (l, u, v) = ORACLE_WINDOWS[i % ORACLE_WINDOWS.len()];
        let window = WindowSpec::new(l, u, v)?;
        let shape: Vec<usize> = if i < ORACLE_WINDOWS.len() {
            ORACLE_MAX_SHAPE.to_vec()
        } else {
            ORACLE_MAX_SHAPE.iter().map(|&m| rng.gen_range(1..=m)).collect()
        };
        let mut f = Tensor::<f32>::uniform(&shape, -1.0, 1.0, &mut rng);
        if rng.gen_bool(1.0 / 3.0) {
            let c = shape[3];
            let positions = f.len() / c;
            for _ in 0..positions.div_ceil(5) {
                let p = rng.gen_range(0..positions);
                f.data_mut()[p * c..(p + 1) * c].fill(0.0);
            }
        }
        let f = FeatureMap::new(f)?;
        let policy = SimilarityPolicy::default();
        let fast = stss_forward(&f, window, policy, exec)?;
        let slow = stss_oracle(&f, window, policy)?;
        cases.push(OracleCase {
            shape,
            window,
            max_abs_diff: fast.tensor().max_abs_diff(slow.tensor())?,
        });
    }
    Ok(OracleReport { cases })
}

/// Norm-wise relative error `|a - n| / max(|a| + |n|, GRAD_FLOOR)` between
/// analytic and central-difference gradients, maximised over the checked
/// tensors. The floor turns the comparison absolute for gradients that are
/// identically zero, such as a convolution bias feeding batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub component: String,
    pub max_rel_err: f64,
    /// Number of scalar coordinates compared.
    pub checked: usize,
}

/// Finite-difference step.
pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_FLOOR: f64 = 1e-3;
/// Coordinates sampled per tensor.
const GRAD_SAMPLES: usize = 24;

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale.max(GRAD_FLOOR)
}

/// Checks every input and trainable parameter of `g` with the scalar loss
/// `sum(R * out)` for a fixed random `R`.
pub fn gradcheck_graph(
    component: &str,
    g: &OpGraph<f64>,
    inputs: &[Tensor<f64>],
    params: &ParamStore<f64>,
    mode: Mode,
    seed: u64,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = g.clone();
    let out = work.forward(inputs, params, mode, Exec::Sequential)?;
    let r = Tensor::<f64>::uniform(out.shape(), -1.0, 1.0, &mut rng);
    let bw = work.backward(&r, params)?;
    let loss = |inputs: &[Tensor<f64>], params: &ParamStore<f64>| -> Result<f64> {
        let mut g = g.clone();
        g.forward(inputs, params, mode, Exec::Sequential)?.dot(&r)
    };
    let pick = |len: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if len <= GRAD_SAMPLES {
            (0..len).collect()
        } else {
            (0..GRAD_SAMPLES).map(|_| rng.gen_range(0..len)).collect()
        }
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, x) in inputs.iter().enumerate() {
        let idx = pick(x.len(), &mut rng);
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &i in &idx {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] = x.data()[i] + GRAD_STEP;
            let up = loss(&xs, params)?;
            xs[k].data_mut()[i] = x.data()[i] - GRAD_STEP;
            let down = loss(&xs, params)?;
            n.push((up - down) / (2.0 * GRAD_STEP));
            a.push(bw.inputs[k].data()[i]);
        }
        checked += idx.len();
        worst = worst.max(rel_err(&a, &n));
    }
    for (name, grad) in &bw.params {
        let base = params.value(name)?;
        let idx = pick(base.len(), &mut rng);
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &i in &idx {
            let mut p = params.clone();
            let mut v = base.clone();
            v.data_mut()[i] = base.data()[i] + GRAD_STEP;
            p.set_value(name, v.clone())?;
            let up = loss(inputs, &p)?;
            v.data_mut()[i] = base.data()[i] - GRAD_STEP;
            p.set_value(name, v)?;
            let down = loss(inputs, &p)?;
            n.push((up - down) / (2.0 * GRAD_STEP));
            a.push(grad.data()[i]);
        }
        checked += idx.len();
        worst = worst.max(rel_err(&a, &n));
    }
    Ok(GradReport {
        component: component.to_string(),
        max_rel_err: worst,
        checked,
    })
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// A graph with its inputs and parameters.
type GraphCase = (OpGraph<f64>, Vec<Tensor<f64>>, ParamStore<f64>);
type NamedCase = (String, OpGraph<f64>, Vec<Tensor<f64>>, ParamStore<f64>);

fn primitive_cases(rng: &mut ChaCha8Rng) -> Result<Vec<NamedCase>> {
    let mut cases = Vec::new();
    let mut p = ParamStore::new();
    p.insert("fc.w", uniform(&[4, 5], rng), true);
    p.insert("fc.b", uniform(&[5], rng), true);
    p.insert("cv.w", uniform(&[3, 3, 3, 2], rng), true);
    p.insert("cv.b", uniform(&[2], rng), true);
    p.insert("bn.gamma", uniform(&[3], rng), true);
    p.insert("bn.beta", uniform(&[3], rng), true);
    p.insert("bn.rmean", Tensor::zeros(&[3]), false);
    p.insert("bn.rvar", Tensor::full(&[3], 1.0), false);
    let x4 = uniform(&[2, 3, 4], rng);
    let img = uniform(&[2, 4, 5, 3], rng);

    let single = |build: &dyn Fn(&mut OpGraph<f64>, usize) -> usize| {
        let mut g = OpGraph::new();
        let x = g.input();
        let y = build(&mut g, x);
        g.set_output(y);
        g
    };
    cases.push(("linear".into(), single(&|g, x| g.linear(x, "fc")), vec![x4.clone()], p.clone()));
    cases.push(("conv3x3".into(), single(&|g, x| g.conv3x3(x, "cv")), vec![img.clone()], p.clone()));
    cases.push(("batchnorm".into(), single(&|g, x| g.batchnorm(x, "bn")), vec![img.clone()], p.clone()));
    cases.push(("gelu".into(), single(&|g, x| g.gelu(x)), vec![img.clone()], p.clone()));
    cases.push((
        "reshape_permute".into(),
        single(&|g, x| {
            let r = g.reshape(x, 2, &[5, 3]);
            g.permute(r, &[1, 3, 0, 2])
        }),
        vec![img.clone()],
        p.clone(),
    ));
    cases.push(("mean_trailing".into(), single(&|g, x| g.mean_trailing(x, 2)), vec![img.clone()], p.clone()));
    cases.push(("mean_rows".into(), single(&|g, x| g.mean_rows(x)), vec![img.clone()], p.clone()));
    let mut g = OpGraph::new();
    let (a, b) = (g.input(), g.input());
    let s = g.add(a, b);
    let c = g.concat(s, a);
    g.set_output(c);
    cases.push(("add_concat".into(), g, vec![img.clone(), uniform(&[2, 4, 5, 3], rng)], p.clone()));
    Ok(cases)
}

fn moss_case(cfg: &MossConfig, rng: &mut ChaCha8Rng) -> Result<GraphCase> {
    let mut g = OpGraph::new();
    let f = g.input();
    let (out, _) = append_moss(&mut g, f, cfg)?;
    g.set_output(out);
    let params = init_params(cfg, rng.gen())?;
    Ok((g, vec![uniform(&[3, 4, 4, cfg.c], rng)], params))
}

/// Central-difference checks (f64) of every differentiable component.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for (name, g, inputs, params) in primitive_cases(&mut rng)? {
        reports.push(gradcheck_graph(&name, &g, &inputs, &params, Mode::Train, rng.gen())?);
    }

    let w = WindowSpec::new(3, 3, 3)?;
    let mut g = OpGraph::new();
    let x = g.input();
    let s = g.stss(x, w, SimilarityPolicy::default());
    g.set_output(s);
    let f = uniform(&[3, 4, 4, 3], &mut rng);
    reports.push(gradcheck_graph("stss", &g, &[f], &ParamStore::new(), Mode::Train, rng.gen())?);

    let spec = EncoderSpec { window: w, d: 2, c: 3, blocks: 2 };
    let mut g = OpGraph::new();
    let x = g.input();
    let m = append_encoder(&mut g, x, EncoderKind::Learned, &spec, "enc");
    g.set_output(m);
    let mut p = ParamStore::new();
    init_encoder(&mut p, "enc", &spec, &mut rng);
    let s_in = uniform(&[2, 3, 3, 3, 3, 3], &mut rng);
    reports.push(gradcheck_graph("encoder", &g, &[s_in], &p, Mode::Train, rng.gen())?);

    let base = MossConfig {
        orders: vec![1, 2],
        d: 2,
        c: 3,
        blocks: 1,
        init: InitFlags {
            zero_branch: false,
            visual_identity: false,
        },
        ..Default::default()
    }
    .with_window(w);
    for orders in [vec![1, 2], vec![1, 2, 3]] {
        let name = format!("moss_orders_{}", orders.iter().map(|o| o.to_string()).collect::<Vec<_>>().join("_"));
        let cfg = MossConfig { orders, ..base.clone() };
        let (g, inputs, p) = moss_case(&cfg, &mut rng)?;
        reports.push(gradcheck_graph(&name, &g, &inputs, &p, Mode::Train, rng.gen())?);
    }
    for (fusion, name) in [
        (Fusion::NoFusion, "fusion_no_fusion"),
        (Fusion::Addition, "fusion_addition"),
        (Fusion::Mlp, "fusion_mlp"),
        (Fusion::Conv, "fusion_conv"),
    ] {
        let cfg = MossConfig { fusion, ..base.clone() };
        let (g, inputs, p) = moss_case(&cfg, &mut rng)?;
        reports.push(gradcheck_graph(name, &g, &inputs, &p, Mode::Train, rng.gen())?);
    }
    Ok(reports)
}

/// One timing row of [`bench_stss`].
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub shape: Vec<usize>,
    pub window: WindowSpec,
    pub variant: &'static str,
    pub threads: usize,
    pub ms: f64,
    pub gflops: f64,
}

pub const BENCH_CSV_HEADER: &str = "shape,window,variant,threads,ms,gflops";

impl BenchRow {
    pub fn csv(&self) -> String {
        let shape: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        let (l, u, v) = self.window.extents();
        format!(
            "{},{}x{}x{},{},{},{:.3},{:.3}",
            shape.join("x"),
            l,
            u,
            v,
            self.variant,
            self.threads,
            self.ms,
            self.gflops
        )
    }
}

fn median_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        f()?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    }
    #[cfg(not(feature = "parallel"))]
    {
        if threads > 1 {
            return Err(Error::Config("built without the `parallel` feature".into()));
        }
        Ok(f())
    }
}

/// Median wall time of the naive oracle, the blocked kernel, and the blocked
/// kernel on each thread count in `threads` (f32 features).
pub fn bench_stss(shape: &[usize], window: WindowSpec, threads: &[usize], reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = FeatureMap::new(Tensor::<f32>::uniform(shape, -1.0, 1.0, &mut rng))?;
    let policy = SimilarityPolicy::default();
    let flops = stss_flops(shape, window) as f64;
    let row = |variant, threads, ms: f64| BenchRow {
        shape: shape.to_vec(),
        window,
        variant,
        threads,
        ms,
        gflops: flops / (ms * 1e6),
    };
    let mut rows = Vec::new();
    let naive = median_ms(reps, || stss_oracle(&f, window, policy).map(|_| ()))?;
    rows.push(row("naive", 1, naive));
    let blocked = median_ms(reps, || stss_forward(&f, window, policy, Exec::Sequential).map(|_| ()))?;
    rows.push(row("blocked", 1, blocked));
    if cfg!(feature = "parallel") {
        for &n in threads {
            let ms = with_threads(n, || median_ms(reps, || stss_forward(&f, window, policy, Exec::Parallel).map(|_| ())))??;
            rows.push(row("parallel", n, ms));
        }
    }
    Ok(rows)
}
