#![allow(dead_code)]

use std::path::{Path, PathBuf};

use moss::checks::ORACLE_WINDOWS;
use moss::moss::{high_order_stss, MossConfig};
use moss::encoder::EncoderKind;
use moss::stss::{stss_forward, stss_oracle, FeatureMap, SimilarityPolicy, StssTensor, WindowSpec};
use moss::synthdata::{motion_scene, patch_embed, Label, MotionSpec, PatchEmbed};
use moss::tensor::{Mode, ParamStore};
use moss::viz::render_query_set;
use moss::{Exec, Real, Tensor};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

/// Random feature map with some positions zeroed out.
#[derive(Debug, Clone)]
pub struct Case {
    pub shape: [usize; 4],
    pub values: Vec<f64>,
    pub zeroed: Vec<bool>,
    pub window: WindowSpec,
}

impl Case {
    pub fn tensor<T: Real>(&self) -> Tensor<T> {
        let c = self.shape[3];
        Tensor::from_fn(&self.shape, |i| if self.zeroed[i / c] { T::zero() } else { T::of(self.values[i]) })
    }

    pub fn features<T: Real>(&self) -> FeatureMap<T> {
        FeatureMap::new(self.tensor()).unwrap()
    }

    pub fn positions(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }
}

pub fn case_with(max: [usize; 4], windows: &'static [(usize, usize, usize)]) -> impl Strategy<Value = Case> {
    (1..=max[0], 1..=max[1], 1..=max[2], 1..=max[3], 0..windows.len())
        .prop_flat_map(|(t, h, w, c, wi)| {
            let n = t * h * w;
            (
                Just([t, h, w, c]),
                prop::collection::vec(-1.0f64..1.0, n * c),
                prop::collection::vec(prop::bool::weighted(0.15), n),
                Just(wi),
            )
        })
        .prop_map(move |(shape, values, zeroed, wi)| {
            let (l, u, v) = windows[wi];
            Case {
                shape,
                values,
                zeroed,
                window: WindowSpec::new(l, u, v).unwrap(),
            }
        })
}

pub fn case() -> impl Strategy<Value = Case> {
    case_with([4, 6, 6, 5], &ORACLE_WINDOWS)
}

/// A case plus one positive scale per position.
pub fn scaled_case() -> impl Strategy<Value = (Case, Vec<f64>)> {
    case().prop_flat_map(|c| {
        let n = c.positions();
        (Just(c), prop::collection::vec(0.1f64..10.0, n))
    })
}

/// A case whose frames are all copies of the first one.
pub fn static_case() -> impl Strategy<Value = Case> {
    (case_with([5, 5, 5, 4], &ORACLE_WINDOWS), 2usize..=5).prop_map(|(mut c, frames)| {
        let [_, h, w, ch] = c.shape;
        let frame = h * w;
        c.shape[0] = frames;
        c.values = (0..frames).flat_map(|_| c.values[..frame * ch].to_vec()).collect();
        c.zeroed = (0..frames).flat_map(|_| c.zeroed[..frame].to_vec()).collect();
        c
    })
}

fn s_of<T: Real>(c: &Case) -> StssTensor<T> {
    stss_forward(&c.features::<T>(), c.window, SimilarityPolicy::default(), Exec::best()).unwrap()
}

fn signed(i: usize, r: usize) -> isize {
    i as isize - r as isize
}

type Query = (usize, usize, usize);
type Offset = (isize, isize, isize);

/// Every in-bounds `(query, offset)` pair.
fn pairs(c: &Case) -> Vec<(Query, Offset)> {
    let [t, h, w, _] = c.shape;
    let (el, eu, ev) = c.window.extents();
    let (rl, ru, rv) = c.window.radii();
    let mut out = Vec::new();
    for q in (0..t).flat_map(|a| (0..h).flat_map(move |b| (0..w).map(move |d| (a, b, d)))) {
        for l in 0..el {
            for u in 0..eu {
                for v in 0..ev {
                    let o = (signed(l, rl), signed(u, ru), signed(v, rv));
                    let p = (q.0 as isize + o.0, q.1 as isize + o.1, q.2 as isize + o.2);
                    if p.0 >= 0 && p.1 >= 0 && p.2 >= 0 && (p.0 as usize) < t && (p.1 as usize) < h && (p.2 as usize) < w {
                        out.push((q, o));
                    }
                }
            }
        }
    }
    out
}

pub fn prop_bounded(c: &Case) -> Result<(), TestCaseError> {
    for v in s_of::<f64>(c).tensor().data() {
        prop_assert!((-1.0..=1.0).contains(v), "f64 value {v} out of range");
    }
    for v in s_of::<f32>(c).tensor().data() {
        prop_assert!((-1.0..=1.0).contains(v), "f32 value {v} out of range");
    }
    Ok(())
}

pub fn prop_self_match(c: &Case) -> Result<(), TestCaseError> {
    let s = s_of::<f64>(c);
    let f = c.tensor::<f64>();
    let ch = c.shape[3];
    let (t, h, w) = s.grid();
    for i in 0..t * h * w {
        let q = (i / (h * w), (i / w) % h, i % w);
        let norm = f.data()[i * ch..(i + 1) * ch].iter().map(|x| x * x).sum::<f64>().sqrt();
        let want = if norm > SimilarityPolicy::default().norm_eps { 1.0 } else { 0.0 };
        prop_assert_eq!(s.get(q, (0, 0, 0)), want, "query {:?}", q);
    }
    Ok(())
}

pub fn prop_reciprocity(c: &Case) -> Result<(), TestCaseError> {
    let s = s_of::<f64>(c);
    for (q, o) in pairs(c) {
        let p = ((q.0 as isize + o.0) as usize, (q.1 as isize + o.1) as usize, (q.2 as isize + o.2) as usize);
        prop_assert_eq!(s.get(q, o), s.get(p, (-o.0, -o.1, -o.2)), "query {:?} offset {:?}", q, o);
    }
    Ok(())
}

pub fn prop_scale_invariance(c: &Case, scales: &[f64]) -> Result<(), TestCaseError> {
    let ch = c.shape[3];
    let scaled = Case {
        values: c.values.iter().enumerate().map(|(i, v)| v * scales[i / ch]).collect(),
        ..c.clone()
    };
    let diff = s_of::<f32>(c).tensor().max_abs_diff(s_of::<f32>(&scaled).tensor()).unwrap();
    prop_assert!(diff <= 1e-6, "max diff {diff:e}");
    Ok(())
}

/// The self offset is pinned to 1 while a repeated vector one frame away
/// rounds to within an ulp or two of it, hence the tolerance.
pub fn prop_static_nullity(c: &Case) -> Result<(), TestCaseError> {
    let s = s_of::<f64>(c);
    for (q, o) in pairs(c) {
        let (a, b) = (s.get(q, o), s.get(q, (0, o.1, o.2)));
        prop_assert!((a - b).abs() <= 1e-12, "query {:?} offset {:?}: {} vs {}", q, o, a, b);
    }
    Ok(())
}

pub fn prop_oracle(c: &Case) -> Result<(), TestCaseError> {
    let f = c.features::<f32>();
    let policy = SimilarityPolicy::default();
    let fast = stss_forward(&f, c.window, policy, Exec::Sequential).unwrap();
    let par = stss_forward(&f, c.window, policy, Exec::Parallel).unwrap();
    let slow = stss_oracle(&f, c.window, policy).unwrap();
    prop_assert_eq!(fast.tensor(), par.tensor());
    let diff = fast.tensor().max_abs_diff(slow.tensor()).unwrap();
    prop_assert!(diff <= 1e-6, "max diff {diff:e}");
    Ok(())
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden")
}

pub const GOLDEN_QUERY: (usize, usize, usize) = (3, 4, 4);

/// Renders the golden visualisation set into `dir`: order 1 and 2 maps
/// for a clockwise clip, vectorize encoder, window (3,5,5).
pub fn render_golden(dir: &Path) -> Vec<PathBuf> {
    let (pixels, _) = motion_scene(&MotionSpec::default(), Label::Cw, 3, 0).render().unwrap();
    let f: FeatureMap<f64> = patch_embed(&pixels, &PatchEmbed::new(16, 0)).unwrap();
    let cfg = MossConfig {
        orders: vec![1, 2],
        encoder: EncoderKind::Vectorize,
        ..Default::default()
    }
    .with_window(WindowSpec::new(3, 5, 5).unwrap());
    let out = high_order_stss(&f, &cfg, &ParamStore::new(), 2, Mode::Eval, Exec::Sequential).unwrap();
    let (t, h, w) = GOLDEN_QUERY;
    render_query_set(&out, t, h, w, &[1, 2], dir, "cw").unwrap()
}

/// Names of files that differ between `dir` and the committed golden set,
/// including files missing on either side.
pub fn golden_mismatches(dir: &Path) -> Vec<String> {
    let names = |d: &Path| -> std::collections::BTreeSet<String> {
        std::fs::read_dir(d)
            .map(|it| it.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).filter(|n| n.ends_with(".ppm")).collect())
            .unwrap_or_default()
    };
    let (have, want) = (names(dir), names(&golden_dir()));
    have.union(&want)
        .filter(|n| std::fs::read(dir.join(n.as_str())).ok() != std::fs::read(golden_dir().join(n.as_str())).ok())
        .cloned()
        .collect()
}
