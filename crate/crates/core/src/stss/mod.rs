//! Space-time self-similarity.
//!
//! For a feature map `F[t, h, w, :]` and an odd window `(L, U, V)` the STSS
//! volume holds, for every query `(t, h, w)` and offset `(l, u, v)` centred on
//! zero,
//!
//! ```text
//! S[t, h, w, l, u, v] = cos(F[t, h, w], F[t + l, h + u, w + v])
//! ```
//!
//! Neighbours outside the map, and vectors whose norm does not exceed
//! `norm_eps`, give similarity 0 and pass no gradient. The zero offset of a
//! non-degenerate query is exactly 1.

mod kernel;
mod oracle;

pub use kernel::{stss_backward_raw, stss_forward_raw, stss_flops};
pub use oracle::stss_oracle_raw;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::real::Real;
use crate::tensor::io::Reader;
use crate::tensor::Tensor;

/// Local spatio-temporal window with odd extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawWindow", into = "RawWindow")]
pub struct WindowSpec {
    l: usize,
    u: usize,
    v: usize,
}

#[derive(Serialize, Deserialize)]
struct RawWindow {
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "U")]
    u: usize,
    #[serde(rename = "V")]
    v: usize,
}

impl TryFrom<RawWindow> for WindowSpec {
    type Error = Error;

    fn try_from(r: RawWindow) -> Result<Self> {
        WindowSpec::new(r.l, r.u, r.v)
    }
}

impl From<WindowSpec> for RawWindow {
    fn from(w: WindowSpec) -> Self {
        RawWindow { l: w.l, u: w.u, v: w.v }
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { l: 5, u: 9, v: 9 }
    }
}

impl WindowSpec {
    pub fn new(l: usize, u: usize, v: usize) -> Result<Self> {
        if [l, u, v].iter().any(|&n| n == 0 || n % 2 == 0) {
            return Err(Error::Config(format!(
                "window extents must be odd and positive, got ({l}, {u}, {v})"
            )));
        }
        Ok(WindowSpec { l, u, v })
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        (self.l, self.u, self.v)
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn u(&self) -> usize {
        self.u
    }

    pub fn v(&self) -> usize {
        self.v
    }

    /// Half-widths `(L/2, U/2, V/2)`.
    pub fn radii(&self) -> (usize, usize, usize) {
        (self.l / 2, self.u / 2, self.v / 2)
    }

    /// Number of offsets, `L * U * V`.
    pub fn volume(&self) -> usize {
        self.l * self.u * self.v
    }
}

/// Cosine similarity with a hard zero-norm cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPolicy {
    pub norm_eps: f64,
}

impl Default for SimilarityPolicy {
    fn default() -> Self {
        SimilarityPolicy { norm_eps: 1e-12 }
    }
}

/// `F`: a `[T, H, W, C]` tensor of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T>(Tensor<T>);

impl<T: Real> FeatureMap<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::dim("FeatureMap", data.shape(), &[0, 0, 0, 0]));
        }
        if !data.all_finite() {
            return Err(Error::Input("feature map contains non-finite values".into()));
        }
        Ok(FeatureMap(data))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    /// `(T, H, W, C)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2], s[3])
    }
}

/// `S`: a `[T, H, W, L, U, V]` tensor together with its window.
#[derive(Debug, Clone, PartialEq)]
pub struct StssTensor<T> {
    data: Tensor<T>,
    window: WindowSpec,
}

pub const WINDOW_TAG: &[u8; 4] = b"WNDW";

impl<T: Real> StssTensor<T> {
    pub fn new(data: Tensor<T>, window: WindowSpec) -> Result<Self> {
        let s = data.shape();
        let (l, u, v) = window.extents();
        if s.len() != 6 || s[3] != l || s[4] != u || s[5] != v {
            return Err(Error::dim("StssTensor", s, &[0, 0, 0, l, u, v]));
        }
        Ok(StssTensor { data, window })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn window(&self) -> WindowSpec {
        self.window
    }

    /// `(T, H, W)` of the query grid.
    pub fn grid(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    /// Value at query `(t, h, w)` and signed offset `(l, u, v)`.
    pub fn get(&self, q: (usize, usize, usize), off: (isize, isize, isize)) -> T {
        let (rl, ru, rv) = self.window.radii();
        let idx = [
            q.0,
            q.1,
            q.2,
            (off.0 + rl as isize) as usize,
            (off.1 + ru as isize) as usize,
            (off.2 + rv as isize) as usize,
        ];
        self.data.at(&idx)
    }

    /// Tensor container followed by `b"WNDW"` and three little-endian u32
    /// extents `L, U, V`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.data.to_bytes();
        out.extend_from_slice(WINDOW_TAG);
        let (l, u, v) = self.window.extents();
        for n in [l, u, v] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (data, used) = Tensor::<T>::read_bytes(bytes)?;
        let mut r = Reader::new(&bytes[used..]);
        if r.take(4)? != WINDOW_TAG {
            return Err(Error::Format {
                what: "stss tensor",
                reason: "missing WNDW window header".into(),
            });
        }
        let (l, u, v) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if !r.rest().is_empty() {
            return Err(Error::Format {
                what: "stss tensor",
                reason: "trailing bytes".into(),
            });
        }
        StssTensor::new(data, WindowSpec::new(l, u, v)?)
    }
}

/// Blocked (and, with [`Exec::Parallel`], multi-threaded) forward transform.
pub fn stss_forward<T: Real>(
    f: &FeatureMap<T>,
    window: WindowSpec,
    policy: SimilarityPolicy,
    exec: Exec,
) -> Result<StssTensor<T>> {
    StssTensor::new(stss_forward_raw(f.tensor(), window, policy, exec)?, window)
}

/// Gradient of `sum(dS * S)` with respect to `F`.
pub fn stss_backward<T: Real>(
    f: &FeatureMap<T>,
    window: WindowSpec,
    policy: SimilarityPolicy,
    ds: &Tensor<T>,
    exec: Exec,
) -> Result<Tensor<T>> {
    stss_backward_raw(f.tensor(), window, policy, ds, exec)
}

/// Literal six-loop evaluation; the reference for [`stss_forward`].
pub fn stss_oracle<T: Real>(
    f: &FeatureMap<T>,
    window: WindowSpec,
    policy: SimilarityPolicy,
) -> Result<StssTensor<T>> {
    StssTensor::new(stss_oracle_raw(f.tensor(), window, policy)?, window)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_must_be_odd() {
        assert!(WindowSpec::new(5, 9, 9).is_ok());
        for (l, u, v) in [(2, 3, 3), (3, 4, 3), (3, 3, 0)] {
            assert!(matches!(WindowSpec::new(l, u, v), Err(Error::Config(_))));
        }
        assert_eq!(WindowSpec::default().extents(), (5, 9, 9));
        let w: WindowSpec = serde_json::from_str(r#"{"L":3,"U":5,"V":7}"#).unwrap();
        assert_eq!(w.radii(), (1, 2, 3));
        assert!(serde_json::from_str::<WindowSpec>(r#"{"L":2,"U":5,"V":7}"#).is_err());
    }

    #[test]
    fn stss_container_roundtrip() {
        let w = WindowSpec::new(1, 3, 3).unwrap();
        let s = StssTensor::new(Tensor::<f32>::from_fn(&[1, 2, 2, 1, 3, 3], |i| i as f32 / 36.0), w).unwrap();
        let b = s.to_bytes();
        assert_eq!(&b[b.len() - 16..b.len() - 12], b"WNDW");
        assert_eq!(StssTensor::<f32>::from_bytes(&b).unwrap(), s);
        assert!(StssTensor::<f32>::from_bytes(&b[..b.len() - 4]).is_err());
        assert!(StssTensor::<f32>::from_bytes(&s.tensor().to_bytes()).is_err());
    }

    #[test]
    fn feature_map_rejects_bad_input() {
        assert!(FeatureMap::new(Tensor::<f32>::zeros(&[2, 2, 2])).is_err());
        let mut t = Tensor::<f32>::zeros(&[1, 1, 1, 2]);
        t.data_mut()[0] = f32::NAN;
        assert!(FeatureMap::new(t).is_err());
    }
}
