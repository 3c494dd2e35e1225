use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalReport, MetricLine, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::io::Reader;
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"MOSSCKPT";

/// Trained parameters together with the configuration and metrics that
/// produced them.
///
/// Layout: magic, `u32` LE header length, JSON header, then one tensor
/// container per parameter in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore<T>,
    pub metrics: Vec<MetricLine>,
    pub eval: Option<EvalReport>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    metrics: Vec<MetricLine>,
    eval: Option<EvalReport>,
    params: Vec<ParamHeader>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(
        model: ModelConfig,
        train: TrainConfig,
        params: ParamStore<T>,
        metrics: &[MetricLine],
        eval: Option<&EvalReport>,
    ) -> Self {
        Checkpoint {
            model,
            train,
            params,
            metrics: metrics.to_vec(),
            eval: eval.cloned(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            metrics: self.metrics.clone(),
            eval: self.eval.clone(),
            params: self
                .params
                .iter()
                .map(|(name, e)| ParamHeader {
                    name: name.to_string(),
                    trainable: e.trainable,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 16);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, e) in self.params.iter() {
            e.value.write_bytes(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format {
                what: "checkpoint",
                reason: "bad magic".into(),
            });
        }
        let n = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(n)?)?;
        let mut params = ParamStore::new();
        let mut rest = r.rest();
        for p in &header.params {
            let (t, used) = Tensor::<T>::read_bytes(rest)?;
            rest = &rest[used..];
            params.insert(p.name.clone(), t, p.trainable);
        }
        if !rest.is_empty() {
            return Err(Error::Format {
                what: "checkpoint",
                reason: format!("{} trailing bytes", rest.len()),
            });
        }
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            params,
            metrics: header.metrics,
            eval: header.eval,
        })
    }

    /// Written through a temporary file so a crash keeps the previous one.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moss::MossConfig;
    use crate::train::Classifier;

    fn sample() -> Checkpoint<f32> {
        let cfg = ModelConfig::new(MossConfig {
            orders: vec![1, 2],
            d: 2,
            c: 3,
            blocks: 1,
            ..Default::default()
        });
        let params = Classifier::<f32>::new(cfg.clone()).unwrap().init(4).unwrap();
        let line = MetricLine {
            iter: 0,
            loss: 1.25,
            lr: 0.0,
            eval_acc: Some(0.5),
        };
        Checkpoint::new(cfg, TrainConfig::default(), params, &[line], None)
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::<f32>::load(&p).unwrap(), c);
        assert!(!p.with_extension("tmp").exists());
    }

    #[test]
    fn embeds_the_moss_config() {
        let bytes = sample().to_bytes().unwrap();
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&bytes[12..12 + n]).unwrap();
        assert_eq!(v["model"]["moss"]["orders"], serde_json::json!([1, 2]));
        assert_eq!(v["train"]["weight_decay"], 0.15);
    }

    #[test]
    fn corruption_is_reported() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(Error::Format { .. })));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(Error::Format { .. })));
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..20]).is_err());
    }
}
