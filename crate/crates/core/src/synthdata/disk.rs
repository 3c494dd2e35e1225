use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Label, MotionClip, MotionSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub label: usize,
    pub seed: u64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Hex SHA-256 of the compact JSON encoding of `spec`.
    pub spec_hash: String,
    pub spec: MotionSpec,
    pub clips: Vec<ManifestEntry>,
}

pub fn spec_hash(spec: &MotionSpec) -> String {
    let json = serde_json::to_vec(spec).expect("serializable");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// One tensor file per clip plus `manifest.json`.
pub fn save_dataset(dir: impl AsRef<Path>, clips: &[MotionClip], spec: &MotionSpec) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(clips.len());
    for c in clips {
        let file = format!("clip_{:05}.mst", c.index);
        c.pixels.save(dir.join(&file))?;
        entries.push(ManifestEntry {
            index: c.index,
            label: c.label.index(),
            seed: c.seed,
            file,
        });
    }
    let manifest = DatasetManifest {
        spec_hash: spec_hash(spec),
        spec: spec.clone(),
        clips: entries,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Vec<MotionClip>, DatasetManifest)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if spec_hash(&manifest.spec) != manifest.spec_hash {
        return Err(Error::Format {
            what: "dataset manifest",
            reason: "spec hash does not match the embedded spec".into(),
        });
    }
    let clips = manifest
        .clips
        .iter()
        .map(|e| {
            let pixels = Tensor::<f64>::load(dir.join(&e.file))?;
            let (h, w) = manifest.spec.canvas;
            if pixels.shape() != [manifest.spec.frames, h, w, 1] {
                return Err(Error::dim("dataset clip", pixels.shape(), &[manifest.spec.frames, h, w, 1]));
            }
            Ok(MotionClip {
                pixels,
                label: Label::from_index(e.label)?,
                seed: e.seed,
                index: e.index,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((clips, manifest))
}
