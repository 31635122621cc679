//! Checkpoint directories: `manifest.json` plus one TVET file per parameter.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BackboneEncoder, ClassifierHead, EncoderConfig, Module, TargetModel};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::store;
use crate::tensor::{io, Tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub kind: String,
    pub grid: GridSpec,
    pub seed: u64,
    /// Architecture needed to rebuild the module.
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

/// Writes named tensors; names become file stems with `.` kept as is.
pub fn save(dir: &Path, kind: &str, grid: &GridSpec, seed: u64, config: serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<CheckpointManifest> {
    store::create_dir(dir)?;
    let mut params = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let file = format!("{name}.tvet");
        let sha256 = store::write_hashed(&dir.join(&file), &io::encode(t))?;
        params.push(ParamEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            file,
            sha256,
        });
    }
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        grid: *grid,
        seed,
        config,
        params,
    };
    store::write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Reads the manifest and every tensor, verifying hashes and shapes.
pub fn load(dir: &Path) -> Result<(CheckpointManifest, BTreeMap<String, Tensor>)> {
    let manifest: CheckpointManifest = store::read_json(&dir.join(MANIFEST))?;
    let mut tensors = BTreeMap::new();
    for p in &manifest.params {
        let path = dir.join(&p.file);
        let bytes = store::read_verified(&path, &p.sha256)?;
        let t = io::decode(&bytes).map_err(|reason| Error::TensorFormat {
            path: path.clone(),
            reason,
        })?;
        if t.dims() != p.shape.as_slice() {
            return Err(Error::TensorFormat {
                path,
                reason: format!("shape {:?} differs from manifest {:?}", t.dims(), p.shape),
            });
        }
        tensors.insert(p.name.clone(), t);
    }
    Ok((manifest, tensors))
}

pub fn expect_kind(manifest: &CheckpointManifest, kind: &str) -> Result<()> {
    if manifest.kind != kind {
        return Err(Error::Invalid(format!("checkpoint kind is {}, expected {kind}", manifest.kind)));
    }
    Ok(())
}

/// Splits `prefix.name` entries off a tensor map.
pub fn take_prefixed(tensors: &mut BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    let keys: Vec<String> = tensors.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
    keys.into_iter()
        .map(|k| {
            let t = tensors.remove(&k).expect("key listed above");
            (k[prefix.len()..].to_string(), t)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetArch {
    encoder: EncoderConfig,
    classes: usize,
    frozen: bool,
}

pub const TARGET_KIND: &str = "target_model";

pub fn save_target(dir: &Path, model: &TargetModel, seed: u64) -> Result<CheckpointManifest> {
    let arch = TargetArch {
        encoder: model.encoder.config().clone(),
        classes: model.num_classes(),
        frozen: model.encoder.is_frozen(),
    };
    let mut tensors: Vec<(String, &Tensor)> = model
        .encoder
        .named_params()
        .into_iter()
        .map(|(n, t)| (format!("encoder.{n}"), t))
        .collect();
    tensors.extend(model.head.named_params().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
    let config = serde_json::to_value(&arch).expect("arch serializes");
    save(dir, TARGET_KIND, model.grid(), seed, config, &tensors)
}

pub fn load_target(dir: &Path) -> Result<(TargetModel, CheckpointManifest)> {
    let (manifest, mut tensors) = load(dir)?;
    expect_kind(&manifest, TARGET_KIND)?;
    let arch: TargetArch = serde_json::from_value(manifest.config.clone())
        .map_err(|e| Error::Invalid(format!("target checkpoint config: {e}")))?;
    // Initial values are overwritten below.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut encoder = BackboneEncoder::new(manifest.grid, arch.encoder.clone(), &mut rng)?;
    let mut head = ClassifierHead::new(arch.encoder.out_dim, arch.classes, &mut rng)?;
    encoder.load_params(take_prefixed(&mut tensors, "encoder."))?;
    head.load_params(take_prefixed(&mut tensors, "head."))?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Invalid(format!("unexpected parameter {extra}")));
    }
    if arch.frozen {
        encoder.freeze();
    }
    Ok((TargetModel::new(encoder, head)?, manifest))
}
