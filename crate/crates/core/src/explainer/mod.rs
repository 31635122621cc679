//! Amortized explainer `E(x | θ)` and its training regimes.

pub mod model;
pub mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use model::{ExplainerConfig, ExplainerModel};
pub use train::{evaluation_loss, finetune_explainer, meta_loss, pretrain, pretrain_loss, PretrainConfig, PretrainReport, TargetCache, TraceEntry};

use crate::error::{Error, Result};
use crate::models::checkpoint::{self, CheckpointManifest};
use crate::models::Module;

pub const EXPLAINER_KIND: &str = "explainer";

pub fn save_explainer(dir: &Path, explainer: &ExplainerModel, seed: u64) -> Result<CheckpointManifest> {
    let config = serde_json::to_value(explainer.config()).expect("config serializes");
    checkpoint::save(dir, EXPLAINER_KIND, explainer.grid(), seed, config, &explainer.named_params())
}

pub fn load_explainer(dir: &Path) -> Result<(ExplainerModel, CheckpointManifest)> {
    let (manifest, tensors) = checkpoint::load(dir)?;
    checkpoint::expect_kind(&manifest, EXPLAINER_KIND)?;
    let config: ExplainerConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| Error::Invalid(format!("explainer checkpoint config: {e}")))?;
    let mut e = ExplainerModel::new(manifest.grid, config, &mut ChaCha8Rng::seed_from_u64(0))?;
    e.load_params(tensors)?;
    Ok((e, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridSpec, Image};
    use crate::rng;

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let e = ExplainerModel::new(GridSpec::desk(), ExplainerConfig::default(), &mut rng::stream(2, &[])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_explainer(dir.path(), &e, 2).unwrap();
        let (back, _) = load_explainer(dir.path()).unwrap();
        let img = Image::zeros(3, 32);
        assert_eq!(e.explain_forward(&img).unwrap(), back.explain_forward(&img).unwrap());
        assert!(crate::models::checkpoint::load_target(dir.path()).is_err());
    }
}
