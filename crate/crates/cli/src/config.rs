//! Run configuration: JSON file, then `TVE_SEED`, then `--set key=value`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tve_core::data::{CorpusSizes, Split, SyntheticConfig, Task};
use tve_core::eval::Mode;
use tve_core::explainer::{ExplainerConfig, PretrainConfig};
use tve_core::models::{EncoderConfig, TrainConfig};
use tve_core::{rng, GridSpec};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_ratio: f32,
    pub weight_decay: f32,
}

impl OptimConfig {
    fn from_train(t: TrainConfig) -> Self {
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup_ratio: t.warmup_ratio,
            weight_decay: t.weight_decay,
        }
    }

    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_ratio: self.warmup_ratio,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::from_train(TrainConfig::backbone(0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainerTraining {
    pub steps: usize,
    pub batch: usize,
    pub patches_per_image: usize,
    pub lr: f32,
    pub warmup_ratio: f32,
    pub weight_decay: f32,
    pub checkpoint_every: usize,
    pub cache_targets: bool,
}

impl ExplainerTraining {
    pub fn with_seed(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            batch: self.batch,
            patches_per_image: self.patches_per_image,
            lr: self.lr,
            warmup_ratio: self.warmup_ratio,
            weight_decay: self.weight_decay,
            seed,
            checkpoint_every: self.checkpoint_every,
            cache_targets: self.cache_targets,
        }
    }
}

impl Default for ExplainerTraining {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            steps: p.steps,
            batch: p.batch,
            patches_per_image: p.patches_per_image,
            lr: p.lr,
            warmup_ratio: p.warmup_ratio,
            weight_decay: p.weight_decay,
            checkpoint_every: 500,
            cache_targets: p.cache_targets,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    /// Pre-trained `(G, H_g)` checkpoint.
    pub backbone: Option<PathBuf>,
    /// Task model `H_t ∘ G` to explain.
    pub model: Option<PathBuf>,
    pub explainer: Option<PathBuf>,
    pub explainer_ft: Option<PathBuf>,
    pub explainer_scratch: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelationConfig {
    pub n_samples: usize,
    pub n_images: usize,
    pub patches_per_image: usize,
    pub min_pearson: f64,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        Self {
            n_samples: 16,
            n_images: 25,
            patches_per_image: 8,
            min_pearson: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub n_images: usize,
    pub mc_images: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_images: 20,
            mc_images: 2,
            repeats: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridSpec,
    pub generator: SyntheticConfig,
    pub sizes: CorpusSizes,
    pub encoder: EncoderConfig,
    pub explainer: ExplainerConfig,
    pub backbone_training: OptimConfig,
    pub head_training: OptimConfig,
    pub full_training: OptimConfig,
    pub pretraining: ExplainerTraining,
    pub finetuning: ExplainerTraining,
    /// Task used by head training, explanation and evaluation.
    pub task: Task,
    pub split: Split,
    /// Explanation mode; `transferred` applies the transfer rule to exact
    /// meta-attribution, every other value is an evaluation mode.
    pub mode: String,
    /// Images taken from the split; 0 means all.
    pub n_images: usize,
    /// Number of consecutive seeds evaluated for the random control.
    pub sweep: usize,
    pub correlation: CorrelationConfig,
    pub bench: BenchConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: GridSpec::desk(),
            generator: SyntheticConfig::default(),
            sizes: CorpusSizes::default(),
            encoder: EncoderConfig::default(),
            explainer: ExplainerConfig::default(),
            backbone_training: OptimConfig::from_train(TrainConfig::backbone(0)),
            head_training: OptimConfig::from_train(TrainConfig::head(0)),
            full_training: OptimConfig::from_train(TrainConfig::full(0)),
            pretraining: ExplainerTraining::default(),
            finetuning: ExplainerTraining {
                steps: 250,
                checkpoint_every: 0,
                ..ExplainerTraining::default()
            },
            task: Task::Parity,
            split: Split::Test,
            mode: "TVE".into(),
            n_images: 0,
            sweep: 1,
            correlation: CorrelationConfig::default(),
            bench: BenchConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Selected explanation mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExplainMode {
    Transferred,
    Eval(Mode),
}

impl RunConfig {
    /// Resolves a configuration from an optional file, the environment seed
    /// override and `key=value` assignments, in that order.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, sets: &[String]) -> CliResult<Self> {
        let mut value = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text).map_err(|e| CliError::Usage(format!("config {} is not JSON: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        // Unknown keys in the file are rejected before defaults are merged.
        let base: RunConfig = serde_json::from_value(value.clone()).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        value = serde_json::to_value(&base).expect("config serializes");
        if let Some(s) = env_seed {
            let seed: u64 = s.trim().parse().map_err(|_| CliError::Usage(format!("TVE_SEED={s:?} is not an unsigned integer")))?;
            value["seed"] = Value::from(seed);
        }
        for kv in sets {
            apply_set(&mut value, kv)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.grid.validate()?;
        if self.encoder.channels != self.generator.channels || self.explainer.channels != self.generator.channels {
            return Err(CliError::Usage("encoder, explainer and generator channel counts differ".into()));
        }
        if self.explainer.out_dim != self.encoder.out_dim {
            return Err(CliError::Usage(format!(
                "explainer.out_dim {} must equal encoder.out_dim {}",
                self.explainer.out_dim, self.encoder.out_dim
            )));
        }
        for (name, o) in [
            ("backbone_training", &self.backbone_training),
            ("head_training", &self.head_training),
            ("full_training", &self.full_training),
        ] {
            o.with_seed(0).validate().map_err(|e| CliError::Usage(format!("{name}: {e}")))?;
        }
        for (name, t) in [("pretraining", &self.pretraining), ("finetuning", &self.finetuning)] {
            t.with_seed(0)
                .validate(self.grid.num_patches())
                .map_err(|e| CliError::Usage(format!("{name}: {e}")))?;
        }
        self.explain_mode()?;
        if self.sweep == 0 {
            return Err(CliError::Usage("sweep must be at least 1".into()));
        }
        if self.correlation.n_samples == 0 || self.correlation.n_images == 0 {
            return Err(CliError::Usage("correlation needs n_samples and n_images >= 1".into()));
        }
        if self.bench.n_images == 0 || self.bench.repeats == 0 {
            return Err(CliError::Usage("bench needs n_images and repeats >= 1".into()));
        }
        Ok(())
    }

    pub fn explain_mode(&self) -> CliResult<ExplainMode> {
        if self.mode.eq_ignore_ascii_case("transferred") {
            return Ok(ExplainMode::Transferred);
        }
        self.mode.parse::<Mode>().map(ExplainMode::Eval).map_err(|_| {
            let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
            CliError::Usage(format!("unknown mode {:?}; expected transferred or one of {}", self.mode, names.join(", ")))
        })
    }

    /// Independent seed for one pipeline stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let tag = stage.bytes().fold(0u64, |acc, b| acc.wrapping_mul(131).wrapping_add(b as u64));
        rng::derive_seed(self.seed, &[tag])
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
        path.as_deref().ok_or_else(|| CliError::Usage(format!("paths.{key} is required for this command")))
    }
}

/// Sets a dotted key; the value is parsed as JSON and falls back to a string.
fn apply_set(root: &mut Value, kv: &str) -> CliResult<()> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {kv:?}")))?;
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("--set {key}: {part:?} is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(CliError::Usage(format!("--set {key}: unknown key {part:?}")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn flags_override_environment_and_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 5, "pretraining": {"steps": 7}}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&path), None, &[]).unwrap();
        assert_eq!((cfg.seed, cfg.pretraining.steps, cfg.pretraining.batch), (5, 7, 16));
        let cfg = RunConfig::resolve(Some(&path), Some("9"), &[]).unwrap();
        assert_eq!(cfg.seed, 9);
        let cfg = RunConfig::resolve(Some(&path), Some("9"), &["seed=11".into(), "paths.data=d".into()]).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.paths.data.as_deref(), Some(Path::new("d")));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"sed": 5}"#).unwrap();
        assert!(RunConfig::resolve(Some(&path), None, &[]).is_err());
        assert!(RunConfig::resolve(None, None, &["grid.widht=3".into()]).is_err());
        assert!(RunConfig::resolve(None, None, &["grid.width=33".into()]).is_err());
        assert!(RunConfig::resolve(None, None, &["mode=nonsense".into()]).is_err());
        assert!(RunConfig::resolve(None, Some("x"), &[]).is_err());
    }
}
