//! Synthetic "planted blob" corpora.
//!
//! Every image is Gaussian noise around the zero baseline with one bright blob
//! placed inside one of the four quadrants. The patches under the blob are the
//! ground-truth evidence for every task:
//!
//! * `quadrant`: 4 classes, which quadrant holds the blob (pre-training task).
//! * `parity`: 2 classes, whether the blob quadrant lies on the main diagonal
//!   (top-left / bottom-right) or the anti-diagonal.
//! * `shape`: 2 classes, filled square versus hollow ring, any quadrant.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, Image};
use crate::rng;
use crate::store;
use crate::tensor::io as tvet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Quadrant,
    Parity,
    Shape,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Quadrant, Task::Parity, Task::Shape];

    pub fn num_classes(self) -> usize {
        match self {
            Task::Quadrant => 4,
            Task::Parity | Task::Shape => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Quadrant => "quadrant",
            Task::Parity => "parity",
            Task::Shape => "shape",
        }
    }

    fn stream_id(self) -> u64 {
        match self {
            Task::Quadrant => 1,
            Task::Parity => 2,
            Task::Shape => 3,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream_id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    /// Quadrant (0 = top-left, row-major) that holds the blob.
    pub quadrant: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub grid: GridSpec,
    pub task: Task,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images(&self) -> impl Iterator<Item = &Image> {
        self.samples.iter().map(|s| &s.image)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.task.num_classes()
    }

    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            grid: self.grid,
            task: self.task,
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }
}

/// Generator parameters. Blob geometry scales with the image width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub channels: usize,
    pub noise_std: f32,
    pub blob_intensity: f32,
    /// Blob side as a fraction of the image width.
    pub blob_fraction: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            noise_std: 0.3,
            blob_intensity: 1.5,
            blob_fraction: 0.25,
        }
    }
}

impl SyntheticConfig {
    fn blob_side(&self, width: usize) -> usize {
        ((self.blob_fraction * width as f32).round() as usize).clamp(3, (width / 2).max(3))
    }
}

/// Deterministic per-sample RNG stream: the same `(seed, task, split, index)`
/// always yields the same image regardless of generation order.
fn sample_rng(seed: u64, task: Task, split: Split, index: usize) -> ChaCha8Rng {
    rng::stream(seed, &[task.stream_id(), split.stream_id(), index as u64])
}

/// Class labels cycle `0, 1, .., K-1`, so every class gets an exact quota when
/// `n` is a multiple of `K`.
pub fn generate(task: Task, split: Split, n: usize, grid: &GridSpec, cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    grid.validate()?;
    if grid.width < 4 {
        return Err(Error::Grid("synthetic images need width >= 4".into()));
    }
    let samples = (0..n)
        .map(|index| {
            let mut rng = sample_rng(seed, task, split, index);
            let label = index % task.num_classes();
            render(task, label, grid, cfg, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        grid: *grid,
        task,
        samples,
    })
}

fn render(task: Task, label: usize, grid: &GridSpec, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (quadrant, ring) = match task {
        Task::Quadrant => (label, false),
        Task::Parity => {
            // label 0: quadrants 0 / 3 (main diagonal), label 1: quadrants 1 / 2.
            let pick = rng.random_range(0..2);
            let q = if label == 0 { [0, 3][pick] } else { [1, 2][pick] };
            (q, false)
        }
        Task::Shape => (rng.random_range(0..4), label == 1),
    };

    let w = grid.width;
    let half = w / 2;
    let side = cfg.blob_side(w);
    let noise = Normal::new(0.0f32, cfg.noise_std.max(f32::MIN_POSITIVE)).expect("valid std");
    let mut data: Vec<f32> = (0..cfg.channels * w * w).map(|_| noise.sample(rng)).collect();

    let (qr, qc) = (quadrant / 2, quadrant % 2);
    let span = half.saturating_sub(side) + 1;
    let r0 = qr * half + rng.random_range(0..span);
    let c0 = qc * half + rng.random_range(0..span);
    let tint: Vec<f32> = (0..cfg.channels).map(|_| rng.random_range(0.7..1.3)).collect();
    for r in r0..r0 + side {
        for c in c0..c0 + side {
            let border = r == r0 || c == c0 || r == r0 + side - 1 || c == c0 + side - 1;
            if ring && !border {
                continue;
            }
            for (ch, t) in tint.iter().enumerate() {
                data[(ch * w + r) * w + c] += cfg.blob_intensity * t;
            }
        }
    }
    Ok(Sample {
        image: Image::new(cfg.channels, w, data)?,
        label,
        quadrant,
    })
}

/// Patches overlapped by the blob's quadrant; used by sanity checks.
pub fn quadrant_patches(grid: &GridSpec, quadrant: usize) -> Vec<usize> {
    let p = grid.patches_per_side;
    let half = p / 2;
    let (qr, qc) = (quadrant / 2, quadrant % 2);
    grid.patches()
        .enumerate()
        .filter(|(_, z)| {
            let (i, j) = (z.i - 1, z.j - 1);
            (i >= half) as usize == qr && (j >= half) as usize == qc
        })
        .map(|(k, _)| k)
        .collect()
}

/// Split sizes written by [`write_corpus`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSizes {
    pub pretrain_train: usize,
    pub pretrain_test: usize,
    pub downstream_train: usize,
    pub downstream_test: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        Self {
            pretrain_train: 2000,
            pretrain_test: 400,
            downstream_train: 1000,
            downstream_test: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub label: usize,
    pub task: Task,
    pub split: Split,
    pub quadrant: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub grid: GridSpec,
    pub channels: usize,
    pub seed: u64,
    pub generator: SyntheticConfig,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

/// Generates the quadrant pre-training corpus plus the parity and shape
/// downstream tasks into `dir`.
pub fn write_corpus(dir: &Path, grid: &GridSpec, cfg: &SyntheticConfig, sizes: &CorpusSizes, seed: u64) -> Result<DatasetManifest> {
    store::create_dir(&dir.join("images"))?;
    let mut entries = Vec::new();
    let plan = [
        (Task::Quadrant, Split::Train, sizes.pretrain_train),
        (Task::Quadrant, Split::Test, sizes.pretrain_test),
        (Task::Parity, Split::Train, sizes.downstream_train),
        (Task::Parity, Split::Test, sizes.downstream_test),
        (Task::Shape, Split::Train, sizes.downstream_train),
        (Task::Shape, Split::Test, sizes.downstream_test),
    ];
    for (task, split, n) in plan {
        let ds = generate(task, split, n, grid, cfg, seed)?;
        for (k, s) in ds.samples.iter().enumerate() {
            let split_name = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let file = format!("images/{task}-{split_name}-{k:05}.tvet");
            let sha256 = store::write_hashed(&dir.join(&file), &tvet::encode(&s.image.to_tensor()))?;
            entries.push(ManifestEntry {
                file,
                label: s.label,
                task,
                split,
                quadrant: s.quadrant,
                sha256,
            });
        }
    }
    let manifest = DatasetManifest {
        grid: *grid,
        channels: cfg.channels,
        seed,
        generator: cfg.clone(),
        entries,
    };
    store::write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    store::read_json(&dir.join(MANIFEST))
}

/// Loads one task/split from a corpus directory, verifying every image hash.
pub fn load_split(dir: &Path, task: Task, split: Split) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::new();
    for e in manifest.entries.iter().filter(|e| e.task == task && e.split == split) {
        let path = dir.join(&e.file);
        let bytes = store::read_verified(&path, &e.sha256)?;
        let tensor = tvet::decode(&bytes).map_err(|reason| Error::TensorFormat {
            path: path.clone(),
            reason,
        })?;
        let image = Image::from_tensor(&tensor)?;
        image.check_grid(&manifest.grid)?;
        if e.label >= task.num_classes() {
            return Err(Error::UnknownClass {
                class: e.label,
                classes: task.num_classes(),
            });
        }
        samples.push(Sample {
            image,
            label: e.label,
            quadrant: e.quadrant,
        });
    }
    Ok(Dataset {
        grid: manifest.grid,
        task,
        samples,
    })
}
