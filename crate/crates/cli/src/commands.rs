//! One function per subcommand. Every command writes into `paths.out` and
//! echoes the resolved configuration there as `config.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tve_core::attribution::{compute_meta_attribution, transfer_explain, ExplanationHeatmap};
use tve_core::data::{self, Dataset, Split, Task};
use tve_core::eval::{self, stats, Direction, Method, Mode, ModeArtifacts, ModeResults};
use tve_core::explainer::{self, ExplainerModel, PretrainReport, TargetCache};
use tve_core::models::checkpoint::{self, CheckpointManifest, MANIFEST};
use tve_core::models::{self, TargetModel, TrainReport};
use tve_core::{rng, store, Image};

use crate::config::{ExplainMode, RunConfig};
use crate::error::{CliError, CliResult};

pub const CONFIG_ECHO: &str = "config.json";
pub const TRACE: &str = "train_trace.jsonl";
pub const REPORT: &str = "report.json";

fn out_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let out = cfg.require(&cfg.paths.out, "out")?.to_path_buf();
    store::create_dir(&out)?;
    store::write_json(&out.join(CONFIG_ECHO), cfg)?;
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> CliResult<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, &r).map_err(|e| CliError::Usage(e.to_string()))?;
        buf.push(b'\n');
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

fn load_dataset(cfg: &RunConfig, task: Task, split: Split) -> CliResult<Dataset> {
    let dir = cfg.require(&cfg.paths.data, "data")?;
    let ds = data::load_split(dir, task, split)?;
    if ds.grid != cfg.grid {
        return Err(CliError::Usage(format!("corpus grid {:?} differs from config grid {:?}", ds.grid, cfg.grid)));
    }
    if ds.is_empty() {
        return Err(CliError::Usage(format!("corpus has no {task} images for this split")));
    }
    Ok(ds)
}

/// Evaluation images: the configured task and split, truncated to `n_images`.
fn eval_images(cfg: &RunConfig) -> CliResult<Dataset> {
    let ds = load_dataset(cfg, cfg.task, cfg.split)?;
    Ok(if cfg.n_images > 0 { ds.take(cfg.n_images) } else { ds })
}

fn load_model(cfg: &RunConfig, path: &Option<PathBuf>, key: &str) -> CliResult<TargetModel> {
    let (m, _) = checkpoint::load_target(cfg.require(path, key)?)?;
    if *m.grid() != cfg.grid {
        return Err(CliError::Usage(format!("paths.{key} was trained on a different grid")));
    }
    Ok(m)
}

fn load_explainer(cfg: &RunConfig, path: &Option<PathBuf>, key: &str) -> CliResult<ExplainerModel> {
    let (e, _) = explainer::load_explainer(cfg.require(path, key)?)?;
    if *e.grid() != cfg.grid {
        return Err(CliError::Usage(format!("paths.{key} was trained on a different grid")));
    }
    Ok(e)
}

fn fresh_explainer(cfg: &RunConfig, stage: &str) -> CliResult<ExplainerModel> {
    let mut r = rng::stream(cfg.stage_seed(stage), &[]);
    Ok(ExplainerModel::new(cfg.grid, cfg.explainer.clone(), &mut r)?)
}

#[derive(Serialize)]
struct ClassifierSummary<'a> {
    task: Task,
    train_images: usize,
    steps: usize,
    final_loss: f32,
    train_accuracy: f32,
    test_accuracy: Option<f32>,
    skipped_steps: usize,
    checkpoint: &'a CheckpointManifest,
}

#[derive(Serialize)]
struct TraceRow {
    step: usize,
    loss: f32,
    lr: f32,
}

fn finish_classifier(cfg: &RunConfig, out: &Path, model: &TargetModel, report: &TrainReport, train: &Dataset, seed: u64) -> CliResult<()> {
    let manifest = checkpoint::save_target(out, model, seed)?;
    let rows = report
        .losses
        .iter()
        .zip(&report.lrs)
        .enumerate()
        .map(|(i, (&loss, &lr))| TraceRow { step: i + 1, loss, lr });
    write_jsonl(&out.join(TRACE), rows)?;
    let test_accuracy = match load_dataset(cfg, train.task, Split::Test) {
        Ok(test) => Some(models::train::accuracy(model, &test)?),
        Err(_) => None,
    };
    let summary = ClassifierSummary {
        task: train.task,
        train_images: train.len(),
        steps: report.losses.len(),
        final_loss: report.final_loss,
        train_accuracy: report.accuracy,
        test_accuracy,
        skipped_steps: report.skipped_steps,
        checkpoint: &manifest,
    };
    store::write_json(&out.join(REPORT), &summary)?;
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, force: bool) -> CliResult<()> {
    let out = cfg.require(&cfg.paths.out, "out")?;
    if !force && out.is_dir() && fs::read_dir(out)?.next().is_some() {
        return Err(CliError::Usage(format!("{} is not empty; pass --force to overwrite", out.display())));
    }
    let out = out_dir(cfg)?;
    data::write_corpus(&out, &cfg.grid, &cfg.generator, &cfg.sizes, cfg.seed)?;
    Ok(())
}

/// Backbone `G` with its general head `H_g`, trained on the quadrant corpus.
pub fn train_backbone(cfg: &RunConfig) -> CliResult<()> {
    let train = load_dataset(cfg, Task::Quadrant, Split::Train)?;
    let out = out_dir(cfg)?;
    let seed = cfg.stage_seed("backbone");
    let (model, report) = models::pretrain_backbone(&train, &cfg.grid, &cfg.encoder, &cfg.backbone_training.with_seed(seed))?;
    finish_classifier(cfg, &out, &model, &report, &train, seed)
}

/// Task head `H_t` on the frozen backbone.
pub fn finetune_head(cfg: &RunConfig) -> CliResult<()> {
    let backbone = load_model(cfg, &cfg.paths.backbone, "backbone")?;
    let train = load_dataset(cfg, cfg.task, Split::Train)?;
    let out = out_dir(cfg)?;
    let seed = cfg.stage_seed("head");
    let (model, report) = models::finetune_head(&backbone.encoder, &train, &cfg.head_training.with_seed(seed))?;
    finish_classifier(cfg, &out, &model, &report, &train, seed)
}

/// Encoder and head updated together, starting from `paths.model`.
pub fn finetune_full(cfg: &RunConfig) -> CliResult<()> {
    let start = load_model(cfg, &cfg.paths.model, "model")?;
    let train = load_dataset(cfg, cfg.task, Split::Train)?;
    if start.num_classes() != train.num_classes() {
        return Err(CliError::Usage(format!("paths.model has {} classes, task {} has {}", start.num_classes(), cfg.task, train.num_classes())));
    }
    let out = out_dir(cfg)?;
    let seed = cfg.stage_seed("full");
    let (model, report) = models::finetune_full(&start, &train, &cfg.full_training.with_seed(seed))?;
    finish_classifier(cfg, &out, &model, &report, &train, seed)
}

#[derive(Serialize)]
struct ExplainerSummary<'a> {
    images: usize,
    steps: usize,
    initial_loss: Option<f32>,
    final_loss: Option<f32>,
    skipped_steps: usize,
    snapshots: Vec<String>,
    checkpoint: &'a CheckpointManifest,
}

fn finish_explainer(out: &Path, e: &ExplainerModel, report: &PretrainReport, images: usize, seed: u64) -> CliResult<()> {
    let manifest = explainer::save_explainer(out, e, seed)?;
    write_jsonl(&out.join(TRACE), &report.trace)?;
    let mut snapshots = Vec::new();
    for (step, snap) in &report.checkpoints {
        let rel = format!("steps/{step:05}");
        explainer::save_explainer(&out.join(&rel), snap, seed)?;
        snapshots.push(rel);
    }
    let summary = ExplainerSummary {
        images,
        steps: report.trace.len(),
        initial_loss: report.initial_loss(),
        final_loss: report.final_loss(),
        skipped_steps: report.skipped_steps,
        snapshots,
        checkpoint: &manifest,
    };
    store::write_json(&out.join(REPORT), &summary)?;
    Ok(())
}

/// Copies a checkpoint directory file by file, leaving bytes untouched.
fn copy_checkpoint(from: &Path, to: &Path) -> CliResult<()> {
    let (manifest, _) = checkpoint::load(from)?;
    fs::copy(from.join(MANIFEST), to.join(MANIFEST))?;
    for p in &manifest.params {
        fs::copy(from.join(&p.file), to.join(&p.file))?;
    }
    Ok(())
}

/// Explainer trained against the backbone's exact meta-attribution on the
/// quadrant corpus, optionally continuing from `paths.explainer`.
pub fn pretrain_explainer(cfg: &RunConfig, init: bool) -> CliResult<()> {
    let backbone = load_model(cfg, &cfg.paths.backbone, "backbone")?;
    let start = if init {
        Some(load_explainer(cfg, &cfg.paths.explainer, "explainer")?)
    } else {
        None
    };
    let train = load_dataset(cfg, Task::Quadrant, Split::Train)?;
    let out = out_dir(cfg)?;
    if init && cfg.pretraining.steps == 0 {
        return copy_checkpoint(cfg.require(&cfg.paths.explainer, "explainer")?, &out);
    }
    let mut e = match start {
        Some(e) => e,
        None => fresh_explainer(cfg, "explainer-init")?,
    };
    let seed = cfg.stage_seed("pretrain");
    let images: Vec<&Image> = train.images().collect();
    let mut cache = TargetCache::new(&backbone.encoder, cfg.pretraining.cache_targets)?;
    let report = explainer::pretrain(&mut e, &mut cache, &images, &cfg.pretraining.with_seed(seed))?;
    finish_explainer(&out, &e, &report, images.len(), seed)
}

/// Adapts the pre-trained explainer to the encoder of `paths.model` on the
/// downstream task; `scratch` starts from a fresh explainer instead.
pub fn finetune_explainer(cfg: &RunConfig, scratch: bool) -> CliResult<()> {
    let model = load_model(cfg, &cfg.paths.model, "model")?;
    let start = if scratch {
        fresh_explainer(cfg, "scratch-init")?
    } else {
        load_explainer(cfg, &cfg.paths.explainer, "explainer")?
    };
    let train = load_dataset(cfg, cfg.task, Split::Train)?;
    let out = out_dir(cfg)?;
    if !scratch && cfg.finetuning.steps == 0 {
        return copy_checkpoint(cfg.require(&cfg.paths.explainer, "explainer")?, &out);
    }
    let seed = cfg.stage_seed(if scratch { "scratch" } else { "finetune" });
    let images: Vec<&Image> = train.images().collect();
    let mut cache = TargetCache::new(&model.encoder, cfg.finetuning.cache_targets)?;
    let (e, report) = explainer::finetune_explainer(&start, &mut cache, &images, &cfg.finetuning.with_seed(seed))?;
    finish_explainer(&out, &e, &report, images.len(), seed)
}

/// Owned artifacts a mode needs, loaded on demand.
struct Loaded {
    general: Option<TargetModel>,
    pretrained: Option<ExplainerModel>,
    finetuned: Option<ExplainerModel>,
    scratch: Option<ExplainerModel>,
    untrained: Option<ExplainerModel>,
}

impl Loaded {
    fn for_mode(cfg: &RunConfig, mode: Mode) -> CliResult<Self> {
        let opt = |path: &Option<PathBuf>, key: &str| -> CliResult<Option<ExplainerModel>> {
            path.as_ref().map(|_| load_explainer(cfg, path, key)).transpose()
        };
        let p = &cfg.paths;
        Ok(Self {
            general: match mode {
                Mode::TveHg => p.backbone.as_ref().map(|_| load_model(cfg, &p.backbone, "backbone")).transpose()?,
                _ => None,
            },
            pretrained: match mode {
                Mode::Tve | Mode::TvePt | Mode::TveHg => opt(&p.explainer, "explainer")?,
                _ => None,
            },
            finetuned: match mode {
                Mode::TveFt => opt(&p.explainer_ft, "explainer_ft")?,
                _ => None,
            },
            scratch: match mode {
                Mode::LfScratch => opt(&p.explainer_scratch, "explainer_scratch")?,
                _ => None,
            },
            untrained: match mode {
                Mode::WoPt => Some(fresh_explainer(cfg, "explainer-init")?),
                _ => None,
            },
        })
    }

    fn artifacts<'a>(&'a self, target: &'a TargetModel) -> ModeArtifacts<'a> {
        ModeArtifacts {
            target,
            general_head: self.general.as_ref().map(|m| &m.head),
            pretrained: self.pretrained.as_ref(),
            finetuned: self.finetuned.as_ref(),
            scratch: self.scratch.as_ref(),
            untrained: self.untrained.as_ref(),
        }
    }
}

/// One heatmap (JSON + PGM) per image, explaining the predicted class.
pub fn explain(cfg: &RunConfig) -> CliResult<()> {
    let mode = cfg.explain_mode()?;
    let model = load_model(cfg, &cfg.paths.model, "model")?;
    let loaded = match mode {
        ExplainMode::Eval(m) => {
            let l = Loaded::for_mode(cfg, m)?;
            l.artifacts(&model).check(m)?;
            Some(l)
        }
        ExplainMode::Transferred => None,
    };
    let ds = eval_images(cfg)?;
    let out = out_dir(cfg)?;
    let seed = cfg.stage_seed("explain");
    for (index, img) in ds.images().enumerate() {
        let y = model.predicted_class(img)?;
        let hm = match (mode, &loaded) {
            (ExplainMode::Eval(m), Some(l)) => l.artifacts(&model).heatmap(m, img, y, index, seed)?,
            _ => transfer_explain(&compute_meta_attribution(&model.encoder, img)?, &model.head, y)?,
        };
        hm.write(&out, &format!("{index:05}"))?;
    }
    Ok(())
}

fn path_name(p: &Option<PathBuf>) -> String {
    p.as_deref()
        .and_then(Path::file_name)
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Serialize)]
struct Band {
    direction: Direction,
    seeds: Vec<u64>,
    means: Vec<f64>,
    mean: f64,
    std: f64,
}

/// Fidelity AUCs of one mode. The random control is swept over `sweep` seeds
/// and summarized as a band.
pub fn evaluate(cfg: &RunConfig) -> CliResult<()> {
    let mode = match cfg.explain_mode()? {
        ExplainMode::Eval(m) => m,
        ExplainMode::Transferred => Mode::Exact,
    };
    let model = load_model(cfg, &cfg.paths.model, "model")?;
    let loaded = Loaded::for_mode(cfg, mode)?;
    let artifacts = loaded.artifacts(&model);
    artifacts.check(mode)?;
    let ds = eval_images(cfg)?;
    let images: Vec<&Image> = ds.images().collect();
    let out = out_dir(cfg)?;
    let runs = if mode == Mode::Random { cfg.sweep } else { 1 };
    let seeds: Vec<u64> = (0..runs as u64).map(|k| rng::derive_seed(cfg.stage_seed("evaluate"), &[k])).collect();
    let results: Vec<ModeResults> = seeds
        .iter()
        .map(|&s| eval::evaluate_mode(mode, &artifacts, &images, s))
        .collect::<tve_core::Result<_>>()?;
    let model_name = path_name(&cfg.paths.model);
    let dataset = format!("{}-{}", cfg.task, match cfg.split {
        Split::Train => "train",
        Split::Test => "test",
    });
    for d in Direction::BOTH {
        store::write_json(&out.join(format!("results_{}_{}.json", mode.name(), d.name())), &results[0].to_file(d, &model_name, &dataset))?;
    }
    if mode == Mode::Random {
        let bands: Vec<Band> = Direction::BOTH
            .into_iter()
            .map(|d| {
                let means: Vec<f64> = results.iter().map(|r| r.mean(d)).collect();
                Band {
                    direction: d,
                    seeds: seeds.clone(),
                    mean: stats::mean(&means),
                    std: stats::std_pop(&means),
                    means,
                }
            })
            .collect();
        store::write_json(&out.join("random_band.json"), &bands)?;
    }
    Ok(())
}

/// Checks the ratio bound on every image, patch and class.
pub fn verify_bound(cfg: &RunConfig) -> CliResult<()> {
    let model = load_model(cfg, &cfg.paths.model, "model")?;
    let e = load_explainer(cfg, &cfg.paths.explainer, "explainer")?;
    let ds = eval_images(cfg)?;
    let out = out_dir(cfg)?;
    let mut exact = Vec::with_capacity(ds.len());
    let mut predicted = Vec::with_capacity(ds.len());
    for img in ds.images() {
        exact.push(compute_meta_attribution(&model.encoder, img)?);
        predicted.push(e.explain_forward(img)?);
    }
    let classes: Vec<usize> = (0..model.num_classes()).collect();
    let report = eval::check_bound(&exact, &predicted, &model.head, &classes)?;
    store::write_json(&out.join("bound.json"), &report)?;
    if !report.holds {
        return Err(CliError::Threshold(format!(
            "mean error {} exceeds bound {:?} (epsilon {})",
            report.mean_abs_error, report.bound, report.epsilon
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct CorrelationFile<'a> {
    n_pairs: usize,
    min_pearson: f64,
    passed: bool,
    #[serde(flatten)]
    report: &'a eval::CorrelationReport,
}

/// Two-state attribution against the sampled oracle, with the scatter dump.
pub fn correlate(cfg: &RunConfig) -> CliResult<()> {
    let model = load_model(cfg, &cfg.paths.model, "model")?;
    let ds = eval_images(cfg)?.take(cfg.correlation.n_images);
    let out = out_dir(cfg)?;
    let images: Vec<&Image> = ds.images().collect();
    let c = &cfg.correlation;
    let report = eval::correlation_study(&model, &images, c.n_samples, c.patches_per_image, cfg.stage_seed("correlate"))?;
    let passed = report.pearson.is_some_and(|r| r > c.min_pearson);
    let file = CorrelationFile {
        n_pairs: report.points.len(),
        min_pearson: c.min_pearson,
        passed,
        report: &report,
    };
    store::write_json(&out.join("correlation.json"), &file)?;
    if !passed {
        return Err(CliError::Threshold(format!("pearson {:?} is not above {}", report.pearson, c.min_pearson)));
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    method: Method,
    images: usize,
    forwards_per_image: usize,
    images_per_sec: f64,
    repeats: Vec<f64>,
}

/// Images per second of the transferred, exact and sampled paths. Timings
/// vary between runs, so `bench.json` is not a reproducible payload.
pub fn bench(cfg: &RunConfig) -> CliResult<()> {
    let model = load_model(cfg, &cfg.paths.model, "model")?;
    let e = load_explainer(cfg, &cfg.paths.explainer, "explainer")?;
    let ds = eval_images(cfg)?;
    let out = out_dir(cfg)?;
    let images: Vec<&Image> = ds.images().collect();
    let p2 = cfg.grid.num_patches();
    let name = path_name(&cfg.paths.model);
    let mut rows = Vec::new();
    for (method, n) in [
        (Method::Tve, cfg.bench.n_images),
        (Method::Exact, cfg.bench.n_images),
        (Method::Mc16, cfg.bench.mc_images.max(1)),
    ] {
        let subset = &images[..n.min(images.len())];
        let t = eval::bench_throughput(method, &[(&name, &model)], Some(&e), subset, cfg.bench.repeats)?;
        rows.extend(t.into_iter().map(|t| BenchRow {
            method,
            images: subset.len(),
            forwards_per_image: method.forwards_per_image(p2),
            images_per_sec: t.images_per_sec,
            repeats: t.repeats,
        }));
    }
    store::write_json(&out.join("bench.json"), &rows)?;
    Ok(())
}

/// Reads a heatmap written by [`explain`].
pub fn read_heatmap(dir: &Path, index: usize) -> CliResult<ExplanationHeatmap> {
    Ok(ExplanationHeatmap::read(&dir.join(format!("{index:05}.json")))?)
}
