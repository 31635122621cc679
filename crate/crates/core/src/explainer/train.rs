//! Explainer pre-training and fine-tuning against exact meta-attribution targets.

use std::collections::HashMap;

use rand::seq::index;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::ExplainerModel;
use crate::attribution::{compute_meta_attribution, MetaAttribution};
use crate::error::{Error, Result};
use crate::grid::{Image, PatchSubset};
use crate::models::{BackboneEncoder, Module};
use crate::rng;
use crate::tensor::{AdamConfig, OptimizerState, Schedule, StepOutcome, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Images per step; capped at the dataset size.
    pub batch: usize,
    pub patches_per_image: usize,
    pub lr: f32,
    pub warmup_ratio: f32,
    pub weight_decay: f32,
    pub seed: u64,
    /// Snapshot interval in steps; 0 disables snapshots.
    pub checkpoint_every: usize,
    /// Keep full per-image targets after first use.
    pub cache_targets: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 16,
            patches_per_image: 8,
            lr: 1e-3,
            warmup_ratio: 0.05,
            weight_decay: 0.05,
            seed: 0,
            checkpoint_every: 0,
            cache_targets: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, patches: usize) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Invalid("batch must be positive".into()));
        }
        if self.patches_per_image == 0 || self.patches_per_image > patches {
            return Err(Error::Invalid(format!(
                "patches_per_image must be in 1..={patches}, got {}",
                self.patches_per_image
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Invalid("learning rate and weight decay must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Invalid(format!("warmup_ratio {} outside [0, 1]", self.warmup_ratio)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub trace: Vec<TraceEntry>,
    /// `(steps completed, snapshot)` pairs.
    pub checkpoints: Vec<(usize, ExplainerModel)>,
    pub skipped_steps: usize,
}

impl PretrainReport {
    pub fn initial_loss(&self) -> Option<f32> {
        self.trace.first().map(|t| t.loss)
    }

    pub fn final_loss(&self) -> Option<f32> {
        self.trace.last().map(|t| t.loss)
    }
}

/// Exact `[g_z, h_z]` targets from a frozen encoder, optionally memoized per image.
pub struct TargetCache<'a> {
    encoder: &'a BackboneEncoder,
    keep: bool,
    metas: HashMap<u64, MetaAttribution>,
}

impl<'a> TargetCache<'a> {
    pub fn new(encoder: &'a BackboneEncoder, keep: bool) -> Result<Self> {
        if !encoder.is_frozen() {
            return Err(Error::Invalid("explainer targets require a frozen encoder".into()));
        }
        Ok(Self {
            encoder,
            keep,
            metas: HashMap::new(),
        })
    }

    pub fn encoder(&self) -> &BackboneEncoder {
        self.encoder
    }

    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    /// Rows `[Σ|patches[b]|, 2D]` of concatenated `g` and `h`, ordered like the inputs.
    pub fn targets(&mut self, images: &[&Image], patches: &[Vec<usize>]) -> Result<Vec<f32>> {
        let encoder = self.encoder;
        let d = encoder.out_dim();
        if self.keep {
            let missing: Vec<(u64, &Image)> = {
                let mut seen = std::collections::HashSet::new();
                images
                    .iter()
                    .map(|img| (img.content_hash(), *img))
                    .filter(|(k, _)| !self.metas.contains_key(k) && seen.insert(*k))
                    .collect()
            };
            let fresh: Vec<(u64, MetaAttribution)> = missing
                .par_iter()
                .map(|&(k, img)| compute_meta_attribution(encoder, img).map(|m| (k, m)))
                .collect::<Result<_>>()?;
            self.metas.extend(fresh);
            let mut out = Vec::new();
            for (img, zs) in images.iter().zip(patches) {
                let meta = &self.metas[&img.content_hash()];
                for &z in zs {
                    out.extend_from_slice(meta.g_at(z));
                    out.extend_from_slice(meta.h_at(z));
                }
            }
            return Ok(out);
        }
        let neighbors = encoder.grid().all_neighbors();
        let parts: Vec<Vec<f32>> = images
            .par_iter()
            .zip(patches.par_iter())
            .map(|(img, zs)| -> Result<Vec<f32>> {
                let prepared = encoder.prepare(img)?;
                let comps: Vec<PatchSubset> = zs.iter().map(|&z| neighbors[z].complement()).collect();
                let ns: Vec<&PatchSubset> = zs.iter().map(|&z| &neighbors[z]).collect();
                let cs: Vec<&PatchSubset> = comps.iter().collect();
                let g = prepared.encode_subsets(&ns)?;
                let h = prepared.encode_subsets(&cs)?;
                let mut out = Vec::with_capacity(2 * g.len());
                for (gr, hr) in g.chunks_exact(d).zip(h.chunks_exact(d)) {
                    out.extend_from_slice(gr);
                    out.extend_from_slice(hr);
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(parts.concat())
    }
}

fn check_pair(explainer: &ExplainerModel, encoder: &BackboneEncoder) -> Result<()> {
    if explainer.out_dim() != encoder.out_dim() {
        return Err(Error::EmbeddingDim {
            meta: explainer.out_dim(),
            head: encoder.out_dim(),
        });
    }
    if explainer.grid() != encoder.grid() {
        return Err(Error::Grid(format!("explainer grid {:?} differs from encoder grid {:?}", explainer.grid(), encoder.grid())));
    }
    Ok(())
}

/// Records `Σ_z ‖ĝ−g‖² + ‖ĥ−h‖²` averaged over requested patches.
fn record_loss(tape: &mut Tape, vars: &[Var], explainer: &ExplainerModel, images: &[&Image], patches: &[Vec<usize>], targets: Vec<f32>) -> Result<Var> {
    let pred = explainer.forward_tape(tape, vars, images, patches)?;
    let width = 2 * explainer.out_dim();
    let rows = targets.len() / width;
    let target = tape.constant(Tensor::new(vec![rows, width], targets)?);
    let mse = tape.mse(pred, target)?;
    tape.scale(mse, width as f32)
}

/// Squared-error loss of the predicted meta-attribution on the given patches.
pub fn pretrain_loss(explainer: &ExplainerModel, encoder: &BackboneEncoder, image: &Image, sampled_patches: &[usize]) -> Result<f32> {
    check_pair(explainer, encoder)?;
    if sampled_patches.is_empty() {
        return Err(Error::Invalid("sampled_patches must be nonempty".into()));
    }
    let mut cache = TargetCache::new(encoder, false)?;
    let patches = vec![sampled_patches.to_vec()];
    let targets = cache.targets(&[image], &patches)?;
    let mut tape = Tape::new();
    let vars = explainer.record(&mut tape);
    let loss = record_loss(&mut tape, &vars, explainer, &[image], &patches, targets)?;
    Ok(tape.value(loss).item())
}

/// The same loss between two meta-attributions over patches `zs`.
pub fn meta_loss(pred: &MetaAttribution, target: &MetaAttribution, zs: &[usize]) -> Result<f32> {
    if pred.g.dims() != target.g.dims() {
        return Err(Error::shape("meta_loss", pred.g.dims(), target.g.dims()));
    }
    if zs.is_empty() {
        return Err(Error::Invalid("patch list must be nonempty".into()));
    }
    let sq = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>();
    let total: f64 = zs
        .iter()
        .map(|&z| sq(pred.g_at(z), target.g_at(z)) + sq(pred.h_at(z), target.h_at(z)))
        .sum();
    Ok((total / zs.len() as f64) as f32)
}

/// Mean loss over every patch of `images`, with no parameter update.
pub fn evaluation_loss(explainer: &ExplainerModel, cache: &mut TargetCache<'_>, images: &[&Image]) -> Result<f32> {
    check_pair(explainer, cache.encoder())?;
    let all: Vec<usize> = (0..explainer.grid().num_patches()).collect();
    let mut total = 0.0f64;
    for chunk in images.chunks(16) {
        let patches = vec![all.clone(); chunk.len()];
        let targets = cache.targets(chunk, &patches)?;
        let mut tape = Tape::new();
        let vars = explainer.record(&mut tape);
        let loss = record_loss(&mut tape, &vars, explainer, chunk, &patches, targets)?;
        total += tape.value(loss).item() as f64 * chunk.len() as f64;
    }
    Ok((total / images.len().max(1) as f64) as f32)
}

fn canonical_order(images: &[&Image]) -> Vec<usize> {
    let mut keys: Vec<(u64, usize)> = images.iter().enumerate().map(|(i, im)| (im.content_hash(), i)).collect();
    keys.sort_unstable();
    keys.into_iter().map(|(_, i)| i).collect()
}

/// Trains `explainer` in place to regress the encoder's meta-attribution.
pub fn pretrain(explainer: &mut ExplainerModel, cache: &mut TargetCache<'_>, images: &[&Image], cfg: &PretrainConfig) -> Result<PretrainReport> {
    check_pair(explainer, cache.encoder())?;
    let p2 = explainer.grid().num_patches();
    cfg.validate(p2)?;
    if images.is_empty() {
        return Err(Error::Invalid("explainer training set is empty".into()));
    }
    let order = canonical_order(images);
    let batch = cfg.batch.min(order.len());
    let adam = AdamConfig::new(
        Schedule {
            base_lr: cfg.lr,
            warmup_ratio: cfg.warmup_ratio,
            total_steps: cfg.steps,
        },
        cfg.weight_decay,
    );
    let mut opt = {
        let params: Vec<&Tensor> = explainer.named_params().into_iter().map(|(_, t)| t).collect();
        OptimizerState::new(adam, &params)
    };

    let mut trace = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    let mut skipped = 0;
    let mut perm: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for step in 0..cfg.steps {
        let mut chosen = Vec::with_capacity(batch);
        while chosen.len() < batch {
            if cursor == perm.len() {
                perm = order.clone();
                perm.shuffle(&mut rng::stream(cfg.seed, &[0x6570_6f63, epoch]));
                epoch += 1;
                cursor = 0;
            }
            chosen.push(images[perm[cursor]]);
            cursor += 1;
        }
        let mut prng = rng::stream(cfg.seed, &[0x7061_7463, step as u64]);
        let patches: Vec<Vec<usize>> = chosen
            .iter()
            .map(|_| index::sample(&mut prng, p2, cfg.patches_per_image).into_vec())
            .collect();
        let targets = cache.targets(&chosen, &patches)?;

        let mut tape = Tape::new();
        let vars = explainer.record(&mut tape);
        let loss = record_loss(&mut tape, &vars, explainer, &chosen, &patches, targets).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { step, loss: f32::NAN },
            other => other,
        })?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let lr = opt.current_lr();
        let mut params = explainer.params_mut();
        for (p, v) in params.iter_mut().zip(&vars) {
            grads.write_into(*v, p)?;
        }
        if let StepOutcome::Skipped { .. } = opt.adam_step(&mut params)? {
            opt.step += 1;
            skipped += 1;
        }
        for p in params {
            p.clear_grad();
        }
        trace.push(TraceEntry { step, loss: value, lr });
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            checkpoints.push((step + 1, explainer.clone()));
        }
    }
    Ok(PretrainReport {
        trace,
        checkpoints,
        skipped_steps: skipped,
    })
}

/// Continues training a copy of `explainer` against targets of `cache`'s
/// (possibly fine-tuned) encoder. Starting from a fresh explainer gives the
/// learn-from-scratch arm.
pub fn finetune_explainer(explainer: &ExplainerModel, cache: &mut TargetCache<'_>, images: &[&Image], cfg: &PretrainConfig) -> Result<(ExplainerModel, PretrainReport)> {
    let mut tuned = explainer.clone();
    let report = pretrain(&mut tuned, cache, images, cfg)?;
    Ok((tuned, report))
}
