//! Cross-entropy training of backbone and heads.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{argmax, BackboneEncoder, ClassifierHead, EncoderConfig, Module, TargetModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, Image};
use crate::rng;
use crate::tensor::{AdamConfig, OptimizerState, Schedule, StepOutcome, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_ratio: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl TrainConfig {
    /// Backbone pre-training at desk scale.
    pub fn backbone(seed: u64) -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            lr: 3e-3,
            warmup_ratio: 0.05,
            weight_decay: 0.05,
            seed,
        }
    }

    /// Head tuning on frozen embeddings. Batch and warm-up follow the usual
    /// linear-probe recipe; epochs and rate are raised because a 1 000-image
    /// task yields only a handful of steps per epoch at batch 256.
    pub fn head(seed: u64) -> Self {
        Self {
            epochs: 60,
            batch_size: 256,
            lr: 1e-2,
            warmup_ratio: 0.05,
            weight_decay: 0.05,
            seed,
        }
    }

    pub fn full(seed: u64) -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            lr: 1e-3,
            warmup_ratio: 0.05,
            weight_decay: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Invalid(format!("warmup_ratio {} outside [0, 1]", self.warmup_ratio)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Invalid("weight_decay must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn steps_for(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size)
    }

    fn adam(&self, total_steps: usize) -> AdamConfig {
        AdamConfig::new(
            Schedule {
                base_lr: self.lr,
                warmup_ratio: self.warmup_ratio,
                total_steps,
            },
            self.weight_decay,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    Full,
    HeadOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss per optimizer step.
    pub losses: Vec<f32>,
    pub lrs: Vec<f32>,
    pub final_loss: f32,
    /// Accuracy on the training set after the last step.
    pub accuracy: f32,
    pub skipped_steps: usize,
}

/// Sample order that depends only on image contents, so permuting the
/// dataset does not change training.
fn canonical_order(dataset: &Dataset) -> Vec<usize> {
    let mut keys: Vec<(u64, usize, usize)> = dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.image.content_hash(), s.label, i))
        .collect();
    keys.sort_unstable();
    keys.into_iter().map(|(_, _, i)| i).collect()
}

fn check_dataset(dataset: &Dataset, grid: &GridSpec, classes: usize) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if dataset.grid != *grid {
        return Err(Error::Grid(format!("dataset grid {:?} differs from model grid {:?}", dataset.grid, grid)));
    }
    if let Some(s) = dataset.samples.iter().find(|s| s.label >= classes) {
        return Err(Error::UnknownClass { class: s.label, classes });
    }
    Ok(())
}

fn diverged(step: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged { step, loss: f32::NAN },
        other => other,
    }
}

/// Trains `model` in place with mini-batch cross-entropy.
pub fn train_classifier(model: &mut TargetModel, dataset: &Dataset, cfg: &TrainConfig, scope: TrainScope) -> Result<TrainReport> {
    cfg.validate()?;
    check_dataset(dataset, model.grid(), model.num_classes())?;
    let order = canonical_order(dataset);
    let n = order.len();
    let total = cfg.steps_for(n);

    // Frozen embeddings are computed once for head-only training.
    let cached = match scope {
        TrainScope::HeadOnly => {
            let images: Vec<&Image> = order.iter().map(|&i| &dataset.samples[i].image).collect();
            Some(model.encoder.encode_batch(&images)?)
        }
        TrainScope::Full => None,
    };
    let d = model.encoder.out_dim();

    let trains_encoder = scope == TrainScope::Full;
    let mut opt_params: Vec<&Tensor> = model.head.named_params().into_iter().map(|(_, t)| t).collect();
    if trains_encoder {
        opt_params.extend(model.encoder.named_params().into_iter().map(|(_, t)| t));
    }
    let mut opt = OptimizerState::new(cfg.adam(total), &opt_params);

    let mut losses = Vec::with_capacity(total);
    let mut lrs = Vec::with_capacity(total);
    let mut skipped = 0;
    let mut positions: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let mut shuffle = rng::stream(cfg.seed, &[0x7261_696e, epoch as u64]);
        positions.shuffle(&mut shuffle);
        for batch in positions.chunks(cfg.batch_size) {
            let step = opt.step;
            let labels: Vec<usize> = batch.iter().map(|&p| dataset.samples[order[p]].label).collect();
            let mut tape = Tape::new();
            let head_vars = model.head.record(&mut tape);
            let (emb, enc_vars) = match &cached {
                Some(all) => {
                    let mut rows = Vec::with_capacity(batch.len() * d);
                    for &p in batch {
                        rows.extend_from_slice(&all[p * d..(p + 1) * d]);
                    }
                    (tape.constant(Tensor::new(vec![batch.len(), d], rows)?), Vec::new())
                }
                None => {
                    let vars = model.encoder.record(&mut tape);
                    let images: Vec<&Image> = batch.iter().map(|&p| &dataset.samples[order[p]].image).collect();
                    let emb = model.encoder.forward_tape(&mut tape, &vars, &images).map_err(diverged(step))?;
                    (emb, vars)
                }
            };
            let logits = model.head.logits_tape(&mut tape, &head_vars, emb).map_err(diverged(step))?;
            let loss = tape.cross_entropy(logits, &labels).map_err(diverged(step))?;
            let loss_value = tape.value(loss).item();
            let grads = tape.backward(loss)?;

            let lr = opt.current_lr();
            let mut params = model.head.params_mut();
            for (p, v) in params.iter_mut().zip(&head_vars) {
                grads.write_into(*v, p)?;
            }
            if trains_encoder {
                let mut enc = model.encoder.params_mut();
                for (p, v) in enc.iter_mut().zip(&enc_vars) {
                    grads.write_into(*v, p)?;
                }
                params.extend(enc);
            }
            if let StepOutcome::Skipped { .. } = opt.adam_step(&mut params)? {
                opt.step += 1;
                skipped += 1;
            }
            for p in params {
                p.clear_grad();
            }
            losses.push(loss_value);
            lrs.push(lr);
        }
    }

    let accuracy = accuracy(model, dataset)?;
    Ok(TrainReport {
        final_loss: losses.last().copied().unwrap_or(f32::NAN),
        losses,
        lrs,
        accuracy,
        skipped_steps: skipped,
    })
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy(model: &TargetModel, dataset: &Dataset) -> Result<f32> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let images: Vec<&Image> = dataset.images().collect();
    let emb = model.encoder.encode_batch(&images)?;
    let k = model.num_classes();
    let probs = model.head.probs_rows(&emb);
    let correct = probs
        .chunks_exact(k)
        .zip(&dataset.samples)
        .filter(|(p, s)| argmax(p) == s.label)
        .count();
    Ok(correct as f32 / dataset.len() as f32)
}

/// Trains `(G, H_g)` from scratch on the pre-training corpus and freezes `G`.
pub fn pretrain_backbone(dataset: &Dataset, grid: &GridSpec, enc: &EncoderConfig, cfg: &TrainConfig) -> Result<(TargetModel, TrainReport)> {
    let mut init = rng::stream(cfg.seed, &[0x6261_636b]);
    let encoder = BackboneEncoder::new(*grid, enc.clone(), &mut init)?;
    let head = ClassifierHead::new(enc.out_dim, dataset.num_classes(), &mut init)?;
    let mut model = TargetModel::new(encoder, head)?;
    let report = train_classifier(&mut model, dataset, cfg, TrainScope::Full)?;
    model.encoder.freeze();
    Ok((model, report))
}

/// Fits a fresh head `H_t` on a frozen encoder.
pub fn finetune_head(encoder: &BackboneEncoder, dataset: &Dataset, cfg: &TrainConfig) -> Result<(TargetModel, TrainReport)> {
    if !encoder.is_frozen() {
        return Err(Error::Invalid("finetune_head requires a frozen encoder".into()));
    }
    let mut init = rng::stream(cfg.seed, &[0x6865_6164]);
    let head = ClassifierHead::new(encoder.out_dim(), dataset.num_classes(), &mut init)?;
    let mut model = TargetModel::new(encoder.clone(), head)?;
    let report = train_classifier(&mut model, dataset, cfg, TrainScope::HeadOnly)?;
    Ok((model, report))
}

/// Updates both encoder and head on a copy of `model`; the input is untouched.
/// The returned encoder is frozen again.
pub fn finetune_full(model: &TargetModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<(TargetModel, TrainReport)> {
    let mut tuned = model.clone();
    tuned.encoder.unfreeze();
    let report = train_classifier(&mut tuned, dataset, cfg, TrainScope::Full)?;
    tuned.encoder.freeze();
    Ok((tuned, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Split, SyntheticConfig, Task};

    fn grid() -> GridSpec {
        GridSpec::desk()
    }

    fn small(task: Task, n: usize) -> Dataset {
        generate(task, Split::Train, n, &grid(), &SyntheticConfig::default(), 5).unwrap()
    }

    fn params(m: &impl Module) -> Vec<Vec<f32>> {
        m.named_params().into_iter().map(|(_, t)| t.data().to_vec()).collect()
    }

    #[test]
    fn zero_rate_leaves_parameters_unchanged() {
        let ds = small(Task::Quadrant, 8);
        let mut cfg = TrainConfig::backbone(1);
        cfg.epochs = 1;
        cfg.batch_size = 4;
        cfg.lr = 0.0;
        let mut init = rng::stream(cfg.seed, &[0x6261_636b]);
        let enc = BackboneEncoder::new(grid(), EncoderConfig::default(), &mut init).unwrap();
        let head = ClassifierHead::new(16, 4, &mut init).unwrap();
        let (model, report) = pretrain_backbone(&ds, &grid(), &EncoderConfig::default(), &cfg).unwrap();
        assert_eq!(params(&model.encoder), params(&enc));
        assert_eq!(params(&model.head), params(&head));
        assert_eq!(report.losses.len(), 2);
    }

    #[test]
    fn same_seed_gives_identical_losses() {
        let ds = small(Task::Quadrant, 16);
        let mut cfg = TrainConfig::backbone(9);
        cfg.epochs = 2;
        cfg.batch_size = 8;
        let a = pretrain_backbone(&ds, &grid(), &EncoderConfig::default(), &cfg).unwrap().1;
        let b = pretrain_backbone(&ds, &grid(), &EncoderConfig::default(), &cfg).unwrap().1;
        assert_eq!(a, b);
    }

    #[test]
    fn permuted_dataset_trains_identically() {
        let ds = small(Task::Quadrant, 16);
        let mut rev = ds.clone();
        rev.samples.reverse();
        let mut cfg = TrainConfig::backbone(3);
        cfg.epochs = 2;
        cfg.batch_size = 8;
        let (ma, ra) = pretrain_backbone(&ds, &grid(), &EncoderConfig::default(), &cfg).unwrap();
        let (mb, rb) = pretrain_backbone(&rev, &grid(), &EncoderConfig::default(), &cfg).unwrap();
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(params(&ma.encoder), params(&mb.encoder));
    }

    #[test]
    fn head_tuning_leaves_encoder_bit_identical() {
        let ds = small(Task::Parity, 16);
        let mut init = rng::stream(0, &[1]);
        let mut enc = BackboneEncoder::new(grid(), EncoderConfig::default(), &mut init).unwrap();
        enc.freeze();
        let before = params(&enc);
        let mut cfg = TrainConfig::head(2);
        cfg.epochs = 3;
        let (model, _) = finetune_head(&enc, &ds, &cfg).unwrap();
        assert_eq!(params(&model.encoder), before);
        assert!(finetune_head(&BackboneEncoder::new(grid(), EncoderConfig::default(), &mut init).unwrap(), &ds, &cfg).is_err());
    }

    #[test]
    fn full_finetune_keeps_original() {
        let ds = small(Task::Shape, 8);
        let mut init = rng::stream(0, &[2]);
        let mut enc = BackboneEncoder::new(grid(), EncoderConfig::default(), &mut init).unwrap();
        enc.freeze();
        let model = TargetModel::new(enc, ClassifierHead::new(16, 2, &mut init).unwrap()).unwrap();
        let before = params(&model.encoder);
        let mut cfg = TrainConfig::full(4);
        cfg.epochs = 1;
        cfg.batch_size = 4;
        let (tuned, _) = finetune_full(&model, &ds, &cfg).unwrap();
        assert_eq!(params(&model.encoder), before);
        assert_ne!(params(&tuned.encoder), before);
        assert!(tuned.encoder.is_frozen());
    }

    #[test]
    fn rejects_empty_and_mislabelled_sets() {
        let mut ds = small(Task::Quadrant, 4);
        let cfg = TrainConfig::backbone(0);
        let mut empty = ds.clone();
        empty.samples.clear();
        assert!(pretrain_backbone(&empty, &grid(), &EncoderConfig::default(), &cfg).is_err());
        ds.samples[0].label = 9;
        let mut init = rng::stream(0, &[3]);
        let enc = BackboneEncoder::new(grid(), EncoderConfig::default(), &mut init).unwrap();
        let mut model = TargetModel::new(enc, ClassifierHead::new(16, 4, &mut init).unwrap()).unwrap();
        assert!(matches!(
            train_classifier(&mut model, &ds, &cfg, TrainScope::Full),
            Err(Error::UnknownClass { class: 9, .. })
        ));
    }
}
