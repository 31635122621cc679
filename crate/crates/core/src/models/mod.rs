//! Reference target models `f_t = H_t ∘ G`, their masked evaluation and training.

pub mod checkpoint;
pub mod encoder;
pub mod head;
pub mod train;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::{GridSpec, Image, PatchSubset};
use crate::tensor::{Tape, Tensor, Var};

pub use encoder::{BackboneEncoder, EncoderConfig, PreparedImage};
pub use head::ClassifierHead;
pub use train::{finetune_full, finetune_head, pretrain_backbone, train_classifier, TrainConfig, TrainReport, TrainScope};

/// A set of named trainable tensors in a fixed order.
pub trait Module {
    fn named_params(&self) -> Vec<(String, &Tensor)>;

    /// Same order as [`Module::named_params`].
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter on the tape, in order.
    fn record(&self, tape: &mut Tape) -> Vec<Var> {
        self.named_params().into_iter().map(|(_, t)| tape.param(t)).collect()
    }

    /// Replaces parameter values by name; every name must be present with the
    /// same dims.
    fn load_params(&mut self, mut values: BTreeMap<String, Tensor>) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(self.params_mut()) {
            let t = values
                .remove(name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks parameter {name}")))?;
            if t.dims() != slot.dims() {
                return Err(Error::shape("load_params", slot.dims(), t.dims()));
            }
            let trainable = slot.requires_grad();
            *slot = t;
            slot.set_requires_grad(trainable);
        }
        if let Some(extra) = values.keys().next() {
            return Err(Error::Invalid(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// The classifier `H_t ∘ G` being explained.
#[derive(Clone, Debug)]
pub struct TargetModel {
    pub encoder: BackboneEncoder,
    pub head: ClassifierHead,
}

impl TargetModel {
    pub fn new(encoder: BackboneEncoder, head: ClassifierHead) -> Result<Self> {
        if encoder.out_dim() != head.in_dim() {
            return Err(Error::EmbeddingDim {
                meta: encoder.out_dim(),
                head: head.in_dim(),
            });
        }
        Ok(Self { encoder, head })
    }

    pub fn grid(&self) -> &GridSpec {
        self.encoder.grid()
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    /// Clamped class probabilities on the unmasked image.
    pub fn predict(&self, image: &Image) -> Result<Vec<f32>> {
        let emb = self.encoder.encode(image)?;
        Ok(self.head.probs(&emb))
    }

    pub fn predicted_class(&self, image: &Image) -> Result<usize> {
        Ok(argmax(&self.predict(image)?))
    }

    /// `f_t(S; x, y)`: probability of class `y` with patches outside `subset` removed.
    pub fn predict_masked(&self, image: &Image, subset: &PatchSubset, y: usize) -> Result<f32> {
        self.check_class(y)?;
        let emb = self.encoder.encode_masked(image, subset)?;
        Ok(self.head.probs(&emb)[y])
    }

    /// Class-`y` probabilities for many subsets of one image.
    pub fn predict_subsets(&self, prepared: &PreparedImage<'_>, subsets: &[&PatchSubset], y: usize) -> Result<Vec<f32>> {
        self.check_class(y)?;
        let emb = prepared.encode_subsets(subsets)?;
        let k = self.num_classes();
        Ok(self.head.probs_rows(&emb).chunks_exact(k).map(|p| p[y]).collect())
    }

    pub fn check_class(&self, y: usize) -> Result<()> {
        if y >= self.num_classes() {
            return Err(Error::UnknownClass {
                class: y,
                classes: self.num_classes(),
            });
        }
        Ok(())
    }
}

pub fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}
