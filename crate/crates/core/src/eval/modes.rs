//! Explanation modes compared by fidelity.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fidelity::{fidelity_curves, Direction};
use super::stats;
use crate::attribution::{exact_heatmap, random_control, transfer_explain, ExplanationHeatmap};
use crate::error::{Error, Result};
use crate::explainer::ExplainerModel;
use crate::grid::Image;
use crate::models::{argmax, ClassifierHead, TargetModel};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "TVE")]
    Tve,
    #[serde(rename = "TVE_Hg")]
    TveHg,
    #[serde(rename = "TVE_PT")]
    TvePt,
    #[serde(rename = "TVE_FT")]
    TveFt,
    #[serde(rename = "LFScratch")]
    LfScratch,
    #[serde(rename = "woPT")]
    WoPt,
    #[serde(rename = "exact")]
    Exact,
    #[serde(rename = "random")]
    Random,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::Tve,
        Mode::TveHg,
        Mode::TvePt,
        Mode::TveFt,
        Mode::LfScratch,
        Mode::WoPt,
        Mode::Exact,
        Mode::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Tve => "TVE",
            Mode::TveHg => "TVE_Hg",
            Mode::TvePt => "TVE_PT",
            Mode::TveFt => "TVE_FT",
            Mode::LfScratch => "LFScratch",
            Mode::WoPt => "woPT",
            Mode::Exact => "exact",
            Mode::Random => "random",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown mode {s}")))
    }
}

/// Everything a mode may need. `target` is the model being explained (for
/// PT/FT/LFScratch this is the fully fine-tuned one).
#[derive(Clone, Copy)]
pub struct ModeArtifacts<'a> {
    pub target: &'a TargetModel,
    pub general_head: Option<&'a ClassifierHead>,
    pub pretrained: Option<&'a ExplainerModel>,
    pub finetuned: Option<&'a ExplainerModel>,
    pub scratch: Option<&'a ExplainerModel>,
    pub untrained: Option<&'a ExplainerModel>,
}

impl<'a> ModeArtifacts<'a> {
    pub fn new(target: &'a TargetModel) -> Self {
        Self {
            target,
            general_head: None,
            pretrained: None,
            finetuned: None,
            scratch: None,
            untrained: None,
        }
    }

    fn need<T>(mode: Mode, item: Option<T>, what: &str) -> Result<T> {
        item.ok_or_else(|| Error::MissingArtifact {
            mode: mode.name().to_string(),
            requirement: what.to_string(),
        })
    }

    /// Fails naming the missing artifact if `mode` cannot run.
    pub fn check(&self, mode: Mode) -> Result<()> {
        match mode {
            Mode::Tve | Mode::TvePt => Self::need(mode, self.pretrained, "a pre-trained explainer").map(drop),
            Mode::TveHg => {
                Self::need(mode, self.pretrained, "a pre-trained explainer")?;
                Self::need(mode, self.general_head, "the general head H_g").map(drop)
            }
            Mode::TveFt => Self::need(mode, self.finetuned, "a fine-tuned explainer").map(drop),
            Mode::LfScratch => Self::need(mode, self.scratch, "an explainer trained from scratch").map(drop),
            Mode::WoPt => Self::need(mode, self.untrained, "a randomly initialized explainer").map(drop),
            Mode::Exact | Mode::Random => Ok(()),
        }
    }

    /// Heatmap for image number `index`, explaining class `y` of the target.
    pub fn heatmap(&self, mode: Mode, image: &Image, y: usize, index: usize, seed: u64) -> Result<ExplanationHeatmap> {
        self.check(mode)?;
        let via = |e: &ExplainerModel, head: &ClassifierHead, y: usize| transfer_explain(&e.explain_forward(image)?, head, y);
        match mode {
            Mode::Tve | Mode::TvePt => via(self.pretrained.unwrap(), &self.target.head, y),
            Mode::TveFt => via(self.finetuned.unwrap(), &self.target.head, y),
            Mode::LfScratch => via(self.scratch.unwrap(), &self.target.head, y),
            Mode::WoPt => via(self.untrained.unwrap(), &self.target.head, y),
            Mode::TveHg => {
                // The general head has its own label space; explain its prediction.
                let hg = self.general_head.unwrap();
                let emb = self.target.encoder.encode(image)?;
                via(self.pretrained.unwrap(), hg, argmax(&hg.probs(&emb)))
            }
            Mode::Exact => exact_heatmap(self.target, image, y),
            Mode::Random => random_control(&mut rng::stream(seed, &[0x7261_6e64, index as u64]), self.target.grid()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageAuc {
    pub index: usize,
    pub class: usize,
    pub auc_plus: f64,
    pub auc_minus: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeResults {
    pub mode: Mode,
    pub per_image: Vec<ImageAuc>,
}

/// One direction of a [`ModeResults`] in the persisted schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub mode: String,
    pub model: String,
    pub dataset: String,
    pub direction: Direction,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub per_image: Vec<f64>,
}

impl ModeResults {
    pub fn aucs(&self, direction: Direction) -> Vec<f64> {
        self.per_image
            .iter()
            .map(|r| match direction {
                Direction::Plus => r.auc_plus,
                Direction::Minus => r.auc_minus,
            })
            .collect()
    }

    pub fn mean(&self, direction: Direction) -> f64 {
        stats::mean(&self.aucs(direction))
    }

    pub fn std(&self, direction: Direction) -> f64 {
        stats::std_pop(&self.aucs(direction))
    }

    pub fn to_file(&self, direction: Direction, model: &str, dataset: &str) -> ResultsFile {
        ResultsFile {
            mode: self.mode.name().to_string(),
            model: model.to_string(),
            dataset: dataset.to_string(),
            direction,
            auc_mean: self.mean(direction),
            auc_std: self.std(direction),
            per_image: self.aucs(direction),
        }
    }
}

/// Fidelity AUCs of `mode` on every image, explaining the target's prediction.
pub fn evaluate_mode(mode: Mode, artifacts: &ModeArtifacts<'_>, images: &[&Image], seed: u64) -> Result<ModeResults> {
    artifacts.check(mode)?;
    if images.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let per_image = images
        .par_iter()
        .enumerate()
        .map(|(index, img)| {
            let y = artifacts.target.predicted_class(img)?;
            let hm = artifacts.heatmap(mode, img, y, index, seed)?;
            let [plus, minus] = fidelity_curves(artifacts.target, &hm, img, y)?;
            Ok(ImageAuc {
                index,
                class: y,
                auc_plus: plus.auc,
                auc_minus: minus.auc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModeResults { mode, per_image })
}
