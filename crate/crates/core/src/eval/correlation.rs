//! Agreement between the two-state attribution and the sampled oracle.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats;
use crate::attribution::{exact_attribution, mc_attribution};
use crate::error::{Error, Result};
use crate::grid::Image;
use crate::models::TargetModel;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub image: usize,
    pub patch: usize,
    pub class: usize,
    pub exact: f32,
    pub mc: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub n_samples: usize,
    /// `None` when either series has zero variance.
    pub pearson: Option<f64>,
    pub points: Vec<ScatterPoint>,
}

/// Pairs `(two-state, sampled)` over `patches_per_image` random patches of
/// each image, explaining the predicted class.
pub fn correlation_study(model: &TargetModel, images: &[&Image], n_samples: usize, patches_per_image: usize, seed: u64) -> Result<CorrelationReport> {
    let p2 = model.grid().num_patches();
    if patches_per_image == 0 || patches_per_image > p2 {
        return Err(Error::Invalid(format!("patches_per_image must be in 1..={p2}")));
    }
    let per_image: Vec<Vec<ScatterPoint>> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| -> Result<Vec<ScatterPoint>> {
            let y = model.predicted_class(img)?;
            let mut pick = rng::stream(seed, &[0x636f_7272, i as u64]);
            let mut zs = index::sample(&mut pick, p2, patches_per_image).into_vec();
            zs.sort_unstable();
            zs.into_iter()
                .map(|z| {
                    let pid = model.grid().patch_at(z);
                    let mut r = rng::stream(seed, &[0x6d63, i as u64, z as u64]);
                    Ok(ScatterPoint {
                        image: i,
                        patch: z,
                        class: y,
                        exact: exact_attribution(model, img, pid, y)?,
                        mc: mc_attribution(model, img, pid, y, n_samples, &mut r)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let points: Vec<ScatterPoint> = per_image.into_iter().flatten().collect();
    let xs: Vec<f64> = points.iter().map(|p| p.exact as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mc as f64).collect();
    Ok(CorrelationReport {
        n_samples,
        pearson: stats::pearson(&xs, &ys),
        points,
    })
}
