//! Images-per-second of the explanation paths.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::stats;
use crate::attribution::transfer_explain;
use crate::error::{Error, Result};
use crate::explainer::ExplainerModel;
use crate::grid::Image;
use crate::models::TargetModel;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// One explainer forward plus one batched head evaluation.
    Tve,
    /// `2P²` masked forward passes of the model.
    Exact,
    /// 16 sampled backgrounds per patch, two forward passes each.
    Mc16,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Tve => "tve",
            Method::Exact => "exact",
            Method::Mc16 => "mc16",
        }
    }

    /// Model forward passes per image on a grid of `patches` patches.
    pub fn forwards_per_image(self, patches: usize) -> usize {
        match self {
            Method::Tve => 0,
            Method::Exact => 2 * patches,
            Method::Mc16 => 32 * patches,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub method: Method,
    pub model: String,
    pub images_per_sec: f64,
    pub repeats: Vec<f64>,
}

/// Explains `image` for class `y`, treating the model as a black box: every
/// masked evaluation is a full forward pass on the masked image.
fn run_once(method: Method, model: &TargetModel, explainer: Option<&ExplainerModel>, image: &Image, y: usize, index: usize) -> Result<f32> {
    let grid = *model.grid();
    let mut acc = 0.0f32;
    match method {
        Method::Tve => {
            let e = explainer.ok_or_else(|| Error::MissingArtifact {
                mode: "tve".into(),
                requirement: "an explainer".into(),
            })?;
            let hm = transfer_explain(&e.explain_forward(image)?, &model.head, y)?;
            acc += hm.data().iter().sum::<f32>();
        }
        Method::Exact => {
            for n in grid.all_neighbors() {
                let a = model.predict(&crate::grid::apply_mask(image, &n, &grid)?)?[y];
                let b = model.predict(&crate::grid::apply_mask(image, &n.complement(), &grid)?)?[y];
                acc += a.ln() - b.ln();
            }
        }
        Method::Mc16 => {
            let mut r = rng::stream(index as u64, &[0x6d63_3136]);
            for n in grid.all_neighbors() {
                let rest = n.complement();
                for _ in 0..16 {
                    let b = crate::grid::sample_subset(&mut r, &rest);
                    let with = model.predict(&crate::grid::apply_mask(image, &b.union(&n), &grid)?)?[y];
                    let without = model.predict(&crate::grid::apply_mask(image, &b, &grid)?)?[y];
                    acc += with.ln() - without.ln();
                }
            }
        }
    }
    Ok(acc)
}

/// Median images/second over `repeats` passes. Models are interleaved per
/// image, in an order that rotates from image to image, so a load burst on a
/// shared machine lands on every model alike.
pub fn bench_throughput(method: Method, models: &[(&str, &TargetModel)], explainer: Option<&ExplainerModel>, images: &[&Image], repeats: usize) -> Result<Vec<Throughput>> {
    if images.is_empty() {
        return Err(Error::Invalid("throughput needs at least one image".into()));
    }
    if repeats == 0 || models.is_empty() {
        return Err(Error::Invalid("throughput needs at least one model and one repeat".into()));
    }
    let mut sink = 0.0f32;
    // Warm-up pass, also fixing each image's class outside the timed region.
    let mut classes = Vec::with_capacity(models.len());
    for (_, m) in models {
        let ys = images.iter().map(|img| m.predicted_class(img)).collect::<Result<Vec<_>>>()?;
        sink += run_once(method, m, explainer, images[0], ys[0], 0)?;
        classes.push(ys);
    }
    let mut times = vec![Vec::with_capacity(repeats); models.len()];
    for _ in 0..repeats {
        let mut elapsed = vec![0.0f64; models.len()];
        for (i, img) in images.iter().enumerate() {
            for j in 0..models.len() {
                let k = (i + j) % models.len();
                let start = Instant::now();
                sink += run_once(method, models[k].1, explainer, img, classes[k][i], i)?;
                elapsed[k] += start.elapsed().as_secs_f64();
            }
        }
        for (k, t) in elapsed.into_iter().enumerate() {
            times[k].push(images.len() as f64 / t.max(1e-12));
        }
    }
    std::hint::black_box(sink);
    Ok(models
        .iter()
        .zip(times)
        .map(|((name, _), reps)| {
            let mut sorted = reps.clone();
            sorted.sort_by(f64::total_cmp);
            Throughput {
                method,
                model: name.to_string(),
                images_per_sec: median(&sorted),
                repeats: reps,
            }
        })
        .collect())
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        stats::mean(&sorted[n / 2 - 1..=n / 2])
    }
}
