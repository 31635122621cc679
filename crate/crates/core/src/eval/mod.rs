//! Quantitative checks: fidelity, the explanation-error bound, correlation
//! with the sampled oracle, mode comparisons and throughput.

pub mod bound;
pub mod correlation;
pub mod fidelity;
pub mod modes;
pub mod stats;
pub mod throughput;

pub use bound::{bound_for, check_bound, check_bound_probs, collect_quads, BoundReport, ProbQuad};
pub use correlation::{correlation_study, CorrelationReport, ScatterPoint};
pub use fidelity::{fidelity_curve, fidelity_curves, ranking, top_k, trapezoid, Direction, FidelityCurve};
pub use modes::{evaluate_mode, ImageAuc, Mode, ModeArtifacts, ModeResults, ResultsFile};
pub use throughput::{bench_throughput, Method, Throughput};

use crate::attribution::{compute_meta_attribution, transfer_explain};
use crate::error::Result;
use crate::explainer::ExplainerModel;
use crate::grid::Image;
use crate::models::TargetModel;

/// Mean `|φ̂ − φ|` over every image, patch and class of `model`'s head.
pub fn attribution_error(explainer: &ExplainerModel, model: &TargetModel, images: &[&Image]) -> Result<f64> {
    use rayon::prelude::*;
    let per: Vec<(f64, usize)> = images
        .par_iter()
        .map(|img| -> Result<(f64, usize)> {
            let pred = explainer.explain_forward(img)?;
            let exact = compute_meta_attribution(&model.encoder, img)?;
            let mut sum = 0.0f64;
            let mut n = 0;
            for y in 0..model.num_classes() {
                let a = transfer_explain(&pred, &model.head, y)?;
                let b = transfer_explain(&exact, &model.head, y)?;
                for (p, q) in a.data().iter().zip(b.data()) {
                    sum += (p - q).abs() as f64;
                    n += 1;
                }
            }
            Ok((sum, n))
        })
        .collect::<Result<_>>()?;
    let (sum, n) = per.iter().fold((0.0, 0), |(s, c), (a, b)| (s + a, c + b));
    Ok(sum / n.max(1) as f64)
}
