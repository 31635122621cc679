//! Error bound for transferred attributions from head-output ratios.
//!
//! If every ratio `H(ĝ)/H(g)` and `H(h)/H(ĥ)` lies in `[1−ε, 1+ε]`, the mean
//! absolute gap between predicted and exact attributions is at most
//! `2ε/(1−ε)`.

use serde::{Deserialize, Serialize};

use crate::attribution::MetaAttribution;
use crate::error::{Error, Result};
use crate::models::ClassifierHead;

/// Clamped class probabilities entering one attribution pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbQuad {
    pub g: f32,
    pub g_hat: f32,
    pub h: f32,
    pub h_hat: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub epsilon: f64,
    /// `None` when `ε ≥ 1` and the bound does not apply.
    pub bound: Option<f64>,
    pub mean_abs_error: f64,
    pub holds: bool,
    pub n_triples: usize,
}

impl BoundReport {
    pub fn applicable(&self) -> bool {
        self.bound.is_some()
    }
}

pub fn bound_for(epsilon: f64) -> Option<f64> {
    (epsilon < 1.0).then(|| 2.0 * epsilon / (1.0 - epsilon))
}

pub fn check_bound_probs(quads: &[ProbQuad]) -> Result<BoundReport> {
    if quads.is_empty() {
        return Err(Error::Invalid("bound check needs at least one triple".into()));
    }
    let mut eps = 0.0f64;
    let mut err = 0.0f64;
    for q in quads {
        if [q.g, q.g_hat, q.h, q.h_hat].iter().any(|&p| p.is_nan() || p <= 0.0) {
            return Err(Error::Invalid("bound check needs positive probabilities".into()));
        }
        let (g, gh, h, hh) = (q.g as f64, q.g_hat as f64, q.h as f64, q.h_hat as f64);
        eps = eps.max((gh / g - 1.0).abs()).max((h / hh - 1.0).abs());
        // Attributions are formed in f32 exactly as the transfer rule does.
        let phi = q.g.ln() - q.h.ln();
        let phi_hat = q.g_hat.ln() - q.h_hat.ln();
        err += (phi_hat as f64 - phi as f64).abs();
    }
    let mean_abs_error = err / quads.len() as f64;
    let bound = bound_for(eps);
    Ok(BoundReport {
        epsilon: eps,
        bound,
        mean_abs_error,
        holds: bound.is_some_and(|b| mean_abs_error <= b + 1e-9),
        n_triples: quads.len(),
    })
}

/// Collects the four clamped probabilities for every image, patch and class.
pub fn collect_quads(exact: &[MetaAttribution], predicted: &[MetaAttribution], head: &ClassifierHead, classes: &[usize]) -> Result<Vec<ProbQuad>> {
    if exact.len() != predicted.len() {
        return Err(Error::shape("check_bound", &[exact.len()], &[predicted.len()]));
    }
    let k = head.num_classes();
    if let Some(&c) = classes.iter().find(|&&c| c >= k) {
        return Err(Error::UnknownClass { class: c, classes: k });
    }
    let mut quads = Vec::new();
    for (e, p) in exact.iter().zip(predicted) {
        if e.g.dims() != p.g.dims() {
            return Err(Error::shape("check_bound", e.g.dims(), p.g.dims()));
        }
        if e.dim() != head.in_dim() {
            return Err(Error::EmbeddingDim {
                meta: e.dim(),
                head: head.in_dim(),
            });
        }
        let [g, h, gh, hh] = [&e.g, &e.h, &p.g, &p.h].map(|t| head.probs_rows(t.data()));
        for z in 0..e.grid.num_patches() {
            for &y in classes {
                let i = z * k + y;
                quads.push(ProbQuad {
                    g: g[i],
                    g_hat: gh[i],
                    h: h[i],
                    h_hat: hh[i],
                });
            }
        }
    }
    Ok(quads)
}

pub fn check_bound(exact: &[MetaAttribution], predicted: &[MetaAttribution], head: &ClassifierHead, classes: &[usize]) -> Result<BoundReport> {
    check_bound_probs(&collect_quads(exact, predicted, head, classes)?)
}
