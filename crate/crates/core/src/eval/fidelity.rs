//! Fidelity curves over a dense sparsity sweep.

use serde::{Deserialize, Serialize};

use crate::attribution::ExplanationHeatmap;
use crate::error::{Error, Result};
use crate::grid::{Image, PatchSubset};
use crate::models::TargetModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Drop after removing the top-k patches.
    Plus,
    /// Drop after keeping only the top-k patches.
    Minus,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Plus, Direction::Minus];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Plus => "plus",
            Direction::Minus => "minus",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityCurve {
    /// `(sparsity, fidelity)` with sparsity from 0 to 1.
    pub points: Vec<(f64, f64)>,
    pub direction: Direction,
    pub auc: f64,
}

impl FidelityCurve {
    pub fn new(points: Vec<(f64, f64)>, direction: Direction) -> Result<Self> {
        if points.len() < 2 || points[0].0 != 0.0 || points[points.len() - 1].0 != 1.0 {
            return Err(Error::Invalid("curve must run from sparsity 0 to 1".into()));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Invalid("sparsity must be strictly increasing".into()));
        }
        let auc = trapezoid(&points);
        Ok(Self { points, direction, auc })
    }
}

/// Trapezoidal integral of `(x, y)` points in x order.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Patch indices by decreasing score; equal scores keep row-major order.
pub fn ranking(heatmap: &ExplanationHeatmap) -> Vec<usize> {
    let v = heatmap.data();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    idx
}

/// `S*(k)`: the `k` highest-scoring patches.
pub fn top_k(heatmap: &ExplanationHeatmap, k: usize) -> PatchSubset {
    let order = ranking(heatmap);
    PatchSubset::from_indices(order.len(), order.into_iter().take(k))
}

/// Both fidelity curves for one heatmap, with every `k = 0..=P²`.
pub fn fidelity_curves(model: &TargetModel, heatmap: &ExplanationHeatmap, image: &Image, y: usize) -> Result<[FidelityCurve; 2]> {
    if heatmap.grid != *model.grid() {
        return Err(Error::Grid("heatmap grid differs from model grid".into()));
    }
    let n = model.grid().num_patches();
    let order = ranking(heatmap);
    let mut kept = Vec::with_capacity(n + 1);
    let mut current = PatchSubset::empty(n);
    kept.push(current.clone());
    for &z in &order {
        current.insert(z);
        kept.push(current.clone());
    }
    let removed: Vec<PatchSubset> = kept.iter().map(PatchSubset::complement).collect();
    let prepared = model.encoder.prepare(image)?;
    let subsets: Vec<&PatchSubset> = removed.iter().chain(&kept).collect();
    let p = model.predict_subsets(&prepared, &subsets, y)?;
    let (p_removed, p_kept) = p.split_at(n + 1);
    // f(full) is the k = 0 removal and the k = P² keep.
    let full = p_removed[0] as f64;
    let sparsity = |k: usize| k as f64 / n as f64;
    let plus = (0..=n).map(|k| (sparsity(k), full - p_removed[k] as f64)).collect();
    let minus = (0..=n).map(|k| (sparsity(k), full - p_kept[k] as f64)).collect();
    Ok([FidelityCurve::new(plus, Direction::Plus)?, FidelityCurve::new(minus, Direction::Minus)?])
}

pub fn fidelity_curve(model: &TargetModel, heatmap: &ExplanationHeatmap, image: &Image, y: usize, direction: Direction) -> Result<FidelityCurve> {
    let [plus, minus] = fidelity_curves(model, heatmap, image, y)?;
    Ok(match direction {
        Direction::Plus => plus,
        Direction::Minus => minus,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{random_control, Provenance};
    use crate::grid::GridSpec;
    use crate::models::{BackboneEncoder, ClassifierHead, EncoderConfig};
    use crate::rng;
    use crate::tensor::Tensor;

    #[test]
    fn constant_curve_integrates_to_its_value() {
        for c in [0.0, 0.37, -2.5] {
            let pts: Vec<(f64, f64)> = (0..=64).map(|k| (k as f64 / 64.0, c)).collect();
            let curve = FidelityCurve::new(pts, Direction::Plus).unwrap();
            assert!((curve.auc - c).abs() < 1e-9);
        }
    }

    #[test]
    fn piecewise_linear_curve_is_exact() {
        // y = x on [0, 0.5], then 1 − x: area 0.25.
        let pts = vec![(0.0, 0.0), (0.5, 0.5), (1.0, 0.0)];
        assert!((trapezoid(&pts) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn malformed_curves_are_rejected() {
        assert!(FidelityCurve::new(vec![(0.0, 1.0)], Direction::Plus).is_err());
        assert!(FidelityCurve::new(vec![(0.0, 1.0), (0.5, 1.0), (0.5, 1.0), (1.0, 0.0)], Direction::Plus).is_err());
    }

    #[test]
    fn ties_follow_row_major_order() {
        let hm = ExplanationHeatmap::new(vec![0.0, 1.0, 1.0, 0.5], 0, Provenance::Exact, GridSpec::new(8, 4, 2, 1).unwrap()).unwrap();
        assert_eq!(ranking(&hm), vec![1, 2, 3, 0]);
    }

    #[test]
    fn top_k_selections_are_nested() {
        let grid = GridSpec::desk();
        let mut r = rng::stream(9, &[]);
        for _ in 0..50 {
            let hm = random_control(&mut r, &grid).unwrap();
            for k in 0..64 {
                assert!(top_k(&hm, k).is_subset(&top_k(&hm, k + 1)));
            }
        }
    }

    #[test]
    fn curve_endpoints_are_zero() {
        let grid = GridSpec::desk();
        let mut r = rng::stream(4, &[]);
        let mut enc = BackboneEncoder::new(grid, EncoderConfig::default(), &mut r).unwrap();
        enc.freeze();
        let model = TargetModel::new(enc, ClassifierHead::new(16, 4, &mut r).unwrap()).unwrap();
        let img = Image::from_tensor(&Tensor::randn(&[3, 32, 32], 1.0, &mut r)).unwrap();
        let hm = random_control(&mut r, &grid).unwrap();
        let [plus, minus] = fidelity_curves(&model, &hm, &img, 2).unwrap();
        assert_eq!(plus.points[0].1, 0.0);
        assert_eq!(minus.points[64].1, 0.0);
        assert_eq!(plus.points.len(), 65);
        let full = model.predict_masked(&img, &grid.full(), 2).unwrap() as f64;
        let without_top = model.predict_masked(&img, &top_k(&hm, 10).complement(), 2).unwrap() as f64;
        assert_eq!(plus.points[10].1, full - without_top);
    }
}
