//! Patch attributions: the exact two-state log-ratio, the sampled oracle, the
//! head-independent meta-attribution and the transfer rule that turns it into a
//! heatmap for any head.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{sample_subset, GridSpec, Image, PatchId, PatchSubset};
use crate::models::{BackboneEncoder, ClassifierHead, TargetModel};
use crate::store;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaSource {
    Exact,
    Predicted,
}

/// Per-patch encoder outputs on the neighborhood-only image (`g`) and on the
/// image with the neighborhood removed (`h`), each `[P, P, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaAttribution {
    pub g: Tensor,
    pub h: Tensor,
    pub grid: GridSpec,
    pub source: MetaSource,
}

impl MetaAttribution {
    pub fn new(g: Tensor, h: Tensor, grid: GridSpec, source: MetaSource) -> Result<Self> {
        let p = grid.patches_per_side;
        if g.rank() != 3 || g.dims()[..2] != [p, p] || g.dims() != h.dims() {
            return Err(Error::shape("MetaAttribution", g.dims(), h.dims()));
        }
        if !g.is_finite() || !h.is_finite() {
            return Err(Error::NonFinite("meta-attribution"));
        }
        Ok(Self { g, h, grid, source })
    }

    pub fn dim(&self) -> usize {
        self.g.last_dim()
    }

    pub fn g_at(&self, z: usize) -> &[f32] {
        self.g.row(z)
    }

    pub fn h_at(&self, z: usize) -> &[f32] {
        self.h.row(z)
    }

    /// Same tensors with `g` and `h` exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            g: self.h.clone(),
            h: self.g.clone(),
            grid: self.grid,
            source: self.source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Direct log-ratio of masked model outputs.
    Exact,
    /// Transfer rule applied to exact meta-attribution.
    Transferred,
    /// Transfer rule applied to explainer predictions.
    Amortized,
    /// Sampled-background oracle.
    McOracle,
    RandomControl,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationHeatmap {
    /// `[P, P]`, row-major patch order.
    pub values: Tensor,
    pub class: usize,
    pub provenance: Provenance,
    pub grid: GridSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeatmapFile {
    grid: GridSpec,
    class: usize,
    provenance: Provenance,
    values: Vec<f32>,
}

impl ExplanationHeatmap {
    pub fn new(values: Vec<f32>, class: usize, provenance: Provenance, grid: GridSpec) -> Result<Self> {
        let p = grid.patches_per_side;
        let values = Tensor::new(vec![p, p], values)?;
        Ok(Self {
            values,
            class,
            provenance,
            grid,
        })
    }

    pub fn get(&self, z: usize) -> f32 {
        self.values.data()[z]
    }

    pub fn data(&self) -> &[f32] {
        self.values.data()
    }

    /// Writes `{stem}.json` and an 8-bit `{stem}.pgm` render.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let file = HeatmapFile {
            grid: self.grid,
            class: self.class,
            provenance: self.provenance,
            values: self.data().to_vec(),
        };
        store::write_json(&dir.join(format!("{stem}.json")), &file)?;
        let path = dir.join(format!("{stem}.pgm"));
        std::fs::write(&path, self.to_pgm()).map_err(Error::io(&path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file: HeatmapFile = store::read_json(path)?;
        Self::new(file.values, file.class, file.provenance, file.grid)
    }

    /// Binary PGM (P5), min-max normalized; a constant map renders as zeros.
    pub fn to_pgm(&self) -> Vec<u8> {
        let p = self.grid.patches_per_side;
        let (lo, hi) = self
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        let mut header = String::new();
        write!(header, "P5\n{p} {p}\n255\n").expect("string write");
        let mut out = header.into_bytes();
        out.extend(self.data().iter().map(|&v| {
            if span > 0.0 {
                (((v - lo) / span) * 255.0).round() as u8
            } else {
                0
            }
        }));
        out
    }
}

/// `ln f(a; x, y) − ln f(b; x, y)` with clamped probabilities.
pub fn log_ratio(model: &TargetModel, image: &Image, a: &PatchSubset, b: &PatchSubset, y: usize) -> Result<f32> {
    let prepared = model.encoder.prepare(image)?;
    let p = model.predict_subsets(&prepared, &[a, b], y)?;
    Ok(p[0].ln() - p[1].ln())
}

/// Two-state attribution of patch `z` towards class `y`.
pub fn exact_attribution(model: &TargetModel, image: &Image, z: PatchId, y: usize) -> Result<f32> {
    let n = model.grid().neighbors(z)?;
    log_ratio(model, image, &n, &n.complement(), y)
}

/// [`exact_attribution`] for every patch, sharing one prepared image.
pub fn exact_heatmap(model: &TargetModel, image: &Image, y: usize) -> Result<ExplanationHeatmap> {
    let grid = *model.grid();
    let prepared = model.encoder.prepare(image)?;
    let neighbors = grid.all_neighbors();
    let complements: Vec<PatchSubset> = neighbors.iter().map(PatchSubset::complement).collect();
    let subsets: Vec<&PatchSubset> = neighbors.iter().chain(&complements).collect();
    let p = model.predict_subsets(&prepared, &subsets, y)?;
    let n = neighbors.len();
    let values = (0..n).map(|z| p[z].ln() - p[n + z].ln()).collect();
    ExplanationHeatmap::new(values, y, Provenance::Exact, grid)
}

/// Mean of `ln f(N(z) ∪ B) − ln f(B)` over the given backgrounds `B ⊆ Z \ N(z)`.
pub fn mc_attribution_with(model: &TargetModel, image: &Image, z: PatchId, y: usize, backgrounds: &[PatchSubset]) -> Result<f32> {
    if backgrounds.is_empty() {
        return Err(Error::Invalid("at least one background subset is required".into()));
    }
    let n = model.grid().neighbors(z)?;
    if let Some(b) = backgrounds.iter().find(|b| !b.intersection(&n).is_empty()) {
        return Err(Error::Invalid(format!("background {} overlaps the neighborhood", b.to_hex())));
    }
    let prepared = model.encoder.prepare(image)?;
    let with: Vec<PatchSubset> = backgrounds.iter().map(|b| b.union(&n)).collect();
    let subsets: Vec<&PatchSubset> = with.iter().chain(backgrounds).collect();
    let p = model.predict_subsets(&prepared, &subsets, y)?;
    let k = backgrounds.len();
    let total: f64 = (0..k).map(|i| p[i].ln() as f64 - p[k + i].ln() as f64).sum();
    Ok((total / k as f64) as f32)
}

/// Sampled oracle with each background patch kept with probability 1/2.
pub fn mc_attribution<R: Rng + ?Sized>(model: &TargetModel, image: &Image, z: PatchId, y: usize, n_samples: usize, rng: &mut R) -> Result<f32> {
    if n_samples == 0 {
        return Err(Error::Invalid("n_samples must be at least 1".into()));
    }
    let universe = model.grid().neighbors(z)?.complement();
    let backgrounds: Vec<PatchSubset> = (0..n_samples).map(|_| sample_subset(rng, &universe)).collect();
    mc_attribution_with(model, image, z, y, &backgrounds)
}

/// Exact meta-attribution: `2P²` masked encoder evaluations.
pub fn compute_meta_attribution(encoder: &BackboneEncoder, image: &Image) -> Result<MetaAttribution> {
    if !encoder.is_frozen() {
        return Err(Error::Invalid("meta-attribution requires a frozen encoder".into()));
    }
    let grid = *encoder.grid();
    let prepared = encoder.prepare(image)?;
    let neighbors = grid.all_neighbors();
    let complements: Vec<PatchSubset> = neighbors.iter().map(PatchSubset::complement).collect();
    let (p, d) = (grid.patches_per_side, encoder.out_dim());
    let n_refs: Vec<&PatchSubset> = neighbors.iter().collect();
    let c_refs: Vec<&PatchSubset> = complements.iter().collect();
    let g = Tensor::new(vec![p, p, d], prepared.encode_subsets(&n_refs)?)?;
    let h = Tensor::new(vec![p, p, d], prepared.encode_subsets(&c_refs)?)?;
    MetaAttribution::new(g, h, grid, MetaSource::Exact)
}

/// Transfer rule: `ln H(g_z)[y] − ln H(h_z)[y]` for all patches in one batch.
pub fn transfer_explain(meta: &MetaAttribution, head: &ClassifierHead, y: usize) -> Result<ExplanationHeatmap> {
    if meta.dim() != head.in_dim() {
        return Err(Error::EmbeddingDim {
            meta: meta.dim(),
            head: head.in_dim(),
        });
    }
    let k = head.num_classes();
    if y >= k {
        return Err(Error::UnknownClass { class: y, classes: k });
    }
    let n = meta.grid.num_patches();
    let mut rows = Vec::with_capacity(2 * meta.g.numel());
    rows.extend_from_slice(meta.g.data());
    rows.extend_from_slice(meta.h.data());
    let probs = head.probs_rows(&rows);
    let values = (0..n).map(|z| probs[z * k + y].ln() - probs[(n + z) * k + y].ln()).collect();
    let provenance = match meta.source {
        MetaSource::Exact => Provenance::Transferred,
        MetaSource::Predicted => Provenance::Amortized,
    };
    ExplanationHeatmap::new(values, y, provenance, meta.grid)
}

/// I.i.d. uniform `[-1, 1]` scores.
pub fn random_control<R: Rng + ?Sized>(rng: &mut R, grid: &GridSpec) -> Result<ExplanationHeatmap> {
    let values = (0..grid.num_patches()).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
    ExplanationHeatmap::new(values, 0, Provenance::RandomControl, *grid)
}
