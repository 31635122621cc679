//! Fixtures shared by the benchmarks. Models are freshly initialized:
//! timings depend on shapes, not on learned weights.

use tve_core::explainer::{ExplainerConfig, ExplainerModel};
use tve_core::models::{BackboneEncoder, ClassifierHead, EncoderConfig, TargetModel};
use tve_core::{rng, GridSpec, Image, Tensor};

pub fn target(grid: GridSpec, classes: usize, seed: u64) -> TargetModel {
    let mut r = rng::stream(seed, &[]);
    let mut enc = BackboneEncoder::new(grid, EncoderConfig::default(), &mut r).expect("valid encoder");
    enc.freeze();
    let head = ClassifierHead::new(enc.out_dim(), classes, &mut r).expect("valid head");
    TargetModel::new(enc, head).expect("matching dims")
}

pub fn explainer(grid: GridSpec, seed: u64) -> ExplainerModel {
    ExplainerModel::new(grid, ExplainerConfig::default(), &mut rng::stream(seed, &[1])).expect("valid explainer")
}

pub fn images(grid: &GridSpec, n: usize, seed: u64) -> Vec<Image> {
    let mut r = rng::stream(seed, &[2]);
    (0..n)
        .map(|_| Image::from_tensor(&Tensor::randn(&[3, grid.width, grid.width], 1.0, &mut r)).expect("3D tensor"))
        .collect()
}
