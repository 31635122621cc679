//! Patch partition of an image, neighbor sets, patch subsets and masking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adjacency used to grow a patch into its hop-neighborhood.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HopMetric {
    /// King-move distance: a hop-r neighborhood is a (2r+1)² square.
    #[default]
    Chebyshev,
    /// 4-neighbor distance: a diamond.
    Manhattan,
}

/// Square grid of `patches_per_side²` patches, each `patch_size` pixels wide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub patch_size: usize,
    pub patches_per_side: usize,
    pub hop_radius: usize,
    #[serde(default)]
    pub metric: HopMetric,
}

impl GridSpec {
    pub fn new(width: usize, patch_size: usize, patches_per_side: usize, hop_radius: usize) -> Result<Self> {
        let spec = Self {
            width,
            patch_size,
            patches_per_side,
            hop_radius,
            metric: HopMetric::Chebyshev,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 32×32 pixels, 4×4-pixel patches, 8×8 grid, hop 2.
    pub fn desk() -> Self {
        Self::new(32, 4, 8, 2).expect("valid desk grid")
    }

    /// 224×224 pixels, 16×16-pixel patches, 14×14 grid, hop 2.
    pub fn paper_scale() -> Self {
        Self::new(224, 16, 14, 2).expect("valid 224-pixel grid")
    }

    pub fn with_metric(mut self, metric: HopMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn with_hop(mut self, hop_radius: usize) -> Self {
        self.hop_radius = hop_radius;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patches_per_side == 0 {
            return Err(Error::Grid("patch size and patches per side must be positive".into()));
        }
        if self.width != self.patch_size * self.patches_per_side {
            return Err(Error::Grid(format!(
                "width {} != patch size {} x patches per side {}",
                self.width, self.patch_size, self.patches_per_side
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side * self.patches_per_side
    }

    pub fn patch(&self, i: usize, j: usize) -> Result<PatchId> {
        let p = self.patches_per_side;
        if i == 0 || j == 0 || i > p || j > p {
            return Err(Error::PatchOutOfGrid { i, j, p });
        }
        Ok(PatchId { i, j })
    }

    pub fn patch_at(&self, index: usize) -> PatchId {
        let p = self.patches_per_side;
        debug_assert!(index < p * p);
        PatchId {
            i: index / p + 1,
            j: index % p + 1,
        }
    }

    /// Row-major index of `z`.
    pub fn index_of(&self, z: PatchId) -> usize {
        (z.i - 1) * self.patches_per_side + (z.j - 1)
    }

    pub fn patches(&self) -> impl Iterator<Item = PatchId> + '_ {
        (0..self.num_patches()).map(|k| self.patch_at(k))
    }

    pub fn full(&self) -> PatchSubset {
        PatchSubset::full(self.num_patches())
    }

    pub fn empty(&self) -> PatchSubset {
        PatchSubset::empty(self.num_patches())
    }

    /// Patches within `hop_radius` of `z`, including `z`.
    pub fn neighbors(&self, z: PatchId) -> Result<PatchSubset> {
        self.patch(z.i, z.j)?;
        let mut out = self.empty();
        for other in self.patches() {
            let di = z.i.abs_diff(other.i);
            let dj = z.j.abs_diff(other.j);
            let dist = match self.metric {
                HopMetric::Chebyshev => di.max(dj),
                HopMetric::Manhattan => di + dj,
            };
            if dist <= self.hop_radius {
                out.insert(self.index_of(other));
            }
        }
        Ok(out)
    }

    /// Neighbor sets of every patch, row-major.
    pub fn all_neighbors(&self) -> Vec<PatchSubset> {
        self.patches()
            .map(|z| self.neighbors(z).expect("patch from grid"))
            .collect()
    }
}

/// 1-based grid coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchId {
    pub i: usize,
    pub j: usize,
}

/// Set of patches stored as a bitmask over the row-major grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PatchSubset {
    words: Vec<u64>,
    universe: usize,
}

impl PatchSubset {
    pub fn empty(universe: usize) -> Self {
        Self {
            words: vec![0; universe.div_ceil(64)],
            universe,
        }
    }

    pub fn full(universe: usize) -> Self {
        let mut s = Self::empty(universe);
        for k in 0..universe {
            s.insert(k);
        }
        s
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(universe: usize, indices: I) -> Self {
        let mut s = Self::empty(universe);
        for k in indices {
            s.insert(k);
        }
        s
    }

    /// Total number of patches in the grid this subset lives in.
    pub fn universe(&self) -> usize {
        self.universe
    }

    pub fn insert(&mut self, k: usize) {
        assert!(k < self.universe, "patch index {k} outside grid of {}", self.universe);
        self.words[k / 64] |= 1 << (k % 64);
    }

    pub fn remove(&mut self, k: usize) {
        if k < self.universe {
            self.words[k / 64] &= !(1 << (k % 64));
        }
    }

    pub fn contains(&self, k: usize) -> bool {
        k < self.universe && self.words[k / 64] >> (k % 64) & 1 == 1
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    /// Members in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.universe).filter(move |&k| self.contains(k))
    }

    pub fn complement(&self) -> Self {
        let mut out = Self::empty(self.universe);
        for k in 0..self.universe {
            if !self.contains(k) {
                out.insert(k);
            }
        }
        out
    }

    pub fn union(&self, other: &Self) -> Self {
        self.zip_words(other, |a, b| a | b)
    }

    pub fn intersection(&self, other: &Self) -> Self {
        self.zip_words(other, |a, b| a & b)
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    fn zip_words(&self, other: &Self, f: impl Fn(u64, u64) -> u64) -> Self {
        assert_eq!(self.universe, other.universe, "subsets from different grids");
        Self {
            words: self.words.iter().zip(&other.words).map(|(&a, &b)| f(a, b)).collect(),
            universe: self.universe,
        }
    }

    /// Hex bitmask, most significant nibble first; bit 0 is patch (1,1).
    pub fn to_hex(&self) -> String {
        let nibbles = self.universe.div_ceil(4).max(1);
        (0..nibbles)
            .rev()
            .map(|n| {
                let v = (0..4).fold(0u32, |acc, b| acc | (self.contains(n * 4 + b) as u32) << b);
                char::from_digit(v, 16).unwrap()
            })
            .collect()
    }

    pub fn from_hex(hex: &str, universe: usize) -> Result<Self> {
        let mut out = Self::empty(universe);
        for (n, ch) in hex.chars().rev().enumerate() {
            let v = ch
                .to_digit(16)
                .ok_or_else(|| Error::Invalid(format!("bad hex digit {ch:?}")))?;
            for b in 0..4 {
                if v >> b & 1 == 1 {
                    let k = n * 4 + b;
                    if k >= universe {
                        return Err(Error::Invalid(format!("bit {k} outside grid of {universe}")));
                    }
                    out.insert(k);
                }
            }
        }
        Ok(out)
    }
}

/// Set complement within the grid.
pub fn complement(subset: &PatchSubset) -> PatchSubset {
    subset.complement()
}

/// Includes each member of `universe` independently with probability 1/2.
pub fn sample_subset<R: Rng + ?Sized>(rng: &mut R, universe: &PatchSubset) -> PatchSubset {
    let mut out = PatchSubset::empty(universe.universe());
    for k in universe.iter() {
        if rng.random::<bool>() {
            out.insert(k);
        }
    }
    out
}

/// Image tensor `[channels, width, width]` where 0 is the baseline pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || width == 0 || data.len() != channels * width * width {
            return Err(Error::shape("Image::new", &[channels, width, width], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Image::new"));
        }
        Ok(Self { channels, width, data })
    }

    pub fn zeros(channels: usize, width: usize) -> Self {
        Self {
            channels,
            width,
            data: vec![0.0; channels * width * width],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [c, h, w] if h == w => Self::new(c, w, t.data().to_vec()),
            _ => Err(Error::shape("Image::from_tensor", t.dims(), &[3, 0, 0])),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.channels, self.width, self.width], self.data.clone())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, c: usize, r: usize, col: usize) -> f32 {
        self.data[(c * self.width + r) * self.width + col]
    }

    pub(crate) fn pixel_mut(&mut self, c: usize, r: usize, col: usize) -> &mut f32 {
        &mut self.data[(c * self.width + r) * self.width + col]
    }

    pub fn check_grid(&self, spec: &GridSpec) -> Result<()> {
        if self.width != spec.width {
            return Err(Error::shape(
                "image vs grid",
                &[self.channels, self.width, self.width],
                &[spec.width, spec.width],
            ));
        }
        Ok(())
    }

    /// Flattens each patch into a `channels·C·C` row, rows in row-major patch order.
    pub fn patch_rows(&self, spec: &GridSpec) -> Result<Vec<f32>> {
        self.check_grid(spec)?;
        let c = spec.patch_size;
        let per_patch = self.channels * c * c;
        let mut out = Vec::with_capacity(spec.num_patches() * per_patch);
        for z in spec.patches() {
            let (r0, c0) = ((z.i - 1) * c, (z.j - 1) * c);
            for ch in 0..self.channels {
                for r in r0..r0 + c {
                    let start = (ch * self.width + r) * self.width + c0;
                    out.extend_from_slice(&self.data[start..start + c]);
                }
            }
        }
        Ok(out)
    }

    /// 64-bit content hash used to key target caches.
    pub fn content_hash(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.channels as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Pixel-level keep map derived from a patch subset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    width: usize,
    keep: Vec<bool>,
}

impl PixelMask {
    pub fn from_subset(subset: &PatchSubset, spec: &GridSpec) -> Result<Self> {
        if subset.universe() != spec.num_patches() {
            return Err(Error::shape("PixelMask", &[subset.universe()], &[spec.num_patches()]));
        }
        let w = spec.width;
        let c = spec.patch_size;
        let p = spec.patches_per_side;
        let keep = (0..w * w)
            .map(|px| {
                let (r, col) = (px / w, px % w);
                subset.contains((r / c) * p + col / c)
            })
            .collect();
        Ok(Self { width: w, keep })
    }

    pub fn keeps(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.width + c]
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Zeroes every pixel (all channels) of patches outside `subset`.
pub fn apply_mask(image: &Image, subset: &PatchSubset, spec: &GridSpec) -> Result<Image> {
    image.check_grid(spec)?;
    let mask = PixelMask::from_subset(subset, spec)?;
    let mut out = image.clone();
    let w = image.width;
    for ch in 0..image.channels {
        for r in 0..w {
            for c in 0..w {
                if !mask.keeps(r, c) {
                    *out.pixel_mut(ch, r, c) = 0.0;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(p: usize, hop: usize) -> GridSpec {
        GridSpec::new(2 * p, 2, p, hop).unwrap()
    }

    fn noise_image(spec: &GridSpec, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::uniform(&[3, spec.width, spec.width], 0.1, 1.0, &mut rng);
        Image::from_tensor(&t).unwrap()
    }

    #[test]
    fn rejects_inconsistent_width() {
        assert!(GridSpec::new(30, 4, 8, 2).is_err());
        assert!(GridSpec::new(0, 0, 8, 2).is_err());
    }

    #[test]
    fn center_hop_two_covers_five_by_five() {
        let spec = grid(5, 2);
        let n = spec.neighbors(spec.patch(3, 3).unwrap()).unwrap();
        assert_eq!(n.len(), 25);
    }

    #[test]
    fn corner_hop_one_is_clipped() {
        let spec = grid(4, 1);
        let n = spec.neighbors(spec.patch(1, 1).unwrap()).unwrap();
        let ids: Vec<PatchId> = n.iter().map(|k| spec.patch_at(k)).collect();
        let expect = [(1, 1), (1, 2), (2, 1), (2, 2)].map(|(i, j)| PatchId { i, j });
        assert_eq!(ids, expect);
    }

    #[test]
    fn hop_zero_is_singleton() {
        let spec = grid(6, 0);
        for z in spec.patches() {
            let n = spec.neighbors(z).unwrap();
            assert_eq!(n.len(), 1);
            assert!(n.contains(spec.index_of(z)));
        }
    }

    #[test]
    fn manhattan_hop_one_is_a_plus() {
        let spec = grid(5, 1).with_metric(HopMetric::Manhattan);
        assert_eq!(spec.neighbors(spec.patch(3, 3).unwrap()).unwrap().len(), 5);
    }

    #[test]
    fn out_of_grid_patch_is_rejected() {
        let spec = grid(4, 1);
        assert!(spec.patch(0, 1).is_err());
        assert!(spec.neighbors(PatchId { i: 5, j: 1 }).is_err());
    }

    #[test]
    fn full_mask_is_identity_and_empty_mask_zeroes() {
        let spec = grid(4, 1);
        let img = noise_image(&spec, 1);
        assert_eq!(apply_mask(&img, &spec.full(), &spec).unwrap(), img);
        let zero = apply_mask(&img, &spec.empty(), &spec).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_patch_keeps_c_squared_pixels_per_channel() {
        let spec = GridSpec::new(8, 4, 2, 0).unwrap();
        let img = noise_image(&spec, 2);
        let s = PatchSubset::from_indices(4, [0]);
        let masked = apply_mask(&img, &s, &spec).unwrap();
        let nonzero = masked.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 3 * 16);
        assert_eq!(PixelMask::from_subset(&s, &spec).unwrap().kept(), 16);
    }

    #[test]
    fn complement_edges() {
        let spec = grid(3, 1);
        assert_eq!(spec.empty().complement(), spec.full());
        assert_eq!(spec.full().complement(), spec.empty());
    }

    #[test]
    fn empty_universe_samples_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_subset(&mut rng, &PatchSubset::empty(16)).is_empty());
    }

    #[test]
    fn sampled_size_is_half_on_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let universe = PatchSubset::full(40);
        let draws = 10_000;
        let total: usize = (0..draws).map(|_| sample_subset(&mut rng, &universe).len()).sum();
        let mean = total as f64 / draws as f64;
        assert!((mean - 20.0).abs() < 0.05 * 20.0, "mean {mean}");
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let universe = PatchSubset::full(64);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_subset(&mut rng, &universe)).collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn hex_bit_zero_is_first_patch() {
        let s = PatchSubset::from_indices(8, [0, 5]);
        assert_eq!(s.to_hex(), "21");
        assert_eq!(PatchSubset::from_hex("21", 8).unwrap(), s);
        assert!(PatchSubset::from_hex("100", 8).is_err());
    }

    fn subset_strategy(n: usize) -> impl Strategy<Value = PatchSubset> {
        prop::collection::vec(any::<bool>(), n)
            .prop_map(move |bits| PatchSubset::from_indices(n, (0..n).filter(|&k| bits[k])))
    }

    proptest! {
        #[test]
        fn masking_is_idempotent(s in subset_strategy(16), seed in any::<u64>()) {
            let spec = grid(4, 1);
            let img = noise_image(&spec, seed);
            let once = apply_mask(&img, &s, &spec).unwrap();
            let twice = apply_mask(&once, &s, &spec).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn masks_compose_as_intersection(s in subset_strategy(16), t in subset_strategy(16), seed in any::<u64>()) {
            let spec = grid(4, 1);
            let img = noise_image(&spec, seed);
            let both = apply_mask(&img, &s.intersection(&t), &spec).unwrap();
            let seq = apply_mask(&apply_mask(&img, &s, &spec).unwrap(), &t, &spec).unwrap();
            prop_assert_eq!(both, seq);
        }

        #[test]
        fn complement_partitions(s in subset_strategy(49)) {
            prop_assert_eq!(s.complement().complement(), s.clone());
            prop_assert_eq!(s.len() + s.complement().len(), 49);
            prop_assert!(s.intersection(&s.complement()).is_empty());
        }

        #[test]
        fn neighbor_sets_are_bounded(p in 1usize..9, hop in 0usize..4, k in 0usize..81) {
            let spec = grid(p, hop);
            let z = spec.patch_at(k % spec.num_patches());
            let n = spec.neighbors(z).unwrap();
            prop_assert!(n.contains(spec.index_of(z)));
            prop_assert!(n.len() <= (2 * hop + 1).pow(2));
        }

        #[test]
        fn hex_roundtrip(s in subset_strategy(64)) {
            prop_assert_eq!(PatchSubset::from_hex(&s.to_hex(), 64).unwrap(), s);
        }
    }
}
