//! Backbone encoder `G`: per-patch embedding, mean-pool, feed-forward trunk.
//!
//! Each patch is embedded as `gelu(x_z·W + b + pos_z)`; the image embedding is
//! the mean over all patches followed by residual feed-forward blocks and an
//! output projection to `out_dim`. A removed patch has all-zero pixels, so its
//! activation depends only on its position; [`PreparedImage`] precomputes both
//! activations per patch so any masked evaluation is a pooled selection.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Module;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, Image, PatchSubset};
use crate::tensor::kernels;
use crate::tensor::{RowMix, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels: usize,
    pub d_model: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub out_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            d_model: 32,
            hidden: 64,
            blocks: 2,
            out_dim: 16,
        }
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    ln_gamma: Tensor,
    ln_beta: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

#[derive(Clone, Debug)]
pub struct BackboneEncoder {
    grid: GridSpec,
    config: EncoderConfig,
    patch_w: Tensor,
    patch_b: Tensor,
    pos: Tensor,
    blocks: Vec<FeedForward>,
    out_w: Tensor,
    out_b: Tensor,
    frozen: bool,
}

impl BackboneEncoder {
    pub fn new<R: Rng + ?Sized>(grid: GridSpec, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        grid.validate()?;
        if config.channels == 0 || config.d_model == 0 || config.hidden == 0 || config.out_dim == 0 {
            return Err(Error::Invalid("encoder dimensions must be positive".into()));
        }
        let d = config.d_model;
        let input = config.channels * grid.patch_size * grid.patch_size;
        let p2 = grid.num_patches();
        let blocks = (0..config.blocks)
            .map(|_| FeedForward {
                ln_gamma: Tensor::full(&[d], 1.0).into_param(),
                ln_beta: Tensor::zeros(&[d]).into_param(),
                w1: Tensor::randn(&[d, config.hidden], (1.0 / d as f32).sqrt(), rng).into_param(),
                b1: Tensor::zeros(&[config.hidden]).into_param(),
                w2: Tensor::randn(&[config.hidden, d], 0.5 / (config.hidden as f32).sqrt(), rng).into_param(),
                b2: Tensor::zeros(&[d]).into_param(),
            })
            .collect();
        Ok(Self {
            grid,
            patch_w: Tensor::randn(&[input, d], (1.0 / input as f32).sqrt(), rng).into_param(),
            patch_b: Tensor::zeros(&[d]).into_param(),
            pos: Tensor::randn(&[p2, d], 0.5, rng).into_param(),
            blocks,
            out_w: Tensor::randn(&[d, config.out_dim], (1.0 / d as f32).sqrt(), rng).into_param(),
            out_b: Tensor::zeros(&[config.out_dim]).into_param(),
            config,
            frozen: false,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        for p in self.params_mut() {
            p.set_requires_grad(false);
            p.clear_grad();
        }
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
        for p in self.params_mut() {
            p.set_requires_grad(true);
        }
    }

    fn input_width(&self) -> usize {
        self.config.channels * self.grid.patch_size * self.grid.patch_size
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        image.check_grid(&self.grid)?;
        if image.channels() != self.config.channels {
            return Err(Error::shape(
                "encoder channels",
                &[image.channels()],
                &[self.config.channels],
            ));
        }
        Ok(())
    }

    /// Per-patch activations `[P², d_model]` for flattened patch rows.
    fn patch_activations(&self, rows: &[f32]) -> Vec<f32> {
        let (p2, d) = (self.grid.num_patches(), self.config.d_model);
        let mut act = kernels::linear(rows, self.patch_w.data(), self.patch_b.data(), p2, self.input_width(), d);
        kernels::add_rows(&mut act, self.pos.data());
        kernels::gelu_inplace(&mut act);
        act
    }

    /// Feed-forward trunk and output projection over `n` pooled rows.
    fn trunk(&self, mut h: Vec<f32>, n: usize) -> Vec<f32> {
        let d = self.config.d_model;
        for blk in &self.blocks {
            let mut t = h.clone();
            for row in t.chunks_exact_mut(d) {
                kernels::layer_norm_row(row, blk.ln_gamma.data(), blk.ln_beta.data());
            }
            let mut u = kernels::linear(&t, blk.w1.data(), blk.b1.data(), n, d, self.config.hidden);
            kernels::gelu_inplace(&mut u);
            let f = kernels::linear(&u, blk.w2.data(), blk.b2.data(), n, self.config.hidden, d);
            for (hv, fv) in h.iter_mut().zip(&f) {
                *hv += fv;
            }
        }
        kernels::linear(&h, self.out_w.data(), self.out_b.data(), n, d, self.config.out_dim)
    }

    pub fn prepare(&self, image: &Image) -> Result<PreparedImage<'_>> {
        self.check_image(image)?;
        let rows = image.patch_rows(&self.grid)?;
        let present = self.patch_activations(&rows);
        let empty = self.patch_activations(&vec![0.0; rows.len()]);
        Ok(PreparedImage {
            encoder: self,
            present,
            empty,
        })
    }

    /// `G(x)`.
    pub fn encode(&self, image: &Image) -> Result<Vec<f32>> {
        self.prepare(image)?.encode_subsets(&[&self.grid.full()])
    }

    /// `G(S; x)`, identical to `encode(apply_mask(x, S))`.
    pub fn encode_masked(&self, image: &Image, subset: &PatchSubset) -> Result<Vec<f32>> {
        self.prepare(image)?.encode_subsets(&[subset])
    }

    /// Embeddings `[n, out_dim]` for a batch of unmasked images.
    pub fn encode_batch(&self, images: &[&Image]) -> Result<Vec<f32>> {
        let full = self.grid.full();
        let mut pooled = Vec::with_capacity(images.len() * self.config.d_model);
        for img in images {
            let prepared = self.prepare(img)?;
            pooled.extend(prepared.pool(&full));
        }
        Ok(self.trunk(pooled, images.len()))
    }

    /// Records the forward pass for a batch on the tape; returns `[B, out_dim]`.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], images: &[&Image]) -> Result<Var> {
        let [patch_w, patch_b, pos, rest @ ..] = vars else {
            return Err(Error::Invalid("encoder vars missing".into()));
        };
        let b = images.len();
        let p2 = self.grid.num_patches();
        let mut rows = Vec::with_capacity(b * p2 * self.input_width());
        for img in images {
            self.check_image(img)?;
            rows.extend(img.patch_rows(&self.grid)?);
        }
        let x = tape.constant(Tensor::new(vec![b, p2, self.input_width()], rows)?);
        let h = tape.matmul(x, *patch_w)?;
        let h = tape.add(h, *patch_b)?;
        let h = tape.add(h, *pos)?;
        let act = tape.gelu(h)?;

        let weight = 1.0 / p2 as f32;
        let mut mix = RowMix::new();
        for i in 0..b {
            mix.push_row((0..p2).map(|z| (i * p2 + z, weight)));
        }
        let mut h = tape.row_mix(act, Arc::new(mix))?;

        let (block_vars, out_vars) = rest.split_at(rest.len() - 2);
        for bv in block_vars.chunks_exact(6) {
            let t = tape.layer_norm(h, bv[0], bv[1])?;
            let u = tape.matmul(t, bv[2])?;
            let u = tape.add(u, bv[3])?;
            let u = tape.gelu(u)?;
            let f = tape.matmul(u, bv[4])?;
            let f = tape.add(f, bv[5])?;
            h = tape.add(h, f)?;
        }
        let out = tape.matmul(h, out_vars[0])?;
        tape.add(out, out_vars[1])
    }
}

impl Module for BackboneEncoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_w".to_string(), &self.patch_w),
            ("patch_b".to_string(), &self.patch_b),
            ("pos".to_string(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln_gamma"), &b.ln_gamma));
            out.push((format!("block{i}.ln_beta"), &b.ln_beta));
            out.push((format!("block{i}.w1"), &b.w1));
            out.push((format!("block{i}.b1"), &b.b1));
            out.push((format!("block{i}.w2"), &b.w2));
            out.push((format!("block{i}.b2"), &b.b2));
        }
        out.push(("out_w".to_string(), &self.out_w));
        out.push(("out_b".to_string(), &self.out_b));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b, &mut self.pos];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln_gamma,
                &mut b.ln_beta,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }
}

/// Patch activations of one image with and without its pixels.
pub struct PreparedImage<'a> {
    encoder: &'a BackboneEncoder,
    present: Vec<f32>,
    empty: Vec<f32>,
}

impl PreparedImage<'_> {
    fn pool(&self, subset: &PatchSubset) -> Vec<f32> {
        let d = self.encoder.config.d_model;
        let p2 = self.encoder.grid.num_patches();
        let weight = (1.0 / p2 as f32) as f64;
        let mut acc = vec![0.0f64; d];
        for z in 0..p2 {
            let src = if subset.contains(z) { &self.present } else { &self.empty };
            for (a, &v) in acc.iter_mut().zip(&src[z * d..(z + 1) * d]) {
                *a += weight * v as f64;
            }
        }
        acc.into_iter().map(|a| a as f32).collect()
    }

    /// `G(S; x)` for each subset, rows of `[n, out_dim]`.
    pub fn encode_subsets(&self, subsets: &[&PatchSubset]) -> Result<Vec<f32>> {
        let p2 = self.encoder.grid.num_patches();
        let mut pooled = Vec::with_capacity(subsets.len() * self.encoder.config.d_model);
        for s in subsets {
            if s.universe() != p2 {
                return Err(Error::shape("encode_subsets", &[s.universe()], &[p2]));
            }
            pooled.extend(self.pool(s));
        }
        Ok(self.encoder.trunk(pooled, subsets.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::apply_mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (BackboneEncoder, Image) {
        let grid = GridSpec::new(16, 4, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = BackboneEncoder::new(grid, EncoderConfig::default(), &mut rng).unwrap();
        let img = Image::from_tensor(&Tensor::randn(&[3, 16, 16], 1.0, &mut rng)).unwrap();
        (enc, img)
    }

    #[test]
    fn masked_encoding_matches_masked_image_bitwise() {
        let (enc, img) = setup();
        let grid = *enc.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s = crate::grid::sample_subset(&mut rng, &grid.full());
            let fast = enc.encode_masked(&img, &s).unwrap();
            let slow = enc.encode(&apply_mask(&img, &s, &grid).unwrap()).unwrap();
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn full_subset_equals_plain_encode() {
        let (enc, img) = setup();
        assert_eq!(enc.encode_masked(&img, &enc.grid().full()).unwrap(), enc.encode(&img).unwrap());
    }

    #[test]
    fn empty_subset_is_image_independent() {
        let (enc, img) = setup();
        let zero = Image::zeros(3, 16);
        let a = enc.encode_masked(&img, &enc.grid().empty()).unwrap();
        assert_eq!(a, enc.encode(&zero).unwrap());
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tape_forward_matches_inference() {
        let (enc, img) = setup();
        let mut tape = Tape::new();
        let vars = enc.record(&mut tape);
        let out = enc.forward_tape(&mut tape, &vars, &[&img, &img]).unwrap();
        let direct = enc.encode(&img).unwrap();
        assert_eq!(tape.value(out).dims(), &[2, 16]);
        assert_eq!(&tape.value(out).data()[..16], direct.as_slice());
    }

    #[test]
    fn rejects_wrong_image_size() {
        let (enc, _) = setup();
        assert!(enc.encode(&Image::zeros(3, 8)).is_err());
    }
}
