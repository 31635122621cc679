use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{MetaAttribution, MetaSource};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, Image};
use crate::models::Module;
use crate::tensor::{RowMix, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainerConfig {
    pub channels: usize,
    pub d_e: usize,
    pub n_heads: usize,
    /// Width `D` of each predicted tensor; must match the encoder output.
    pub out_dim: usize,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            d_e: 64,
            n_heads: 4,
            out_dim: 16,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    w: Tensor,
    b: Tensor,
}

/// Amortized explainer `E(x | θ)` predicting `[ĝ, ĥ]` for every patch.
///
/// Patches are embedded independently, summed over each neighborhood and over
/// the whole image, fused per patch and passed through a stack of head blocks.
/// The first block has no skip connection; the last has neither skip nor
/// activation and emits `2D` values per patch.
#[derive(Clone, Debug)]
pub struct ExplainerModel {
    grid: GridSpec,
    config: ExplainerConfig,
    embed_w: Tensor,
    embed_b: Tensor,
    pos_e: Tensor,
    mix_a: Tensor,
    mix_m: Tensor,
    mix_b: Tensor,
    pos_f: Tensor,
    ln_gamma: Tensor,
    ln_beta: Tensor,
    heads: Vec<Block>,
}

const TRUNK_PARAMS: usize = 9;

impl ExplainerModel {
    pub fn new<R: Rng + ?Sized>(grid: GridSpec, config: ExplainerConfig, rng: &mut R) -> Result<Self> {
        grid.validate()?;
        if config.n_heads < 2 {
            return Err(Error::Invalid("the explainer needs at least two head blocks".into()));
        }
        if config.channels == 0 || config.d_e == 0 || config.out_dim == 0 {
            return Err(Error::Invalid("explainer dimensions must be positive".into()));
        }
        let d = config.d_e;
        let input = config.channels * grid.patch_size * grid.patch_size;
        let p2 = grid.num_patches();
        let scale = |fan: usize| (1.0 / fan as f32).sqrt();
        let heads = (0..config.n_heads)
            .map(|i| {
                let out = if i + 1 == config.n_heads { 2 * config.out_dim } else { d };
                Block {
                    w: Tensor::randn(&[d, out], scale(d), rng).into_param(),
                    b: Tensor::zeros(&[out]).into_param(),
                }
            })
            .collect();
        Ok(Self {
            grid,
            embed_w: Tensor::randn(&[input, d], scale(input), rng).into_param(),
            embed_b: Tensor::zeros(&[d]).into_param(),
            pos_e: Tensor::randn(&[p2, d], 0.5, rng).into_param(),
            // Neighborhood and global sums carry a 1/P² factor; compensate at init.
            mix_a: Tensor::randn(&[d, d], scale(d) * p2 as f32 / 9.0, rng).into_param(),
            mix_m: Tensor::randn(&[d, d], scale(d), rng).into_param(),
            mix_b: Tensor::zeros(&[d]).into_param(),
            pos_f: Tensor::randn(&[p2, d], 0.5, rng).into_param(),
            ln_gamma: Tensor::full(&[d], 1.0).into_param(),
            ln_beta: Tensor::zeros(&[d]).into_param(),
            heads,
            config,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn config(&self) -> &ExplainerConfig {
        &self.config
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    /// Records the forward pass for patches `patches[b]` of `images[b]`;
    /// returns `[Σ_b |patches[b]|, 2D]` in the same order.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], images: &[&Image], patches: &[Vec<usize>]) -> Result<Var> {
        if images.len() != patches.len() {
            return Err(Error::shape("explainer batch", &[images.len()], &[patches.len()]));
        }
        if vars.len() != TRUNK_PARAMS + 2 * self.heads.len() {
            return Err(Error::Invalid("explainer vars do not match parameters".into()));
        }
        let p2 = self.grid.num_patches();
        let input = self.config.channels * self.grid.patch_size * self.grid.patch_size;
        let b = images.len();
        let mut rows = Vec::with_capacity(b * p2 * input);
        for img in images {
            img.check_grid(&self.grid)?;
            if img.channels() != self.config.channels {
                return Err(Error::shape("explainer channels", &[img.channels()], &[self.config.channels]));
            }
            rows.extend(img.patch_rows(&self.grid)?);
        }
        let x = tape.constant(Tensor::new(vec![b, p2, input], rows)?);
        let u = tape.matmul(x, vars[0])?;
        let u = tape.add(u, vars[1])?;
        let u = tape.add(u, vars[2])?;
        let u = tape.gelu(u)?;

        let neighbors = self.grid.all_neighbors();
        let weight = 1.0 / p2 as f32;
        let mut local = RowMix::new();
        let mut pooled = RowMix::new();
        let mut spread = Vec::new();
        let mut positions = Vec::new();
        for (i, zs) in patches.iter().enumerate() {
            pooled.push_row((0..p2).map(|z| (i * p2 + z, weight)));
            for &z in zs {
                if z >= p2 {
                    return Err(Error::Invalid(format!("patch index {z} outside a grid of {p2}")));
                }
                local.push_row(neighbors[z].iter().map(|s| (i * p2 + s, weight)));
                spread.push(i);
                positions.push(z);
            }
        }
        if spread.is_empty() {
            return Err(Error::Invalid("no patches requested".into()));
        }
        let a = tape.row_mix(u, Arc::new(local))?;
        let m = tape.row_mix(u, Arc::new(pooled))?;
        let a = tape.matmul(a, vars[3])?;
        let m = tape.matmul(m, vars[4])?;
        let m = tape.row_mix(m, Arc::new(RowMix::gather(&spread)))?;
        let pos = tape.row_mix(vars[6], Arc::new(RowMix::gather(&positions)))?;
        let f = tape.add(a, m)?;
        let f = tape.add(f, vars[5])?;
        let f = tape.add(f, pos)?;
        let f = tape.gelu(f)?;
        let mut hcur = tape.layer_norm(f, vars[7], vars[8])?;

        let last = self.heads.len() - 1;
        for (i, hv) in vars[TRUNK_PARAMS..].chunks_exact(2).enumerate() {
            let t = tape.matmul(hcur, hv[0])?;
            let t = tape.add(t, hv[1])?;
            hcur = match i {
                0 => tape.gelu(t)?,
                i if i == last => t,
                _ => {
                    let t = tape.gelu(t)?;
                    tape.add(hcur, t)?
                }
            };
        }
        Ok(hcur)
    }

    /// Predicted meta-attribution for every patch, one forward pass.
    pub fn explain_forward(&self, image: &Image) -> Result<MetaAttribution> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape);
        let all: Vec<usize> = (0..self.grid.num_patches()).collect();
        let out = self.forward_tape(&mut tape, &vars, &[image], &[all])?;
        let (g, h) = split_halves(tape.value(out).data(), self.config.out_dim);
        let p = self.grid.patches_per_side;
        let dims = vec![p, p, self.config.out_dim];
        MetaAttribution::new(Tensor::new(dims.clone(), g)?, Tensor::new(dims, h)?, self.grid, MetaSource::Predicted)
    }
}

/// Splits `[n, 2D]` rows into the first and last `D` columns.
pub(crate) fn split_halves(rows: &[f32], d: usize) -> (Vec<f32>, Vec<f32>) {
    let n = rows.len() / (2 * d);
    let mut g = Vec::with_capacity(n * d);
    let mut h = Vec::with_capacity(n * d);
    for row in rows.chunks_exact(2 * d) {
        g.extend_from_slice(&row[..d]);
        h.extend_from_slice(&row[d..]);
    }
    (g, h)
}

impl Module for ExplainerModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed_w".into(), &self.embed_w),
            ("embed_b".into(), &self.embed_b),
            ("pos_e".into(), &self.pos_e),
            ("mix_a".into(), &self.mix_a),
            ("mix_m".into(), &self.mix_m),
            ("mix_b".into(), &self.mix_b),
            ("pos_f".into(), &self.pos_f),
            ("ln_gamma".into(), &self.ln_gamma),
            ("ln_beta".into(), &self.ln_beta),
        ];
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("head{i}.w"), &h.w));
            out.push((format!("head{i}.b"), &h.b));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.embed_w,
            &mut self.embed_b,
            &mut self.pos_e,
            &mut self.mix_a,
            &mut self.mix_m,
            &mut self.mix_b,
            &mut self.pos_f,
            &mut self.ln_gamma,
            &mut self.ln_beta,
        ];
        for h in &mut self.heads {
            out.push(&mut h.w);
            out.push(&mut h.b);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn setup() -> (ExplainerModel, Image) {
        let grid = GridSpec::desk();
        let mut r = rng::stream(4, &[]);
        let e = ExplainerModel::new(grid, ExplainerConfig::default(), &mut r).unwrap();
        let img = Image::from_tensor(&Tensor::randn(&[3, 32, 32], 1.0, &mut r)).unwrap();
        (e, img)
    }

    #[test]
    fn forward_is_deterministic_with_expected_shapes() {
        let (e, img) = setup();
        let a = e.explain_forward(&img).unwrap();
        let b = e.explain_forward(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.g.dims(), &[8, 8, 16]);
        assert_eq!(a.h.dims(), &[8, 8, 16]);
        assert_eq!(a.source, MetaSource::Predicted);
    }

    #[test]
    fn initial_outputs_are_moderate() {
        let (e, img) = setup();
        let m = e.explain_forward(&img).unwrap();
        let max = m.g.data().iter().chain(m.h.data()).fold(0.0f32, |a, v| a.max(v.abs()));
        assert!(max.is_finite() && max < 100.0, "max {max}");
    }

    #[test]
    fn subset_rows_match_full_forward() {
        let (e, img) = setup();
        let full = e.explain_forward(&img).unwrap();
        let mut tape = Tape::new();
        let vars = e.record(&mut tape);
        let out = e.forward_tape(&mut tape, &vars, &[&img], &[vec![5, 40]]).unwrap();
        let (g, h) = split_halves(tape.value(out).data(), 16);
        for (k, z) in [5usize, 40].into_iter().enumerate() {
            for (x, y) in g[k * 16..(k + 1) * 16].iter().zip(full.g_at(z)) {
                assert!((x - y).abs() < 1e-5);
            }
            for (x, y) in h[k * 16..(k + 1) * 16].iter().zip(full.h_at(z)) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (e, img) = setup();
        assert!(e.explain_forward(&Image::zeros(3, 16)).is_err());
        let mut tape = Tape::new();
        let vars = e.record(&mut tape);
        assert!(e.forward_tape(&mut tape, &vars, &[&img], &[vec![64]]).is_err());
        assert!(e.forward_tape(&mut tape, &vars, &[&img], &[vec![]]).is_err());
    }
}
