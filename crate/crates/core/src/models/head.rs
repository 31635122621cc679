use rand::Rng;

use super::Module;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tape, Tensor, Var};
use crate::P_MIN;

/// Linear classifier `H_t: R^D → Δ^{K-1}` with clamped softmax output.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    w: Tensor,
    b: Tensor,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, classes: usize, rng: &mut R) -> Result<Self> {
        if in_dim == 0 || classes < 2 {
            return Err(Error::Invalid(format!("head needs in_dim > 0 and >= 2 classes, got {in_dim}, {classes}")));
        }
        Ok(Self {
            w: Tensor::randn(&[in_dim, classes], (1.0 / in_dim as f32).sqrt(), rng).into_param(),
            b: Tensor::zeros(&[classes]).into_param(),
        })
    }

    pub fn from_weights(w: Tensor, b: Tensor) -> Result<Self> {
        if w.rank() != 2 || b.dims() != [w.dims()[1]] {
            return Err(Error::shape("ClassifierHead", w.dims(), b.dims()));
        }
        Ok(Self {
            w: w.into_param(),
            b: b.into_param(),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.w.dims()[1]
    }

    pub fn weights(&self) -> (&Tensor, &Tensor) {
        (&self.w, &self.b)
    }

    /// Adds `shift` to every logit bias; softmax output is unchanged up to rounding.
    pub fn shift_bias(&mut self, shift: f32) {
        for v in self.b.data_mut() {
            *v += shift;
        }
    }

    pub fn logits_rows(&self, emb: &[f32]) -> Vec<f32> {
        let (d, k) = (self.in_dim(), self.num_classes());
        kernels::linear(emb, self.w.data(), self.b.data(), emb.len() / d, d, k)
    }

    /// Clamped probabilities for each embedding row.
    pub fn probs_rows(&self, emb: &[f32]) -> Vec<f32> {
        let mut out = self.logits_rows(emb);
        for row in out.chunks_exact_mut(self.num_classes()) {
            kernels::softmax_row(row);
            for p in row {
                *p = p.max(P_MIN);
            }
        }
        out
    }

    /// Softmax probabilities before clamping.
    pub fn raw_probs(&self, emb: &[f32]) -> Vec<f32> {
        let mut out = self.logits_rows(emb);
        for row in out.chunks_exact_mut(self.num_classes()) {
            kernels::softmax_row(row);
        }
        out
    }

    pub fn probs(&self, emb: &[f32]) -> Vec<f32> {
        self.probs_rows(emb)
    }

    pub fn logits_tape(&self, tape: &mut Tape, vars: &[Var], emb: Var) -> Result<Var> {
        let h = tape.matmul(emb, vars[0])?;
        tape.add(h, vars[1])
    }
}

impl Module for ClassifierHead {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("w".to_string(), &self.w), ("b".to_string(), &self.b)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probabilities_sum_to_one_before_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = ClassifierHead::new(16, 4, &mut rng).unwrap();
        let emb = Tensor::randn(&[5, 16], 2.0, &mut rng);
        for row in head.raw_probs(emb.data()).chunks_exact(4) {
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        for p in head.probs_rows(emb.data()) {
            assert!((P_MIN..=1.0).contains(&p));
        }
    }

    #[test]
    fn saturated_logits_are_clamped() {
        let w = Tensor::new(vec![1, 2], vec![1000.0, -1000.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let head = ClassifierHead::from_weights(w, b).unwrap();
        let p = head.probs(&[1.0]);
        assert_eq!(p[1], P_MIN);
    }
}
