//! Transferable patch attributions for frozen vision encoders.
//!
//! A target model `f_t = H_t ∘ G` is explained per patch by the log-ratio of
//! its class probability on the patch neighborhood versus on the rest of the
//! image. The two encoder outputs behind that ratio (the meta-attribution)
//! do not depend on the classifier head, so an explainer trained once to
//! predict them serves every downstream head through [`attribution::transfer_explain`].

pub mod attribution;
pub mod data;
pub mod error;
pub mod eval;
pub mod explainer;
pub mod grid;
pub mod models;
pub mod rng;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
pub use grid::{apply_mask, complement, sample_subset, GridSpec, HopMetric, Image, PatchId, PatchSubset, PixelMask};
pub use tensor::{Tape, Tensor, Var};

/// Floor applied to probabilities before any logarithm.
pub const P_MIN: f32 = 1e-7;
