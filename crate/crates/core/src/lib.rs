//! Weights-to-weights (W2W) latent spaces over LoRA adapter corpora.
//!
//! The pipeline reduces every adapter layer to its leading singular triplet,
//! flattens the triplets into one weight vector per adapter, fits a PCA space
//! over the corpus, learns linear preference directions in that space and
//! edits adapters with `θ_edit = θ + α·v`.

pub mod adapter;
pub mod archive;
pub mod direction;
pub mod embed;
pub mod error;
pub mod io;
pub mod linalg;
pub mod preference;
pub mod reduction;
pub mod space;
pub mod synth;

pub use error::{Error, Result};
