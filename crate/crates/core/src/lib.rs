//! Mel residual vector quantization: audio features, the quantizer and its
//! training objective, a desk-scale masked-prediction loop that consumes its
//! tokens, and a decoupled contrastive loss.

pub mod contrastive;
pub mod dsp;
pub mod error;
pub mod formats;
pub mod optim;
pub mod par;
pub mod rvq;
pub mod ssl;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
