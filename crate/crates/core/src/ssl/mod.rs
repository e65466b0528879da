//! Desk-scale masked-prediction pretraining on quantizer tokens.
//!
//! Frames are standardized with corpus statistics, a fraction of them is
//! replaced by noise in contiguous spans, and a small transformer predicts
//! the target token of every head at the masked frames. Only masked
//! positions enter the loss; logits exist everywhere.

mod checkpoint;
mod loss;
mod mask;
mod model;
mod pretrain;

pub use checkpoint::{load_model, read_model, save_model, write_model};
pub use loss::{mlm_loss, predictions};
pub use mask::{apply_mask, sample_mask, MaskConfig, MaskNoise};
pub use model::{LatentStack, ModelConfig, SslToyModel};
pub use pretrain::{
    evaluate, extract_latents, iterate, layer_table, layer_table_csv, pretrain, split_corpus, HeldoutMetrics, IterateConfig, IterateOutput, LayerRow,
    PretrainConfig, PretrainReport, Tokenizer,
};

/// Gradient of `mlm_loss` with respect to every parameter, in the layout of
/// [`SslToyModel::params`]. Exposed for gradient checking.
pub fn mlm_gradient(model: &SslToyModel, x: ndarray::ArrayView2<'_, f64>, targets: ndarray::ArrayView2<'_, u32>, mask: &[bool]) -> crate::Result<(f64, Vec<f64>)> {
    let count = mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(crate::Error::NoMaskedFrames);
    }
    let scale = 1.0 / (count * model.num_heads()) as f64;
    let (logits, cache) = model.forward_cached(x, Some(mask))?;
    let (sum, dl) = loss::loss_and_grad(logits.view(), targets, mask, Some(scale))?;
    let mut g = vec![0.0; model.num_params()];
    model.backward(&cache, dl.expect("requested").view(), &mut g);
    Ok((sum * scale, g))
}

impl SslToyModel {
    /// Copy with parameter `i` replaced; for finite-difference probes.
    pub fn with_param(&self, i: usize, value: f64) -> Self {
        let mut m = self.clone();
        m.params_mut()[i] = value;
        m
    }
}

#[cfg(test)]
mod tests;
