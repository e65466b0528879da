use std::path::Path;

use super::mask::MaskNoise;
use super::model::{ModelConfig, SslToyModel};
use crate::dsp::BinStats;
use crate::error::{Error, Result};
use crate::formats::{EnvelopeReader, EnvelopeWriter};

const MAGIC: &[u8; 4] = b"MTOY";
const VERSION: u32 = 1;

/// Header: u32 M, d_model, layers, attn_heads, ff_dim, N, K; u8 noise kind;
/// u32 parameter count. Payload: stats mean and std, then parameters, all f32.
pub fn write_model(model: &SslToyModel) -> Vec<u8> {
    let cfg = model.config();
    let mut w = EnvelopeWriter::new(MAGIC, VERSION);
    for v in [model.input_dim(), cfg.d_model, cfg.layers, cfg.attn_heads, cfg.ff_dim, model.num_heads(), model.codebook_size()] {
        w.u32(v as u32);
    }
    w.u8(match model.noise() {
        MaskNoise::Gaussian => 0,
        MaskNoise::LearnedEmbedding => 1,
    });
    w.u32(model.num_params() as u32);
    w.f32s(model.input_stats().mean.iter());
    w.f32s(model.input_stats().std.iter());
    w.f32s(model.params().iter());
    w.finish()
}

pub fn read_model(data: &[u8]) -> Result<SslToyModel> {
    let mut r = EnvelopeReader::open(data, "MTOY", VERSION)?;
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [m, d_model, layers, attn_heads, ff_dim, heads, k] = dims;
    let noise = match r.u8()? {
        0 => MaskNoise::Gaussian,
        1 => MaskNoise::LearnedEmbedding,
        t => return Err(Error::Format(format!("unknown noise kind {t}"))),
    };
    let count = r.u32()? as usize;
    r.expect_payload(4 * (2 * m + count))?;
    // Every width is bounded by the parameter count, which the payload size
    // has just bounded; this keeps the layout arithmetic from overflowing.
    if dims.iter().any(|&v| v > count) || attn_heads == 0 {
        return Err(Error::Format("model dimensions inconsistent with parameter count".into()));
    }
    let mean = r.f32s(m)?;
    let std = r.f32s(m)?;
    let params = r.f32s(count)?;
    let cfg = ModelConfig {
        d_model,
        layers,
        attn_heads,
        ff_dim,
    };
    let stats = BinStats {
        mean,
        std,
    };
    SslToyModel::from_parts(cfg, heads, k, noise, stats, params)
}

pub fn save_model(model: &SslToyModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SslToyModel> {
    read_model(&std::fs::read(path)?)
}
