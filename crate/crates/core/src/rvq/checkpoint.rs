//! `MRVQ` v1: `magic | u32 version | u32 N, K, d_code, M | f32 alpha, beta |
//! u8 source | u8 flags | M f32 means | M f32 stds | per stage: projection
//! (d_code x M), decoder (M x d_code), codebook (K x d_code), all f32
//! row-major | u32 crc32`. Flag bit 0 marks a frozen random quantizer.

use std::path::Path;

use ndarray::Array2;

use super::{LossWeights, MelRvq, Source, StageParams};
use crate::dsp::BinStats;
use crate::error::{Error, Result};
use crate::formats::{EnvelopeReader, EnvelopeWriter};

const VERSION: u32 = 1;
const FLAG_FROZEN: u8 = 1;

pub fn write_checkpoint(rvq: &MelRvq) -> Vec<u8> {
    let d = rvq.dims();
    let mut w = EnvelopeWriter::new(b"MRVQ", VERSION);
    for v in [d.stages, d.codebook_size, d.code_dim, d.input_dim] {
        w.u32(v as u32);
    }
    w.f32(rvq.weights().alpha as f32);
    w.f32(rvq.weights().beta as f32);
    w.u8(rvq.source().tag());
    w.u8(if rvq.is_frozen() { FLAG_FROZEN } else { 0 });
    w.f32s(&rvq.input_stats().mean);
    w.f32s(&rvq.input_stats().std);
    for s in rvq.stages() {
        w.f32s(s.projection().iter());
        w.f32s(s.decoder().iter());
        w.f32s(s.codebook().iter());
    }
    w.finish()
}

pub fn read_checkpoint(data: &[u8]) -> Result<MelRvq> {
    let mut r = EnvelopeReader::open(data, "MRVQ", VERSION)?;
    let n = r.u32()? as usize;
    let k = r.u32()? as usize;
    let dc = r.u32()? as usize;
    let m = r.u32()? as usize;
    let alpha = r.f32()? as f64;
    let beta = r.f32()? as f64;
    let source = r.u8()?;
    let flags = r.u8()?;
    let per_stage = dc
        .checked_mul(m)
        .and_then(|pm| pm.checked_mul(2))
        .and_then(|v| v.checked_add(k.checked_mul(dc)?))
        .ok_or(Error::Truncated)?;
    let floats = n
        .checked_mul(per_stage)
        .and_then(|v| v.checked_add(2 * m))
        .ok_or(Error::Truncated)?;
    r.expect_payload(floats.checked_mul(4).ok_or(Error::Truncated)?)?;
    let source = Source::from_tag(source)?;
    let mean = r.f32s(m)?;
    let std = r.f32s(m)?;
    let mut stages = Vec::with_capacity(n);
    let shape = |rows: usize, cols: usize, v: Vec<f64>| {
        Array2::from_shape_vec((rows, cols), v).map_err(|e| Error::Format(e.to_string()))
    };
    for _ in 0..n {
        let p = shape(dc, m, r.f32s(dc * m)?)?;
        let dmat = shape(m, dc, r.f32s(m * dc)?)?;
        let q = shape(k, dc, r.f32s(k * dc)?)?;
        stages.push(StageParams::new(p, dmat, q)?);
    }
    let mut rvq = MelRvq::new(stages, LossWeights { alpha, beta }, BinStats { mean, std }, source)?;
    rvq.set_frozen(flags & FLAG_FROZEN != 0);
    Ok(rvq)
}

pub fn save_checkpoint(rvq: &MelRvq, path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, write_checkpoint(rvq))?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MelRvq> {
    read_checkpoint(&std::fs::read(path)?)
}
