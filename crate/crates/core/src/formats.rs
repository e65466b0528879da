//! Little-endian binary containers.
//!
//! Every file is `magic[4] | u32 version | header | payload | u32 crc32`,
//! with the CRC (IEEE) taken over all preceding bytes. Readers check, in
//! order: magic, version, declared size against actual size, checksum.
//!
//! `MELS` v1 header: `u32 T, u32 M, f32 frame_rate`; payload `T*M f32`
//! row-major. `MTOK` v1 header: `u32 T, u32 N, u32 K, f32 frame_rate`;
//! payload `T*N u16` row-major. `MRVQ` and `MTOY` are described next to the
//! types they store.

use std::path::Path;

use ndarray::Array2;

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::rvq::TokenSequence;

pub(crate) struct EnvelopeWriter {
    buf: Vec<u8>,
}

impl EnvelopeWriter {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Store `f64` values at `f32` precision.
    pub fn f32s<'a>(&mut self, vals: impl IntoIterator<Item = &'a f64>) {
        for &v in vals {
            self.f32(v as f32);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub(crate) struct EnvelopeReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> EnvelopeReader<'a> {
    pub fn open(data: &'a [u8], magic: &'static str, version: u32) -> Result<Self> {
        if data.len() < 4 {
            return Err(Error::Truncated);
        }
        if &data[..4] != magic.as_bytes() {
            return Err(Error::Magic { expected: magic });
        }
        let mut r = Self { data, pos: 4 };
        let found = r.u32()?;
        if found != version {
            return Err(Error::Version { found, expected: version });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        if end > self.data.len() {
            return Err(Error::Truncated);
        }
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or(Error::Truncated)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    /// Compare the remaining payload size with what the header declares,
    /// then verify the checksum. Call right after the header is parsed.
    pub fn expect_payload(&self, payload_bytes: usize) -> Result<()> {
        let have = self.data.len().saturating_sub(self.pos);
        let need = payload_bytes.checked_add(4).ok_or(Error::Truncated)?;
        if have < need {
            return Err(Error::Truncated);
        }
        if have > need {
            return Err(Error::Format(format!("{} trailing bytes", have - need)));
        }
        let body = &self.data[..self.data.len() - 4];
        let stored = u32::from_le_bytes(self.data[self.data.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(())
    }
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Shape(format!("{what} = {v} does not fit in u32")))
}

const MELS_VERSION: u32 = 1;
const MTOK_VERSION: u32 = 1;

pub fn mels_to_bytes(spec: &MelSpectrogram) -> Result<Vec<u8>> {
    let mut w = EnvelopeWriter::new(b"MELS", MELS_VERSION);
    w.u32(dim_u32(spec.num_frames(), "T")?);
    w.u32(dim_u32(spec.mel_bins(), "M")?);
    w.f32(spec.frame_rate_hz() as f32);
    w.f32s(spec.frames().iter());
    Ok(w.finish())
}

pub fn mels_from_bytes(data: &[u8]) -> Result<MelSpectrogram> {
    let mut r = EnvelopeReader::open(data, "MELS", MELS_VERSION)?;
    let t = r.u32()? as usize;
    let m = r.u32()? as usize;
    let rate = r.f32()? as f64;
    r.expect_payload(t.saturating_mul(m).saturating_mul(4))?;
    let vals = r.f32s(t * m)?;
    let frames = Array2::from_shape_vec((t, m), vals).map_err(|e| Error::Format(e.to_string()))?;
    MelSpectrogram::new(frames, rate)
}

pub fn mtok_to_bytes(tokens: &TokenSequence) -> Result<Vec<u8>> {
    if tokens.codebook_size() > u16::MAX as usize + 1 {
        return Err(Error::Shape("codebook too large for u16 tokens".into()));
    }
    let mut w = EnvelopeWriter::new(b"MTOK", MTOK_VERSION);
    w.u32(dim_u32(tokens.num_frames(), "T")?);
    w.u32(dim_u32(tokens.num_stages(), "N")?);
    w.u32(dim_u32(tokens.codebook_size(), "K")?);
    w.f32(tokens.frame_rate_hz() as f32);
    for &t in tokens.tokens().iter() {
        w.u16(t as u16);
    }
    Ok(w.finish())
}

pub fn mtok_from_bytes(data: &[u8]) -> Result<TokenSequence> {
    let mut r = EnvelopeReader::open(data, "MTOK", MTOK_VERSION)?;
    let t = r.u32()? as usize;
    let n = r.u32()? as usize;
    let k = r.u32()? as usize;
    let rate = r.f32()? as f64;
    r.expect_payload(t.saturating_mul(n).saturating_mul(2))?;
    let mut vals = Vec::with_capacity(t * n);
    for _ in 0..t * n {
        vals.push(r.u16()? as u32);
    }
    let tokens = Array2::from_shape_vec((t, n), vals).map_err(|e| Error::Format(e.to_string()))?;
    TokenSequence::new(tokens, k, rate)
}

pub fn save_mels(path: impl AsRef<Path>, spec: &MelSpectrogram) -> Result<()> {
    Ok(std::fs::write(path, mels_to_bytes(spec)?)?)
}

pub fn load_mels(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    mels_from_bytes(&std::fs::read(path)?)
}

pub fn save_tokens(path: impl AsRef<Path>, tokens: &TokenSequence) -> Result<()> {
    Ok(std::fs::write(path, mtok_to_bytes(tokens)?)?)
}

pub fn load_tokens(path: impl AsRef<Path>) -> Result<TokenSequence> {
    mtok_from_bytes(&std::fs::read(path)?)
}
