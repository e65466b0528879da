use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioClip;
use crate::error::{Error, Result};

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => Error::Io(io),
        hound::Error::IoError(io) => Error::Format(format!("truncated or unreadable RIFF data: {io}")),
        hound::Error::FormatError(m) => Error::Format(m.to_string()),
        hound::Error::Unsupported => Error::UnsupportedCodec("unsupported WAVE encoding".into()),
        other => Error::Format(other.to_string()),
    }
}

/// Read a RIFF/WAVE file holding 16-bit PCM or 32-bit float, mono or stereo.
/// Stereo is averaged to mono; integer samples are scaled by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let reader = WavReader::open(path.as_ref()).map_err(map_hound)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(Error::UnsupportedCodec(format!("{channels} channels")));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => {
            return Err(Error::UnsupportedCodec(format!("{fmt:?} with {bits} bits per sample")))
        }
    };
    let samples = if channels == 2 {
        interleaved
            .chunks_exact(2)
            .map(|lr| 0.5 * (lr[0] + lr[1]))
            .collect()
    } else {
        interleaved
    };
    AudioClip::new(samples, spec.sample_rate)
}

/// Write a mono clip as 16-bit PCM, clamping to [-1, 1).
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path.as_ref(), spec).map_err(map_hound)?;
    for &s in clip.samples() {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(map_hound)?;
    }
    w.finalize().map_err(map_hound)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, spec: WavSpec, f: impl FnOnce(&mut WavWriter<std::io::BufWriter<std::fs::File>>)) {
        let mut w = WavWriter::create(path, spec).unwrap();
        f(&mut w);
        w.finalize().unwrap();
    }

    #[test]
    fn silence_mono_16bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = WavSpec { channels: 1, sample_rate: 24_000, bits_per_sample: 16, sample_format: SampleFormat::Int };
        write_raw(&p, spec, |w| {
            for _ in 0..24_000 {
                w.write_sample(0i16).unwrap();
            }
        });
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.len(), 24_000);
        assert_eq!(clip.sample_rate_hz(), 24_000);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_opposite_channels_average_to_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let spec = WavSpec { channels: 2, sample_rate: 48_000, bits_per_sample: 32, sample_format: SampleFormat::Float };
        write_raw(&p, spec, |w| {
            for _ in 0..1000 {
                w.write_sample(0.5f32).unwrap();
                w.write_sample(-0.5f32).unwrap();
            }
        });
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.len(), 1000);
        assert_eq!(clip.sample_rate_hz(), 48_000);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn rejects_24bit_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let spec = WavSpec { channels: 1, sample_rate: 24_000, bits_per_sample: 24, sample_format: SampleFormat::Int };
        write_raw(&p, spec, |w| w.write_sample(0i32).unwrap());
        assert!(matches!(load_wav(&p), Err(Error::UnsupportedCodec(_))));

        let g = dir.path().join("g.wav");
        std::fs::write(&g, b"RIFX\x00\x00\x00\x00not a wave file at all").unwrap();
        assert!(matches!(load_wav(&g), Err(Error::Format(_))));
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        let clip = AudioClip::new(vec![0.25, -0.5, 0.0, 0.999], 16_000).unwrap();
        write_wav(&p, &clip).unwrap();
        let back = load_wav(&p).unwrap();
        for (a, b) in back.samples().iter().zip(clip.samples()) {
            assert!((a - b).abs() < 1.0 / 32768.0);
        }
    }
}
