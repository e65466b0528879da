//! Audio ingestion and log-Mel feature extraction.
//!
//! The pipeline is PCM → (optional resample) → centered STFT with a periodic
//! Hann window → HTK Mel filterbank → `ln(x + floor)` → mean pooling of
//! `pool_factor` consecutive frames. With the default [`DspConfig`] a 24 kHz
//! clip yields 128 Mel bins at 25 frames per second.

mod mel;
mod resample;
mod wav;

pub use mel::{hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, pool_frames};
pub use resample::resample;
pub use wav::{load_wav, write_wav};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::Domain("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Domain(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

/// STFT and filterbank settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DspConfig {
    pub sample_rate_hz: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub mel_bins: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub pool_factor: usize,
    pub log_floor: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 24_000,
            n_fft: 1024,
            hop: 240,
            mel_bins: 128,
            f_min_hz: 0.0,
            f_max_hz: 12_000.0,
            pool_factor: 4,
            log_floor: 1e-5,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.sample_rate_hz == 0 {
            return bad("sample_rate_hz must be positive");
        }
        if self.n_fft < 2 {
            return bad("n_fft must be at least 2");
        }
        if self.hop == 0 {
            return bad("hop must be positive");
        }
        if self.mel_bins == 0 {
            return bad("mel_bins must be positive");
        }
        if self.pool_factor == 0 {
            return bad("pool_factor must be positive");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if !(self.f_min_hz >= 0.0 && self.f_min_hz < self.f_max_hz && self.f_max_hz <= nyquist) {
            return bad("require 0 <= f_min_hz < f_max_hz <= sample_rate_hz / 2");
        }
        Ok(())
    }

    /// Output frame rate after pooling.
    pub fn frame_rate_hz(&self) -> f64 {
        self.sample_rate_hz as f64 / (self.hop * self.pool_factor) as f64
    }

    /// Number of pooled frames produced for a clip of `samples` samples.
    pub fn frame_count(&self, samples: usize) -> usize {
        (1 + samples / self.hop) / self.pool_factor
    }
}

/// Time × Mel matrix of log energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    frames: Array2<f64>,
    frame_rate_hz: f64,
}

impl MelSpectrogram {
    pub fn new(frames: Array2<f64>, frame_rate_hz: f64) -> Result<Self> {
        if !(frame_rate_hz > 0.0 && frame_rate_hz.is_finite()) {
            return Err(Error::Domain("frame rate must be positive".into()));
        }
        if frames.ncols() == 0 {
            return Err(Error::Shape("spectrogram needs at least one mel bin".into()));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite spectrogram entry".into()));
        }
        Ok(Self {
            frames,
            frame_rate_hz,
        })
    }

    pub fn frames(&self) -> ArrayView2<'_, f64> {
        self.frames.view()
    }

    pub fn frame(&self, t: usize) -> ArrayView1<'_, f64> {
        self.frames.row(t)
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn mel_bins(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }
}

/// Per-bin mean and standard deviation used to standardize frames before
/// quantization. Stored alongside every quantizer checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct BinStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Bins whose spread falls below this are left unscaled.
const MIN_STD: f64 = 1e-6;

impl BinStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population statistics over the rows of `frames`.
    pub fn from_frames(frames: ArrayView2<'_, f64>) -> Result<Self> {
        let n = frames.nrows();
        if n == 0 {
            return Err(Error::Empty("frames"));
        }
        let mean = frames.mean_axis(Axis(0)).expect("nonempty").to_vec();
        let mut var = vec![0.0; frames.ncols()];
        for row in frames.rows() {
            for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s < MIN_STD {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, frames: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = frames.to_owned();
        for mut row in out.rows_mut() {
            for ((x, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        out
    }

    pub fn destandardize(&self, frames: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = frames.to_owned();
        for mut row in out.rows_mut() {
            for ((x, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = *x * s + m;
            }
        }
        out
    }
}
