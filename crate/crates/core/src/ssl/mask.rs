use ndarray::{Array2, ArrayViewMut2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{BinStats, MelSpectrogram};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskNoise {
    /// Per-bin Gaussian with the corpus statistics.
    Gaussian,
    /// A trained vector owned by the model replaces masked frames.
    LearnedEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub mask_prob: f64,
    pub span_frames: usize,
    pub noise: MaskNoise,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.6,
            span_frames: 10,
            noise: MaskNoise::Gaussian,
            seed: 0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("mask_prob {} outside [0, 1]", self.mask_prob)));
        }
        if self.span_frames == 0 {
            return Err(Error::Config("span_frames must be at least 1".into()));
        }
        Ok(())
    }
}

/// Choose masked frames: spans of `span` frames start at positions visited
/// in random order until `round(p * t)` frames are covered. The last span is
/// cut short so the count is exact.
pub fn sample_mask(t: usize, p: f64, span: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let target = (p * t as f64).round() as usize;
    let mut mask = vec![false; t];
    if target == 0 {
        return mask;
    }
    let mut starts: Vec<usize> = (0..t).collect();
    starts.shuffle(rng);
    let mut covered = 0;
    'outer: for s in starts {
        for f in s..(s + span).min(t) {
            if !mask[f] {
                mask[f] = true;
                covered += 1;
                if covered == target {
                    break 'outer;
                }
            }
        }
    }
    mask
}

/// Overwrite masked rows of standardized frames with unit Gaussian noise.
pub(crate) fn fill_noise(mut x: ArrayViewMut2<'_, f64>, mask: &[bool], rng: &mut ChaCha8Rng) {
    for (mut row, &m) in x.rows_mut().into_iter().zip(mask) {
        if m {
            row.mapv_inplace(|_| StandardNormal.sample(rng));
        }
    }
}

/// Mask a raw spectrogram. Gaussian noise is drawn per bin from `stats`;
/// with [`MaskNoise::LearnedEmbedding`] masked frames are set to the bin
/// means, and the model substitutes its embedding at those positions.
pub fn apply_mask(spec: &MelSpectrogram, cfg: &MaskConfig, stats: &BinStats) -> Result<(MelSpectrogram, Vec<bool>)> {
    cfg.validate()?;
    if stats.dim() != spec.mel_bins() {
        return Err(Error::Shape(format!("stats have {} bins, spectrogram {}", stats.dim(), spec.mel_bins())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mask = sample_mask(spec.num_frames(), cfg.mask_prob, cfg.span_frames, &mut rng);
    let mut z: Array2<f64> = Array2::zeros(spec.frames().raw_dim());
    z.assign(&spec.frames());
    let mut noise = Array2::zeros(z.raw_dim());
    if cfg.noise == MaskNoise::Gaussian {
        fill_noise(noise.view_mut(), &mask, &mut rng);
    }
    for ((mut row, nrow), &m) in z.rows_mut().into_iter().zip(noise.rows()).zip(&mask) {
        if m {
            for j in 0..row.len() {
                row[j] = stats.mean[j] + stats.std[j] * nrow[j];
            }
        }
    }
    Ok((MelSpectrogram::new(z, spec.frame_rate_hz())?, mask))
}
