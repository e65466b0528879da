use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rustfft::{num_complex::Complex, FftPlanner};

use super::{AudioClip, DspConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::par;

/// HTK Mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters (peak weight 1) sampled at the `n_fft / 2 + 1` FFT bin
/// frequencies. Row `m` peaks at the `m + 1`-th of `mel_bins + 2` points
/// spaced evenly on the Mel axis between `f_min_hz` and `f_max_hz`.
pub fn mel_filterbank(cfg: &DspConfig) -> Array2<f64> {
    let n_bins = cfg.n_fft / 2 + 1;
    let lo = hz_to_mel(cfg.f_min_hz);
    let hi = hz_to_mel(cfg.f_max_hz);
    let edges: Vec<f64> = (0..cfg.mel_bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.n_fft as f64;
    let mut fb = Array2::zeros((cfg.mel_bins, n_bins));
    for m in 0..cfg.mel_bins {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = ((f - left) / (center - left)).min((right - f) / (right - center));
            if w > 0.0 {
                fb[[m, k]] = w;
            }
        }
    }
    fb
}

/// Mean-pool non-overlapping groups of `factor` rows; a trailing partial
/// group is dropped.
pub fn pool_frames(frames: ArrayView2<'_, f64>, factor: usize) -> Array2<f64> {
    let factor = factor.max(1);
    let t_out = frames.nrows() / factor;
    let mut out = Array2::zeros((t_out, frames.ncols()));
    for (t, mut row) in out.rows_mut().into_iter().enumerate() {
        for j in 0..factor {
            row += &frames.row(t * factor + j);
        }
        row /= factor as f64;
    }
    out
}

/// Odd-symmetric extension about the end samples: `x[-i] = 2 x[0] - x[i]`.
/// Keeps value and slope continuous across the boundary, so a sine starting
/// at a zero crossing continues exactly.
fn padded_sample(x: &[f32], i: isize) -> f64 {
    let n = x.len() as isize;
    if i < 0 {
        2.0 * x[0] as f64 - x[(-i) as usize] as f64
    } else if i >= n {
        2.0 * x[(n - 1) as usize] as f64 - x[(2 * (n - 1) - i) as usize] as f64
    } else {
        x[i as usize] as f64
    }
}

/// Log-Mel spectrogram at `cfg.frame_rate_hz()`.
///
/// The signal is extended by `n_fft / 2` on both sides so frame `i` is
/// centered on sample `i * hop`, giving `1 + len / hop` base frames before
/// pooling.
pub fn mel_spectrogram(clip: &AudioClip, cfg: &DspConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if clip.sample_rate_hz() != cfg.sample_rate_hz {
        return Err(Error::Config(format!(
            "clip is {} Hz, config expects {} Hz; resample first",
            clip.sample_rate_hz(),
            cfg.sample_rate_hz
        )));
    }
    let x = clip.samples();
    if x.len() < cfg.n_fft {
        return Err(Error::TooShort {
            samples: x.len(),
            needed: cfg.n_fft,
        });
    }

    let n_fft = cfg.n_fft;
    let half = (n_fft / 2) as isize;
    let window: Vec<f64> = (0..n_fft)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n_fft as f64).cos())
        .collect();
    let fb = mel_filterbank(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let n_frames = 1 + x.len() / cfg.hop;
    let n_bins = n_fft / 2 + 1;
    let floor = cfg.log_floor;

    let frame_ids: Vec<usize> = (0..n_frames).collect();
    let rows = par::map_chunks(&frame_ids, 64, |_, ids| {
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_bins];
        let mut out = Vec::with_capacity(ids.len() * cfg.mel_bins);
        for &f in ids {
            let start = (f * cfg.hop) as isize - half;
            for (j, b) in buf.iter_mut().enumerate() {
                let s = padded_sample(x, start + j as isize);
                *b = Complex::new(s * window[j], 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filt in fb.rows() {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                out.push((e + floor).ln());
            }
        }
        out
    });
    let base = Array2::from_shape_vec((n_frames, cfg.mel_bins), rows.concat())
        .expect("row count matches frame count");
    let pooled = if cfg.pool_factor == 1 {
        base
    } else {
        pool_frames(base.view(), cfg.pool_factor)
    };
    MelSpectrogram::new(pooled, cfg.frame_rate_hz())
}
