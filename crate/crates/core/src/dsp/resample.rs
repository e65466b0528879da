use std::f64::consts::PI;

use super::AudioClip;
use crate::error::{Error, Result};
use crate::par;

/// Zero crossings of the sinc kernel on each side of the output instant.
const ZERO_CROSSINGS: f64 = 16.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
///
/// Output length is `round(len * target / source)`. Each output sample is
/// normalized by the sum of its in-bounds kernel weights, so DC is preserved
/// exactly, edges included. Equal rates return the input unchanged.
pub fn resample(clip: &AudioClip, target_hz: u32) -> Result<AudioClip> {
    if target_hz == 0 {
        return Err(Error::Domain("target rate must be positive".into()));
    }
    let source_hz = clip.sample_rate_hz();
    if source_hz == target_hz {
        return Ok(clip.clone());
    }
    let x = clip.samples();
    let n_in = x.len() as u64;
    let out_len = ((n_in * target_hz as u64 + source_hz as u64 / 2) / source_hz as u64) as usize;
    let step = source_hz as f64 / target_hz as f64;
    // Lowpass at the lower Nyquist, expressed relative to the source rate.
    let cutoff = (target_hz as f64 / source_hz as f64).min(1.0);
    let half_width = ZERO_CROSSINGS / cutoff;

    let idx: Vec<usize> = (0..out_len).collect();
    let chunks = par::map_chunks(&idx, 4096, |_, c| {
        c.iter()
            .map(|&i| {
                let t = i as f64 * step;
                let lo = (t - half_width).ceil().max(0.0) as usize;
                let hi = ((t + half_width).floor() as usize).min(x.len().saturating_sub(1));
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for (k, &xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
                    let d = t - k as f64;
                    let window = 0.5 + 0.5 * (PI * d / half_width).cos();
                    let w = cutoff * sinc(cutoff * d) * window;
                    acc += w * xk as f64;
                    wsum += w;
                }
                if wsum.abs() > 1e-12 {
                    (acc / wsum) as f32
                } else {
                    0.0
                }
            })
            .collect::<Vec<f32>>()
    });
    AudioClip::new(chunks.concat(), target_hz)
}
