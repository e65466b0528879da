//! Deterministic synthetic music used as a bundled corpus.
//!
//! Each clip has a tempo, a key, two melodic voices with their own harmonic
//! timbre, a bass line, and a drum pattern, all drawn from a seeded RNG so a
//! `(seed, duration)` pair always renders the same samples.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::AudioClip;
use crate::seed::derive_seed;

const MAJOR: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR: [i32; 7] = [0, 2, 3, 5, 7, 8, 10];

/// Peak amplitude of every rendered clip.
pub const PEAK: f32 = 0.8;

fn midi_hz(note: i32) -> f64 {
    440.0 * 2f64.powf((note - 69) as f64 / 12.0)
}

struct Timbre {
    harmonics: Vec<f64>,
    attack_s: f64,
    decay_per_s: f64,
    vibrato_hz: f64,
    vibrato_depth: f64,
}

impl Timbre {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let rolloff = rng.random_range(0.6..2.2);
        let odd_only = rng.random_bool(0.3);
        let harmonics = (1..=10)
            .map(|h| {
                if odd_only && h % 2 == 0 {
                    0.0
                } else {
                    (h as f64).powf(-rolloff) * rng.random_range(0.5..1.0)
                }
            })
            .collect();
        Self {
            harmonics,
            attack_s: rng.random_range(0.005..0.06),
            decay_per_s: rng.random_range(0.5..6.0),
            vibrato_hz: rng.random_range(4.0..7.0),
            vibrato_depth: if rng.random_bool(0.4) { rng.random_range(0.002..0.008) } else { 0.0 },
        }
    }
}

fn add_note(out: &mut [f64], sr: f64, start_s: f64, dur_s: f64, hz: f64, gain: f64, t: &Timbre) {
    let start = (start_s * sr) as usize;
    let len = ((dur_s + 0.05) * sr) as usize;
    let nyquist = sr / 2.0;
    let release_s = 0.04;
    let mut phase = 0.0;
    for i in 0..len {
        let idx = start + i;
        if idx >= out.len() {
            break;
        }
        let ts = i as f64 / sr;
        let env_a = (ts / t.attack_s).min(1.0);
        let env_r = if ts > dur_s { (1.0 - (ts - dur_s) / release_s).max(0.0) } else { 1.0 };
        let env = env_a * env_r * (-t.decay_per_s * ts).exp();
        let f = hz * (1.0 + t.vibrato_depth * (2.0 * PI * t.vibrato_hz * ts).sin());
        phase = (phase + 2.0 * PI * f / sr) % (2.0 * PI);
        // sin((h+1)p) = 2 cos(p) sin(hp) - sin((h-1)p)
        let (s1, c1) = phase.sin_cos();
        let (mut prev, mut cur) = (0.0, s1);
        let mut s = 0.0;
        for (h, &a) in t.harmonics.iter().enumerate() {
            if f * (h + 1) as f64 >= nyquist {
                break;
            }
            s += a * cur;
            let next = 2.0 * c1 * cur - prev;
            prev = cur;
            cur = next;
        }
        out[idx] += gain * env * s;
    }
}

fn add_kick(out: &mut [f64], sr: f64, start_s: f64, gain: f64) {
    let start = (start_s * sr) as usize;
    let mut phase = 0.0;
    for i in 0..(0.25 * sr) as usize {
        let idx = start + i;
        if idx >= out.len() {
            break;
        }
        let ts = i as f64 / sr;
        let f = 50.0 + 90.0 * (-ts * 30.0).exp();
        phase += 2.0 * PI * f / sr;
        out[idx] += gain * (-ts * 14.0).exp() * phase.sin();
    }
}

fn add_noise_hit(out: &mut [f64], sr: f64, start_s: f64, gain: f64, decay: f64, bright: bool, rng: &mut ChaCha8Rng) {
    let start = (start_s * sr) as usize;
    let mut prev = 0.0;
    for i in 0..(0.2 * sr) as usize {
        let idx = start + i;
        if idx >= out.len() {
            break;
        }
        let ts = i as f64 / sr;
        let w: f64 = rng.random_range(-1.0..1.0);
        // First difference brightens, a one-pole average darkens.
        let s = if bright { w - prev } else { 0.5 * (w + prev) };
        prev = w;
        out[idx] += gain * (-ts * decay).exp() * s;
    }
}

/// Render one clip.
pub fn synth_clip(seed: u64, duration_s: f64, sample_rate_hz: u32) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate_hz as f64;
    let n = (duration_s * sr).round() as usize;
    let mut out = vec![0.0f64; n];

    let bpm: f64 = rng.random_range(80.0..140.0);
    let beat = 60.0 / bpm;
    let root = rng.random_range(45..58);
    let scale = if rng.random_bool(0.5) { MAJOR } else { MINOR };
    let degree = |d: i32| -> i32 {
        let oct = d.div_euclid(7);
        root + 12 * oct + scale[d.rem_euclid(7) as usize]
    };
    let lead = Timbre::random(&mut rng);
    let pad = Timbre::random(&mut rng);
    let bass = Timbre {
        harmonics: vec![1.0, 0.5, 0.25, 0.1],
        attack_s: 0.01,
        decay_per_s: 1.5,
        vibrato_hz: 5.0,
        vibrato_depth: 0.0,
    };
    let progression: Vec<i32> = (0..4).map(|_| [0, 3, 4, 5, 1][rng.random_range(0..5)]).collect();
    let drums = rng.random_bool(0.8);

    let bar = 4.0 * beat;
    let mut bar_idx = 0usize;
    let mut t0 = 0.0;
    while t0 < duration_s {
        let chord = progression[bar_idx % progression.len()];
        // Pad chord: triad held for the bar.
        for d in [0, 2, 4] {
            add_note(&mut out, sr, t0, bar, midi_hz(degree(chord + d) + 12), 0.12, &pad);
        }
        // Bass on beats 1 and 3.
        for b in [0.0, 2.0] {
            add_note(&mut out, sr, t0 + b * beat, 2.0 * beat, midi_hz(degree(chord) - 12), 0.35, &bass);
        }
        // Lead: random walk over the scale, durations of 1/2, 1 or 2 beats.
        let mut pos = 0.0;
        let mut step = chord + 7;
        while pos < 4.0 {
            let dur = [0.5, 1.0, 1.0, 2.0][rng.random_range(0..4)];
            let dur = f64::min(dur, 4.0 - pos);
            step += rng.random_range(-2..=2);
            step = step.clamp(3, 16);
            if rng.random_bool(0.85) {
                add_note(&mut out, sr, t0 + pos * beat, dur * beat, midi_hz(degree(step) + 12), 0.25, &lead);
            }
            pos += dur;
        }
        if drums {
            for b in 0..4 {
                let tb = t0 + b as f64 * beat;
                if b % 2 == 0 {
                    add_kick(&mut out, sr, tb, 0.6);
                } else {
                    add_noise_hit(&mut out, sr, tb, 0.25, 18.0, false, &mut rng);
                }
                add_noise_hit(&mut out, sr, tb + 0.5 * beat, 0.08, 40.0, true, &mut rng);
            }
        }
        t0 += bar;
        bar_idx += 1;
    }

    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { PEAK as f64 / peak } else { 0.0 };
    AudioClip::new(out.into_iter().map(|v| (v * scale) as f32).collect(), sample_rate_hz)
        .expect("synthesized samples are finite")
}

/// Render `n_clips` clips, clip `i` seeded from `(seed, i)`.
pub fn synth_corpus(seed: u64, n_clips: usize, duration_s: f64, sample_rate_hz: u32) -> Vec<AudioClip> {
    crate::par::map_range(n_clips, |i| {
        synth_clip(derive_seed(seed, &format!("clip/{i}")), duration_s, sample_rate_hz)
    })
}

/// A pure sine, used for DSP fixtures.
pub fn sine_clip(hz: f64, amplitude: f64, duration_s: f64, sample_rate_hz: u32) -> AudioClip {
    let sr = sample_rate_hz as f64;
    let n = (duration_s * sr).round() as usize;
    AudioClip::new(
        (0..n).map(|i| (amplitude * (2.0 * PI * hz * i as f64 / sr).sin()) as f32).collect(),
        sample_rate_hz,
    )
    .expect("finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_normalized() {
        let a = synth_clip(7, 3.0, 24_000);
        let b = synth_clip(7, 3.0, 24_000);
        assert_eq!(a, b);
        assert_eq!(a.len(), 72_000);
        let peak = a.samples().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!((peak - PEAK).abs() < 1e-6);
        assert_ne!(a, synth_clip(8, 3.0, 24_000));
    }
}
