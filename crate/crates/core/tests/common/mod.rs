//! Helpers and independent reference implementations shared by the
//! integration tests. Oracles here work on plain `Vec<f64>` and avoid the
//! library's own helpers so a bug cannot cancel out.

#![allow(dead_code)]

use melrvq_core::dsp::BinStats;
use melrvq_core::rvq::{LossWeights, MelRvq, Source, StageParams};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sd: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        sd * z
    })
}

/// Quantizer with random geometry drawn from `rng`.
pub fn random_rvq(rng: &mut ChaCha8Rng, n: usize, k: usize, d: usize, m: usize, weights: LossWeights) -> MelRvq {
    let stages = (0..n)
        .map(|_| {
            let p = gaussian(rng, d, m, 1.0 / (m as f64).sqrt());
            let dec = gaussian(rng, m, d, 1.0 / (d as f64).sqrt());
            let q = gaussian(rng, k, d, 1.0);
            StageParams::new(p, dec, q).unwrap()
        })
        .collect();
    MelRvq::new(stages, weights, BinStats::identity(m), Source::Mel).unwrap()
}

pub fn random_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    (rng.random_range(1..=4), rng.random_range(2..=12), rng.random_range(2..=6), rng.random_range(3..=10))
}

pub fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the code whose direction is closest to `z`, by scanning every
/// code's normalized Euclidean distance. Lowest index wins ties.
pub fn nearest_exhaustive(z: &[f64], codebook: &[Vec<f64>]) -> usize {
    let uz = unit(z);
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, q) in codebook.iter().enumerate() {
        let d = sqdist(&unit(q), &uz);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[derive(Debug, Clone, Copy)]
pub struct ScalarLosses {
    pub code: f64,
    pub comm: f64,
    pub recon: f64,
    pub total: f64,
}

/// Direct transcription of the objective over standardized frames.
pub fn scalar_losses(rvq: &MelRvq, frames: &[Vec<f64>]) -> ScalarLosses {
    let w = rvq.weights();
    let stages: Vec<_> = rvq
        .stages()
        .iter()
        .map(|s| (to_rows(&s.projection().to_owned()), to_rows(&s.decoder().to_owned()), to_rows(&s.codebook().to_owned())))
        .collect();
    let (mut code, mut comm, mut recon) = (0.0, 0.0, 0.0);
    for x in frames {
        let mut r = x.clone();
        for (p, dec, q) in &stages {
            let z = matvec(p, &r);
            let tau = nearest_exhaustive(&z, q);
            let qt = &q[tau];
            let ang = sqdist(&unit(qt), &unit(&z));
            code += ang;
            comm += ang;
            let dq = matvec(dec, qt);
            recon += sqdist(&dq, &r);
            for (ri, di) in r.iter_mut().zip(&dq) {
                *ri -= di;
            }
        }
    }
    ScalarLosses {
        code,
        comm,
        recon,
        total: w.alpha * code + w.beta * comm + recon,
    }
}

/// Decoupled contrastive loss computed from its definition: for each row
/// (and then each column) of the similarity matrix, the negative log of the
/// positive's exponentiated score over the sum of the negatives' only.
pub fn dcl_brute_force(music: &[Vec<f64>], text: &[Vec<f64>], sigma: f64) -> f64 {
    let b = music.len();
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let mut m2t = 0.0;
    let mut t2m = 0.0;
    for i in 0..b {
        let pos_mt = (dot(&music[i], &text[i]) / sigma).exp();
        let neg_mt: f64 = (0..b).filter(|&j| j != i).map(|j| (dot(&music[i], &text[j]) / sigma).exp()).sum();
        m2t += -(pos_mt / neg_mt).ln();
        let neg_tm: f64 = (0..b).filter(|&j| j != i).map(|j| (dot(&music[j], &text[i]) / sigma).exp()).sum();
        t2m += -(pos_mt / neg_tm).ln();
    }
    0.5 * (m2t + t2m) / b as f64
}

/// Desk corpus shared by the slower suites: 40 synthesized 15 s clips.
pub fn desk_corpus_audio() -> Vec<melrvq_core::dsp::AudioClip> {
    melrvq_core::synth::synth_corpus(7, 40, 15.0, 24_000)
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}
