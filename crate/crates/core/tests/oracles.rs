mod common;

use melrvq_core::dsp::{load_wav, mel_spectrogram, BinStats, DspConfig, MelSpectrogram};
use melrvq_core::rvq::{quantize_step, read_checkpoint, write_checkpoint, QuantizeMode, RvqDims, Source};
use melrvq_core::ssl::{extract_latents, mlm_loss, MaskNoise, ModelConfig, SslToyModel};
use melrvq_core::synth::sine_clip;
use melrvq_core::train::{freeze_random, train, InitKind, TrainConfig};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use common::*;

fn fixture_spec() -> MelSpectrogram {
    let clip = load_wav(fixture("sine440.wav")).unwrap();
    mel_spectrogram(&clip, &DspConfig::default()).unwrap()
}

#[test]
fn fixture_matches_its_generator() {
    let clip = load_wav(fixture("sine440.wav")).unwrap();
    assert_eq!(clip.sample_rate_hz(), 24_000);
    assert_eq!(clip.len(), 48_000);
    let peak = clip.samples().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    assert!((peak - 0.8).abs() < 1e-3, "peak {peak}");
    // 16-bit storage: every sample within one quantization step of the source.
    let source = sine_clip(440.0, 0.8, 2.0, 24_000);
    for (a, b) in clip.samples().iter().zip(source.samples()) {
        assert!((a - b).abs() <= 1.0 / 32768.0);
    }
}

fn desk_rvq(seed: u64) -> melrvq_core::rvq::MelRvq {
    // A small corpus of synthesized music plus the fixture, so the fixture
    // frames are inside the standardization range.
    let cfg = DspConfig::default();
    let mut frames = Vec::new();
    for i in 0..4 {
        let clip = melrvq_core::synth::synth_clip(100 + i, 8.0, 24_000);
        frames.push(mel_spectrogram(&clip, &cfg).unwrap().into_frames());
    }
    frames.push(fixture_spec().into_frames());
    let all = melrvq_core::train::stack_frames(frames.iter().map(|f| f.view())).unwrap();
    let tc = TrainConfig { steps: 200, batch_size: 64, seed, ..TrainConfig::default() };
    let dims = RvqDims { stages: 4, codebook_size: 64, code_dim: 16, input_dim: 128 };
    train(all.view(), &tc, dims, Source::Mel).unwrap().0
}

#[test]
fn encode_is_composed_quantize_steps() {
    let rvq = desk_rvq(1);
    let spec = fixture_spec();
    let toks = rvq.encode(&spec).unwrap();
    let x = rvq.standardize(spec.frames()).unwrap();
    for (t, row) in x.rows().into_iter().enumerate() {
        let mut r = row.to_owned();
        for (n, stage) in rvq.stages().iter().enumerate() {
            let out = quantize_step(stage, r.view(), QuantizeMode::Strict).unwrap();
            assert_eq!(out.tau as u32, toks.tokens()[[t, n]]);
            r = out.next_residual;
        }
    }
}

#[test]
fn reloaded_checkpoint_tokenizes_identically() {
    let rvq = desk_rvq(2);
    let bytes = write_checkpoint(&rvq);
    let back = read_checkpoint(&bytes).unwrap();
    let spec = fixture_spec();
    assert_eq!(rvq.encode(&spec).unwrap(), back.encode(&spec).unwrap());
}

#[test]
fn seeds_change_tokens_and_frozen_seeds_do_not() {
    let spec = fixture_spec();
    let a = desk_rvq(3).encode(&spec).unwrap();
    let b = desk_rvq(4).encode(&spec).unwrap();
    assert_ne!(a.tokens(), b.tokens());

    let stats = BinStats::from_frames(spec.frames()).unwrap();
    let dims = RvqDims { stages: 4, codebook_size: 64, code_dim: 16, input_dim: 128 };
    let f1 = freeze_random(dims, 9).unwrap().with_input_stats(stats.clone()).unwrap();
    let f2 = freeze_random(dims, 9).unwrap().with_input_stats(stats).unwrap();
    assert_eq!(f1.encode(&spec).unwrap(), f2.encode(&spec).unwrap());
}

/// Two clusters 10 standard deviations apart: one code cannot separate
/// them, two can.
#[test]
fn two_clusters_need_two_codes() {
    let m = 8;
    let mut r = rng(55);
    let mut centre = vec![0.0; m];
    centre[0] = 5.0;
    let draw = |r: &mut rand_chacha::ChaCha8Rng, n: usize| {
        Array2::from_shape_fn((n, m), |(i, j)| {
            let z: f64 = StandardNormal.sample(r);
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            sign * centre[j] + 0.5 * z
        })
    };
    let train_x = draw(&mut r, 400);
    let held = draw(&mut r, 200);
    let mse = |k: usize| {
        let tc = TrainConfig {
            steps: 400,
            batch_size: 64,
            learning_rate: 1e-2,
            seed: 3,
            init: InitKind::KmeansSample,
            ..TrainConfig::default()
        };
        let dims = RvqDims { stages: 1, codebook_size: k, code_dim: 2, input_dim: m };
        let (rvq, _) = train(train_x.view(), &tc, dims, Source::Mel).unwrap();
        let spec = MelSpectrogram::new(held.clone(), 25.0).unwrap();
        let rec = rvq.decode(&rvq.encode(&spec).unwrap()).unwrap();
        (&rec.frames() - &held).mapv(|v| v * v).mean().unwrap()
    };
    let (one, two) = (mse(1), mse(2));
    assert!(two < one, "K=2 mse {two} vs K=1 mse {one}");
}

// ---------------------------------------------------------------------------
// Straight-line transformer forward

struct Cursor<'a> {
    p: &'a [f64],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Vec<f64> {
        let v = self.p[self.at..self.at + n].to_vec();
        self.at += n;
        v
    }

    /// Row-major `rows x cols` matrix.
    fn mat(&mut self, rows: usize, cols: usize) -> Vec<Vec<f64>> {
        (0..rows).map(|_| self.take(cols)).collect()
    }
}

fn affine(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter().zip(b).map(|(row, bi)| bi + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).collect()
}

fn norm_row(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter().zip(g).zip(b).map(|((v, gi), bi)| (v - mean) / (var + 1e-5).sqrt() * gi + bi).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Returns logits `[t][head][k]` and the per-layer activations.
fn reference_forward(model: &SslToyModel, x: &[Vec<f64>]) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>) {
    let cfg = model.config();
    let (m, d, ff, heads) = (model.input_dim(), cfg.d_model, cfg.ff_dim, cfg.attn_heads);
    let (n, k) = (model.num_heads(), model.codebook_size());
    let t = x.len();
    let dk = d / heads;
    let mut c = Cursor { p: model.params(), at: 0 };
    let in_w = c.mat(d, m);
    let in_b = c.take(d);
    let mut h: Vec<Vec<f64>> = x.iter().map(|row| affine(&in_w, &in_b, row)).collect();
    let mut layers = vec![h.clone()];
    for _ in 0..cfg.layers {
        let (g1, b1) = (c.take(d), c.take(d));
        let (wqkv, bqkv) = (c.mat(3 * d, d), c.take(3 * d));
        let (wo, bo) = (c.mat(d, d), c.take(d));
        let (g2, b2) = (c.take(d), c.take(d));
        let (w1, bb1) = (c.mat(ff, d), c.take(ff));
        let (w2, bb2) = (c.mat(d, ff), c.take(d));

        let qkv: Vec<Vec<f64>> = h.iter().map(|row| affine(&wqkv, &bqkv, &norm_row(row, &g1, &b1))).collect();
        let mut attn = vec![vec![0.0; d]; t];
        for hh in 0..heads {
            let slope = 2f64.powf(-8.0 * (hh + 1) as f64 / heads as f64);
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        let dot: f64 = (0..dk).map(|e| qkv[i][hh * dk + e] * qkv[j][d + hh * dk + e]).sum();
                        dot / (dk as f64).sqrt() - slope * (i as f64 - j as f64).abs()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = w.iter().sum();
                for e in 0..dk {
                    attn[i][hh * dk + e] = (0..t).map(|j| w[j] / z * qkv[j][2 * d + hh * dk + e]).sum();
                }
            }
        }
        for i in 0..t {
            let o = affine(&wo, &bo, &attn[i]);
            let mid: Vec<f64> = h[i].iter().zip(&o).map(|(a, b)| a + b).collect();
            let u: Vec<f64> = affine(&w1, &bb1, &norm_row(&mid, &g2, &b2)).into_iter().map(gelu).collect();
            let f = affine(&w2, &bb2, &u);
            h[i] = mid.iter().zip(&f).map(|(a, b)| a + b).collect();
        }
        layers.push(h.clone());
    }
    let (gf, bf) = (c.take(d), c.take(d));
    let head_w: Vec<Vec<Vec<f64>>> = (0..n).map(|_| c.mat(k, d)).collect();
    let head_b: Vec<Vec<f64>> = (0..n).map(|_| c.take(k)).collect();
    let logits = h
        .iter()
        .map(|row| {
            let y = norm_row(row, &gf, &bf);
            (0..n).map(|j| affine(&head_w[j], &head_b[j], &y)).collect()
        })
        .collect();
    (logits, layers)
}

#[test]
fn forward_matches_straight_line_reference() {
    let mut r = rng(16);
    let cfg = ModelConfig { d_model: 12, layers: 2, attn_heads: 3, ff_dim: 20 };
    let m = 7;
    let stats = BinStats { mean: vec![0.3; m], std: vec![1.7; m] };
    let mut model = SslToyModel::new(cfg, 2, 9, MaskNoise::Gaussian, stats, 5).unwrap();
    // Nonzero biases and norm gains so every parameter matters.
    for i in 0..model.num_params() {
        if model.params()[i] == 0.0 || model.params()[i] == 1.0 {
            model = model.with_param(i, model.params()[i] + r.random_range(-0.3..0.3));
        }
    }
    let raw = gaussian(&mut r, 16, m, 2.0);
    let (logits, lat) = model.forward(raw.view()).unwrap();
    let x = to_rows(&model.standardize(raw.view()).unwrap());
    let (ref_logits, ref_layers) = reference_forward(&model, &x);
    let mut worst: f64 = 0.0;
    for t in 0..16 {
        for j in 0..2 {
            for c in 0..9 {
                worst = worst.max((logits[[t, j, c]] - ref_logits[t][j][c]).abs());
            }
        }
    }
    for (l, layer) in ref_layers.iter().enumerate() {
        let got = lat.layer(l).unwrap();
        for (t, row) in layer.iter().enumerate() {
            for (e, v) in row.iter().enumerate() {
                worst = worst.max((got[[t, e]] - v).abs());
            }
        }
    }
    assert!(worst <= 1e-5, "max deviation {worst}");
}

#[test]
fn mlm_loss_matches_softmax_cross_entropy() {
    let mut r = rng(77);
    for _ in 0..20 {
        let (t, n, k) = (r.random_range(1..30), r.random_range(1..5), r.random_range(2..40));
        let logits = Array3::from_shape_fn((t, n, k), |_| r.random_range(-6.0f64..6.0));
        let targets = Array2::from_shape_fn((t, n), |_| r.random_range(0..k as u32));
        let mut mask: Vec<bool> = (0..t).map(|_| r.random_bool(0.5)).collect();
        mask[0] = true;
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            for j in 0..n {
                let z: f64 = (0..k).map(|c| logits[[i, j, c]].exp()).sum();
                total -= (logits[[i, j, targets[[i, j]] as usize]].exp() / z).ln();
                count += 1.0;
            }
        }
        let got = mlm_loss(logits.view(), targets.view(), &mask).unwrap();
        assert!((got - total / count).abs() <= 1e-8, "{got} vs {}", total / count);
    }
}

#[test]
fn unmasked_frames_do_not_move_a_pointwise_loss() {
    let mut r = rng(8);
    let cfg = ModelConfig { d_model: 8, layers: 0, attn_heads: 2, ff_dim: 8 };
    let model = SslToyModel::new(cfg, 2, 6, MaskNoise::Gaussian, BinStats::identity(5), 1).unwrap();
    let x = gaussian(&mut r, 12, 5, 1.0);
    let targets = Array2::from_shape_fn((12, 2), |_| r.random_range(0..6u32));
    let mask: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
    let loss = |x: &Array2<f64>| {
        let (lg, _) = model.forward_standardized(x.view(), Some(&mask)).unwrap();
        mlm_loss(lg.view(), targets.view(), &mask).unwrap()
    };
    let base = loss(&x);
    let mut y = x.clone();
    for (i, mut row) in y.rows_mut().into_iter().enumerate() {
        if !mask[i] {
            row.mapv_inplace(|v| v * 3.0 - 1.0);
        }
    }
    assert_eq!(loss(&y), base);
}

#[test]
fn latents_concatenate_and_match_forward() {
    let mut r = rng(9);
    let cfg = ModelConfig { d_model: 8, layers: 2, attn_heads: 2, ff_dim: 8 };
    let model = SslToyModel::new(cfg, 1, 4, MaskNoise::Gaussian, BinStats::identity(4), 2).unwrap();
    let clips: Vec<MelSpectrogram> = (0..2).map(|_| MelSpectrogram::new(gaussian(&mut r, 750, 4, 1.0), 25.0).unwrap()).collect();
    let lat = extract_latents(&model, &clips, 1).unwrap();
    assert_eq!(lat.dim(), (1500, 8));
    let (_, stack) = model.forward(clips[1].frames()).unwrap();
    assert_eq!(lat.slice(ndarray::s![750.., ..]), stack.layer(1).unwrap());
    assert!(extract_latents(&model, &clips, 3).is_err());
}
