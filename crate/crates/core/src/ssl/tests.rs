use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dsp::{BinStats, MelSpectrogram};
use crate::Error;

fn small(layers: usize, noise: MaskNoise, seed: u64) -> SslToyModel {
    let cfg = ModelConfig {
        d_model: 8,
        layers,
        attn_heads: 2,
        ff_dim: 12,
    };
    SslToyModel::new(cfg, 2, 5, noise, BinStats::identity(6), seed).unwrap()
}

fn random_frames(rng: &mut ChaCha8Rng, t: usize, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, m), |_| rng.random_range(-2.0..2.0))
}

#[test]
fn zero_heads_give_uniform_logits() {
    let mut model = small(2, MaskNoise::Gaussian, 1);
    model.zero_heads();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (logits, lat) = model.forward(random_frames(&mut rng, 9, 6).view()).unwrap();
    assert!(logits.iter().all(|&v| v == 0.0));
    assert_eq!(lat.len(), 3);
}

#[test]
fn pointwise_model_maps_equal_frames_to_equal_rows() {
    let model = small(0, MaskNoise::Gaussian, 2);
    let row: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 0.7).collect();
    let x = Array2::from_shape_fn((12, 6), |(_, j)| row[j]);
    let (logits, _) = model.forward(x.view()).unwrap();
    for t in 1..12 {
        assert_eq!(logits.index_axis(Axis(0), t), logits.index_axis(Axis(0), 0));
    }
}

#[test]
fn layer_zero_is_input_projection() {
    let model = small(2, MaskNoise::Gaussian, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_frames(&mut rng, 5, 6);
    let (_, lat) = model.forward(x.view()).unwrap();
    let p = model.params();
    let w = Array2::from_shape_vec((8, 6), p[..48].to_vec()).unwrap();
    let b = ndarray::Array1::from(p[48..56].to_vec());
    let want = x.dot(&w.t()) + &b;
    let got = lat.layer(0).unwrap();
    assert!(want.iter().zip(got.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    assert!(matches!(lat.layer(3), Err(Error::LayerRange { layer: 3, max: 2 })));
}

#[test]
fn heads_are_independent() {
    let model = small(2, MaskNoise::Gaussian, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_frames(&mut rng, 7, 6);
    let (a, _) = model.forward(x.view()).unwrap();
    let mut z = model.clone();
    z.zero_head(1);
    let (b, _) = z.forward(x.view()).unwrap();
    assert_eq!(a.index_axis(Axis(1), 0), b.index_axis(Axis(1), 0));
    assert!(b.index_axis(Axis(1), 1).iter().all(|&v| v == 0.0));
}

#[test]
fn head_init_does_not_depend_on_head_count() {
    let cfg = ModelConfig {
        d_model: 8,
        layers: 1,
        attn_heads: 2,
        ff_dim: 12,
    };
    let one = SslToyModel::new(cfg, 1, 5, MaskNoise::Gaussian, BinStats::identity(6), 9).unwrap();
    let four = SslToyModel::new(cfg, 4, 5, MaskNoise::Gaussian, BinStats::identity(6), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_frames(&mut rng, 6, 6);
    let (a, _) = one.forward(x.view()).unwrap();
    let (b, _) = four.forward(x.view()).unwrap();
    assert_eq!(a.index_axis(Axis(1), 0), b.index_axis(Axis(1), 0));
}

fn fd_check(noise: MaskNoise, layers: usize, seed: u64) {
    let model = small(layers, noise, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let x = random_frames(&mut rng, 7, 6);
    let targets = Array2::from_shape_fn((7, 2), |_| rng.random_range(0..5u32));
    let mask = vec![true, false, true, true, false, true, false];
    let (_, g) = mlm_gradient(&model, x.view(), targets.view(), &mask).unwrap();
    let loss = |m: &SslToyModel| {
        let (logits, _) = m.forward_standardized(x.view(), Some(&mask)).unwrap();
        mlm_loss(logits.view(), targets.view(), &mask).unwrap()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..model.num_params() {
        let v = model.params()[i];
        let fd = (loss(&model.with_param(i, v + h)) - loss(&model.with_param(i, v - h))) / (2.0 * h);
        let err = (fd - g[i]).abs() / (fd.abs() + g[i].abs()).max(1e-6);
        worst = worst.max(err);
        assert!(err < 1e-4 || (fd - g[i]).abs() < 1e-9, "param {i}: fd {fd} analytic {}", g[i]);
    }
    assert!(worst < 1e-4);
}

#[test]
fn backward_matches_finite_differences() {
    fd_check(MaskNoise::Gaussian, 2, 5);
}

#[test]
fn backward_matches_finite_differences_with_learned_mask() {
    fd_check(MaskNoise::LearnedEmbedding, 1, 6);
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let model = small(2, MaskNoise::LearnedEmbedding, 7);
    let bytes = write_model(&model);
    let back = read_model(&bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(write_model(&back), bytes);
    let mut bad = bytes.clone();
    bad[60] ^= 0x10;
    assert!(matches!(read_model(&bad), Err(Error::Checksum { .. })));
    assert!(matches!(read_model(&bytes[..bytes.len() - 9]), Err(Error::Truncated)));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(read_model(&magic), Err(Error::Magic { .. })));
}

fn toy_corpus(clips: usize, t: usize) -> Vec<MelSpectrogram> {
    (0..clips)
        .map(|c| {
            let frames = Array2::from_shape_fn((t, 6), |(i, j)| ((i / 5 + c) % 3) as f64 * (j as f64 + 1.0) + 0.1 * ((i * 7 + j * 3) % 5) as f64);
            MelSpectrogram::new(frames, 25.0).unwrap()
        })
        .collect()
}

#[test]
fn extract_latents_concatenates_clips() {
    let model = small(2, MaskNoise::Gaussian, 8);
    let corpus = toy_corpus(2, 30);
    let z = extract_latents(&model, &corpus, 1).unwrap();
    assert_eq!(z.dim(), (60, 8));
    let (_, lat) = model.forward(corpus[1].frames()).unwrap();
    assert_eq!(z.slice(ndarray::s![30.., ..]), lat.layer(1).unwrap());
    assert!(matches!(extract_latents(&model, &corpus, 3), Err(Error::LayerRange { .. })));
}

#[test]
fn pretrain_zero_steps_and_learning() {
    use crate::rvq::{RvqDims, Source};
    use crate::train::{train, TrainConfig};
    let corpus = toy_corpus(6, 60);
    let frames = crate::train::stack_frames(corpus.iter().map(|c| c.frames())).unwrap();
    let dims = RvqDims {
        stages: 2,
        codebook_size: 4,
        code_dim: 3,
        input_dim: 6,
    };
    let (rvq, _) = train(frames.view(), &TrainConfig { steps: 50, batch_size: 32, ..Default::default() }, dims, Source::Mel).unwrap();
    let tok = Tokenizer::Mel(&rvq);
    let mcfg = ModelConfig {
        d_model: 8,
        layers: 1,
        attn_heads: 2,
        ff_dim: 16,
    };
    let mask = MaskConfig { span_frames: 3, ..Default::default() };
    let zero = PretrainConfig {
        steps: 0,
        segment_frames: 30,
        ..Default::default()
    };
    let (m0, r0) = pretrain(&corpus, &tok, &mcfg, &mask, &zero).unwrap();
    assert!(r0.loss.is_empty());
    let stats = BinStats::from_frames(crate::train::stack_frames(corpus[..5].iter().map(|c| c.frames())).unwrap().view()).unwrap();
    assert_eq!(m0, SslToyModel::new(mcfg, 2, 4, MaskNoise::Gaussian, stats, 0).unwrap());

    let cfg = PretrainConfig {
        steps: 60,
        learning_rate: 1e-2,
        ..zero
    };
    let (_, r) = pretrain(&corpus, &tok, &mcfg, &mask, &cfg).unwrap();
    let head: f64 = r.loss[..5].iter().sum();
    let tail: f64 = r.loss[r.loss.len() - 5..].iter().sum();
    assert!(tail < head, "{head} -> {tail}");
    let h = r.heldout.unwrap();
    assert_eq!(h.accuracy.len(), 2);
    assert!(h.accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
}

#[test]
fn split_keeps_tail_out() {
    assert_eq!(split_corpus(10, 0.2), (0..8, 8..10));
    assert_eq!(split_corpus(1, 0.2), (0..1, 1..1));
    assert_eq!(split_corpus(3, 0.01), (0..2, 2..3));
    assert_eq!(split_corpus(5, 0.0), (0..5, 5..5));
}
