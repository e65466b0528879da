use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_and_grad, predictions};
use super::mask::{fill_noise, sample_mask, MaskConfig, MaskNoise};
use super::model::{ModelConfig, SslToyModel};
use crate::dsp::{BinStats, MelSpectrogram};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::par;
use crate::rvq::{MelRvq, QuantizeMode, RvqDims, Source};
use crate::seed::derive_seed;
use crate::train::{stack_frames, train, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Segments per step.
    pub batch_size: usize,
    pub segment_frames: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Trailing share of the corpus (in clips) kept out of training.
    pub holdout_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 8,
            segment_frames: 100,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            seed: 0,
            holdout_fraction: 0.2,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.segment_frames == 0 {
            return Err(Error::Config("batch_size and segment_frames must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Split `n` clips into leading training and trailing held-out ranges.
pub fn split_corpus(n: usize, holdout_fraction: f64) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    if n < 2 || holdout_fraction <= 0.0 {
        return (0..n, n..n);
    }
    let held = ((holdout_fraction * n as f64).round() as usize).clamp(1, n - 1);
    (0..n - held, n - held..n)
}

/// Where targets come from.
#[derive(Debug, Clone, Copy)]
pub enum Tokenizer<'a> {
    /// Quantize the mel frames directly.
    Mel(&'a MelRvq),
    /// Quantize layer `layer` of a trained teacher's latents.
    Latent {
        rvq: &'a MelRvq,
        teacher: &'a SslToyModel,
        layer: usize,
    },
}

impl Tokenizer<'_> {
    pub fn rvq(&self) -> &MelRvq {
        match self {
            Tokenizer::Mel(r) => r,
            Tokenizer::Latent { rvq, .. } => rvq,
        }
    }

    fn check(&self, mel_bins: usize) -> Result<()> {
        match *self {
            Tokenizer::Mel(r) => {
                if r.source() != Source::Mel {
                    return Err(Error::Config("mel targets need a mel-source quantizer".into()));
                }
                if r.dims().input_dim != mel_bins {
                    return Err(Error::Shape(format!("quantizer expects {} bins, corpus has {mel_bins}", r.dims().input_dim)));
                }
            }
            Tokenizer::Latent { rvq, teacher, layer } => {
                if rvq.source() != Source::Latent {
                    return Err(Error::Config("latent targets need a latent-source quantizer".into()));
                }
                if rvq.dims().input_dim != teacher.config().d_model {
                    return Err(Error::Shape("quantizer width differs from teacher width".into()));
                }
                if layer > teacher.config().layers {
                    return Err(Error::LayerRange { layer, max: teacher.config().layers });
                }
                if teacher.input_dim() != mel_bins {
                    return Err(Error::Shape("teacher input width differs from corpus".into()));
                }
            }
        }
        Ok(())
    }

    /// Target tokens `(T, N)` for one raw spectrogram.
    pub fn tokens(&self, spec: &MelSpectrogram) -> Result<Array2<u32>> {
        match *self {
            Tokenizer::Mel(r) => r.encode_standardized(r.standardize(spec.frames())?.view(), QuantizeMode::Training),
            Tokenizer::Latent { rvq, teacher, layer } => {
                let (_, lat) = teacher.forward(spec.frames())?;
                let z = lat.into_layer(layer)?;
                rvq.encode_standardized(rvq.standardize(z.view())?.view(), QuantizeMode::Training)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutMetrics {
    /// Top-1 accuracy on masked frames, per head.
    pub accuracy: Vec<f64>,
    /// Accuracy of always predicting the most frequent training token.
    pub majority_accuracy: Vec<f64>,
    pub loss: f64,
    pub masked_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub loss: Vec<f64>,
    pub heldout: Option<HeldoutMetrics>,
    pub chance: f64,
    pub heads: usize,
    pub codebook_size: usize,
    pub train_clips: usize,
    pub heldout_clips: usize,
    pub wall_clock_s: f64,
}

impl PretrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.loss.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }
}

struct Item {
    x: Array2<f64>,
    targets: Array2<u32>,
    mask: Vec<bool>,
}

fn make_item(x: ArrayView2<'_, f64>, targets: ArrayView2<'_, u32>, mask_cfg: &MaskConfig, rng: &mut ChaCha8Rng) -> Item {
    let mask = sample_mask(x.nrows(), mask_cfg.mask_prob, mask_cfg.span_frames, rng);
    let mut x = x.to_owned();
    if mask_cfg.noise == MaskNoise::Gaussian {
        fill_noise(x.view_mut(), &mask, rng);
    }
    Item {
        x,
        targets: targets.to_owned(),
        mask,
    }
}

fn most_frequent(targets: &[Array2<u32>], heads: usize, k: usize) -> Vec<u32> {
    (0..heads)
        .map(|j| {
            let mut h = vec![0usize; k];
            for t in targets {
                for &v in t.column(j) {
                    h[v as usize] += 1;
                }
            }
            (0..k).max_by_key(|&c| (h[c], std::cmp::Reverse(c))).unwrap_or(0) as u32
        })
        .collect()
}

/// Held-out masked-token metrics over consecutive segments of each clip.
/// Masks come from `mask_cfg.seed`, so models evaluated with the same mask
/// configuration see identical masks.
pub fn evaluate(model: &SslToyModel, inputs: &[Array2<f64>], targets: &[Array2<u32>], mask_cfg: &MaskConfig, segment: usize, majority: &[u32]) -> Result<HeldoutMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(mask_cfg.seed, "ssl/eval-mask"));
    let mut items = Vec::new();
    for (x, tg) in inputs.iter().zip(targets) {
        let mut at = 0;
        while at < x.nrows() {
            let end = (at + segment).min(x.nrows());
            items.push(make_item(x.slice(s![at..end, ..]), tg.slice(s![at..end, ..]), mask_cfg, &mut rng));
            at = end;
        }
    }
    let n = model.num_heads();
    let per = par::map(&items, |it| -> Result<(Vec<usize>, Vec<usize>, f64, usize)> {
        let (logits, _) = model.forward_standardized(it.x.view(), Some(&it.mask))?;
        let (loss, _) = loss_and_grad(logits.view(), it.targets.view(), &it.mask, None)?;
        let pred = predictions(logits.view());
        let mut hits = vec![0; n];
        let mut maj = vec![0; n];
        let mut count = 0;
        for (t, &m) in it.mask.iter().enumerate() {
            if m {
                count += 1;
                for j in 0..n {
                    hits[j] += (pred[[t, j]] == it.targets[[t, j]]) as usize;
                    maj[j] += (majority[j] == it.targets[[t, j]]) as usize;
                }
            }
        }
        Ok((hits, maj, loss, count))
    });
    let mut hits = vec![0usize; n];
    let mut maj = vec![0usize; n];
    let mut loss = 0.0;
    let mut count = 0;
    for r in per {
        let (h, m, l, c) = r?;
        hits.iter_mut().zip(&h).for_each(|(a, b)| *a += b);
        maj.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
        loss += l;
        count += c;
    }
    if count == 0 {
        return Err(Error::NoMaskedFrames);
    }
    Ok(HeldoutMetrics {
        accuracy: hits.iter().map(|&h| h as f64 / count as f64).collect(),
        majority_accuracy: maj.iter().map(|&h| h as f64 / count as f64).collect(),
        loss: loss / (count * n) as f64,
        masked_frames: count,
    })
}

/// Train a fresh model to predict `tokenizer` targets at masked frames of
/// `corpus` (raw spectrograms).
pub fn pretrain(corpus: &[MelSpectrogram], tokenizer: &Tokenizer<'_>, model_cfg: &ModelConfig, mask_cfg: &MaskConfig, cfg: &PretrainConfig) -> Result<(SslToyModel, PretrainReport)> {
    let started = Instant::now();
    cfg.validate()?;
    mask_cfg.validate()?;
    model_cfg.validate()?;
    let first = corpus.first().ok_or(Error::Empty("corpus"))?;
    tokenizer.check(first.mel_bins())?;
    let (train_idx, held_idx) = split_corpus(corpus.len(), cfg.holdout_fraction);
    let stats = BinStats::from_frames(stack_frames(corpus[train_idx.clone()].iter().map(|c| c.frames()))?.view())?;
    let targets = par::map(corpus, |c| tokenizer.tokens(c)).into_iter().collect::<Result<Vec<_>>>()?;
    let dims = tokenizer.rvq().dims();
    let (n, k) = (dims.stages, dims.codebook_size);
    let mut model = SslToyModel::new(*model_cfg, n, k, mask_cfg.noise, stats, cfg.seed)?;
    // Standardize with the model's stored (rounded) statistics.
    let inputs: Vec<Array2<f64>> = corpus.iter().map(|c| model.input_stats().standardize(c.frames())).collect();

    let mut loss_series = Vec::with_capacity(cfg.steps);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "ssl/batches"));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(mask_cfg.seed, "ssl/mask"));
    let train_clips: Vec<usize> = train_idx.clone().collect();
    for step in 0..cfg.steps {
        let items: Vec<Item> = (0..cfg.batch_size)
            .map(|_| {
                let c = train_clips[batch_rng.random_range(0..train_clips.len())];
                let t = inputs[c].nrows();
                let len = cfg.segment_frames.min(t);
                let start = batch_rng.random_range(0..=t - len);
                make_item(inputs[c].slice(s![start..start + len, ..]), targets[c].slice(s![start..start + len, ..]), mask_cfg, &mut mask_rng)
            })
            .collect();
        let total: usize = items.iter().map(|it| it.mask.iter().filter(|&&b| b).count()).sum();
        if total == 0 {
            return Err(Error::NoMaskedFrames);
        }
        let scale = 1.0 / (total * n) as f64;
        let parts = par::map(&items, |it| -> Result<(f64, Vec<f64>)> {
            let (logits, cache) = model.forward_cached(it.x.view(), Some(&it.mask))?;
            let (sum, dl) = loss_and_grad(logits.view(), it.targets.view(), &it.mask, Some(scale))?;
            let mut g = vec![0.0; model.num_params()];
            model.backward(&cache, dl.expect("requested").view(), &mut g);
            Ok((sum * scale, g))
        });
        let mut grad = vec![0.0; model.num_params()];
        let mut loss = 0.0;
        for part in parts {
            let (l, g) = part?;
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, what: "non-finite masked-prediction loss".into() });
        }
        opt.begin_step();
        opt.update(0, model.params_mut(), &grad);
        loss_series.push(loss);
    }
    model.round_to_f32();

    let heldout = if held_idx.is_empty() {
        None
    } else {
        let majority = most_frequent(&targets[train_idx.clone()], n, k);
        Some(evaluate(&model, &inputs[held_idx.clone()], &targets[held_idx.clone()], mask_cfg, cfg.segment_frames, &majority)?)
    };
    let report = PretrainReport {
        loss: loss_series,
        heldout,
        chance: 1.0 / k as f64,
        heads: n,
        codebook_size: k,
        train_clips: train_idx.len(),
        heldout_clips: held_idx.len(),
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Layer-`layer` latents of every clip, concatenated in corpus order.
pub fn extract_latents(model: &SslToyModel, corpus: &[MelSpectrogram], layer: usize) -> Result<Array2<f64>> {
    let max = model.config().layers;
    if layer > max {
        return Err(Error::LayerRange { layer, max });
    }
    let parts = par::map(corpus, |c| -> Result<Array2<f64>> {
        let (_, lat) = model.forward(c.frames())?;
        lat.into_layer(layer)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    stack_frames(parts.iter().map(|p| p.view()))
}

/// One row of the per-layer latent table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: usize,
    pub mean_norm: f64,
    /// Mean cosine between consecutive frames.
    pub adjacent_cosine: f64,
    /// Nearest-centroid accuracy on held-out frames against head-1 targets,
    /// centroids fit on training frames.
    pub centroid_acc_head1: f64,
}

pub fn layer_table(model: &SslToyModel, corpus: &[MelSpectrogram], tokenizer: &Tokenizer<'_>, holdout_fraction: f64) -> Result<Vec<LayerRow>> {
    let (train_idx, held_idx) = split_corpus(corpus.len(), holdout_fraction);
    if held_idx.is_empty() {
        return Err(Error::Config("layer table needs held-out clips".into()));
    }
    let k = tokenizer.rvq().dims().codebook_size;
    let stacks = par::map(corpus, |c| model.forward(c.frames()).map(|(_, l)| l)).into_iter().collect::<Result<Vec<_>>>()?;
    let targets = par::map(corpus, |c| tokenizer.tokens(c)).into_iter().collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for layer in 0..=model.config().layers {
        let d = model.config().d_model;
        let (mut norm_sum, mut frames) = (0.0, 0usize);
        let (mut cos_sum, mut pairs) = (0.0, 0usize);
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (ci, st) in stacks.iter().enumerate() {
            let z = st.layer(layer)?;
            for (t, row) in z.rows().into_iter().enumerate() {
                let nr = row.dot(&row).sqrt();
                norm_sum += nr;
                frames += 1;
                if t + 1 < z.nrows() {
                    let next = z.row(t + 1);
                    let denom = nr * next.dot(&next).sqrt();
                    if denom > 0.0 {
                        cos_sum += row.dot(&next) / denom;
                        pairs += 1;
                    }
                }
                if train_idx.contains(&ci) {
                    let c = targets[ci][[t, 0]] as usize;
                    sums.row_mut(c).scaled_add(1.0, &row);
                    counts[c] += 1;
                }
            }
        }
        let used: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
        for &c in &used {
            let inv = 1.0 / counts[c] as f64;
            sums.row_mut(c).mapv_inplace(|v| v * inv);
        }
        let (mut hit, mut total) = (0usize, 0usize);
        for ci in held_idx.clone() {
            let z = stacks[ci].layer(layer)?;
            for (t, row) in z.rows().into_iter().enumerate() {
                let best = used
                    .iter()
                    .copied()
                    .min_by(|&a, &b| {
                        let da = (&sums.row(a) - &row).mapv(|v| v * v).sum();
                        let db = (&sums.row(b) - &row).mapv(|v| v * v).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap_or(0);
                hit += (best == targets[ci][[t, 0]] as usize) as usize;
                total += 1;
            }
        }
        rows.push(LayerRow {
            layer,
            mean_norm: norm_sum / frames.max(1) as f64,
            adjacent_cosine: cos_sum / pairs.max(1) as f64,
            centroid_acc_head1: hit as f64 / total.max(1) as f64,
        });
    }
    Ok(rows)
}

pub fn layer_table_csv(rows: &[LayerRow]) -> String {
    let mut s = String::from("layer,mean_norm,adjacent_cosine,centroid_acc_head1\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.layer, r.mean_norm, r.adjacent_cosine, r.centroid_acc_head1));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterateConfig {
    /// Teacher layer to quantize; defaults to one below the top.
    pub layer: Option<usize>,
    /// `input_dim` is replaced by the teacher width.
    pub rvq_dims: RvqDims,
    pub rvq_train: TrainConfig,
    pub model: ModelConfig,
    pub mask: MaskConfig,
    pub pretrain: PretrainConfig,
}

impl Default for IterateConfig {
    fn default() -> Self {
        Self {
            layer: None,
            rvq_dims: RvqDims::default(),
            rvq_train: TrainConfig::default(),
            model: ModelConfig::default(),
            mask: MaskConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IterateOutput {
    pub layer: usize,
    pub rvq: MelRvq,
    pub rvq_report: TrainReport,
    /// Codebook utilization of the new quantizer on held-out latents.
    pub heldout_utilization: Vec<f64>,
    pub model: SslToyModel,
    pub report: PretrainReport,
}

/// Second stage: quantize a trained model's latents, then pretrain a fresh
/// model on the resulting tokens.
pub fn iterate(corpus: &[MelSpectrogram], teacher: &SslToyModel, cfg: &IterateConfig) -> Result<IterateOutput> {
    let layer = cfg.layer.unwrap_or(teacher.config().layers.saturating_sub(1));
    let (train_idx, held_idx) = split_corpus(corpus.len(), cfg.pretrain.holdout_fraction);
    let latents = extract_latents(teacher, &corpus[train_idx], layer)?;
    let dims = RvqDims {
        input_dim: teacher.config().d_model,
        ..cfg.rvq_dims
    };
    let (rvq, rvq_report) = train(latents.view(), &cfg.rvq_train, dims, Source::Latent)?;
    let heldout_utilization = if held_idx.is_empty() {
        Vec::new()
    } else {
        let held = extract_latents(teacher, &corpus[held_idx], layer)?;
        let toks = rvq.encode_standardized(rvq.standardize(held.view())?.view(), QuantizeMode::Training)?;
        rvq.utilization(toks.view())
    };
    let tok = Tokenizer::Latent { rvq: &rvq, teacher, layer };
    let (model, report) = pretrain(corpus, &tok, &cfg.model, &cfg.mask, &cfg.pretrain)?;
    Ok(IterateOutput {
        layer,
        rvq,
        rvq_report,
        heldout_utilization,
        model,
        report,
    })
}
