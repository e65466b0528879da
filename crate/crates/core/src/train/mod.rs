//! Gradient training of [`MelRvq`] on standardized frames.
//!
//! Parameters start from a seeded scaled Gaussian; codebooks either copy
//! projected data rows or are Gaussian. Each stage draws from its own seed
//! stream, so stage `n` of an `N`-stage run is initialized and trained
//! exactly as it would be in any run with at least `n` stages.

mod report;

pub use report::TrainReport;

use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::BinStats;
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rvq::{evaluate_batch, LossTerms, LossWeights, MelRvq, QuantizeMode, RvqDims, Source, StageParams};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Codebook rows are projections of sampled training frames (residuals,
    /// for later stages).
    KmeansSample,
    RandomGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init: InitKind,
    /// Codes selected fewer times than this in an epoch are reseeded; 0
    /// disables reseeding.
    pub dead_code_threshold: u32,
    pub optimizer: OptimizerKind,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            steps: 2000,
            batch_size: 256,
            seed: 0,
            init: InitKind::KmeansSample,
            dead_code_threshold: 1,
            optimizer: OptimizerKind::default(),
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.loss_weights.alpha > 0.0 && self.loss_weights.beta > 0.0) {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v * scale
    })
}

fn nonzero_rows(q: &mut Array2<f64>, rng: &mut ChaCha8Rng) {
    for mut row in q.rows_mut() {
        if row.iter().all(|&v| v == 0.0) {
            row.mapv_inplace(|_| {
                let v: f64 = StandardNormal.sample(rng);
                1e-3 * v
            });
        }
    }
}

/// Build a seeded, untrained quantizer for `frames` (raw rows, one per
/// frame). Standardization statistics are computed from `frames`.
pub fn init_rvq(frames: ArrayView2<'_, f64>, cfg: &TrainConfig, dims: RvqDims, source: Source) -> Result<MelRvq> {
    dims.validate()?;
    cfg.validate()?;
    if frames.ncols() != dims.input_dim {
        return Err(Error::Shape(format!(
            "frames have {} bins, dims.input_dim = {}",
            frames.ncols(),
            dims.input_dim
        )));
    }
    if frames.nrows() == 0 {
        return Err(Error::Empty("frames"));
    }
    if cfg.init == InitKind::KmeansSample && frames.nrows() < dims.codebook_size {
        return Err(Error::InsufficientFrames {
            have: frames.nrows(),
            need: dims.codebook_size,
        });
    }
    let stats = BinStats::from_frames(frames)?;
    let x = stats.standardize(frames);
    let (k, d, m) = (dims.codebook_size, dims.code_dim, dims.input_dim);

    let mut stages: Vec<StageParams> = Vec::with_capacity(dims.stages);
    for n in 0..dims.stages {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("rvq/init/stage{n}")));
        let projection = gaussian(&mut rng, d, m, 1.0 / (m as f64).sqrt());
        let decoder = gaussian(&mut rng, m, d, 1.0 / (m as f64).sqrt());
        let mut codebook = match cfg.init {
            InitKind::RandomGaussian => gaussian(&mut rng, k, d, 1.0),
            InitKind::KmeansSample => {
                let picks = sample(&mut rng, x.nrows(), k);
                let mut q = Array2::zeros((k, d));
                for (row, idx) in q.rows_mut().into_iter().zip(picks.iter()) {
                    let mut r = x.row(idx).to_owned();
                    for prev in &stages {
                        let unit = prev.normalized_codebook();
                        let z = prev.projection().dot(&r);
                        let tau = crate::rvq::nearest_code(prev, &unit, z.view(), QuantizeMode::Training, 0)?;
                        r -= &prev.decode_code(tau);
                    }
                    let mut row = row;
                    row.assign(&projection.dot(&r));
                }
                q
            }
        };
        nonzero_rows(&mut codebook, &mut rng);
        stages.push(StageParams::new(projection, decoder, codebook)?);
    }
    let mut rvq = MelRvq::new(stages, cfg.loss_weights, stats, source)?;
    rvq.round_to_f32();
    Ok(rvq)
}

/// A random quantizer that is never trained: the ablation baseline. Stats
/// are the identity; attach corpus statistics with
/// [`MelRvq::with_input_stats`].
pub fn freeze_random(dims: RvqDims, seed: u64) -> Result<MelRvq> {
    dims.validate()?;
    let (k, d, m) = (dims.codebook_size, dims.code_dim, dims.input_dim);
    let stages = (0..dims.stages)
        .map(|n| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("rvq/frozen/stage{n}")));
            let p = gaussian(&mut rng, d, m, 1.0 / (m as f64).sqrt());
            let dec = gaussian(&mut rng, m, d, 1.0 / (m as f64).sqrt());
            let mut q = gaussian(&mut rng, k, d, 1.0);
            nonzero_rows(&mut q, &mut rng);
            StageParams::new(p, dec, q)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rvq = MelRvq::new(stages, LossWeights::default(), BinStats::identity(m), Source::Mel)?;
    rvq.set_frozen(true);
    rvq.round_to_f32();
    Ok(rvq)
}

/// Loss values and code hits of one step, measured before the update.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub terms: LossTerms,
    pub hits: Vec<Vec<u32>>,
}

/// Owns a quantizer while it is being trained.
#[derive(Debug)]
pub struct Trainer {
    rvq: MelRvq,
    cfg: TrainConfig,
    opt: Optimizer,
    step: usize,
}

impl Trainer {
    pub fn new(rvq: MelRvq, cfg: TrainConfig) -> Result<Self> {
        if rvq.is_frozen() {
            return Err(Error::Frozen);
        }
        cfg.validate()?;
        let opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
        Ok(Self { rvq, cfg, opt, step: 0 })
    }

    pub fn rvq(&self) -> &MelRvq {
        &self.rvq
    }

    pub fn into_rvq(self) -> MelRvq {
        self.rvq
    }

    /// One optimizer step on a batch of standardized frames. Assignments are
    /// recomputed from the current parameters and treated as constants.
    pub fn grad_step(&mut self, batch: ArrayView2<'_, f64>) -> Result<StepStats> {
        let eval = evaluate_batch(&self.rvq, batch, true)?;
        let w = self.rvq.weights();
        let grads = eval.grads.expect("requested").weighted(w.alpha, w.beta);
        let step = self.step;
        if !eval.terms.total.is_finite() {
            return Err(Error::Divergence { step, what: "non-finite loss".into() });
        }
        if let Some(n) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, what: format!("non-finite gradient at stage {n}") });
        }
        self.opt.begin_step();
        for (n, (stage, g)) in self.rvq.stages_mut().iter_mut().zip(&grads).enumerate() {
            let (p, d, q) = stage.parts_mut();
            self.opt.update(3 * n, p.as_slice_mut().expect("standard layout"), g.projection.as_slice().expect("standard layout"));
            self.opt.update(3 * n + 1, d.as_slice_mut().expect("standard layout"), g.decoder.as_slice().expect("standard layout"));
            self.opt.update(3 * n + 2, q.as_slice_mut().expect("standard layout"), g.codebook.as_slice().expect("standard layout"));
        }
        for stage in self.rvq.stages() {
            if stage.check().is_err() {
                return Err(Error::Divergence { step, what: "parameters left the valid domain".into() });
            }
        }
        self.step += 1;
        Ok(StepStats {
            terms: eval.terms,
            hits: eval.hits,
        })
    }

    /// Replace every code hit fewer than the threshold with the stage input
    /// projection of a frame drawn from `pool`. Returns the number reseeded.
    fn reseed_dead(&mut self, hits: &[Vec<u32>], pool: ArrayView2<'_, f64>, rngs: &mut [ChaCha8Rng]) -> Result<usize> {
        let threshold = self.cfg.dead_code_threshold;
        if threshold == 0 || pool.nrows() == 0 {
            return Ok(0);
        }
        let d = self.rvq.dims().code_dim;
        let mut count = 0;
        for n in 0..hits.len() {
            for code in 0..hits[n].len() {
                if hits[n][code] >= threshold {
                    continue;
                }
                let idx = rngs[n].random_range(0..pool.nrows());
                let trace = self.rvq.trace(pool.row(idx), QuantizeMode::Training)?;
                let z = &trace.steps[n].z;
                if z.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let (_, _, q) = self.rvq.stages_mut()[n].parts_mut();
                q.row_mut(code).assign(z);
                self.opt.reset(3 * n + 2, code * d..(code + 1) * d);
                count += 1;
            }
        }
        Ok(count)
    }

    /// Run `cfg.steps` steps over shuffled mini-batches of `x` (standardized
    /// rows). An epoch is `ceil(rows / batch_size)` steps.
    pub fn fit(&mut self, x: ArrayView2<'_, f64>) -> Result<TrainReport> {
        let started = Instant::now();
        let dims = self.rvq.dims();
        let mut report = TrainReport::default();
        if self.cfg.steps == 0 {
            report.utilization = self.utilization(x)?;
            report.wall_clock_s = started.elapsed().as_secs_f64();
            return Ok(report);
        }
        let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, "rvq/batches"));
        let mut reseed_rngs: Vec<ChaCha8Rng> = (0..dims.stages)
            .map(|n| ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &format!("rvq/reseed/stage{n}"))))
            .collect();
        let rows = x.nrows();
        let bs = self.cfg.batch_size.min(rows);
        let steps_per_epoch = rows.div_ceil(bs);
        let mut order: Vec<usize> = (0..rows).collect();
        let mut epoch_hits = vec![vec![0u32; dims.codebook_size]; dims.stages];
        let mut batch = Array2::zeros((bs, dims.input_dim));
        let mut cursor = rows;
        let mut in_epoch = 0;
        for _ in 0..self.cfg.steps {
            if cursor + bs > rows {
                shuffle(&mut order, &mut batch_rng);
                cursor = 0;
            }
            for (mut dst, &i) in batch.rows_mut().into_iter().zip(&order[cursor..cursor + bs]) {
                dst.assign(&x.row(i));
            }
            cursor += bs;
            let st = self.grad_step(batch.view())?;
            for (acc, h) in epoch_hits.iter_mut().zip(&st.hits) {
                for (a, b) in acc.iter_mut().zip(h) {
                    *a += b;
                }
            }
            report.push(st.terms);
            in_epoch += 1;
            if in_epoch == steps_per_epoch {
                report.reseeded += self.reseed_dead(&epoch_hits, batch.view(), &mut reseed_rngs)?;
                epoch_hits.iter_mut().for_each(|h| h.iter_mut().for_each(|v| *v = 0));
                in_epoch = 0;
            }
        }
        self.rvq.round_to_f32();
        report.utilization = self.utilization(x)?;
        report.wall_clock_s = started.elapsed().as_secs_f64();
        Ok(report)
    }

    fn utilization(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let toks = self.rvq.encode_standardized(x, QuantizeMode::Training)?;
        Ok(self.rvq.utilization(toks.view()))
    }
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Continue training an existing quantizer on raw frames (standardized with
/// its stored statistics). Refuses frozen quantizers.
pub fn fit(rvq: MelRvq, frames: ArrayView2<'_, f64>, cfg: &TrainConfig) -> Result<(MelRvq, TrainReport)> {
    let mut trainer = Trainer::new(rvq, cfg.clone())?;
    if frames.nrows() == 0 {
        return Err(Error::Empty("frames"));
    }
    let x = trainer.rvq().standardize(frames)?;
    let report = trainer.fit(x.view())?;
    Ok((trainer.into_rvq(), report))
}

/// Initialize and train a quantizer on raw frames.
pub fn train(frames: ArrayView2<'_, f64>, cfg: &TrainConfig, dims: RvqDims, source: Source) -> Result<(MelRvq, TrainReport)> {
    if frames.nrows() == 0 {
        return Err(Error::Empty("frames"));
    }
    let rvq = init_rvq(frames, cfg, dims, source)?;
    fit(rvq, frames, cfg)
}

/// Stack the rows of several matrices.
pub fn stack_frames<'a>(parts: impl IntoIterator<Item = ArrayView2<'a, f64>>) -> Result<Array2<f64>> {
    let parts: Vec<_> = parts.into_iter().collect();
    let first = parts.first().ok_or(Error::Empty("frame sets"))?;
    let m = first.ncols();
    let total: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = Array2::zeros((total, m));
    let mut at = 0;
    for p in &parts {
        if p.ncols() != m {
            return Err(Error::Shape("frame sets disagree on width".into()));
        }
        out.slice_mut(s![at..at + p.nrows(), ..]).assign(p);
        at += p.nrows();
    }
    Ok(out)
}
