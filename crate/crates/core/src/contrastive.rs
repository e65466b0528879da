//! Decoupled contrastive loss for paired music/text embeddings.
//!
//! Similarity is the raw dot product. For anchor `i` in the music-to-text
//! direction the term is `-s_ii/σ + log Σ_{j≠i} exp(s_ij/σ)`; the text-to-music
//! direction uses the transposed similarities. Each direction is averaged
//! over anchors and the two directions are averaged. The positive pair never
//! appears in its own denominator.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    music: Array1<f64>,
    text: Array1<f64>,
}

impl EmbeddingPair {
    pub fn new(music: Array1<f64>, text: Array1<f64>) -> Result<Self> {
        if music.len() != text.len() {
            return Err(Error::Shape(format!("music dim {} vs text dim {}", music.len(), text.len())));
        }
        if music.iter().chain(text.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite embedding".into()));
        }
        Ok(Self { music, text })
    }

    pub fn music(&self) -> ArrayView1<'_, f64> {
        self.music.view()
    }

    pub fn text(&self) -> ArrayView1<'_, f64> {
        self.text.view()
    }

    pub fn dim(&self) -> usize {
        self.music.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DclConfig {
    pub temperature: f64,
    pub dim: usize,
}

impl Default for DclConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            dim: 512,
        }
    }
}

impl DclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Mean over time, then `proj · mean`.
pub fn pool_project(latents: ArrayView2<'_, f64>, proj: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if latents.nrows() == 0 {
        return Err(Error::Empty("latent sequence"));
    }
    if proj.ncols() != latents.ncols() {
        return Err(Error::Shape(format!("projection takes {} inputs, latents have {}", proj.ncols(), latents.ncols())));
    }
    let mean = latents.mean_axis(Axis(0)).expect("nonempty");
    Ok(proj.dot(&mean))
}

/// `s[i][j] = music_i · text_j`.
pub fn similarities(batch: &[EmbeddingPair]) -> Array2<f64> {
    let b = batch.len();
    Array2::from_shape_fn((b, b), |(i, j)| batch[i].music.dot(&batch[j].text))
}

fn decoupled_direction(s: ArrayView2<'_, f64>, sigma: f64) -> f64 {
    let b = s.nrows();
    let mut total = 0.0;
    for i in 0..b {
        let mx = (0..b).filter(|&j| j != i).map(|j| s[[i, j]] / sigma).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..b).filter(|&j| j != i).map(|j| (s[[i, j]] / sigma - mx).exp()).sum();
        total += mx + z.ln() - s[[i, i]] / sigma;
    }
    total / b as f64
}

/// The loss from a precomputed `B×B` similarity matrix.
pub fn dcl_loss_from_similarities(s: ArrayView2<'_, f64>, temperature: f64) -> Result<f64> {
    if s.nrows() != s.ncols() {
        return Err(Error::Shape("similarity matrix must be square".into()));
    }
    if s.nrows() < 2 {
        return Err(Error::InsufficientNegatives(s.nrows()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    Ok(0.5 * (decoupled_direction(s, temperature) + decoupled_direction(s.t(), temperature)))
}

pub fn dcl_loss(batch: &[EmbeddingPair], cfg: &DclConfig) -> Result<f64> {
    cfg.validate()?;
    if batch.len() < 2 {
        return Err(Error::InsufficientNegatives(batch.len()));
    }
    if let Some(p) = batch.iter().find(|p| p.dim() != cfg.dim) {
        return Err(Error::Shape(format!("embedding dim {} but config dim {}", p.dim(), cfg.dim)));
    }
    dcl_loss_from_similarities(similarities(batch).view(), cfg.temperature)
}

/// Dot-product score of a music embedding against each tag embedding.
pub fn tag_scores(music: ArrayView1<'_, f64>, tags: &[Array1<f64>]) -> Result<Vec<f64>> {
    tags.iter()
        .map(|t| {
            if t.len() != music.len() {
                Err(Error::Shape(format!("tag dim {} vs music dim {}", t.len(), music.len())))
            } else {
                Ok(music.dot(t))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<SelftestCheck>,
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Vec<EmbeddingPair> {
    (0..b)
        .map(|_| {
            let m = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
            let t = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
            EmbeddingPair::new(m, t).expect("finite")
        })
        .collect()
}

/// Plain double loop over anchors and negatives, no max shifting.
fn loop_loss(batch: &[EmbeddingPair], sigma: f64) -> f64 {
    let b = batch.len();
    let dot = |a: ArrayView1<'_, f64>, c: ArrayView1<'_, f64>| a.iter().zip(c.iter()).map(|(x, y)| x * y).sum::<f64>();
    let mut mt = 0.0;
    let mut tm = 0.0;
    for i in 0..b {
        let mut den_mt = 0.0;
        let mut den_tm = 0.0;
        for j in 0..b {
            if j != i {
                den_mt += (dot(batch[i].music(), batch[j].text()) / sigma).exp();
                den_tm += (dot(batch[j].music(), batch[i].text()) / sigma).exp();
            }
        }
        let pos = (dot(batch[i].music(), batch[i].text()) / sigma).exp();
        mt -= (pos / den_mt).ln();
        tm -= (pos / den_tm).ln();
    }
    0.5 * (mt + tm) / b as f64
}

/// Check the loss against a brute-force loop and its invariances on seeded
/// random batches.
pub fn selftest(seed: u64) -> SelftestReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        checks.push(SelftestCheck {
            name: name.into(),
            passed,
            detail,
        })
    };

    let mut worst: f64 = 0.0;
    for b in 2..=16 {
        let batch = random_batch(&mut rng, b, 16);
        let sigma = rng.random_range(0.2..2.0);
        let cfg = DclConfig { temperature: sigma, dim: 16 };
        let got = dcl_loss(&batch, &cfg).unwrap_or(f64::NAN);
        worst = worst.max((got - loop_loss(&batch, sigma)).abs());
    }
    push("brute_force_oracle", worst <= 1e-8, format!("max abs diff {worst:.3e} over B = 2..=16"));

    let batch = random_batch(&mut rng, 8, 16);
    let cfg = DclConfig { temperature: 0.5, dim: 16 };
    let base = dcl_loss(&batch, &cfg).unwrap_or(f64::NAN);
    let mut permuted = batch.clone();
    permuted.reverse();
    permuted.swap(0, 3);
    let p = dcl_loss(&permuted, &cfg).unwrap_or(f64::NAN);
    push("permutation_invariance", (p - base).abs() <= 1e-12, format!("{base} vs {p}"));

    let s = similarities(&batch);
    let mut scaled = s.clone();
    scaled.mapv_inplace(|v| v * 3.7);
    let l = dcl_loss_from_similarities(scaled.view(), 0.5 * 3.7).unwrap_or(f64::NAN);
    push("joint_scale_invariance", (l - base).abs() <= 1e-12, format!("{base} vs {l}"));

    let mut pos = s.clone();
    pos[[2, 2]] += 0.5;
    let mut neg = s.clone();
    neg[[2, 5]] += 0.5;
    let lp = dcl_loss_from_similarities(pos.view(), 0.5).unwrap_or(f64::NAN);
    let ln = dcl_loss_from_similarities(neg.view(), 0.5).unwrap_or(f64::NAN);
    push("decoupling_monotonicity", lp < base && ln > base, format!("positive +0.5: {lp}, negative +0.5: {ln}, base {base}"));

    let (sv, cv, sigma) = (2.0, 0.5, 0.3);
    let two = ndarray::array![[sv, cv], [cv, sv]];
    let l2 = dcl_loss_from_similarities(two.view(), sigma).unwrap_or(f64::NAN);
    let closed = -(sv - cv) / sigma;
    push("positive_exclusion_b2", (l2 - closed).abs() <= 1e-12, format!("{l2} vs closed form {closed}"));

    let hot = dcl_loss_from_similarities(s.view(), 1e9).unwrap_or(f64::NAN);
    let limit = (7f64).ln();
    push("temperature_limit", (hot - limit).abs() <= 1e-6, format!("{hot} vs ln(B-1) = {limit}"));

    let passed = checks.iter().all(|c| c.passed);
    SelftestReport { seed, passed, checks }
}
