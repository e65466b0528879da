use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mask::MaskNoise;
use crate::dsp::BinStats;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

const LN_EPS: f64 = 1e-5;

/// Encoder shape. Prediction heads and codebook size come from the target
/// quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub attn_heads: usize,
    pub ff_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 192,
            layers: 4,
            attn_heads: 4,
            ff_dim: 384,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.ff_dim == 0 || self.attn_heads == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.d_model % self.attn_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by attn_heads {}",
                self.d_model, self.attn_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BlockLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wqkv: usize,
    pub bqkv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Offsets of every tensor in the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub m: usize,
    pub d: usize,
    pub ff: usize,
    pub n: usize,
    pub k: usize,
    pub in_w: usize,
    pub in_b: usize,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub mask_emb: Option<usize>,
    pub total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig, m: usize, n: usize, k: usize, learned_mask: bool) -> Self {
        let (d, ff) = (cfg.d_model, cfg.ff_dim);
        let mut at = 0;
        let mut take = |len: usize| {
            let o = at;
            at += len;
            o
        };
        let in_w = take(d * m);
        let in_b = take(d);
        let blocks = (0..cfg.layers)
            .map(|_| BlockLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                wqkv: take(3 * d * d),
                bqkv: take(3 * d),
                wo: take(d * d),
                bo: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(ff * d),
                b1: take(ff),
                w2: take(d * ff),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let head_w = take(n * k * d);
        let head_b = take(n * k);
        let mask_emb = learned_mask.then(|| take(m));
        Self {
            m,
            d,
            ff,
            n,
            k,
            in_w,
            in_b,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            mask_emb,
            total: at,
        }
    }
}

fn mat(p: &[f64], off: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), &p[off..off + rows * cols]).expect("layout")
}

fn vector(p: &[f64], off: usize, len: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&p[off..off + len])
}

fn accumulate<'a>(g: &mut [f64], off: usize, vals: impl IntoIterator<Item = &'a f64>) {
    for (dst, v) in g[off..].iter_mut().zip(vals) {
        *dst += v;
    }
}

/// Per-layer activations: entry 0 is the input projection, entry `l` the
/// output of block `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStack {
    layers: Vec<Array2<f64>>,
}

impl LatentStack {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, l: usize) -> Result<ArrayView2<'_, f64>> {
        self.layers.get(l).map(|a| a.view()).ok_or(Error::LayerRange {
            layer: l,
            max: self.layers.len() - 1,
        })
    }

    pub fn into_layer(mut self, l: usize) -> Result<Array2<f64>> {
        let max = self.layers.len() - 1;
        if l > max {
            return Err(Error::LayerRange { layer: l, max });
        }
        Ok(self.layers.swap_remove(l))
    }
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: ArrayView2<'_, f64>, g: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let out = &xhat * &g + &b;
    (out, LnCache { xhat, rstd })
}

/// Returns dx; adds dg, db into `grad`.
fn layer_norm_back(dy: ArrayView2<'_, f64>, cache: &LnCache, g: ArrayView1<'_, f64>, grad: &mut [f64], g_off: usize, b_off: usize) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let dg = (&dy * &cache.xhat).sum_axis(Axis(0));
    let db = dy.sum_axis(Axis(0));
    accumulate(grad, g_off, dg.iter());
    accumulate(grad, b_off, db.iter());
    let mut dx = &dy * &g;
    for ((mut row, xh), &rs) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.rstd.iter()) {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        for (v, &h) in row.iter_mut().zip(xh.iter()) {
            *v = rs * (*v - mean_d - h * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Linear distance penalty of attention head `h` out of `heads`.
pub(crate) fn alibi_slope(h: usize, heads: usize) -> f64 {
    2f64.powf(-8.0 * (h + 1) as f64 / heads as f64)
}

struct BlockCache {
    ln1: LnCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    c: Array2<f64>,
    u: Array2<f64>,
    gl: Array2<f64>,
}

pub(crate) struct Cache {
    x: Array2<f64>,
    mask: Option<Vec<bool>>,
    hs: Vec<Array2<f64>>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    y: Array2<f64>,
}

/// Masked-prediction encoder: input projection, pre-norm transformer blocks
/// with linear distance attention bias, final norm and one linear head per
/// target codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct SslToyModel {
    cfg: ModelConfig,
    layout: Layout,
    noise: MaskNoise,
    input_stats: BinStats,
    params: Vec<f64>,
}

impl SslToyModel {
    /// Seeded initialization. Each head has its own seed stream so the body
    /// and head `j` do not depend on how many heads exist.
    pub fn new(cfg: ModelConfig, heads: usize, codebook_size: usize, noise: MaskNoise, input_stats: BinStats, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if heads == 0 || codebook_size < 2 {
            return Err(Error::Config("need at least one head and two codes".into()));
        }
        let m = input_stats.dim();
        let layout = Layout::new(&cfg, m, heads, codebook_size, noise == MaskNoise::LearnedEmbedding);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "ssl/init/body"));
        let fill = |p: &mut [f64], off: usize, len: usize, fan_in: usize, rng: &mut ChaCha8Rng| {
            let sd = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p[off..off + len] {
                let z: f64 = StandardNormal.sample(rng);
                *v = sd * z;
            }
        };
        let (d, ff) = (cfg.d_model, cfg.ff_dim);
        fill(&mut params, layout.in_w, d * m, m, &mut rng);
        for b in &layout.blocks {
            params[b.ln1_g..b.ln1_g + d].fill(1.0);
            params[b.ln2_g..b.ln2_g + d].fill(1.0);
            fill(&mut params, b.wqkv, 3 * d * d, d, &mut rng);
            fill(&mut params, b.wo, d * d, d, &mut rng);
            fill(&mut params, b.w1, ff * d, d, &mut rng);
            fill(&mut params, b.w2, d * ff, ff, &mut rng);
        }
        params[layout.lnf_g..layout.lnf_g + d].fill(1.0);
        if let Some(off) = layout.mask_emb {
            fill(&mut params, off, m, 1, &mut rng);
        }
        for j in 0..heads {
            let mut hr = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("ssl/init/head{j}")));
            fill(&mut params, layout.head_w + j * codebook_size * d, codebook_size * d, d, &mut hr);
        }
        let mut model = Self {
            cfg,
            layout,
            noise,
            input_stats,
            params,
        };
        model.round_to_f32();
        Ok(model)
    }

    pub(crate) fn from_parts(cfg: ModelConfig, heads: usize, codebook_size: usize, noise: MaskNoise, input_stats: BinStats, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg, input_stats.dim(), heads, codebook_size, noise == MaskNoise::LearnedEmbedding);
        if params.len() != layout.total {
            return Err(Error::Format(format!("expected {} parameters, found {}", layout.total, params.len())));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite model parameter".into()));
        }
        if input_stats.mean.iter().any(|v| !v.is_finite()) || input_stats.std.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Format("invalid input statistics".into()));
        }
        Ok(Self {
            cfg,
            layout,
            noise,
            input_stats,
            params,
        })
    }

    pub fn config(&self) -> ModelConfig {
        self.cfg
    }

    pub fn input_dim(&self) -> usize {
        self.layout.m
    }

    pub fn num_heads(&self) -> usize {
        self.layout.n
    }

    pub fn codebook_size(&self) -> usize {
        self.layout.k
    }

    pub fn noise(&self) -> MaskNoise {
        self.noise
    }

    pub fn input_stats(&self) -> &BinStats {
        &self.input_stats
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Round parameters and input statistics to the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        let stats = &mut self.input_stats;
        for v in self.params.iter_mut().chain(stats.mean.iter_mut()).chain(stats.std.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }

    /// Set every prediction-head weight and bias to zero.
    pub fn zero_heads(&mut self) {
        for j in 0..self.layout.n {
            self.zero_head(j);
        }
    }

    pub fn zero_head(&mut self, j: usize) {
        let (k, d) = (self.layout.k, self.layout.d);
        let w = self.layout.head_w + j * k * d;
        self.params[w..w + k * d].fill(0.0);
        let b = self.layout.head_b + j * k;
        self.params[b..b + k].fill(0.0);
    }

    pub fn standardize(&self, frames: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if frames.ncols() != self.layout.m {
            return Err(Error::Shape(format!("frames have {} bins, model expects {}", frames.ncols(), self.layout.m)));
        }
        Ok(self.input_stats.standardize(frames))
    }

    /// Logits `(T, N, K)` and latents for raw (unstandardized) frames.
    pub fn forward(&self, frames: ArrayView2<'_, f64>) -> Result<(Array3<f64>, LatentStack)> {
        let x = self.standardize(frames)?;
        self.forward_standardized(x.view(), None)
    }

    /// Forward on standardized frames. With a learned mask embedding, rows
    /// flagged in `mask` are replaced by it.
    pub fn forward_standardized(&self, x: ArrayView2<'_, f64>, mask: Option<&[bool]>) -> Result<(Array3<f64>, LatentStack)> {
        let (logits, cache) = self.forward_cached(x, mask)?;
        Ok((logits, LatentStack { layers: cache.hs }))
    }

    pub(crate) fn forward_cached(&self, x: ArrayView2<'_, f64>, mask: Option<&[bool]>) -> Result<(Array3<f64>, Cache)> {
        let lay = &self.layout;
        let p = &self.params[..];
        let (t, d, m) = (x.nrows(), lay.d, lay.m);
        if x.ncols() != m {
            return Err(Error::Shape(format!("frames have {} bins, model expects {}", x.ncols(), m)));
        }
        if t == 0 {
            return Err(Error::Empty("frames"));
        }
        if let Some(mk) = mask {
            if mk.len() != t {
                return Err(Error::Shape(format!("mask has {} entries for {} frames", mk.len(), t)));
            }
        }
        let mut x = x.to_owned();
        if let (Some(off), Some(mk)) = (lay.mask_emb, mask) {
            let emb = vector(p, off, m);
            for (mut row, &b) in x.rows_mut().into_iter().zip(mk) {
                if b {
                    row.assign(&emb);
                }
            }
        }
        let h0 = x.dot(&mat(p, lay.in_w, d, m).t()) + vector(p, lay.in_b, d);
        let mut hs = vec![h0];
        let mut blocks = Vec::with_capacity(lay.blocks.len());
        let heads = self.cfg.attn_heads;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        for b in &lay.blocks {
            let h = hs.last().expect("nonempty");
            let (a, ln1) = layer_norm(h.view(), vector(p, b.ln1_g, d), vector(p, b.ln1_b, d));
            let qkv = a.dot(&mat(p, b.wqkv, 3 * d, d).t()) + vector(p, b.bqkv, 3 * d);
            let mut o = Array2::zeros((t, d));
            let mut probs = Vec::with_capacity(heads);
            for hh in 0..heads {
                let q = qkv.slice(s![.., hh * dk..(hh + 1) * dk]);
                let kk = qkv.slice(s![.., d + hh * dk..d + (hh + 1) * dk]);
                let v = qkv.slice(s![.., 2 * d + hh * dk..2 * d + (hh + 1) * dk]);
                let slope = alibi_slope(hh, heads);
                let mut sc = q.dot(&kk.t());
                for ((i, j), val) in sc.indexed_iter_mut() {
                    *val = *val * scale - slope * (i as f64 - j as f64).abs();
                }
                for mut row in sc.rows_mut() {
                    let mx = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
                    row.mapv_inplace(|v| (v - mx).exp());
                    let z = row.sum();
                    row.mapv_inplace(|v| v / z);
                }
                o.slice_mut(s![.., hh * dk..(hh + 1) * dk]).assign(&sc.dot(&v));
                probs.push(sc);
            }
            let h_mid = h + &o.dot(&mat(p, b.wo, d, d).t()) + vector(p, b.bo, d);
            let (c, ln2) = layer_norm(h_mid.view(), vector(p, b.ln2_g, d), vector(p, b.ln2_b, d));
            let u = c.dot(&mat(p, b.w1, lay.ff, d).t()) + vector(p, b.b1, lay.ff);
            let gl = u.mapv(gelu);
            let h_out = h_mid + gl.dot(&mat(p, b.w2, d, lay.ff).t()) + vector(p, b.b2, d);
            blocks.push(BlockCache {
                ln1,
                a,
                qkv,
                probs,
                o,
                ln2,
                c,
                u,
                gl,
            });
            hs.push(h_out);
        }
        let (y, lnf) = layer_norm(hs.last().expect("nonempty").view(), vector(p, lay.lnf_g, d), vector(p, lay.lnf_b, d));
        let mut logits = Array3::zeros((t, lay.n, lay.k));
        for j in 0..lay.n {
            let w = mat(p, lay.head_w + j * lay.k * d, lay.k, d);
            let lj = y.dot(&w.t()) + vector(p, lay.head_b + j * lay.k, lay.k);
            logits.slice_mut(s![.., j, ..]).assign(&lj);
        }
        let cache = Cache {
            x,
            mask: mask.map(|mk| mk.to_vec()),
            hs,
            blocks,
            lnf,
            y,
        };
        Ok((logits, cache))
    }

    /// Add the gradient of a scalar whose logit gradient is `dlogits` into
    /// `grad` (same layout as the parameters).
    pub(crate) fn backward(&self, cache: &Cache, dlogits: ArrayView3<'_, f64>, grad: &mut [f64]) {
        let lay = &self.layout;
        let p = &self.params[..];
        let (d, m, ff) = (lay.d, lay.m, lay.ff);
        let t = cache.y.nrows();
        let mut dy = Array2::zeros((t, d));
        for j in 0..lay.n {
            let dl = dlogits.slice(s![.., j, ..]);
            let w_off = lay.head_w + j * lay.k * d;
            let dw = dl.t().dot(&cache.y);
            accumulate(grad, w_off, dw.iter());
            accumulate(grad, lay.head_b + j * lay.k, dl.sum_axis(Axis(0)).iter());
            dy = dy + dl.dot(&mat(p, w_off, lay.k, d));
        }
        let mut dh = layer_norm_back(dy.view(), &cache.lnf, vector(p, lay.lnf_g, d), grad, lay.lnf_g, lay.lnf_b);
        let heads = self.cfg.attn_heads;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        for (b, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
            // Feed-forward sub-block.
            let dgl = dh.dot(&mat(p, b.w2, d, ff));
            accumulate(grad, b.w2, dh.t().dot(&bc.gl).iter());
            accumulate(grad, b.b2, dh.sum_axis(Axis(0)).iter());
            let mut du = dgl;
            du.zip_mut_with(&bc.u, |g, &u| *g *= gelu_grad(u));
            accumulate(grad, b.w1, du.t().dot(&bc.c).iter());
            accumulate(grad, b.b1, du.sum_axis(Axis(0)).iter());
            let dc = du.dot(&mat(p, b.w1, ff, d));
            let dh_mid = dh + layer_norm_back(dc.view(), &bc.ln2, vector(p, b.ln2_g, d), grad, b.ln2_g, b.ln2_b);
            // Attention sub-block.
            let d_o = dh_mid.dot(&mat(p, b.wo, d, d));
            accumulate(grad, b.wo, dh_mid.t().dot(&bc.o).iter());
            accumulate(grad, b.bo, dh_mid.sum_axis(Axis(0)).iter());
            let mut dqkv = Array2::zeros((t, 3 * d));
            for hh in 0..heads {
                let cols = hh * dk..(hh + 1) * dk;
                let q = bc.qkv.slice(s![.., cols.clone()]);
                let kk = bc.qkv.slice(s![.., d + cols.start..d + cols.end]);
                let v = bc.qkv.slice(s![.., 2 * d + cols.start..2 * d + cols.end]);
                let a = &bc.probs[hh];
                let doh = d_o.slice(s![.., cols.clone()]);
                let dv = a.t().dot(&doh);
                let mut ds = doh.dot(&v.t());
                for (mut drow, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                    let dot: f64 = drow.iter().zip(arow.iter()).map(|(x, y)| x * y).sum();
                    for (g, &pa) in drow.iter_mut().zip(arow.iter()) {
                        *g = pa * (*g - dot) * scale;
                    }
                }
                let dq = ds.dot(&kk);
                let dkk = ds.t().dot(&q);
                dqkv.slice_mut(s![.., cols.clone()]).assign(&dq);
                dqkv.slice_mut(s![.., d + cols.start..d + cols.end]).assign(&dkk);
                dqkv.slice_mut(s![.., 2 * d + cols.start..2 * d + cols.end]).assign(&dv);
            }
            accumulate(grad, b.wqkv, dqkv.t().dot(&bc.a).iter());
            accumulate(grad, b.bqkv, dqkv.sum_axis(Axis(0)).iter());
            let da = dqkv.dot(&mat(p, b.wqkv, 3 * d, d));
            dh = dh_mid + layer_norm_back(da.view(), &bc.ln1, vector(p, b.ln1_g, d), grad, b.ln1_g, b.ln1_b);
        }
        accumulate(grad, lay.in_w, dh.t().dot(&cache.x).iter());
        accumulate(grad, lay.in_b, dh.sum_axis(Axis(0)).iter());
        if let (Some(off), Some(mk)) = (lay.mask_emb, &cache.mask) {
            let dx = dh.dot(&mat(p, lay.in_w, d, m));
            for (row, &b) in dx.rows().into_iter().zip(mk) {
                if b {
                    accumulate(grad, off, row.iter());
                }
            }
        }
    }
}
