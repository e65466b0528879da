//! Training objective and its analytic gradients.
//!
//! Per frame and stage, with `z = P r`, `q = Q[tau]`, `u(v) = v / |v|`:
//!
//! ```text
//! code  = | u(q) - u(sg z) |^2        gradient reaches Q only
//! comm  = | u(z) - u(sg q) |^2        gradient reaches P only
//! recon = | D q - r |^2               gradient reaches D and Q
//! total = alpha * code + beta * comm + recon
//! ```
//!
//! `r` is the stage's incoming residual, held constant (stop-gradient)
//! across stages, and `tau` is never differentiated. Terms are summed over
//! the batch and all stages.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};

use super::{nearest_code, MelRvq, QuantizeMode};
use crate::error::{Error, Result};
use crate::par;

/// Frames per parallel work item. Fixed so reductions do not depend on the
/// number of threads.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossTerms {
    pub code: f64,
    pub comm: f64,
    pub recon: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageGrads {
    pub projection: Array2<f64>,
    pub decoder: Array2<f64>,
    pub codebook: Array2<f64>,
}

impl StageGrads {
    fn zeros(k: usize, d: usize, m: usize) -> Self {
        Self {
            projection: Array2::zeros((d, m)),
            decoder: Array2::zeros((m, d)),
            codebook: Array2::zeros((k, d)),
        }
    }

    fn add_scaled(&mut self, other: &StageGrads, w: f64) {
        self.projection.scaled_add(w, &other.projection);
        self.decoder.scaled_add(w, &other.decoder);
        self.codebook.scaled_add(w, &other.codebook);
    }

    pub fn max_abs(&self) -> f64 {
        self.projection
            .iter()
            .chain(self.decoder.iter())
            .chain(self.codebook.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.projection
            .iter()
            .chain(self.decoder.iter())
            .chain(self.codebook.iter())
            .all(|v| v.is_finite())
    }
}

/// Gradients for every stage of a quantizer.
pub type RvqGrads = Vec<StageGrads>;

/// Unweighted gradients of each loss term, kept apart so stop-gradient
/// structure can be inspected.
#[derive(Debug, Clone, PartialEq)]
pub struct TermGrads {
    pub code: RvqGrads,
    pub comm: RvqGrads,
    pub recon: RvqGrads,
}

impl TermGrads {
    fn zeros(rvq: &MelRvq) -> Self {
        let d = rvq.dims();
        let z = || (0..d.stages).map(|_| StageGrads::zeros(d.codebook_size, d.code_dim, d.input_dim)).collect();
        Self {
            code: z(),
            comm: z(),
            recon: z(),
        }
    }

    fn accumulate(&mut self, other: &TermGrads) {
        for (a, b) in [(&mut self.code, &other.code), (&mut self.comm, &other.comm), (&mut self.recon, &other.recon)] {
            for (x, y) in a.iter_mut().zip(b) {
                x.add_scaled(y, 1.0);
            }
        }
    }

    /// `alpha * code + beta * comm + recon`.
    pub fn weighted(&self, alpha: f64, beta: f64) -> RvqGrads {
        self.recon
            .iter()
            .zip(&self.code)
            .zip(&self.comm)
            .map(|((r, c), m)| {
                let mut g = r.clone();
                g.add_scaled(c, alpha);
                g.add_scaled(m, beta);
                g
            })
            .collect()
    }
}

/// Everything one pass over a batch produces.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub terms: LossTerms,
    pub grads: Option<TermGrads>,
    /// `[stage][code]` selection counts.
    pub hits: Vec<Vec<u32>>,
}

fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Gradient of `|u(v) - c|^2` w.r.t. `v` given `g = 2 (u(v) - c)`:
/// `(g - u (u . g)) / |v|`.
fn through_normalization(u: &Array1<f64>, nv: f64, g: &Array1<f64>) -> Array1<f64> {
    let ug = u.dot(g);
    (g - &(u * ug)) / nv
}

fn outer_add(dst: &mut Array2<f64>, a: &Array1<f64>, b: ArrayView1<'_, f64>) {
    Zip::from(dst.rows_mut()).and(a).for_each(|mut row, &ai| {
        row.scaled_add(ai, &b);
    });
}

fn eval_chunk(rvq: &MelRvq, units: &[Array2<f64>], frames: ArrayView2<'_, f64>, want_grads: bool) -> Result<BatchEval> {
    let dims = rvq.dims();
    let mut terms = LossTerms::default();
    let mut grads = want_grads.then(|| TermGrads::zeros(rvq));
    let mut hits = vec![vec![0u32; dims.codebook_size]; dims.stages];
    for frame in frames.rows() {
        let mut r = frame.to_owned();
        for (n, (stage, unit)) in rvq.stages().iter().zip(units).enumerate() {
            let z = stage.projection().dot(&r);
            let tau = nearest_code(stage, unit, z.view(), QuantizeMode::Training, n)?;
            hits[n][tau] += 1;
            let q = stage.codebook().row(tau).to_owned();
            let dq = stage.decoder().dot(&q);
            let err = &dq - &r;
            terms.recon += err.dot(&err);

            let nz = norm(z.view());
            let nq = norm(q.view());
            // A zero z (training fallback) has no direction; the angular
            // terms are skipped for that frame.
            let angular = nz > 0.0 && nq > 0.0;
            let (uz, uq) = if angular { (&z / nz, &q / nq) } else { (z.clone(), q.clone()) };
            if angular {
                let diff = &uq - &uz;
                let d2 = diff.dot(&diff);
                terms.code += d2;
                terms.comm += d2;
            }

            if let Some(g) = grads.as_mut() {
                let two_err = &err * 2.0;
                outer_add(&mut g.recon[n].decoder, &two_err, q.view());
                let dq_recon = stage.decoder().t().dot(&two_err);
                g.recon[n].codebook.row_mut(tau).scaled_add(1.0, &dq_recon);
                if angular {
                    let g_code = (&uq - &uz) * 2.0;
                    let dq_code = through_normalization(&uq, nq, &g_code);
                    g.code[n].codebook.row_mut(tau).scaled_add(1.0, &dq_code);
                    let g_comm = (&uz - &uq) * 2.0;
                    let dz = through_normalization(&uz, nz, &g_comm);
                    outer_add(&mut g.comm[n].projection, &dz, r.view());
                }
            }
            r -= &dq;
        }
    }
    Ok(BatchEval { terms, grads, hits })
}

/// Losses and (optionally) per-term gradients over standardized frames.
pub(crate) fn evaluate_batch(rvq: &MelRvq, batch: ArrayView2<'_, f64>, want_grads: bool) -> Result<BatchEval> {
    let dims = rvq.dims();
    if batch.nrows() == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    if batch.ncols() != dims.input_dim {
        return Err(Error::Shape(format!(
            "batch frames have {} entries, quantizer expects {}",
            batch.ncols(),
            dims.input_dim
        )));
    }
    let units = rvq.unit_codebooks();
    let starts: Vec<usize> = (0..batch.nrows()).step_by(CHUNK).collect();
    let parts = par::map(&starts, |&s| {
        let e = (s + CHUNK).min(batch.nrows());
        eval_chunk(rvq, &units, batch.slice(ndarray::s![s..e, ..]), want_grads)
    });
    let mut out = BatchEval {
        terms: LossTerms::default(),
        grads: want_grads.then(|| TermGrads::zeros(rvq)),
        hits: vec![vec![0u32; dims.codebook_size]; dims.stages],
    };
    for p in parts {
        let p = p?;
        out.terms.code += p.terms.code;
        out.terms.comm += p.terms.comm;
        out.terms.recon += p.terms.recon;
        if let (Some(acc), Some(g)) = (out.grads.as_mut(), p.grads.as_ref()) {
            acc.accumulate(g);
        }
        for (a, b) in out.hits.iter_mut().zip(&p.hits) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    let w = rvq.weights();
    out.terms.total = w.alpha * out.terms.code + w.beta * out.terms.comm + out.terms.recon;
    Ok(out)
}

/// The three loss terms and their weighted total over a batch of
/// standardized frames (rows).
pub fn losses(rvq: &MelRvq, batch: ArrayView2<'_, f64>) -> Result<LossTerms> {
    evaluate_batch(rvq, batch, false).map(|e| e.terms)
}

/// Per-term gradients over a batch of standardized frames.
pub fn term_gradients(rvq: &MelRvq, batch: ArrayView2<'_, f64>) -> Result<(LossTerms, TermGrads)> {
    let e = evaluate_batch(rvq, batch, true)?;
    Ok((e.terms, e.grads.expect("requested")))
}
