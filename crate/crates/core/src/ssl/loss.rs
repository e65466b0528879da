use ndarray::{Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

fn check(logits: &ArrayView3<'_, f64>, targets: &ArrayView2<'_, u32>, mask: &[bool]) -> Result<()> {
    let (t, n, k) = logits.dim();
    if targets.dim() != (t, n) || mask.len() != t {
        return Err(Error::Shape(format!(
            "logits {:?}, targets {:?}, mask {}",
            logits.dim(),
            targets.dim(),
            mask.len()
        )));
    }
    if let Some(&tok) = targets.iter().find(|&&v| v as usize >= k) {
        return Err(Error::TokenRange { token: tok, codebook_size: k });
    }
    Ok(())
}

/// Softmax cross-entropy averaged over masked frames and all heads.
pub fn mlm_loss(logits: ArrayView3<'_, f64>, targets: ArrayView2<'_, u32>, mask: &[bool]) -> Result<f64> {
    let count = mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::NoMaskedFrames);
    }
    let (sum, _) = loss_and_grad(logits, targets, mask, None)?;
    Ok(sum / (count * logits.dim().1) as f64)
}

/// Summed cross-entropy over masked (frame, head) pairs. With `Some(scale)`
/// also returns `scale` times its logit gradient.
pub(crate) fn loss_and_grad(logits: ArrayView3<'_, f64>, targets: ArrayView2<'_, u32>, mask: &[bool], scale: Option<f64>) -> Result<(f64, Option<Array3<f64>>)> {
    check(&logits, &targets, mask)?;
    let (_, n, _) = logits.dim();
    let mut grad = scale.map(|_| Array3::zeros(logits.raw_dim()));
    let mut sum = 0.0;
    for (t, &masked) in mask.iter().enumerate() {
        if !masked {
            continue;
        }
        for j in 0..n {
            let row = logits.slice(ndarray::s![t, j, ..]);
            let mx = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            let target = targets[[t, j]] as usize;
            sum += lse - row[target];
            if let (Some(g), Some(sc)) = (grad.as_mut(), scale) {
                for (c, &v) in row.iter().enumerate() {
                    g[[t, j, c]] = sc * (v - lse).exp();
                }
                g[[t, j, target]] -= sc;
            }
        }
    }
    Ok((sum, grad))
}

/// Lowest-index argmax of each `(t, head)` logit row.
pub fn predictions(logits: ArrayView3<'_, f64>) -> ndarray::Array2<u32> {
    let (t, n, _) = logits.dim();
    ndarray::Array2::from_shape_fn((t, n), |(i, j)| {
        let row = logits.slice(ndarray::s![i, j, ..]);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        best as u32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Array3::from_elem((7, 3, 50), 2.5);
        let targets = Array2::from_shape_fn((7, 3), |(i, j)| ((i * 3 + j) % 50) as u32);
        let mask = vec![true, false, true, true, false, false, true];
        let l = mlm_loss(logits.view(), targets.view(), &mask).unwrap();
        assert!((l - 50f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturating_margin_drives_loss_to_zero() {
        let targets = Array2::from_shape_fn((4, 2), |(i, j)| ((i + j) % 5) as u32);
        let mask = vec![true; 4];
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let logits = Array3::from_shape_fn((4, 2, 5), |(i, j, c)| if c == targets[[i, j]] as usize { margin } else { 0.0 });
            let l = mlm_loss(logits.view(), targets.view(), &mask).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn unmasked_logits_are_ignored() {
        let targets = Array2::zeros((3, 1));
        let mask = vec![false, true, false];
        let a = Array3::from_shape_fn((3, 1, 4), |(i, _, c)| (i * 4 + c) as f64);
        let mut b = a.clone();
        b[[0, 0, 2]] = 100.0;
        b[[2, 0, 0]] = -7.0;
        assert_eq!(mlm_loss(a.view(), targets.view(), &mask).unwrap(), mlm_loss(b.view(), targets.view(), &mask).unwrap());
    }

    #[test]
    fn no_masked_frames_is_an_error() {
        let logits = Array3::zeros((2, 1, 3));
        let targets = Array2::zeros((2, 1));
        assert!(matches!(mlm_loss(logits.view(), targets.view(), &[false, false]), Err(Error::NoMaskedFrames)));
    }
}
