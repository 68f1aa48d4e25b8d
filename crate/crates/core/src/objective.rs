//! Masked multivariate quantile loss.
//!
//! For every target `v`, sample `i` and quantile `q` the pinball losses over
//! the forecast horizon are summed at observed bins only and divided by the
//! number of observed bins of that sample and target. The results are summed
//! over quantiles, samples and targets. A sample-target pair with no observed
//! bins contributes exactly zero.

use ndarray::{Array2, ArrayView3, ArrayView4, ArrayViewMut4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Pinball loss of a single prediction.
#[inline]
pub fn quantile_loss(y: f64, y_hat: f64, q: f64) -> f64 {
    q * (y - y_hat).max(0.0) + (1.0 - q) * (y_hat - y).max(0.0)
}

/// Derivative of [`quantile_loss`] with respect to `y_hat` (zero at the kink).
#[inline]
fn quantile_loss_slope(y: f64, y_hat: f64, q: f64) -> f64 {
    if y > y_hat {
        -q
    } else if y_hat > y {
        1.0 - q
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Sum over targets, samples and quantiles.
    pub total: f64,
    /// Number of samples the total was accumulated over.
    pub samples: usize,
    pub per_variable: Vec<f64>,
    pub per_quantile: Vec<f64>,
    pub real_value_counts: Vec<usize>,
}

impl LossBreakdown {
    /// Total divided by the number of samples; the quantity optimised during
    /// training.
    pub fn mean(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.total / self.samples as f64
        }
    }
}

/// Evaluates the masked loss.
///
/// `pred` is indexed `[sample, target, quantile, step]`, `targets` and `mask`
/// are indexed `[sample, target, step]`. When `grad` is given it receives
/// d(total)/d(pred) in the same layout as `pred`.
pub fn masked_loss_into(
    pred: ArrayView4<f64>,
    targets: ArrayView3<f64>,
    mask: ArrayView3<bool>,
    quantiles: &[f64],
    mut grad: Option<ArrayViewMut4<f64>>,
) -> Result<LossBreakdown, LossError> {
    let (n, v, nq, h) = pred.dim();
    if nq != quantiles.len() {
        return Err(LossError::Shape(format!(
            "{nq} quantile outputs for {} quantiles",
            quantiles.len()
        )));
    }
    if targets.dim() != (n, v, h) || mask.dim() != (n, v, h) {
        return Err(LossError::Shape(format!(
            "predictions {:?} vs targets {:?} / mask {:?}",
            pred.dim(),
            targets.dim(),
            mask.dim()
        )));
    }
    if let Some(g) = &grad {
        if g.dim() != pred.dim() {
            return Err(LossError::Shape("gradient buffer".into()));
        }
    }
    let mut per_variable = vec![0.0; v];
    let mut per_quantile = vec![0.0; nq];
    let mut counts = vec![0usize; v];
    let mut total = 0.0;
    for i in 0..n {
        for var in 0..v {
            let real = (0..h).filter(|&t| mask[[i, var, t]]).count();
            counts[var] += real;
            if real == 0 {
                continue;
            }
            let denom = real as f64;
            for (qi, &q) in quantiles.iter().enumerate() {
                let mut acc = 0.0;
                for t in 0..h {
                    if !mask[[i, var, t]] {
                        continue;
                    }
                    let y = targets[[i, var, t]];
                    let yh = pred[[i, var, qi, t]];
                    acc += quantile_loss(y, yh, q);
                    if let Some(g) = grad.as_mut() {
                        g[[i, var, qi, t]] += quantile_loss_slope(y, yh, q) / denom;
                    }
                }
                let term = acc / denom;
                per_variable[var] += term;
                per_quantile[qi] += term;
                total += term;
            }
        }
    }
    Ok(LossBreakdown {
        total,
        samples: n,
        per_variable,
        per_quantile,
        real_value_counts: counts,
    })
}

/// Evaluates the masked loss without gradients.
pub fn masked_loss(
    pred: ArrayView4<f64>,
    targets: ArrayView3<f64>,
    mask: ArrayView3<bool>,
    quantiles: &[f64],
) -> Result<LossBreakdown, LossError> {
    masked_loss_into(pred, targets, mask, quantiles, None)
}

/// Loss and gradient for predictions stored time-major on the tape: row
/// `t * batch + b`, column `v * Q + q`. Targets and masks are `[t * batch + b,
/// v]`.
pub(crate) fn masked_loss_time_major(
    pred: &Array2<f64>,
    targets: &Array2<f64>,
    mask: &Array2<bool>,
    batch: usize,
    quantiles: &[f64],
) -> Result<(LossBreakdown, Array2<f64>), LossError> {
    use ndarray::ShapeBuilder;
    let nq = quantiles.len();
    let (rows, cols) = pred.dim();
    if batch == 0 || rows % batch != 0 || cols % nq != 0 {
        return Err(LossError::Shape(format!("prediction block {rows}x{cols}")));
    }
    let h = rows / batch;
    let v = cols / nq;
    if targets.dim() != (rows, v) || mask.dim() != (rows, v) {
        return Err(LossError::Shape("targets or mask".into()));
    }
    let pred_s = pred.as_slice().ok_or_else(|| LossError::Shape("layout".into()))?;
    let pview = ArrayView4::from_shape(
        (batch, v, nq, h).strides((v * nq, nq, 1, batch * v * nq)),
        pred_s,
    )
    .map_err(|e| LossError::Shape(e.to_string()))?;
    let tview = ArrayView3::from_shape(
        (batch, v, h).strides((v, 1, batch * v)),
        targets.as_slice().ok_or_else(|| LossError::Shape("layout".into()))?,
    )
    .map_err(|e| LossError::Shape(e.to_string()))?;
    let mview = ArrayView3::from_shape(
        (batch, v, h).strides((v, 1, batch * v)),
        mask.as_slice().ok_or_else(|| LossError::Shape("layout".into()))?,
    )
    .map_err(|e| LossError::Shape(e.to_string()))?;
    let mut grad = Array2::<f64>::zeros((rows, cols));
    let breakdown = {
        let gs = grad.as_slice_mut().expect("fresh array");
        let gview = ArrayViewMut4::from_shape(
            (batch, v, nq, h).strides((v * nq, nq, 1, batch * v * nq)),
            gs,
        )
        .map_err(|e| LossError::Shape(e.to_string()))?;
        masked_loss_into(pview, tview, mview, quantiles, Some(gview))?
    };
    Ok((breakdown, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};
    use proptest::prelude::*;

    const Q: [f64; 3] = [0.1, 0.5, 0.9];

    #[test]
    fn pinball_examples() {
        assert_eq!(quantile_loss(1.0, 1.0, 0.5), 0.0);
        assert!((quantile_loss(2.0, 0.0, 0.9) - 1.8).abs() < 1e-15);
        assert!((quantile_loss(0.0, 2.0, 0.9) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn all_masked_gives_zero() {
        let pred = Array4::<f64>::from_elem((2, 3, 3, 4), 1.0);
        let targets = Array3::<f64>::from_elem((2, 3, 4), 5.0);
        let mask = Array3::<bool>::from_elem((2, 3, 4), false);
        let out = masked_loss(pred.view(), targets.view(), mask.view(), &Q).unwrap();
        assert_eq!(out.total, 0.0);
        assert!(out.real_value_counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn hand_evaluated_single_sample() {
        let pred = Array4::from_shape_vec((1, 1, 1, 2), vec![1.0, 1.0]).unwrap();
        let targets = Array3::from_shape_vec((1, 1, 2), vec![1.0, 3.0]).unwrap();
        let mask = Array3::from_elem((1, 1, 2), true);
        let out = masked_loss(pred.view(), targets.view(), mask.view(), &[0.5]).unwrap();
        assert!((out.total - 0.5).abs() < 1e-15);
        assert_eq!(out.real_value_counts, vec![2]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let pred = Array4::<f64>::zeros((1, 2, 3, 4));
        let targets = Array3::<f64>::zeros((1, 2, 5));
        let mask = Array3::from_elem((1, 2, 5), true);
        assert!(masked_loss(pred.view(), targets.view(), mask.view(), &Q).is_err());
    }

    #[test]
    fn time_major_layout_matches_sample_major() {
        // batch 2, V=2, Q=3, H=3
        let (b, v, h) = (2usize, 2usize, 3usize);
        let mut pred4 = Array4::<f64>::zeros((b, v, 3, h));
        let mut tgt3 = Array3::<f64>::zeros((b, v, h));
        let mut mask3 = Array3::<bool>::from_elem((b, v, h), true);
        let mut tm_pred = Array2::<f64>::zeros((h * b, v * 3));
        let mut tm_tgt = Array2::<f64>::zeros((h * b, v));
        let mut tm_mask = Array2::<bool>::from_elem((h * b, v), true);
        let mut k = 0.0;
        for i in 0..b {
            for var in 0..v {
                for t in 0..h {
                    k += 1.0;
                    tgt3[[i, var, t]] = (k * 0.37f64).sin();
                    tm_tgt[[t * b + i, var]] = tgt3[[i, var, t]];
                    let m = (i + var + t) % 3 != 0;
                    mask3[[i, var, t]] = m;
                    tm_mask[[t * b + i, var]] = m;
                    for q in 0..3 {
                        let p = (k * 1.3 + q as f64).cos();
                        pred4[[i, var, q, t]] = p;
                        tm_pred[[t * b + i, var * 3 + q]] = p;
                    }
                }
            }
        }
        let a = masked_loss(pred4.view(), tgt3.view(), mask3.view(), &Q).unwrap();
        let (bk, grad) = masked_loss_time_major(&tm_pred, &tm_tgt, &tm_mask, b, &Q).unwrap();
        assert_eq!(a, bk);
        // finite differences on one entry
        let eps = 1e-7;
        let mut p2 = tm_pred.clone();
        p2[[1, 4]] += eps;
        let (b2, _) = masked_loss_time_major(&p2, &tm_tgt, &tm_mask, b, &Q).unwrap();
        assert!(((b2.total - bk.total) / eps - grad[[1, 4]]).abs() < 1e-6);
    }

    /// Brute-force oracle: scan every candidate constant and keep the one with
    /// the smallest mean pinball loss.
    fn scan_minimizer(sample: &[f64], q: f64) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (idx, &c) in sample.iter().enumerate() {
            let loss: f64 = sample.iter().map(|&y| quantile_loss(y, c, q)).sum::<f64>();
            if loss < best.0 {
                best = (loss, idx);
            }
        }
        best.1
    }

    #[test]
    fn constant_minimizer_is_empirical_quantile() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut sample: Vec<f64> = (0..1001).map(|_| rng.random::<f64>() * 10.0).collect();
        sample.sort_by(f64::total_cmp);
        for q in Q {
            let idx = scan_minimizer(&sample, q);
            // empirical q-quantile of 1001 sorted points: index q * (n - 1)
            assert_eq!(idx, (q * 1000.0f64).round() as usize);
        }
    }

    proptest! {
        #[test]
        fn masked_positions_do_not_matter(
            vals in proptest::collection::vec(-5.0f64..5.0, 24),
            noise in proptest::collection::vec(-50.0f64..50.0, 24),
            bits in proptest::collection::vec(any::<bool>(), 12),
        ) {
            let mut targets = Array3::from_shape_vec((2, 2, 3), vals[..12].to_vec()).unwrap();
            let mask = Array3::from_shape_vec((2, 2, 3), bits).unwrap();
            let q = [0.1, 0.9];
            let pred3 = Array4::from_shape_vec((2, 2, 2, 3), vals.clone()).unwrap();
            let base = masked_loss(pred3.view(), targets.view(), mask.view(), &q).unwrap();
            let mut pred_p = pred3.clone();
            let mut k = 0;
            for i in 0..2 { for v in 0..2 { for t in 0..3 {
                if !mask[[i, v, t]] {
                    targets[[i, v, t]] += noise[k];
                    for qi in 0..2 { pred_p[[i, v, qi, t]] -= noise[k + 1]; }
                }
                k += 2;
            }}}
            let after = masked_loss(pred_p.view(), targets.view(), mask.view(), &q).unwrap();
            prop_assert_eq!(base.total.to_bits(), after.total.to_bits());
        }

        #[test]
        fn loss_scales_linearly(
            vals in proptest::collection::vec(-5.0f64..5.0, 18),
            c in 0.1f64..10.0,
        ) {
            let pred = Array4::from_shape_vec((1, 2, 3, 3), vals.clone()).unwrap();
            let targets = Array3::from_shape_vec((1, 2, 3), vals[..6].iter().map(|x| x * 0.7 + 0.3).collect()).unwrap();
            let mask = Array3::from_elem((1, 2, 3), true);
            let a = masked_loss(pred.view(), targets.view(), mask.view(), &Q).unwrap();
            let b = masked_loss((&pred * c).view(), (&targets * c).view(), mask.view(), &Q).unwrap();
            prop_assert!(a.total >= 0.0);
            prop_assert!((b.total - c * a.total).abs() <= 1e-9 * (1.0 + b.total.abs()));
        }
    }
}
