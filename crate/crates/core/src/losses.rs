//! Frame-wise cross-entropy, truncated smoothing and boundary-alignment
//! losses over class probabilities, and their weighted combination.
//!
//! Every loss is available as a plain value and as a tape node whose
//! gradient with respect to the probabilities is computed in closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Lower clamp applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-8;
/// Default truncation of the smoothing loss.
pub const DEFAULT_TAU: f64 = 4.0;
/// Default width of the soft-boundary kernel, in frames.
pub const DEFAULT_SIGMA: f64 = 2.0;

/// Gaussian-smoothed indicator of label changes, one value per frame.
///
/// Both frames adjacent to every change are seeded with 1, the seeds are
/// convolved with a Gaussian truncated at `3 sigma`, and the result is
/// divided by the response of an isolated change so that change-adjacent
/// frames reach exactly 1. Values are clamped to `[0, 1]`.
pub fn soft_boundary(labels: &[usize], sigma: f64) -> Vec<f64> {
    let t = labels.len();
    let mut seeds = vec![0.0; t];
    for i in 1..t {
        if labels[i] != labels[i - 1] {
            seeds[i - 1] = 1.0;
            seeds[i] = 1.0;
        }
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return seeds;
    }
    let radius = (3.0 * sigma).floor() as usize;
    let kernel: Vec<f64> = (0..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let peak = kernel[0] + kernel.get(1).copied().unwrap_or(0.0);
    (0..t)
        .map(|i| {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(t.saturating_sub(1));
            let v: f64 = (lo..=hi)
                .filter(|&j| seeds[j] > 0.0)
                .map(|j| kernel[i.abs_diff(j)])
                .sum();
            (v / peak).clamp(0.0, 1.0)
        })
        .collect()
}

fn check_probs<F: Real>(probs: &Tensor<F>, frames: usize, what: &str) -> Result<()> {
    if probs.shape().len() != 2 || probs.rows() != frames {
        return Err(Error::shape(format!(
            "{what}: probabilities {:?} for {frames} frames",
            probs.shape()
        )));
    }
    Ok(())
}

fn check_filter(filter: Option<&[bool]>, frames: usize) -> Result<()> {
    match filter {
        Some(f) if f.len() != frames => Err(Error::shape(format!(
            "frame filter of length {} for {frames} frames",
            f.len()
        ))),
        _ => Ok(()),
    }
}

fn selected(filter: Option<&[bool]>, i: usize) -> bool {
    filter.is_none_or(|f| f[i])
}

fn pair_selected(filter: Option<&[bool]>, i: usize) -> bool {
    filter.is_none_or(|f| f[i] && f[i + 1])
}

/// Value and gradient of the cross-entropy against integer targets.
///
/// With a filter only the selected frames contribute, and the mean runs over
/// them.
pub fn ce_loss_grad<F: Real>(
    labels: &[usize],
    probs: &Tensor<F>,
    filter: Option<&[bool]>,
) -> Result<(F, Tensor<F>)> {
    check_probs(probs, labels.len(), "cross-entropy")?;
    check_filter(filter, labels.len())?;
    let k = probs.cols();
    let floor = F::lit(PROB_FLOOR);
    let n = (0..labels.len()).filter(|&i| selected(filter, i)).count();
    let mut grad = Tensor::zeros(probs.shape());
    if n == 0 {
        return Ok((F::zero(), grad));
    }
    let inv_n = F::one() / F::lit(n as f64);
    let mut total = F::zero();
    for (i, &c) in labels.iter().enumerate() {
        if c >= k {
            return Err(Error::invalid(format!("label {c} exceeds {k} classes")));
        }
        if !selected(filter, i) {
            continue;
        }
        let p = probs.at(i, c);
        total -= p.max(floor).ln();
        if p > floor {
            grad.row_mut(i)[c] = -inv_n / p;
        }
    }
    Ok((total * inv_n, grad))
}

/// `-(1/T) sum_i log A_hat[i, y_i]` with probabilities clamped at 1e-8.
pub fn ce_loss<F: Real>(labels: &[usize], probs: &Tensor<F>) -> Result<F> {
    Ok(ce_loss_grad(labels, probs, None)?.0)
}

/// Value and gradient of the truncated smoothing loss.
pub fn smooth_loss_grad<F: Real>(
    probs: &Tensor<F>,
    tau: f64,
    filter: Option<&[bool]>,
) -> Result<(F, Tensor<F>)> {
    if probs.shape().len() != 2 {
        return Err(Error::shape("smoothing loss expects a T x K matrix"));
    }
    let t = probs.rows();
    let k = probs.cols();
    check_filter(filter, t)?;
    let mut grad = Tensor::zeros(probs.shape());
    let pairs = (0..t.saturating_sub(1))
        .filter(|&i| pair_selected(filter, i))
        .count();
    if pairs == 0 || k == 0 {
        return Ok((F::zero(), grad));
    }
    let floor = F::lit(PROB_FLOOR);
    let tau = F::lit(tau);
    let norm = F::one() / F::lit((pairs * k) as f64);
    let two = F::lit(2.0);
    let mut total = F::zero();
    for i in 0..t - 1 {
        if !pair_selected(filter, i) {
            continue;
        }
        for c in 0..k {
            let (a, b) = (probs.at(i, c), probs.at(i + 1, c));
            let delta = a.max(floor).ln() - b.max(floor).ln();
            let clipped = delta.max(-tau).min(tau);
            total += clipped * clipped;
            if delta.abs() < tau {
                let g = two * clipped * norm;
                if a > floor {
                    grad.row_mut(i)[c] += g / a;
                }
                if b > floor {
                    grad.row_mut(i + 1)[c] -= g / b;
                }
            }
        }
    }
    Ok((total * norm, grad))
}

/// Mean over `(T-1) K` entries of the squared, `tau`-clipped difference of
/// adjacent log-probabilities.
pub fn smooth_loss<F: Real>(probs: &Tensor<F>, tau: f64) -> Result<F> {
    Ok(smooth_loss_grad(probs, tau, None)?.0)
}

/// Value and gradient of the boundary-alignment loss.
pub fn boundary_loss_grad<F: Real>(
    soft: &[f64],
    probs: &Tensor<F>,
    filter: Option<&[bool]>,
) -> Result<(F, Tensor<F>)> {
    check_probs(probs, soft.len(), "boundary loss")?;
    let t = soft.len();
    check_filter(filter, t)?;
    let mut grad = Tensor::zeros(probs.shape());
    let pairs = (0..t.saturating_sub(1))
        .filter(|&i| pair_selected(filter, i))
        .count();
    if pairs == 0 {
        return Ok((F::zero(), grad));
    }
    // The clamp runs in f64: in f32, 1 - 1e-8 rounds to 1.
    let (lo, hi) = (PROB_FLOOR, 1.0 - PROB_FLOOR);
    let norm = 1.0 / pairs as f64;
    let mut total = 0.0;
    for i in 0..t - 1 {
        if !pair_selected(filter, i) {
            continue;
        }
        let (ra, rb) = (probs.row(i), probs.row(i + 1));
        let p: f64 = ra
            .iter()
            .zip(rb)
            .map(|(&a, &b)| a.as_f64() * b.as_f64())
            .sum();
        let q = p.clamp(lo, hi);
        let b = soft[i];
        total -= b * (1.0 - q).ln() + (1.0 - b) * q.ln();
        if p > lo && p < hi {
            let dq = F::lit((b / (1.0 - q) - (1.0 - b) / q) * norm);
            let (before, after) = grad.data_mut().split_at_mut((i + 1) * probs.cols());
            let gi = &mut before[i * probs.cols()..];
            for c in 0..probs.cols() {
                gi[c] += dq * rb[c];
                after[c] += dq * ra[c];
            }
        }
    }
    Ok((F::lit(total * norm), grad))
}

/// Binary cross-entropy between the soft boundary and one minus the inner
/// product of adjacent probability rows.
pub fn boundary_loss<F: Real>(soft: &[f64], probs: &Tensor<F>) -> Result<F> {
    Ok(boundary_loss_grad(soft, probs, None)?.0)
}

fn record<F: Real>(tape: &mut Tape<F>, probs: Var, value: F, grad: Tensor<F>) -> Var {
    tape.custom_unary(
        probs,
        Tensor::scalar(value),
        Box::new(move |_, _, dy| grad.map(|g| g * dy.item())),
    )
}

/// Per-term scaling factors for the encoder and decoder objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub enc_ce: f64,
    pub enc_smooth: f64,
    pub enc_boundary: f64,
    pub dec_ce: f64,
    pub dec_smooth: f64,
    pub dec_boundary: f64,
}

impl LossWeights {
    /// The 50 Salads weighting.
    pub fn salads() -> Self {
        Self {
            enc_ce: 0.5,
            enc_smooth: 0.1,
            enc_boundary: 0.0,
            dec_ce: 0.5,
            dec_smooth: 0.1,
            dec_boundary: 0.1,
        }
    }

    pub fn zero() -> Self {
        Self {
            enc_ce: 0.0,
            enc_smooth: 0.0,
            enc_boundary: 0.0,
            dec_ce: 0.0,
            dec_smooth: 0.0,
            dec_boundary: 0.0,
        }
    }

    /// Same weights with every encoder term removed.
    pub fn without_encoder(mut self) -> Self {
        self.enc_ce = 0.0;
        self.enc_smooth = 0.0;
        self.enc_boundary = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.enc_ce,
            self.enc_smooth,
            self.enc_boundary,
            self.dec_ce,
            self.dec_smooth,
            self.dec_boundary,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(
                "loss weights must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::salads()
    }
}

/// Unweighted value of every term plus the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub enc_ce: f64,
    pub enc_smooth: f64,
    pub enc_boundary: f64,
    pub dec_ce: f64,
    pub dec_smooth: f64,
    pub dec_boundary: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.enc_ce * self.enc_ce
            + w.enc_smooth * self.enc_smooth
            + w.enc_boundary * self.enc_boundary
            + w.dec_ce * self.dec_ce
            + w.dec_smooth * self.dec_smooth
            + w.dec_boundary * self.dec_boundary
    }

    pub fn is_finite(&self) -> bool {
        [
            self.enc_ce,
            self.enc_smooth,
            self.enc_boundary,
            self.dec_ce,
            self.dec_smooth,
            self.dec_boundary,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Inputs shared by the encoder and decoder objectives of one video.
#[derive(Debug, Clone, Copy)]
pub struct LossTargets<'a> {
    pub labels: &'a [usize],
    pub soft_boundary: &'a [f64],
    pub tau: f64,
    /// Restricts the decoder terms to the selected frames.
    pub decoder_frames: Option<&'a [bool]>,
}

/// Weighted encoder and decoder objective recorded on `tape`.
pub fn total_loss_var<F: Real>(
    tape: &mut Tape<F>,
    enc_probs: Var,
    dec_probs: Var,
    targets: &LossTargets<'_>,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let mut terms = Vec::with_capacity(6);
    let mut values = [0.0; 6];
    let groups = [
        (
            enc_probs,
            None,
            [weights.enc_ce, weights.enc_smooth, weights.enc_boundary],
        ),
        (
            dec_probs,
            targets.decoder_frames,
            [weights.dec_ce, weights.dec_smooth, weights.dec_boundary],
        ),
    ];
    for (g, (probs, filter, w)) in groups.into_iter().enumerate() {
        let p = tape.value(probs).clone();
        let parts = [
            ce_loss_grad(targets.labels, &p, filter)?,
            smooth_loss_grad(&p, targets.tau, filter)?,
            boundary_loss_grad(targets.soft_boundary, &p, filter)?,
        ];
        for (j, ((value, grad), weight)) in parts.into_iter().zip(w).enumerate() {
            values[3 * g + j] = value.as_f64();
            if weight > 0.0 {
                let v = record(tape, probs, value, grad);
                terms.push((v, F::lit(weight)));
            }
        }
    }
    let mut breakdown = LossBreakdown {
        enc_ce: values[0],
        enc_smooth: values[1],
        enc_boundary: values[2],
        dec_ce: values[3],
        dec_smooth: values[4],
        dec_boundary: values[5],
        total: 0.0,
    };
    let total = if terms.is_empty() {
        tape.constant(Tensor::scalar(F::zero()))
    } else {
        tape.weighted_sum(&terms)?
    };
    breakdown.total = tape.value(total).item().as_f64();
    if !breakdown.is_finite() {
        return Err(Error::NonFinite(format!("loss breakdown {breakdown:?}")));
    }
    Ok((total, breakdown))
}

/// Value-only counterpart of [`total_loss_var`].
pub fn total_loss<F: Real>(
    enc_probs: &Tensor<F>,
    dec_probs: &Tensor<F>,
    targets: &LossTargets<'_>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let e = tape.constant(enc_probs.clone());
    let d = tape.constant(dec_probs.clone());
    Ok(total_loss_var(&mut tape, e, d, targets, weights)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, Coords};
    use approx::assert_abs_diff_eq;

    fn probs(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn soft_boundary_examples() {
        assert!(soft_boundary(&[2, 2, 2, 2], 1.0).iter().all(|&v| v == 0.0));
        let b = soft_boundary(&[0, 0, 1, 1], 1.0);
        assert_abs_diff_eq!(b[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b[2], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b[0], b[3], epsilon = 1e-12);
        assert!(b[0] < 0.5);
        let b = soft_boundary(&[0, 1, 0, 1, 2, 2, 0], 2.0);
        assert!(b.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn ce_examples() {
        let p = probs(&[&[0.8, 0.2], &[0.4, 0.6]]);
        let v = ce_loss(&[0, 1], &p).unwrap();
        assert_abs_diff_eq!(v, -(0.8f64.ln() + 0.6f64.ln()) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.366985, epsilon = 1e-6);
        let perfect = probs(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(ce_loss(&[0, 1], &perfect).unwrap() <= 1e-7);
        let uniform = Tensor::full(&[3, 4], 0.25);
        assert_abs_diff_eq!(
            ce_loss(&[0, 1, 3], &uniform).unwrap(),
            4f64.ln(),
            epsilon = 1e-12
        );
        assert!(ce_loss(&[0], &uniform).is_err());
    }

    #[test]
    fn smooth_examples() {
        let p = probs(&[&[(-1f64).exp()], &[(-3f64).exp()]]);
        assert_abs_diff_eq!(smooth_loss(&p, 4.0).unwrap(), 4.0, epsilon = 1e-12);
        let flat = Tensor::full(&[5, 3], 1.0 / 3.0);
        assert_eq!(smooth_loss(&flat, 4.0).unwrap(), 0.0);
        let spiky = probs(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_abs_diff_eq!(smooth_loss(&spiky, 4.0).unwrap(), 16.0, epsilon = 1e-12);
    }

    #[test]
    fn boundary_examples() {
        let p = probs(&[&[1.0, 0.0], &[0.5, 0.5]]);
        let v = boundary_loss(&[0.5, 0.5], &p).unwrap();
        assert_abs_diff_eq!(v, 2f64.ln(), epsilon = 1e-12);
        let same = probs(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert!(boundary_loss(&[0.0, 0.0], &same).unwrap() < 1e-7);
        let orth = probs(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(boundary_loss(&[1.0, 1.0], &orth).unwrap() < 1e-7);
    }

    #[test]
    fn boundary_is_finite_in_single_precision() {
        let p = Tensor::<f32>::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let (v, g) = boundary_loss_grad(&[1.0, 1.0], &p, None).unwrap();
        assert!(v.is_finite() && v > 10.0);
        assert!(g.data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn filter_restricts_frames() {
        let p = probs(&[&[0.8, 0.2], &[0.4, 0.6], &[0.1, 0.9]]);
        let sel = [false, true, true];
        let (v, g) = ce_loss_grad(&[0, 1, 1], &p, Some(&sel)).unwrap();
        assert_abs_diff_eq!(v, -(0.6f64.ln() + 0.9f64.ln()) / 2.0, epsilon = 1e-12);
        assert!(g.row(0).iter().all(|&x| x == 0.0));
        let (s, _) = smooth_loss_grad(&p, 4.0, Some(&[true, false, true])).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn zero_weights_give_zero() {
        let p = Tensor::full(&[4, 3], 1.0 / 3.0);
        let soft = soft_boundary(&[0, 0, 1, 1], 1.0);
        let targets = LossTargets {
            labels: &[0, 0, 1, 1],
            soft_boundary: &soft,
            tau: DEFAULT_TAU,
            decoder_frames: None,
        };
        let b = total_loss(&p, &p, &targets, &LossWeights::zero()).unwrap();
        assert_eq!(b.total, 0.0);
        let w = LossWeights::salads();
        let b = total_loss(&p, &p, &targets, &w).unwrap();
        assert_abs_diff_eq!(b.total, b.weighted_sum(&w), epsilon = 1e-12);
    }

    fn simplex_params(seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..15).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor::from_f64(&[5, 3], &data).unwrap()
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let labels = [0, 0, 2, 2, 1];
        let soft = soft_boundary(&labels, 1.0);
        for seed in 0..5 {
            let report = finite_diff_check(
                |tape, p| {
                    let probs = tape.softmax(p[0]);
                    let targets = LossTargets {
                        labels: &labels,
                        soft_boundary: &soft,
                        tau: 1.0,
                        decoder_frames: Some(&[true, false, true, true, true]),
                    };
                    let w = LossWeights {
                        enc_boundary: 0.3,
                        ..LossWeights::salads()
                    };
                    Ok(total_loss_var(tape, probs, probs, &targets, &w)?.0)
                },
                &[simplex_params(seed)],
                1e-6,
                Coords::All,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "seed {seed}: {report:?}");
        }
    }
}
