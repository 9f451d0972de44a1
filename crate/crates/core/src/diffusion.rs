//! Noise schedule, label scaling, closed-form forward noising and the
//! deterministic DDIM reverse process.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Linear variance schedule over steps `1..=S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Schedule {
    /// `beta` interpolated linearly from `beta_start` (s = 1) to `beta_end`
    /// (s = S); `alpha_bar[s]` is the running product of `1 - beta`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Total number of forward steps `S`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, s: usize) -> f64 {
        self.betas[s - 1]
    }

    pub fn alpha(&self, s: usize) -> f64 {
        self.alphas[s - 1]
    }

    /// Cumulative product up to step `s`. Step 0 is the clean signal, so
    /// `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, s: usize) -> f64 {
        if s == 0 {
            1.0
        } else {
            self.alpha_bars[s - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, s: usize) -> Result<()> {
        if s == 0 || s > self.steps() {
            return Err(Error::invalid(format!(
                "time step {s} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// One-hot encoding of `labels` over `num_classes`.
pub fn one_hot<F: Real>(labels: &[usize], num_classes: usize) -> Result<Tensor<F>> {
    let mut out = Tensor::zeros(&[labels.len(), num_classes]);
    for (i, &c) in labels.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::invalid(format!(
                "label {c} at frame {i} exceeds {num_classes} classes"
            )));
        }
        out.row_mut(i)[c] = F::one();
    }
    Ok(out)
}

/// Maps one-hot rows from `{0, 1}` to `{-scale, +scale}`.
///
/// Rows that are not one-hot are rejected when `strict`, otherwise they are
/// mapped with the same affine rule and a warning is logged.
pub fn scale_labels<F: Real>(onehot: &Tensor<F>, scale: f64, strict: bool) -> Result<Tensor<F>> {
    for i in 0..onehot.rows() {
        let row = onehot.row(i);
        let ones = row.iter().filter(|&&v| v == F::one()).count();
        let zeros = row.iter().filter(|&&v| v == F::zero()).count();
        if ones != 1 || ones + zeros != row.len() {
            if strict {
                return Err(Error::invalid(format!("row {i} is not one-hot")));
            }
            log::warn!("row {i} is not one-hot; scaling anyway");
        }
    }
    let s = F::lit(scale);
    let two = F::lit(2.0);
    Ok(onehot.map(|v| (v * two - F::one()) * s))
}

/// Inverse of [`scale_labels`].
pub fn unscale_labels<F: Real>(scaled: &Tensor<F>, scale: f64) -> Tensor<F> {
    let s = F::lit(scale);
    let half = F::lit(0.5);
    scaled.map(|v| (v / s + F::one()) * half)
}

pub fn clamp_signal<F: Real>(x: &Tensor<F>, scale: f64) -> Tensor<F> {
    let s = F::lit(scale);
    x.map(|v| v.max(-s).min(s))
}

/// `sqrt(alpha_bar) * a0 + sqrt(1 - alpha_bar) * eps`.
pub fn noise_with_alpha_bar<F: Real>(
    a0: &Tensor<F>,
    eps: &Tensor<F>,
    alpha_bar: f64,
) -> Result<Tensor<F>> {
    if a0.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "signal {:?} vs noise {:?}",
            a0.shape(),
            eps.shape()
        )));
    }
    let (ca, ce) = (F::lit(alpha_bar.sqrt()), F::lit((1.0 - alpha_bar).sqrt()));
    let data = a0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| ca * x + ce * e)
        .collect();
    Tensor::new(a0.shape().to_vec(), data)
}

/// Closed-form forward process at step `s` (1-based).
pub fn forward_noise<F: Real>(
    a0: &Tensor<F>,
    s: usize,
    eps: &Tensor<F>,
    sched: &Schedule,
) -> Result<Tensor<F>> {
    sched.check_step(s)?;
    noise_with_alpha_bar(a0, eps, sched.alpha_bar(s))
}

/// Deterministic (eta = 0) DDIM update from `t_now` to `t_next`.
///
/// `t_next == -1` is the terminal step and returns `a0_hat` unchanged.
pub fn ddim_step<F: Real>(
    a_s: &Tensor<F>,
    a0_hat: &Tensor<F>,
    t_now: usize,
    t_next: isize,
    sched: &Schedule,
) -> Result<Tensor<F>> {
    sched.check_step(t_now)?;
    if t_next >= t_now as isize || t_next < -1 {
        return Err(Error::invalid(format!(
            "DDIM step must go backwards: {t_now} -> {t_next}"
        )));
    }
    if a_s.shape() != a0_hat.shape() {
        return Err(Error::shape("DDIM state and prediction differ in shape"));
    }
    if t_next < 0 {
        return Ok(a0_hat.clone());
    }
    let ab_now = sched.alpha_bar(t_now);
    let ab_next = sched.alpha_bar(t_next as usize);
    let sqrt_now = F::lit(ab_now.sqrt());
    let denom = (1.0 - ab_now).sqrt();
    let (c0, ce) = (F::lit(ab_next.sqrt()), F::lit((1.0 - ab_next).sqrt()));
    let mut out = Vec::with_capacity(a_s.numel());
    for (&x, &x0) in a_s.data().iter().zip(a0_hat.data()) {
        let residual = x - sqrt_now * x0;
        let eps_hat = if denom == 0.0 {
            if residual != F::zero() {
                return Err(Error::invalid(
                    "alpha_bar(t_now) = 1 leaves the noise estimate undefined",
                ));
            }
            F::zero()
        } else {
            residual / F::lit(denom)
        };
        out.push(c0 * x0 + ce * eps_hat);
    }
    Tensor::new(a_s.shape().to_vec(), out)
}

/// Ordered `(t_now, t_next)` pairs for skipped-step inference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub pairs: Vec<(usize, isize)>,
}

/// `steps` evenly spaced values from -1 to `S`, rounded to the nearest
/// integer, de-duplicated, reversed and paired consecutively.
///
/// A value rounding to 0 is dropped: step 0 is the clean signal and cannot
/// be denoised from.
pub fn inference_times(total_steps: usize, steps: usize) -> Result<TimeGrid> {
    if steps < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 inference steps, got {steps}"
        )));
    }
    if total_steps == 0 {
        return Err(Error::invalid("schedule has no steps"));
    }
    let span = total_steps as f64 + 1.0;
    let mut times: Vec<isize> = Vec::with_capacity(steps);
    for i in 0..steps {
        let v = (-1.0 + span * i as f64 / (steps - 1) as f64).round() as isize;
        if v == 0 {
            continue;
        }
        if times.last() != Some(&v) {
            times.push(v);
        }
    }
    times.reverse();
    let pairs = times.windows(2).map(|w| (w[0] as usize, w[1])).collect();
    Ok(TimeGrid { pairs })
}

pub fn standard_normal<F: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<F> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| F::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Runs the reverse process from pure noise.
///
/// `decode` maps `(clamped A^s, t_now)` to an estimate of the clean signal;
/// the estimate is clamped to `[-scale, scale]` before each DDIM update and
/// the last estimate is returned.
pub fn denoise_loop<F, D, R>(
    mut decode: D,
    frames: usize,
    classes: usize,
    steps: usize,
    sched: &Schedule,
    scale: f64,
    rng: &mut R,
) -> Result<Tensor<F>>
where
    F: Real,
    D: FnMut(&Tensor<F>, usize) -> Result<Tensor<F>>,
    R: Rng + ?Sized,
{
    let grid = inference_times(sched.steps(), steps)?;
    let mut a_s = standard_normal::<F, _>(rng, &[frames, classes]);
    let mut a0_hat = Tensor::zeros(&[frames, classes]);
    for &(t_now, t_next) in &grid.pairs {
        let input = clamp_signal(&a_s, scale);
        a0_hat = clamp_signal(&decode(&input, t_now)?, scale);
        a_s = ddim_step(&a_s, &a0_hat, t_now, t_next, sched)?;
    }
    Ok(a0_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_abs_diff_eq!(s.alpha_bar(1), 0.9999, epsilon = 1e-15);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));

        let s = Schedule::linear(2, 0.1, 0.2).unwrap();
        assert_abs_diff_eq!(s.alpha_bar(1), 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(s.alpha_bar(2), 0.72, epsilon = 1e-15);
        assert_eq!(s.alpha_bar(1), s.alpha(1));
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(Schedule::linear(0, 1e-4, 0.02).is_err());
        assert!(Schedule::linear(10, 0.0, 0.02).is_err());
        assert!(Schedule::linear(10, 0.03, 0.02).is_err());
        assert!(Schedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn scaling_examples() {
        let x = Tensor::<f64>::from_f64(&[1, 3], &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            scale_labels(&x, 1.0, true).unwrap().data(),
            &[1.0, -1.0, -1.0]
        );
        assert_eq!(
            scale_labels(&x, 0.5, true).unwrap().data(),
            &[0.5, -0.5, -0.5]
        );
        let back = unscale_labels(&scale_labels(&x, 0.5, true).unwrap(), 0.5);
        assert_eq!(back, x);
        let bad = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 1.0]).unwrap();
        assert!(scale_labels(&bad, 1.0, true).is_err());
        assert!(scale_labels(&bad, 1.0, false).is_ok());
    }

    #[test]
    fn forward_noise_examples() {
        let got = noise_with_alpha_bar(&t1(2.0), &t1(1.0), 0.25).unwrap();
        assert_abs_diff_eq!(got.item(), 1.0 + 0.75f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(got.item(), 1.866025, epsilon = 1e-6);
        assert_eq!(
            noise_with_alpha_bar(&t1(2.0), &t1(-0.3), 1.0)
                .unwrap()
                .item(),
            2.0
        );
        assert_eq!(
            noise_with_alpha_bar(&t1(2.0), &t1(-0.3), 0.0)
                .unwrap()
                .item(),
            -0.3
        );
        let s = Schedule::linear(10, 1e-4, 0.02).unwrap();
        assert!(forward_noise(&t1(1.0), 0, &t1(0.0), &s).is_err());
        assert!(forward_noise(&t1(1.0), 11, &t1(0.0), &s).is_err());
    }

    #[test]
    fn ddim_hand_example() {
        // alpha_bar = 0.25 at step 2 and 0.81 at step 1.
        let sched = Schedule::from_betas(vec![0.19, 1.0 - 0.25 / 0.81]).unwrap();
        assert_abs_diff_eq!(sched.alpha_bar(2), 0.25, epsilon = 1e-12);
        let a_s = t1(1.0 + 0.75f64.sqrt());
        let out = ddim_step(&a_s, &t1(2.0), 2, 1, &sched).unwrap();
        assert_abs_diff_eq!(out.item(), 1.8 + 0.19f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(out.item(), 2.235890, epsilon = 1e-6);
        let last = ddim_step(&a_s, &t1(2.0), 2, -1, &sched).unwrap();
        assert_eq!(last.item(), 2.0);
    }

    #[test]
    fn ddim_rejects_forward_steps() {
        let sched = Schedule::linear(10, 1e-4, 0.02).unwrap();
        assert!(ddim_step(&t1(0.0), &t1(0.0), 3, 3, &sched).is_err());
        assert!(ddim_step(&t1(0.0), &t1(0.0), 0, -1, &sched).is_err());
    }

    #[test]
    fn time_grid_examples() {
        let g = inference_times(1000, 2).unwrap();
        assert_eq!(g.pairs, vec![(1000, -1)]);
        let g = inference_times(1000, 25).unwrap();
        assert_eq!(g.pairs.len(), 24);
        assert_eq!(g.pairs[0].0, 1000);
        assert_eq!(g.pairs.last().unwrap().1, -1);
        for w in g.pairs.windows(2) {
            assert_eq!(w[0].1, w[1].0 as isize);
            assert!(w[1].0 < w[0].0);
        }
        assert!(inference_times(1000, 1).is_err());
    }

    #[test]
    fn time_grid_never_contains_step_zero() {
        for steps in 2..40 {
            let g = inference_times(12, steps).unwrap();
            assert!(g.pairs.iter().all(|&(now, next)| now >= 1 && next != 0));
        }
    }

    #[test]
    fn denoise_loop_is_seed_deterministic() {
        let sched = Schedule::linear(50, 1e-4, 0.02).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            denoise_loop::<f64, _, _>(
                |x, _| Ok(x.map(|v| 0.5 * v)),
                6,
                3,
                5,
                &sched,
                1.0,
                &mut rng,
            )
            .unwrap()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
