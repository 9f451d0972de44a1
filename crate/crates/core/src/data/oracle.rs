use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::GrammarSpec;
use crate::error::{Error, Result};

/// Anticipation request for [`bayes_anticipation`].
#[derive(Debug, Clone, Copy)]
pub struct OracleQuery<'a> {
    pub observed: &'a [usize],
    pub horizon: usize,
    /// Full video length when known; continuations are then restricted to
    /// lengths within `length_tolerance` of it.
    pub total_len: Option<usize>,
    pub length_tolerance: usize,
    pub samples: usize,
    pub seed: u64,
}

/// Frame-wise most probable continuation of `observed` under the grammar,
/// estimated by sampling templates and durations consistent with the
/// prefix.
pub fn bayes_anticipation(spec: &GrammarSpec, q: &OracleQuery<'_>) -> Result<Vec<usize>> {
    spec.validate()?;
    if q.observed.is_empty() {
        return Err(Error::invalid("oracle needs an observed prefix"));
    }
    let mut segs: Vec<(usize, usize)> = Vec::new();
    for &c in q.observed {
        match segs.last_mut() {
            Some((last, n)) if *last == c => *n += 1,
            _ => segs.push((c, 1)),
        }
    }
    let n_obs = q.observed.len();
    let last_obs = *q.observed.last().expect("non-empty");

    // Posterior weight of each template given the completed segments and
    // the ongoing one.
    let mut candidates: Vec<(usize, f64)> = Vec::new();
    for (ti, tpl) in spec.templates.iter().enumerate() {
        if tpl.len() < segs.len() || tpl.iter().zip(&segs).any(|(&c, &(s, _))| c != s) {
            continue;
        }
        let mut w = 1.0;
        for (i, &(c, n)) in segs.iter().enumerate() {
            let (lo, hi) = spec.durations[c];
            let span = (hi - lo + 1) as f64;
            if i + 1 < segs.len() {
                if n < lo || n > hi {
                    w = 0.0;
                }
                w /= span;
            } else {
                let first = lo.max(n);
                w *= if first > hi {
                    0.0
                } else {
                    (hi - first + 1) as f64 / span
                };
            }
        }
        if w > 0.0 {
            candidates.push((ti, w));
        }
    }
    if candidates.is_empty() {
        return Ok(vec![last_obs; q.horizon]);
    }
    let total_w: f64 = candidates.iter().map(|c| c.1).sum();

    let k = spec.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(q.seed);
    let draw = |rng: &mut ChaCha8Rng, conditioned: bool, votes: &mut [f64]| -> bool {
        let mut u = rng.random::<f64>() * total_w;
        let mut ti = candidates[candidates.len() - 1].0;
        for &(t, w) in &candidates {
            if u < w {
                ti = t;
                break;
            }
            u -= w;
        }
        let tpl = &spec.templates[ti];
        let (ongoing, seen) = *segs.last().expect("non-empty");
        let (lo, hi) = spec.durations[ongoing];
        let mut future = Vec::with_capacity(q.horizon);
        let rest = rng.random_range(lo.max(seen)..=hi) - seen;
        future.extend(std::iter::repeat_n(ongoing, rest));
        for &c in &tpl[segs.len()..] {
            let (lo, hi) = spec.durations[c];
            future.extend(std::iter::repeat_n(c, rng.random_range(lo..=hi)));
        }
        if conditioned {
            if let Some(t) = q.total_len {
                if (n_obs + future.len()).abs_diff(t) > q.length_tolerance {
                    return false;
                }
            }
        }
        let end = *future.last().unwrap_or(&ongoing);
        for (i, v) in votes.chunks_exact_mut(k).enumerate() {
            v[future.get(i).copied().unwrap_or(end)] += 1.0;
        }
        true
    };

    let mut votes = vec![0.0; q.horizon * k];
    let mut accepted = 0;
    for _ in 0..q.samples {
        accepted += draw(&mut rng, true, &mut votes) as usize;
    }
    if accepted == 0 {
        for _ in 0..q.samples {
            draw(&mut rng, false, &mut votes);
        }
    }
    Ok(votes
        .chunks_exact(k)
        .map(|v| {
            let mut best = 0;
            for c in 1..k {
                if v[c] > v[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}
