use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(parameter index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
}

/// Which coordinates to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// Up to `n` coordinates drawn without replacement with a fixed seed.
    Sample {
        n: usize,
        seed: u64,
    },
}

/// Compares `d loss / d params` from [`Tape::backward`] with central finite
/// differences `(f(p + h) - f(p - h)) / 2h`.
///
/// `build` records the scalar loss on the given tape from the parameter
/// handles. The error of one coordinate is
/// `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`; the report carries the max.
pub fn finite_diff_check<B>(
    build: B,
    params: &[Tensor<f64>],
    h: f64,
    coords: Coords,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::invalid(format!(
            "finite difference step {h} outside [1e-6, 1e-3]"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.grad(v)).collect();

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.constant(p.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("finite difference evaluation".into()));
        }
        Ok(v)
    };

    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
        .collect();
    let chosen: Vec<(usize, usize)> = match coords {
        Coords::All => all,
        Coords::Sample { n, seed } if n < all.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, all.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| all[i]).collect()
        }
        Coords::Sample { .. } => all,
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (p, i) in chosen {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + h;
        let plus = eval(&work)?;
        work[p].data_mut()[i] = orig - h;
        let minus = eval(&work)?;
        work[p].data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let ad = analytic[p].data()[i];
        let err = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
        report.coords_checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((p, i));
        }
    }
    Ok(report)
}
