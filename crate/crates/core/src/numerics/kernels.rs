//! Forward primitives and their vector-Jacobian products.
//!
//! Everything here works on 2-D row-major matrices (`frames x channels`).
//! The tape in [`super::tape`] wires these into a differentiable graph; the
//! functions are also usable directly for inference.

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

fn expect_matrix<F: Real>(t: &Tensor<F>, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(format!(
            "{what} must be 2-D, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `a [m,k] @ b [k,n]`.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = expect_matrix(a, "matmul lhs")?;
    let (k2, n) = expect_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!("matmul inner dims {k} vs {k2}")));
    }
    let mut out = vec![F::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Gradients of `a @ b` given `dy`: returns `(dy @ b^T, a^T @ dy)`.
pub fn matmul_backward<F: Real>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd, gd) = (a.data(), b.data(), dy.data());
    let mut da = vec![F::zero(); m * k];
    let mut db = vec![F::zero(); k * n];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            let mut acc = F::zero();
            for (&g, &bv) in grow.iter().zip(brow) {
                acc += g * bv;
            }
            da[i * k + p] = acc;
            let av = ad[i * k + p];
            if av != F::zero() {
                let dbrow = &mut db[p * n..(p + 1) * n];
                for (d, &g) in dbrow.iter_mut().zip(grow) {
                    *d += av * g;
                }
            }
        }
    }
    (
        Tensor::new(vec![m, k], da).expect("shape"),
        Tensor::new(vec![k, n], db).expect("shape"),
    )
}

/// Dilated 1-D convolution over time with zero padding.
///
/// `x` is `T x C_in`, `kernel` is `k x C_in x C_out` and `bias` has `C_out`
/// entries. The output keeps length `T`:
/// `y[t,o] = bias[o] + sum_{j,c} x[t + (j - (k-1)/2) * d, c] * kernel[j,c,o]`.
pub fn conv1d_dilated<F: Real>(
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: &Tensor<F>,
    dilation: usize,
) -> Result<Tensor<F>> {
    let (t_len, c_in) = expect_matrix(x, "conv input")?;
    let ks = kernel.shape();
    if ks.len() != 3 || ks[1] != c_in {
        return Err(Error::shape(format!(
            "conv kernel {ks:?} does not match input channels {c_in}"
        )));
    }
    let (k, c_out) = (ks[0], ks[2]);
    if k % 2 == 0 {
        return Err(Error::invalid(format!("conv kernel size {k} must be odd")));
    }
    if dilation == 0 {
        return Err(Error::invalid("dilation must be positive"));
    }
    if bias.numel() != c_out {
        return Err(Error::shape(format!(
            "conv bias has {} entries, expected {c_out}",
            bias.numel()
        )));
    }
    let half = (k - 1) / 2;
    let (xd, wd) = (x.data(), kernel.data());
    let mut out = Vec::with_capacity(t_len * c_out);
    for _ in 0..t_len {
        out.extend_from_slice(bias.data());
    }
    for t in 0..t_len {
        let orow = &mut out[t * c_out..(t + 1) * c_out];
        for j in 0..k {
            let offset = (j as isize - half as isize) * dilation as isize;
            let src = t as isize + offset;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let xrow = &xd[src as usize * c_in..(src as usize + 1) * c_in];
            for (c, &xv) in xrow.iter().enumerate() {
                if xv == F::zero() {
                    continue;
                }
                let wrow = &wd[(j * c_in + c) * c_out..(j * c_in + c + 1) * c_out];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
    }
    Tensor::new(vec![t_len, c_out], out)
}

/// Returns `(dx, dkernel, dbias)`.
pub fn conv1d_dilated_backward<F: Real>(
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    dilation: usize,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (t_len, c_in) = (x.shape()[0], x.shape()[1]);
    let (k, c_out) = (kernel.shape()[0], kernel.shape()[2]);
    let half = (k - 1) / 2;
    let (xd, wd, gd) = (x.data(), kernel.data(), dy.data());
    let mut dx = vec![F::zero(); t_len * c_in];
    let mut dw = vec![F::zero(); k * c_in * c_out];
    let mut db = vec![F::zero(); c_out];
    for t in 0..t_len {
        let grow = &gd[t * c_out..(t + 1) * c_out];
        for (d, &g) in db.iter_mut().zip(grow) {
            *d += g;
        }
        for j in 0..k {
            let src = t as isize + (j as isize - half as isize) * dilation as isize;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let src = src as usize;
            for c in 0..c_in {
                let widx = (j * c_in + c) * c_out;
                let wrow = &wd[widx..widx + c_out];
                let mut acc = F::zero();
                for (&g, &wv) in grow.iter().zip(wrow) {
                    acc += g * wv;
                }
                dx[src * c_in + c] += acc;
                let xv = xd[src * c_in + c];
                if xv != F::zero() {
                    for (d, &g) in dw[widx..widx + c_out].iter_mut().zip(grow) {
                        *d += xv * g;
                    }
                }
            }
        }
    }
    (
        Tensor::new(vec![t_len, c_in], dx).expect("shape"),
        Tensor::new(kernel.shape().to_vec(), dw).expect("shape"),
        Tensor::new(vec![c_out], db).expect("shape"),
    )
}

/// Learnable additive attention bias indexed by signed frame offset `i - j`.
///
/// The table holds `2 * max_distance + 1` entries; offsets beyond
/// `±max_distance` reuse the boundary entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelPosBias<F> {
    pub table: Vec<F>,
    pub max_distance: usize,
}

impl<F: Real> RelPosBias<F> {
    pub fn zeros(max_distance: usize) -> Self {
        Self {
            table: vec![F::zero(); 2 * max_distance + 1],
            max_distance,
        }
    }

    pub fn from_table(table: Vec<F>) -> Result<Self> {
        if table.len().is_multiple_of(2) {
            return Err(Error::shape(format!(
                "relative bias table length {} must be odd",
                table.len()
            )));
        }
        let max_distance = (table.len() - 1) / 2;
        Ok(Self {
            table,
            max_distance,
        })
    }

    #[inline]
    pub fn index(&self, offset: isize) -> usize {
        bias_index(offset, self.max_distance)
    }

    #[inline]
    pub fn lookup(&self, offset: isize) -> F {
        self.table[self.index(offset)]
    }
}

#[inline]
pub(crate) fn bias_index(offset: isize, max_distance: usize) -> usize {
    let w = max_distance as isize;
    (offset.clamp(-w, w) + w) as usize
}

/// Attention probabilities kept for the backward pass. Row `i` attends to
/// frames `starts[i]..starts[i] + lens[i]`; the probabilities sit at
/// `offsets[i]..offsets[i] + lens[i]` in `probs`.
#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    pub starts: Vec<usize>,
    pub lens: Vec<usize>,
    pub offsets: Vec<usize>,
    pub probs: Vec<F>,
}

/// Converts a total window span into the half-width each frame can reach.
pub fn half_window(window: usize) -> usize {
    window / 2
}

/// Single-head local attention: row `i` attends to frames `j` with
/// `|i - j| <= half` using scores `q_i . k_j / sqrt(D) + bias[i - j]`.
pub fn attention_forward<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    half: usize,
    bias: Option<&RelPosBias<F>>,
) -> Result<(Tensor<F>, AttentionCache<F>)> {
    let (t_len, d) = expect_matrix(q, "attention query")?;
    let (tk, dk) = expect_matrix(k, "attention key")?;
    let (tv, dv) = expect_matrix(v, "attention value")?;
    if dk != d {
        return Err(Error::shape(format!("query dim {d} vs key dim {dk}")));
    }
    if tk != t_len || tv != t_len {
        return Err(Error::shape(format!(
            "attention lengths differ: {t_len}, {tk}, {tv}"
        )));
    }
    let scale = F::one() / F::lit(d as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![F::zero(); t_len * dv];
    let mut cache = AttentionCache {
        starts: Vec::with_capacity(t_len),
        lens: Vec::with_capacity(t_len),
        offsets: Vec::with_capacity(t_len),
        probs: Vec::with_capacity(t_len * (2 * half + 1).min(t_len.max(1))),
    };
    let mut scores = Vec::with_capacity(2 * half + 1);
    for i in 0..t_len {
        let start = i.saturating_sub(half);
        let end = (i + half + 1).min(t_len);
        let qrow = &qd[i * d..(i + 1) * d];
        scores.clear();
        let mut max = F::neg_infinity();
        for j in start..end {
            let krow = &kd[j * d..(j + 1) * d];
            let mut s = F::zero();
            for (&a, &b) in qrow.iter().zip(krow) {
                s += a * b;
            }
            s *= scale;
            if let Some(b) = bias {
                s += b.lookup(i as isize - j as isize);
            }
            if s > max {
                max = s;
            }
            scores.push(s);
        }
        let mut total = F::zero();
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        cache.starts.push(start);
        cache.lens.push(end - start);
        cache.offsets.push(cache.probs.len());
        let orow = &mut out[i * dv..(i + 1) * dv];
        for (idx, j) in (start..end).enumerate() {
            let p = scores[idx] / total;
            cache.probs.push(p);
            let vrow = &vd[j * dv..(j + 1) * dv];
            for (o, &vv) in orow.iter_mut().zip(vrow) {
                *o += p * vv;
            }
        }
    }
    Ok((Tensor::new(vec![t_len, dv], out)?, cache))
}

/// Returns `(dq, dk, dv, dbias_table)`; the bias gradient is `None` when no
/// bias table was used.
pub fn attention_backward<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    bias_len: Option<usize>,
    cache: &AttentionCache<F>,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>, Option<Tensor<F>>) {
    let (t_len, d) = (q.shape()[0], q.shape()[1]);
    let dv_dim = v.shape()[1];
    let scale = F::one() / F::lit(d as f64).sqrt();
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), dy.data());
    let mut dq = vec![F::zero(); t_len * d];
    let mut dk = vec![F::zero(); t_len * d];
    let mut dv = vec![F::zero(); t_len * dv_dim];
    let mut dbias = bias_len.map(|n| vec![F::zero(); n]);
    let max_distance = bias_len.map(|n| (n - 1) / 2).unwrap_or(0);
    let mut dp = Vec::new();
    for i in 0..t_len {
        let (start, len, off) = (cache.starts[i], cache.lens[i], cache.offsets[i]);
        let probs = &cache.probs[off..off + len];
        let grow = &gd[i * dv_dim..(i + 1) * dv_dim];
        dp.clear();
        let mut weighted = F::zero();
        for (idx, &p) in probs.iter().enumerate() {
            let j = start + idx;
            let vrow = &vd[j * dv_dim..(j + 1) * dv_dim];
            let mut acc = F::zero();
            for (&g, &vv) in grow.iter().zip(vrow) {
                acc += g * vv;
            }
            dp.push(acc);
            weighted += p * acc;
            let dvrow = &mut dv[j * dv_dim..(j + 1) * dv_dim];
            for (o, &g) in dvrow.iter_mut().zip(grow) {
                *o += p * g;
            }
        }
        let qrow = &qd[i * d..(i + 1) * d];
        for (idx, &p) in probs.iter().enumerate() {
            let j = start + idx;
            let ds = p * (dp[idx] - weighted);
            if let Some(db) = dbias.as_mut() {
                db[bias_index(i as isize - j as isize, max_distance)] += ds;
            }
            let ds = ds * scale;
            let krow = &kd[j * d..(j + 1) * d];
            let dqrow = &mut dq[i * d..(i + 1) * d];
            for (o, &kv) in dqrow.iter_mut().zip(krow) {
                *o += ds * kv;
            }
            let dkrow = &mut dk[j * d..(j + 1) * d];
            for (o, &qv) in dkrow.iter_mut().zip(qrow) {
                *o += ds * qv;
            }
        }
    }
    (
        Tensor::new(vec![t_len, d], dq).expect("shape"),
        Tensor::new(vec![t_len, d], dk).expect("shape"),
        Tensor::new(vec![t_len, dv_dim], dv).expect("shape"),
        dbias.map(|b| {
            let n = b.len();
            Tensor::new(vec![n], b).expect("shape")
        }),
    )
}

/// Windowed attention where `window` is the total span: frame `i` sees
/// frames `j` with `|i - j| <= window / 2`.
pub fn windowed_attention<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    window: usize,
    bias: Option<&RelPosBias<F>>,
) -> Result<Tensor<F>> {
    if window == 0 {
        return Err(Error::invalid("attention window must be positive"));
    }
    attention_forward(q, k, v, half_window(window), bias).map(|(out, _)| out)
}

/// Per-channel statistics kept for the instance norm backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<F> {
    /// Normalized input before any affine transform.
    pub normalized: Tensor<F>,
    pub inv_std: Vec<F>,
}

/// Normalizes every channel over time: `(x - mean) / sqrt(var + eps)`.
pub fn instance_norm_forward<F: Real>(x: &Tensor<F>, eps: F) -> Result<NormCache<F>> {
    let (t_len, d) = expect_matrix(x, "instance norm input")?;
    if t_len == 0 {
        return Err(Error::invalid("instance norm needs at least one frame"));
    }
    let n = F::lit(t_len as f64);
    let xd = x.data();
    let mut mean = vec![F::zero(); d];
    for t in 0..t_len {
        for (m, &v) in mean.iter_mut().zip(&xd[t * d..(t + 1) * d]) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![F::zero(); d];
    for t in 0..t_len {
        for ((s, &v), &m) in var.iter_mut().zip(&xd[t * d..(t + 1) * d]).zip(&mean) {
            let c = v - m;
            *s += c * c;
        }
    }
    let inv_std: Vec<F> = var
        .iter()
        .map(|&s| F::one() / (s / n + eps).sqrt())
        .collect();
    let mut out = Vec::with_capacity(t_len * d);
    for t in 0..t_len {
        for c in 0..d {
            out.push((xd[t * d + c] - mean[c]) * inv_std[c]);
        }
    }
    Ok(NormCache {
        normalized: Tensor::new(vec![t_len, d], out)?,
        inv_std,
    })
}

/// Instance normalization with an optional per-channel `(scale, shift)`.
pub fn instance_norm<F: Real>(
    x: &Tensor<F>,
    eps: F,
    affine: Option<(&[F], &[F])>,
) -> Result<Tensor<F>> {
    let mut y = instance_norm_forward(x, eps)?.normalized;
    if let Some((gamma, beta)) = affine {
        let d = y.cols();
        if gamma.len() != d || beta.len() != d {
            return Err(Error::shape("instance norm affine parameters"));
        }
        for t in 0..y.rows() {
            for ((v, &g), &b) in y.row_mut(t).iter_mut().zip(gamma).zip(beta) {
                *v = *v * g + b;
            }
        }
    }
    Ok(y)
}

pub fn instance_norm_backward<F: Real>(cache: &NormCache<F>, dy: &Tensor<F>) -> Tensor<F> {
    let (t_len, d) = (dy.shape()[0], dy.shape()[1]);
    let n = F::lit(t_len as f64);
    let (yd, gd) = (cache.normalized.data(), dy.data());
    let mut sum_g = vec![F::zero(); d];
    let mut sum_gy = vec![F::zero(); d];
    for t in 0..t_len {
        for c in 0..d {
            let g = gd[t * d + c];
            sum_g[c] += g;
            sum_gy[c] += g * yd[t * d + c];
        }
    }
    let mut dx = Vec::with_capacity(t_len * d);
    for t in 0..t_len {
        for c in 0..d {
            let g = gd[t * d + c];
            let y = yd[t * d + c];
            dx.push(cache.inv_std[c] * (g - sum_g[c] / n - y * sum_gy[c] / n));
        }
    }
    Tensor::new(vec![t_len, d], dx).expect("shape")
}

/// Row-wise softmax.
pub fn softmax_rows<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub fn softmax_rows_backward<F: Real>(probs: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let mut dx = dy.clone();
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let g = dy.row(i);
        let dot: F = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for ((o, &pv), &gv) in dx.row_mut(i).iter_mut().zip(p).zip(g) {
            *o = pv * (gv - dot);
        }
    }
    dx
}
