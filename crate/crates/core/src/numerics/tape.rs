//! Reverse-mode differentiation over a linear record of primitive calls.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Nodes are
//! appended in execution order, so the record is topologically sorted by
//! construction and [`Tape::backward`] simply walks it in reverse.

use super::kernels::{self, AttentionCache, NormCache, RelPosBias};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a custom unary op: `(input, output, dy) -> dx`.
pub type UnaryVjp<F> = Box<dyn Fn(&Tensor<F>, &Tensor<F>, &Tensor<F>) -> Tensor<F>>;

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Concat(Vec<Var>),
    MaskRows {
        x: Var,
        token: Var,
        mask: Vec<bool>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        cache: AttentionCache<F>,
    },
    InstanceNorm {
        x: Var,
        cache: NormCache<F>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Softmax(Var),
    Sum(Var),
    WeightedSum(Vec<(Var, F)>),
    Custom {
        input: Var,
        vjp: UnaryVjp<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`; exact zeros when `v` does not influence the loss.
    pub fn grad(&self, v: Var) -> Tensor<F> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<F> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a trainable leaf.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `x [m,n] + b` with `b` (n values) broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        if xv.shape().len() != 2 || bv.numel() != xv.cols() {
            return Err(Error::shape(format!(
                "row broadcast of {:?} onto {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, &bb) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let ng = self.needs(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), ng))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "add {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.clone();
        out.add_scaled(bv, F::one());
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "mul {:?} * {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(&[x]);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(F::zero()));
        let ng = self.needs(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    /// Channel-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let v = self.value(*p);
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(Error::shape(format!(
                    "concat expects {rows} rows, got {:?}",
                    v.shape()
                )));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let ng = self.needs(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    /// Row selection `out[i] = x[i]` if `mask[i]` else `token`.
    pub fn mask_rows(&mut self, x: Var, token: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let tv = self.value(token);
        if xv.shape().len() != 2 || xv.rows() != mask.len() || tv.numel() != xv.cols() {
            return Err(Error::shape(format!(
                "mask of length {} with token {:?} over input {:?}",
                mask.len(),
                tv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for (i, &visible) in mask.iter().enumerate() {
            if !visible {
                out.row_mut(i).copy_from_slice(tv.data());
            }
        }
        let ng = self.needs(&[x, token]);
        Ok(self.push(
            out,
            Op::MaskRows {
                x,
                token,
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let out = kernels::conv1d_dilated(self.value(x), self.value(w), self.value(b), dilation)?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::Conv1d { x, w, b, dilation }, ng))
    }

    /// Local attention with half-width `half`, optional relative bias table.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        half: usize,
        bias: Option<Var>,
    ) -> Result<Var> {
        let table = match bias {
            Some(b) => Some(RelPosBias::from_table(self.value(b).data().to_vec())?),
            None => None,
        };
        let (out, cache) = kernels::attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            half,
            table.as_ref(),
        )?;
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        let ng = self.needs(&inputs);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                bias,
                cache,
            },
            ng,
        ))
    }

    pub fn instance_norm(&mut self, x: Var, eps: F, affine: Option<(Var, Var)>) -> Result<Var> {
        let cache = kernels::instance_norm_forward(self.value(x), eps)?;
        let out = cache.normalized.clone();
        let ng = self.needs(&[x]);
        let y = self.push(out, Op::InstanceNorm { x, cache }, ng);
        match affine {
            None => Ok(y),
            Some((gamma, beta)) => self.channel_affine(y, gamma, beta),
        }
    }

    /// `x * gamma + beta` with per-channel parameters.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.numel() != xv.cols() || bv.numel() != xv.cols() {
            return Err(Error::shape("channel affine parameters"));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for ((o, &g), &b) in out.row_mut(i).iter_mut().zip(gv.data()).zip(bv.data()) {
                *o = *o * g + b;
            }
        }
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(out, Op::ChannelAffine { x, gamma, beta }, ng))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = kernels::softmax_rows(self.value(x));
        let ng = self.needs(&[x]);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: F = self.value(x).data().iter().copied().sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), ng)
    }

    /// `sum_i w_i * x_i` over scalar inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, F)]) -> Result<Var> {
        let mut total = F::zero();
        for (v, w) in terms {
            let t = self.value(*v);
            if t.numel() != 1 {
                return Err(Error::NotScalar(t.shape().to_vec()));
            }
            total += *w * t.item();
        }
        let vars: Vec<Var> = terms.iter().map(|(v, _)| *v).collect();
        let ng = self.needs(&vars);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), ng))
    }

    /// Records `output = f(input)` computed by the caller, with its VJP.
    pub fn custom_unary(&mut self, input: Var, output: Tensor<F>, vjp: UnaryVjp<F>) -> Var {
        let ng = self.needs(&[input]);
        self.push(output, Op::Custom { input, vjp }, ng)
    }

    /// Back-propagates from a scalar `loss`. A tape supports one backward
    /// pass; a second call fails with [`Error::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let seed = Tensor::full(lv.shape(), F::one());
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        // Only leaves are meaningful to callers; keep interior grads anyway
        // since they are cheap and useful for debugging.
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, dy: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (da, db) = kernels::matmul_backward(val(*a), val(*b), dy);
                if wants(*a) {
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    accumulate(grads, *b, db);
                }
            }
            Op::AddRow(x, b) => {
                if wants(*b) {
                    let cols = dy.cols();
                    let mut db = vec![F::zero(); cols];
                    for i in 0..dy.rows() {
                        for (d, &g) in db.iter_mut().zip(dy.row(i)) {
                            *d += g;
                        }
                    }
                    let db = Tensor::new(val(*b).shape().to_vec(), db).expect("shape");
                    accumulate(grads, *b, db);
                }
                if wants(*x) {
                    accumulate(grads, *x, dy.clone());
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let mut g = dy.clone();
                    for (o, &y) in g.data_mut().iter_mut().zip(val(*b).data()) {
                        *o *= y;
                    }
                    accumulate(grads, *a, g);
                }
                if wants(*b) {
                    let mut g = dy.clone();
                    for (o, &x) in g.data_mut().iter_mut().zip(val(*a).data()) {
                        *o *= x;
                    }
                    accumulate(grads, *b, g);
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    accumulate(grads, *x, dy.map(|g| g * *c));
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let mut g = dy.clone();
                    for (o, &y) in g.data_mut().iter_mut().zip(nodes[idx].value.data()) {
                        if y <= F::zero() {
                            *o = F::zero();
                        }
                    }
                    accumulate(grads, *x, g);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let width = val(*p).cols();
                    if wants(*p) {
                        let mut data = Vec::with_capacity(dy.rows() * width);
                        for i in 0..dy.rows() {
                            data.extend_from_slice(&dy.row(i)[offset..offset + width]);
                        }
                        let g = Tensor::new(val(*p).shape().to_vec(), data).expect("shape");
                        accumulate(grads, *p, g);
                    }
                    offset += width;
                }
            }
            Op::MaskRows { x, token, mask } => {
                if wants(*x) {
                    let mut g = dy.clone();
                    for (i, &visible) in mask.iter().enumerate() {
                        if !visible {
                            g.row_mut(i).iter_mut().for_each(|v| *v = F::zero());
                        }
                    }
                    accumulate(grads, *x, g);
                }
                if wants(*token) {
                    let mut dt = vec![F::zero(); dy.cols()];
                    for (i, &visible) in mask.iter().enumerate() {
                        if !visible {
                            for (d, &g) in dt.iter_mut().zip(dy.row(i)) {
                                *d += g;
                            }
                        }
                    }
                    let g = Tensor::new(val(*token).shape().to_vec(), dt).expect("shape");
                    accumulate(grads, *token, g);
                }
            }
            Op::Conv1d { x, w, b, dilation } => {
                let (dx, dw, db) =
                    kernels::conv1d_dilated_backward(val(*x), val(*w), *dilation, dy);
                if wants(*x) {
                    accumulate(grads, *x, dx);
                }
                if wants(*w) {
                    accumulate(grads, *w, dw);
                }
                if wants(*b) {
                    let db = db.reshape(val(*b).shape().to_vec()).expect("shape");
                    accumulate(grads, *b, db);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                cache,
            } => {
                let bias_len = bias.map(|b| val(b).numel());
                let (dq, dk, dv, dbias) =
                    kernels::attention_backward(val(*q), val(*k), val(*v), bias_len, cache, dy);
                if wants(*q) {
                    accumulate(grads, *q, dq);
                }
                if wants(*k) {
                    accumulate(grads, *k, dk);
                }
                if wants(*v) {
                    accumulate(grads, *v, dv);
                }
                if let (Some(b), Some(db)) = (bias, dbias) {
                    if wants(*b) {
                        let db = db.reshape(val(*b).shape().to_vec()).expect("shape");
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::InstanceNorm { x, cache } => {
                if wants(*x) {
                    accumulate(grads, *x, kernels::instance_norm_backward(cache, dy));
                }
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let xv = val(*x);
                let gv = val(*gamma);
                if wants(*x) {
                    let mut g = dy.clone();
                    for i in 0..g.rows() {
                        for (o, &s) in g.row_mut(i).iter_mut().zip(gv.data()) {
                            *o *= s;
                        }
                    }
                    accumulate(grads, *x, g);
                }
                let cols = dy.cols();
                if wants(*gamma) {
                    let mut dg = vec![F::zero(); cols];
                    for i in 0..dy.rows() {
                        for ((d, &g), &xx) in dg.iter_mut().zip(dy.row(i)).zip(xv.row(i)) {
                            *d += g * xx;
                        }
                    }
                    let dg = Tensor::new(gv.shape().to_vec(), dg).expect("shape");
                    accumulate(grads, *gamma, dg);
                }
                if wants(*beta) {
                    let mut db = vec![F::zero(); cols];
                    for i in 0..dy.rows() {
                        for (d, &g) in db.iter_mut().zip(dy.row(i)) {
                            *d += g;
                        }
                    }
                    let db = Tensor::new(val(*beta).shape().to_vec(), db).expect("shape");
                    accumulate(grads, *beta, db);
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    accumulate(
                        grads,
                        *x,
                        kernels::softmax_rows_backward(&nodes[idx].value, dy),
                    );
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    accumulate(grads, *x, Tensor::full(val(*x).shape(), dy.item()));
                }
            }
            Op::WeightedSum(terms) => {
                for (v, w) in terms {
                    if wants(*v) {
                        accumulate(grads, *v, Tensor::full(val(*v).shape(), dy.item() * *w));
                    }
                }
            }
            Op::Custom { input, vjp } => {
                if wants(*input) {
                    let g = vjp(val(*input), &nodes[idx].value, dy);
                    accumulate(grads, *input, g);
                }
            }
        }
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_scaled(&g, F::one()),
        slot @ None => *slot = Some(g),
    }
}
