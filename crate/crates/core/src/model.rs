//! Masked encoder and denoising decoder.
//!
//! Both stacks share one layer shape: dilated convolution, local attention
//! with a relative position bias, instance normalization and a 1x1
//! feed-forward map, wrapped in a residual connection. Layer `i` (1-based)
//! uses dilation and window `min(2^i, T, 2 W_max)`.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
const KERNEL: usize = 3;

/// What the decoder attention reads its values from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderValues {
    /// The decoder stream after the dilated convolution.
    #[default]
    Stream,
    /// The same concatenation of stream and encoder condition that forms
    /// queries and keys.
    StreamAndCondition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub enc_dim: usize,
    pub dec_dim: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Relative-bias clip distance `W_max`.
    pub max_distance: usize,
    /// 1-based encoder layers whose outputs condition the decoder.
    pub cond_layers: Vec<usize>,
    pub signal_scale: f64,
    #[serde(default)]
    pub decoder_values: DecoderValues,
}

impl ModelConfig {
    /// Small profile for CPU runs on the synthetic grammar.
    pub fn desk(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            enc_layers: 4,
            dec_layers: 3,
            enc_dim: 16,
            dec_dim: 8,
            num_classes,
            feature_dim,
            max_distance: 100,
            cond_layers: vec![2, 3, 4],
            signal_scale: 1.0,
            decoder_values: DecoderValues::StreamAndCondition,
        }
    }

    /// Full-size 50 Salads profile.
    pub fn salads() -> Self {
        Self {
            enc_layers: 10,
            dec_layers: 8,
            enc_dim: 64,
            dec_dim: 24,
            num_classes: 19,
            feature_dim: 2048,
            max_distance: 100,
            cond_layers: vec![5, 7, 9],
            signal_scale: 1.0,
            decoder_values: DecoderValues::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.enc_layers,
            self.dec_layers,
            self.enc_dim,
            self.dec_dim,
            self.num_classes,
            self.feature_dim,
            self.max_distance,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid(format!(
                "model sizes must be positive: {self:?}"
            )));
        }
        if self.cond_layers.is_empty() {
            return Err(Error::invalid(
                "at least one conditioning layer is required",
            ));
        }
        let unique: BTreeSet<_> = self.cond_layers.iter().collect();
        if unique.len() != self.cond_layers.len()
            || self
                .cond_layers
                .iter()
                .any(|&l| l == 0 || l > self.enc_layers)
        {
            return Err(Error::invalid(format!(
                "conditioning layers {:?} must be distinct and within 1..={}",
                self.cond_layers, self.enc_layers
            )));
        }
        if !(self.signal_scale > 0.0 && self.signal_scale.is_finite()) {
            return Err(Error::invalid("signal scale must be positive"));
        }
        Ok(())
    }

    fn bias_len(&self) -> usize {
        2 * self.max_distance + 1
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let (c, k, de, dd) = (
            self.feature_dim,
            self.num_classes,
            self.enc_dim,
            self.dec_dim,
        );
        let bias = self.bias_len();
        let enc_layer = 7 * de * de + 5 * de + bias;
        let v_in = match self.decoder_values {
            DecoderValues::Stream => dd,
            DecoderValues::StreamAndCondition => 2 * dd,
        };
        let dec_layer = 3 * dd * dd + dd // conv
            + 2 * (2 * dd * dd + dd) // q, k
            + v_in * dd + dd
            + dd * dd + dd // ff
            + bias;
        c + (c * de + de)
            + self.enc_layers * enc_layer
            + (de * k + k)
            + (self.cond_layers.len() * de * dd + dd)
            + (k * dd + dd)
            + (dd * dd + dd)
            + self.dec_layers * dec_layer
            + (dd * k + k)
    }
}

/// Dilation and window of 1-based layer `i` for a sequence of `frames`.
pub fn layer_span(i: usize, frames: usize, max_distance: usize) -> usize {
    let pow = if i >= usize::BITS as usize - 1 {
        usize::MAX
    } else {
        1usize << i
    };
    pow.min(frames).min(2 * max_distance).max(1)
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in `+-1/sqrt(fan_in)`.
    FanIn(usize),
    Zero,
    Normal(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LinearIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerIdx {
    conv_w: usize,
    conv_b: usize,
    q: LinearIdx,
    k: LinearIdx,
    v: LinearIdx,
    ff: LinearIdx,
    bias: usize,
}

/// Positions of every parameter in the flat list.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    mask_token: usize,
    enc_in: LinearIdx,
    enc_layers: Vec<LayerIdx>,
    enc_head: LinearIdx,
    cond_proj: LinearIdx,
    dec_in: LinearIdx,
    time_proj: LinearIdx,
    dec_layers: Vec<LayerIdx>,
    dec_head: LinearIdx,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Builder {
    specs: Vec<Spec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(Spec { name, shape, init });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIdx {
        LinearIdx {
            w: self.push(
                format!("{name}.w"),
                vec![fan_in, fan_out],
                Init::FanIn(fan_in),
            ),
            b: self.push(format!("{name}.b"), vec![fan_out], Init::Zero),
        }
    }

    fn layer(
        &mut self,
        name: &str,
        dim: usize,
        qk_in: usize,
        v_in: usize,
        bias: usize,
    ) -> LayerIdx {
        LayerIdx {
            conv_w: self.push(
                format!("{name}.conv.w"),
                vec![KERNEL, dim, dim],
                Init::FanIn(KERNEL * dim),
            ),
            conv_b: self.push(format!("{name}.conv.b"), vec![dim], Init::Zero),
            q: self.linear(&format!("{name}.q"), qk_in, dim),
            k: self.linear(&format!("{name}.k"), qk_in, dim),
            v: self.linear(&format!("{name}.v"), v_in, dim),
            ff: self.linear(&format!("{name}.ff"), dim, dim),
            bias: self.push(format!("{name}.rel_bias"), vec![bias], Init::Zero),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<Spec>) {
    let mut b = Builder::default();
    let (c, k, de, dd) = (cfg.feature_dim, cfg.num_classes, cfg.enc_dim, cfg.dec_dim);
    let bias = cfg.bias_len();
    let mask_token = b.push("mask_token".into(), vec![c], Init::Normal(0.02));
    let enc_in = b.linear("enc.in", c, de);
    let enc_layers = (1..=cfg.enc_layers)
        .map(|i| b.layer(&format!("enc.{i}"), de, de, de, bias))
        .collect();
    let enc_head = b.linear("enc.head", de, k);
    let cond_proj = b.linear("cond.proj", cfg.cond_layers.len() * de, dd);
    let dec_in = b.linear("dec.in", k, dd);
    let time_proj = b.linear("dec.time", dd, dd);
    let v_in = match cfg.decoder_values {
        DecoderValues::Stream => dd,
        DecoderValues::StreamAndCondition => 2 * dd,
    };
    let dec_layers = (1..=cfg.dec_layers)
        .map(|i| b.layer(&format!("dec.{i}"), dd, 2 * dd, v_in, bias))
        .collect();
    let dec_head = b.linear("dec.head", dd, k);
    let layout = Layout {
        mask_token,
        enc_in,
        enc_layers,
        enc_head,
        cond_proj,
        dec_in,
        time_proj,
        dec_layers,
        dec_head,
    };
    (layout, b.specs)
}

/// Named model tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> Parameters<F> {
    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<F>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::invalid(
                "parameter names and tensors differ in count",
            ));
        }
        let unique: BTreeSet<_> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::invalid("duplicate parameter name"));
        }
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<G: Real>(&self) -> Parameters<G> {
        Parameters {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

/// Tensor names and shapes the model expects for `config`.
pub fn parameter_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    build_layout(config)
        .1
        .into_iter()
        .map(|s| (s.name, s.shape))
        .collect()
}

/// Fan-in uniform weights, zero biases and bias tables, and a mask token
/// drawn from `N(0, 0.02^2)`.
pub fn init_params<F: Real, R: Rng + ?Sized>(
    config: &ModelConfig,
    rng: &mut R,
) -> Result<Parameters<F>> {
    config.validate()?;
    let (_, specs) = build_layout(config);
    let mut names = Vec::with_capacity(specs.len());
    let mut tensors = Vec::with_capacity(specs.len());
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data: Vec<F> = match spec.init {
            Init::Zero => vec![F::zero(); n],
            Init::FanIn(fan) => {
                let bound = 1.0 / (fan as f64).sqrt();
                let dist =
                    Uniform::new(-bound, bound).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| F::lit(dist.sample(rng))).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| F::lit(dist.sample(rng))).collect()
            }
        };
        names.push(spec.name);
        tensors.push(Tensor::new(spec.shape, data)?);
    }
    Parameters::from_parts(names, tensors)
}

/// Encoder outputs as tape handles.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub layers: Vec<Var>,
    pub embedding: Var,
    pub logits: Var,
    pub probs: Var,
}

/// Sinusoidal embedding of the time step `s` with geometric frequencies.
pub fn time_embedding<F: Real>(s: usize, dim: usize) -> Tensor<F> {
    let half = dim.div_ceil(2);
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim {
        let j = i / 2;
        let freq = (-(10000f64.ln()) * j as f64 / half.max(1) as f64).exp();
        let angle = s as f64 * freq;
        out.push(F::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
    }
    Tensor::new(vec![1, dim], out).expect("shape")
}

/// Model structure bound to a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: ModelConfig,
    layout: Layout,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, _) = build_layout(&config);
        Ok(Self { config, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Checks that `params` has the names and shapes of this network.
    pub fn check_params<F: Real>(&self, params: &Parameters<F>) -> Result<()> {
        let expected = parameter_shapes(&self.config);
        if expected.len() != params.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (n, t)) in expected
            .iter()
            .zip(params.names().iter().zip(params.tensors()))
        {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::shape(format!(
                    "parameter `{n}` {:?} does not match `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    fn linear<F: Real>(tape: &mut Tape<F>, p: &[Var], idx: LinearIdx, x: Var) -> Result<Var> {
        tape.linear(x, p[idx.w], p[idx.b])
    }

    /// Encodes `features` after replacing rows hidden by `mask` with the
    /// mask token.
    pub fn encode<F: Real>(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        features: Var,
        mask: &[bool],
    ) -> Result<EncoderVars> {
        let l = &self.layout;
        let frames = tape.value(features).rows();
        if tape.value(features).cols() != self.config.feature_dim {
            return Err(Error::shape(format!(
                "features have {} channels, model expects {}",
                tape.value(features).cols(),
                self.config.feature_dim
            )));
        }
        let masked = tape.mask_rows(features, p[l.mask_token], mask)?;
        let mut x = Self::linear(tape, p, l.enc_in, masked)?;
        let mut layers = Vec::with_capacity(l.enc_layers.len());
        for (i, li) in l.enc_layers.iter().enumerate() {
            let span = layer_span(i + 1, frames, self.config.max_distance);
            let conv = tape.conv1d(x, p[li.conv_w], p[li.conv_b], span)?;
            let c = tape.relu(conv);
            let n = tape.instance_norm(c, F::lit(NORM_EPS), None)?;
            let q = Self::linear(tape, p, li.q, n)?;
            let k = Self::linear(tape, p, li.k, n)?;
            let v = Self::linear(tape, p, li.v, n)?;
            let a = tape.attention(q, k, v, span / 2, Some(p[li.bias]))?;
            let h = tape.add(a, c)?;
            let f = Self::linear(tape, p, li.ff, h)?;
            x = tape.add(x, f)?;
            layers.push(x);
        }
        let logits = Self::linear(tape, p, l.enc_head, x)?;
        let probs = tape.softmax(logits);
        Ok(EncoderVars {
            layers,
            embedding: x,
            logits,
            probs,
        })
    }

    /// Concatenates the configured encoder layers and projects them to the
    /// decoder width.
    pub fn condition<F: Real>(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        enc: &EncoderVars,
    ) -> Result<Var> {
        let parts: Vec<Var> = self
            .config
            .cond_layers
            .iter()
            .map(|&i| enc.layers[i - 1])
            .collect();
        let cat = tape.concat_cols(&parts)?;
        Self::linear(tape, p, self.layout.cond_proj, cat)
    }

    /// Predicts class probabilities of the clean labels from `noisy` at step
    /// `s`. Returns `(logits, probs)`.
    pub fn decode<F: Real>(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        noisy: Var,
        s: usize,
        cond: Var,
    ) -> Result<(Var, Var)> {
        let l = &self.layout;
        let nv = tape.value(noisy);
        let frames = nv.rows();
        if nv.cols() != self.config.num_classes || tape.value(cond).rows() != frames {
            return Err(Error::shape(format!(
                "decoder input {:?} with condition {:?}",
                nv.shape(),
                tape.value(cond).shape()
            )));
        }
        let emb = tape.constant(time_embedding(s, self.config.dec_dim));
        let temb = Self::linear(tape, p, l.time_proj, emb)?;
        let y0 = Self::linear(tape, p, l.dec_in, noisy)?;
        let mut y = tape.add_row(y0, temb)?;
        for (i, li) in l.dec_layers.iter().enumerate() {
            let span = layer_span(i + 1, frames, self.config.max_distance);
            let conv = tape.conv1d(y, p[li.conv_w], p[li.conv_b], span)?;
            let c = tape.relu(conv);
            let qk_in = tape.concat_cols(&[c, cond])?;
            let q = Self::linear(tape, p, li.q, qk_in)?;
            let k = Self::linear(tape, p, li.k, qk_in)?;
            let v_in = match self.config.decoder_values {
                DecoderValues::Stream => c,
                DecoderValues::StreamAndCondition => qk_in,
            };
            let v = Self::linear(tape, p, li.v, v_in)?;
            let a = tape.attention(q, k, v, span / 2, Some(p[li.bias]))?;
            let h = tape.add(a, c)?;
            let n = tape.instance_norm(h, F::lit(NORM_EPS), None)?;
            let f = Self::linear(tape, p, li.ff, n)?;
            y = tape.add(y, f)?;
        }
        let logits = Self::linear(tape, p, l.dec_head, y)?;
        let probs = tape.softmax(logits);
        Ok((logits, probs))
    }
}

/// Maps decoder probabilities to the clamped signal space.
pub fn probs_to_signal<F: Real>(probs: &Tensor<F>, scale: f64) -> Tensor<F> {
    let s = F::lit(scale);
    let two = F::lit(2.0);
    probs.map(|p| ((p * two - F::one()) * s).max(-s).min(s))
}

/// Forward-only encoder result.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<F> {
    pub layers: Vec<Tensor<F>>,
    pub embedding: Tensor<F>,
    pub probs: Tensor<F>,
    /// Decoder condition `E_cond`.
    pub condition: Tensor<F>,
}

/// Network plus parameters for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub network: Network,
    pub params: Parameters<F>,
}

impl<F: Real> Model<F> {
    pub fn new(network: Network, params: Parameters<F>) -> Result<Self> {
        network.check_params(&params)?;
        Ok(Self { network, params })
    }

    pub fn config(&self) -> &ModelConfig {
        self.network.config()
    }

    pub fn encode(&self, features: &Tensor<F>, mask: &[bool]) -> Result<EncoderOutput<F>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let f = tape.constant(features.clone());
        let enc = self.network.encode(&mut tape, &p, f, mask)?;
        let cond = self.network.condition(&mut tape, &p, &enc)?;
        Ok(EncoderOutput {
            layers: enc.layers.iter().map(|&v| tape.value(v).clone()).collect(),
            embedding: tape.value(enc.embedding).clone(),
            probs: tape.value(enc.probs).clone(),
            condition: tape.value(cond).clone(),
        })
    }

    /// Decoder probabilities for `noisy` at step `s`.
    pub fn decode(&self, noisy: &Tensor<F>, s: usize, condition: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(noisy.clone());
        let c = tape.constant(condition.clone());
        let (_, probs) = self.network.decode(&mut tape, &p, x, s, c)?;
        Ok(tape.value(probs).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{micro_config, model_gradcheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro(values: DecoderValues) -> ModelConfig {
        micro_config(values)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_f64(shape, &data).unwrap()
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for values in [DecoderValues::Stream, DecoderValues::StreamAndCondition] {
            let cfg = micro(values);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let p: Parameters<f64> = init_params(&cfg, &mut rng).unwrap();
            assert_eq!(p.scalar_count(), cfg.parameter_count());
        }
        // Hand count of the Stream variant: C=4, K=3, De=5, Dd=4, bias 7.
        let enc_layer = 7 * 25 + 5 * 5 + 7;
        let dec_layer = 9 * 16 + 5 * 4 + 7;
        let total = 4
            + (20 + 5)
            + 2 * enc_layer
            + (15 + 3)
            + (40 + 4)
            + (12 + 4)
            + (16 + 4)
            + 2 * dec_layer
            + (12 + 3);
        assert_eq!(micro(DecoderValues::Stream).parameter_count(), total);
    }

    #[test]
    fn init_is_deterministic_with_zero_bias_tables() {
        let cfg = micro(DecoderValues::Stream);
        let a: Parameters<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b: Parameters<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        for (n, t) in a.names().iter().zip(a.tensors()) {
            if n.ends_with("rel_bias") || n.ends_with(".b") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{n}");
            }
        }
        assert!(a
            .get("mask_token")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() < 0.2));
    }

    #[test]
    fn config_validation() {
        let mut cfg = micro(DecoderValues::Stream);
        cfg.cond_layers = vec![3];
        assert!(cfg.validate().is_err());
        cfg.cond_layers = vec![];
        assert!(cfg.validate().is_err());
        cfg.cond_layers = vec![1, 1];
        assert!(cfg.validate().is_err());
        assert_eq!(ModelConfig::salads().cond_layers, vec![5, 7, 9]);
        ModelConfig::salads().validate().unwrap();
    }

    #[test]
    fn spans() {
        assert_eq!(layer_span(1, 100, 100), 2);
        assert_eq!(layer_span(4, 100, 100), 16);
        assert_eq!(layer_span(4, 5, 100), 5);
        assert_eq!(layer_span(9, 1000, 100), 200);
        assert_eq!(layer_span(70, 1000, 100), 200);
        assert_eq!(layer_span(3, 1, 100), 1);
    }

    #[test]
    fn forward_shapes_for_short_videos() {
        let cfg = micro(DecoderValues::StreamAndCondition);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = init_params(&cfg, &mut rng).unwrap();
        let model = Model::new(Network::new(cfg.clone()).unwrap(), params).unwrap();
        for t in [1, 2, 9] {
            let f = random_tensor(&mut rng, &[t, 4]);
            let enc = model.encode(&f, &vec![true; t]).unwrap();
            assert_eq!(enc.layers.len(), 2);
            assert_eq!(enc.embedding.shape(), &[t, 5]);
            assert_eq!(enc.condition.shape(), &[t, 4]);
            for i in 0..t {
                let s: f64 = enc.probs.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
            let a = random_tensor(&mut rng, &[t, 3]);
            let p = model.decode(&a, 7, &enc.condition).unwrap();
            assert_eq!(p.shape(), &[t, 3]);
        }
    }

    #[test]
    fn time_step_is_live() {
        let cfg = micro(DecoderValues::Stream);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = init_params(&cfg, &mut rng).unwrap();
        let model = Model::new(Network::new(cfg).unwrap(), params).unwrap();
        let f = random_tensor(&mut rng, &[6, 4]);
        let enc = model.encode(&f, &[true; 6]).unwrap();
        let a = random_tensor(&mut rng, &[6, 3]);
        let p1 = model.decode(&a, 1, &enc.condition).unwrap();
        let p2 = model.decode(&a, 50, &enc.condition).unwrap();
        assert_ne!(p1, p2);
        assert_eq!(p1, model.decode(&a, 1, &enc.condition).unwrap());
    }

    #[test]
    fn masked_rows_ignore_their_features() {
        let cfg = micro(DecoderValues::Stream);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = init_params(&cfg, &mut rng).unwrap();
        let model = Model::new(Network::new(cfg).unwrap(), params).unwrap();
        let f = random_tensor(&mut rng, &[6, 4]);
        let mut g = f.clone();
        g.row_mut(4).iter_mut().for_each(|v| *v += 3.0);
        let mask = [true, true, true, true, false, false];
        assert_eq!(
            model.encode(&f, &mask).unwrap(),
            model.encode(&g, &mask).unwrap()
        );
    }

    #[test]
    fn residual_identity_with_zeroed_layers() {
        let cfg = micro(DecoderValues::Stream);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params: Parameters<f64> = init_params(&cfg, &mut rng).unwrap();
        for i in 1..=2 {
            for part in ["ff.w", "ff.b"] {
                let t = params.get_mut(&format!("enc.{i}.{part}")).unwrap();
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let model = Model::new(Network::new(cfg).unwrap(), params.clone()).unwrap();
        let f = random_tensor(&mut rng, &[5, 4]);
        let enc = model.encode(&f, &[true; 5]).unwrap();
        let w = params.get("enc.in.w").unwrap();
        let proj = crate::numerics::kernels::matmul(&f, w).unwrap();
        assert_eq!(enc.embedding, proj);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for values in [DecoderValues::Stream, DecoderValues::StreamAndCondition] {
            let err = model_gradcheck(values, 3).unwrap().max_rel_error;
            assert!(err <= 1e-4, "{values:?}: {err}");
        }
    }
}
