use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{soft_boundary, total_loss_var, LossTargets, LossWeights};
use crate::model::{init_params, DecoderValues, ModelConfig, Network, Parameters};
use crate::numerics::{finite_diff_check, Coords, GradCheckReport, Tensor};

/// Largest relative error accepted by [`model_gradcheck`] callers.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Tiny model used for finite-difference checks.
pub fn micro_config(values: DecoderValues) -> ModelConfig {
    ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        enc_dim: 5,
        dec_dim: 4,
        num_classes: 3,
        feature_dim: 4,
        max_distance: 3,
        cond_layers: vec![1, 2],
        signal_scale: 1.0,
        decoder_values: values,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &data)
}

/// Checks every parameter gradient of encoder, decoder and all six loss
/// terms of the micro model against central differences at 64-bit.
pub fn model_gradcheck(values: DecoderValues, seed: u64) -> Result<GradCheckReport> {
    let cfg = micro_config(values);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Parameters<f64> = init_params(&cfg, &mut rng)?;
    // Non-zero biases and bias tables exercise every gradient path.
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let net = Network::new(cfg)?;
    let t = 8;
    let features = random_tensor(&mut rng, &[t, 4])?;
    let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..3)).collect();
    let noisy = random_tensor(&mut rng, &[t, 3])?;
    let observed = rng.random_range(2..t);
    let mask: Vec<bool> = (0..t).map(|i| i < observed).collect();
    let s = rng.random_range(1..100);
    let soft = soft_boundary(&labels, 1.0);
    let weights = LossWeights {
        enc_boundary: 0.2,
        ..LossWeights::salads()
    };
    finite_diff_check(
        |tape, p| {
            let f = tape.constant(features.clone());
            let enc = net.encode(tape, p, f, &mask)?;
            let cond = net.condition(tape, p, &enc)?;
            let x = tape.constant(noisy.clone());
            let (_, probs) = net.decode(tape, p, x, s, cond)?;
            let targets = LossTargets {
                labels: &labels,
                soft_boundary: &soft,
                tau: 4.0,
                decoder_frames: None,
            };
            Ok(total_loss_var(tape, enc.probs, probs, &targets, &weights)?.0)
        },
        params.tensors(),
        1e-5,
        Coords::All,
    )
}
