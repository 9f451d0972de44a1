use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::data::{upsample_labels, VideoRecord};
use crate::diffusion::{denoise_loop, Schedule};
use crate::error::{Error, Result};
use crate::masking::{build_anticipation_input, mask_none};
use crate::metrics::{
    eval_lta_grid, evaluate_tas, Anticipator, EvalProtocol, Horizon, LtaVideo, MetricsReport,
    Observation,
};
use crate::model::{probs_to_signal, Model};
use crate::numerics::{Real, Tensor};

fn subsample_rows<F: Real>(x: &Tensor<f32>, rate: usize) -> Tensor<F> {
    let rows: Vec<Vec<F>> = (0..x.rows())
        .step_by(rate)
        .map(|i| x.row(i).iter().map(|&v| F::lit(v as f64)).collect())
        .collect();
    Tensor::from_rows(&rows).expect("rectangular rows")
}

/// Reverse diffusion conditioned on `input` under `mask`; returns the
/// decoder probabilities of the final step.
fn denoise<F: Real, R: Rng + ?Sized>(
    model: &Model<F>,
    input: &Tensor<F>,
    mask: &[bool],
    sched: &Schedule,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Tensor<F>> {
    let enc = model.encode(input, mask)?;
    let scale = model.config().signal_scale;
    let mut last = None;
    denoise_loop(
        |x: &Tensor<F>, s| {
            let probs = model.decode(x, s, &enc.condition)?;
            let signal = probs_to_signal(&probs, scale);
            last = Some(probs);
            Ok(signal)
        },
        input.rows(),
        model.config().num_classes,
        config.inference_steps,
        sched,
        scale,
        rng,
    )?;
    last.ok_or_else(|| Error::invalid("inference grid is empty"))
}

/// Segments a whole video: encoder without masking, then the reverse
/// process from pure noise. Returns one label per input frame.
pub fn infer_tas<F: Real, R: Rng + ?Sized>(
    model: &Model<F>,
    features: &Tensor<f32>,
    sched: &Schedule,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let frames = features.rows();
    if frames == 0 {
        return Err(Error::invalid("cannot segment an empty video"));
    }
    let rate = config.sample_rate;
    let x = subsample_rows::<F>(features, rate);
    let probs = denoise(model, &x, &mask_none(x.rows()), sched, config, rng)?;
    Ok(upsample_labels(&probs.argmax_rows(), rate, frames))
}

/// Labels for the observed frames followed by `horizon` anticipated frames.
///
/// Only the observed features are read; future frames enter the encoder as
/// mask tokens.
pub fn infer_lta<F: Real, R: Rng + ?Sized>(
    model: &Model<F>,
    observed: &Tensor<f32>,
    horizon: usize,
    sched: &Schedule,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n_o = observed.rows();
    if n_o == 0 || horizon == 0 {
        return Err(Error::invalid(
            "anticipation needs observed frames and a horizon",
        ));
    }
    let rate = config.sample_rate;
    let total = n_o + horizon;
    let obs = subsample_rows::<F>(observed, rate);
    let future = (total.div_ceil(rate) - obs.rows()).max(1);
    let token = model
        .params
        .get("mask_token")
        .ok_or_else(|| Error::invalid("model has no mask token"))?;
    let (input, mask) = build_anticipation_input(&obs, future, token.data())?;
    let probs = denoise(model, &input, &mask, sched, config, rng)?;
    Ok(upsample_labels(&probs.argmax_rows(), rate, total))
}

/// Per-video inference seed that does not depend on evaluation order.
pub fn video_seed(seed: u64, video_id: &str, observed: usize) -> u64 {
    let h = crc32fast::hash(video_id.as_bytes()) as u64;
    seed ^ (h << 20) ^ (observed as u64).rotate_left(44)
}

/// [`Anticipator`] backed by a trained model.
#[derive(Debug, Clone)]
pub struct ModelAnticipator<'a, F> {
    pub model: &'a Model<F>,
    pub config: &'a TrainConfig,
    pub sched: Schedule,
    pub seed: u64,
}

impl<F: Real> Anticipator for ModelAnticipator<'_, F> {
    fn anticipate(&mut self, obs: &Observation, horizon: Horizon) -> Result<Vec<usize>> {
        let n_a = horizon.frames(obs.len());
        let mut rng = ChaCha8Rng::seed_from_u64(video_seed(self.seed, &obs.video_id, obs.len()));
        let full = infer_lta(
            self.model,
            &obs.features,
            n_a,
            &self.sched,
            self.config,
            &mut rng,
        )?;
        Ok(full[obs.len()..].to_vec())
    }
}

/// Segmentation metrics and the anticipation grid of `model` on `videos`.
pub fn evaluate_model<F: Real>(
    model: &Model<F>,
    config: &TrainConfig,
    videos: &[&VideoRecord],
    protocol: &EvalProtocol,
    split: &str,
    seed: u64,
) -> Result<(MetricsReport, Vec<Vec<usize>>)> {
    let sched = config.schedule()?;
    let mut preds = Vec::with_capacity(videos.len());
    for v in videos {
        let mut rng = ChaCha8Rng::seed_from_u64(video_seed(seed, &v.id, v.len()));
        preds.push(infer_tas(model, &v.features, &sched, config, &mut rng)?);
    }
    let pairs: Vec<(&[usize], &[usize])> = preds
        .iter()
        .zip(videos)
        .map(|(p, v)| (p.as_slice(), v.labels.as_slice()))
        .collect();
    let tas = evaluate_tas(&pairs, &protocol.background)?;
    let lta_videos: Vec<LtaVideo<'_>> = videos
        .iter()
        .map(|v| LtaVideo {
            id: &v.id,
            features: &v.features,
            labels: &v.labels,
        })
        .collect();
    let mut anticipator = ModelAnticipator {
        model,
        config,
        sched,
        seed,
    };
    let lta = eval_lta_grid(&lta_videos, &mut anticipator, protocol)?;
    Ok((
        MetricsReport {
            split: split.to_string(),
            tas: Some(tas),
            lta,
        },
        preds,
    ))
}
