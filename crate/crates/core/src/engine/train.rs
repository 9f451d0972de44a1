use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::{adam_update, AdamConfig, AdamState};
use crate::data::{subsample, VideoRecord};
use crate::diffusion::{
    clamp_signal, noise_with_alpha_bar, one_hot, scale_labels, standard_normal, Schedule,
};
use crate::error::{Error, Result};
use crate::losses::{soft_boundary, total_loss_var, LossBreakdown, LossTargets};
use crate::masking::{choose_training_mask, MaskContext, MaskType, MaskVector};
use crate::model::{init_params, Model, Network, Parameters};
use crate::numerics::{Real, Tape, Tensor};

/// Stream of the training rng; parameters are drawn from stream 0.
const TRAIN_STREAM: u64 = 1;

/// A training video with its derived targets, at the training sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedVideo<F> {
    pub id: String,
    pub features: Tensor<F>,
    pub labels: Vec<usize>,
    pub soft_boundary: Vec<f64>,
    /// Scaled one-hot labels `A^0`.
    pub signal: Tensor<F>,
}

impl<F: Real> PreparedVideo<F> {
    pub fn new(video: &VideoRecord, config: &TrainConfig) -> Result<Self> {
        let v = subsample(video, config.sample_rate)?;
        if v.is_empty() {
            return Err(Error::invalid(format!("video `{}` has no frames", v.id)));
        }
        let k = config.model.num_classes;
        let signal = scale_labels(
            &one_hot::<F>(&v.labels, k)?,
            config.model.signal_scale,
            true,
        )?;
        Ok(Self {
            soft_boundary: soft_boundary(&v.labels, config.sigma),
            features: v.features.cast(),
            labels: v.labels,
            id: v.id,
            signal,
        })
    }
}

impl<F: Real> PreparedVideo<F> {
    /// The first `frames` frames.
    pub fn crop(&self, frames: usize) -> Self {
        let n = frames.min(self.labels.len());
        Self {
            id: self.id.clone(),
            features: self.features.slice_rows(0, n),
            labels: self.labels[..n].to_vec(),
            soft_boundary: self.soft_boundary[..n].to_vec(),
            signal: self.signal.slice_rows(0, n),
        }
    }
}

pub fn prepare_videos<F: Real>(
    videos: &[&VideoRecord],
    config: &TrainConfig,
) -> Result<Vec<PreparedVideo<F>>> {
    videos
        .iter()
        .map(|v| PreparedVideo::new(v, config))
        .collect()
}

/// Random choices made for one video in one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSample {
    pub mask: MaskType,
    pub s: usize,
}

/// Loss breakdown and parameter gradients of one video.
pub fn video_gradients<F: Real, R: Rng + ?Sized>(
    network: &Network,
    params: &Parameters<F>,
    video: &PreparedVideo<F>,
    sched: &Schedule,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(LossBreakdown, Vec<Tensor<F>>, StepSample)> {
    let ctx = MaskContext {
        labels: &video.labels,
        soft_boundary: &video.soft_boundary,
        random: config.random_mask,
        alphas: &config.alphas,
        enabled: &config.mask_types,
    };
    let (kind, mut mask) = choose_training_mask(rng, &ctx)?;
    let cropped;
    let video = if kind == MaskType::Anticipative {
        let observed = mask.visible_count();
        let horizon = config.horizons[rng.random_range(0..config.horizons.len())];
        let keep = horizon.kept_frames(video.labels.len(), observed);
        mask = MaskVector::new(mask[..keep].to_vec());
        cropped = video.crop(keep);
        &cropped
    } else {
        video
    };
    let s = rng.random_range(0..=sched.steps());
    let eps = standard_normal::<F, _>(rng, video.signal.shape());
    let noisy = clamp_signal(
        &noise_with_alpha_bar(&video.signal, &eps, sched.alpha_bar(s))?,
        config.model.signal_scale,
    );

    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true);
    let f = tape.constant(video.features.clone());
    let enc = network.encode(&mut tape, &p, f, &mask)?;
    let cond = network.condition(&mut tape, &p, &enc)?;
    let x = tape.constant(noisy);
    let (_, dec_probs) = network.decode(&mut tape, &p, x, s, cond)?;
    let hidden: Vec<bool>;
    let decoder_frames = if config.observed_decoder_loss {
        None
    } else {
        hidden = mask.iter().map(|&v| !v).collect();
        Some(hidden.as_slice())
    };
    let targets = LossTargets {
        labels: &video.labels,
        soft_boundary: &video.soft_boundary,
        tau: config.tau,
        decoder_frames,
    };
    let (loss, breakdown) =
        total_loss_var(&mut tape, enc.probs, dec_probs, &targets, &config.weights).map_err(
            |e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!(
                    "video `{}`, mask {kind}, step {s}: {msg}",
                    video.id
                )),
                other => other,
            },
        )?;
    let mut grads = tape.backward(loss)?;
    let out = p.iter().map(|&v| grads.take(v)).collect();
    Ok((breakdown, out, StepSample { mask: kind, s }))
}

/// Mean loss of one epoch and the loss of every optimizer step in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub step_losses: Vec<f64>,
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in items {
        m.enc_ce += b.enc_ce / n;
        m.enc_smooth += b.enc_smooth / n;
        m.enc_boundary += b.enc_boundary / n;
        m.dec_ce += b.dec_ce / n;
        m.dec_smooth += b.dec_smooth / n;
        m.dec_boundary += b.dec_boundary / n;
        m.total += b.total / n;
    }
    m
}

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string (128-bit).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::invalid(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Sequential trainer: one video at a time, gradients accumulated over the
/// batch, one Adam step per batch.
#[derive(Debug, Clone)]
pub struct Trainer<F: Real> {
    pub(crate) config: TrainConfig,
    pub(crate) network: Network,
    pub(crate) params: Parameters<F>,
    pub(crate) adam: AdamState<F>,
    pub(crate) sched: Schedule,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) epoch: usize,
    pub(crate) history: Vec<EpochLog>,
}

impl<F: Real> Trainer<F> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let network = Network::new(config.model.clone())?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = init_params(&config.model, &mut init_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Self::from_state(config, network, params, None, rng, 0, Vec::new())
    }

    pub(crate) fn from_state(
        config: TrainConfig,
        network: Network,
        params: Parameters<F>,
        adam: Option<AdamState<F>>,
        rng: ChaCha8Rng,
        epoch: usize,
        history: Vec<EpochLog>,
    ) -> Result<Self> {
        network.check_params(&params)?;
        let adam = adam.unwrap_or_else(|| AdamState::zeros_like(params.tensors()));
        let sched = config.schedule()?;
        Ok(Self {
            config,
            network,
            params,
            adam,
            sched,
            rng,
            epoch,
            history,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters<F> {
        &self.params
    }

    pub fn schedule(&self) -> &Schedule {
        &self.sched
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    pub fn model(&self) -> Result<Model<F>> {
        Model::new(self.network.clone(), self.params.clone())
    }

    /// One optimizer step over `batch`. Returns the mean loss.
    pub fn train_step(&mut self, batch: &[&PreparedVideo<F>]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut acc: Vec<Tensor<F>> = self
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let mut losses = Vec::with_capacity(batch.len());
        for video in batch {
            let mut vrng = ChaCha8Rng::seed_from_u64(self.rng.next_u64());
            let (loss, grads, sample) = video_gradients(
                &self.network,
                &self.params,
                video,
                &self.sched,
                &self.config,
                &mut vrng,
            )?;
            log::trace!(
                "{} mask {} s {}: {:.5}",
                video.id,
                sample.mask,
                sample.s,
                loss.total
            );
            for (a, g) in acc.iter_mut().zip(&grads) {
                a.add_scaled(g, F::one());
            }
            losses.push(loss);
        }
        let inv = F::lit(1.0 / batch.len() as f64);
        for a in &mut acc {
            a.data_mut().iter_mut().for_each(|x| *x *= inv);
        }
        if acc.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("accumulated gradient".into()));
        }
        let cfg = AdamConfig::new(self.config.learning_rate, self.config.weight_decay);
        adam_update(self.params.tensors_mut(), &acc, &mut self.adam, &cfg)?;
        Ok(mean_breakdown(&losses))
    }

    /// One pass over `videos` in a freshly shuffled order.
    pub fn train_epoch(&mut self, videos: &[PreparedVideo<F>]) -> Result<EpochLog> {
        if videos.is_empty() {
            return Err(Error::invalid("no training videos"));
        }
        let mut order: Vec<usize> = (0..videos.len()).collect();
        order.shuffle(&mut self.rng);
        let mut steps = Vec::new();
        let mut losses = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&PreparedVideo<F>> = chunk.iter().map(|&i| &videos[i]).collect();
            let loss = self.train_step(&batch)?;
            steps.push(loss.total);
            for _ in chunk {
                losses.push(loss);
            }
        }
        self.epoch += 1;
        let log = EpochLog {
            epoch: self.epoch,
            loss: mean_breakdown(&losses),
            step_losses: steps,
        };
        log::debug!("epoch {} loss {:.5}", log.epoch, log.loss.total);
        self.history.push(log.clone());
        Ok(log)
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn fit(&mut self, videos: &[PreparedVideo<F>]) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.train_epoch(videos)?;
        }
        Ok(())
    }
}
