use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, DEFAULT_SIGMA, DEFAULT_TAU};
use crate::masking::{ratio_frames, MaskType, RandomMaskSpec, TRAIN_ALPHAS};
use crate::model::ModelConfig;

/// Length of the sequence an anticipative training mask is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainHorizon {
    /// Everything after the observed prefix is hidden.
    ToEnd,
    /// The video is cut `ceil(beta T)` frames after the prefix.
    Ratio(f64),
    /// The video is cut `ceil(r N_O)` frames after the prefix.
    ObservedMultiple(f64),
}

impl TrainHorizon {
    /// Total frames kept for a video of `frames` frames observed for
    /// `observed` frames.
    pub fn kept_frames(&self, frames: usize, observed: usize) -> usize {
        let extra = match *self {
            TrainHorizon::ToEnd => frames,
            TrainHorizon::Ratio(b) => ratio_frames(b, frames),
            TrainHorizon::ObservedMultiple(r) => ratio_frames(r, observed),
        };
        observed.saturating_add(extra).min(frames)
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    /// Videos per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Number of diffusion steps `S`.
    pub diffusion_steps: usize,
    pub inference_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub weights: LossWeights,
    /// Observation ratios for training anticipative masks.
    pub alphas: Vec<f64>,
    /// Horizons for anticipative masks, drawn uniformly per video.
    pub horizons: Vec<TrainHorizon>,
    pub random_mask: RandomMaskSpec,
    pub mask_types: Vec<MaskType>,
    /// When false the decoder objective only covers masked frames.
    pub observed_decoder_loss: bool,
    /// Temporal subsampling applied to features and labels before training
    /// and inference.
    pub sample_rate: usize,
    pub tau: f64,
    pub sigma: f64,
    /// Dataset manifest, when training from files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
}

impl TrainConfig {
    /// CPU-sized profile for the synthetic grammar.
    pub fn desk(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            model: ModelConfig::desk(feature_dim, num_classes),
            epochs: 300,
            batch_size: 4,
            learning_rate: 2e-3,
            weight_decay: 0.0,
            seed: 0,
            diffusion_steps: 100,
            inference_steps: 10,
            beta_start: 1e-3,
            beta_end: 0.2,
            weights: LossWeights::salads(),
            alphas: TRAIN_ALPHAS.to_vec(),
            horizons: vec![
                TrainHorizon::ToEnd,
                TrainHorizon::Ratio(0.1),
                TrainHorizon::Ratio(0.2),
                TrainHorizon::Ratio(0.3),
                TrainHorizon::Ratio(0.5),
                TrainHorizon::ObservedMultiple(4.0),
            ],
            random_mask: RandomMaskSpec::default(),
            mask_types: MaskType::ALL.to_vec(),
            observed_decoder_loss: true,
            sample_rate: 4,
            tau: DEFAULT_TAU,
            sigma: DEFAULT_SIGMA,
            dataset: None,
        }
    }

    /// Full-size 50 Salads profile.
    pub fn salads() -> Self {
        Self {
            model: ModelConfig::salads(),
            epochs: 5000,
            batch_size: 4,
            learning_rate: 5e-4,
            weight_decay: 0.0,
            seed: 0,
            diffusion_steps: 1000,
            inference_steps: 25,
            beta_start: 1e-4,
            beta_end: 0.02,
            weights: LossWeights::salads(),
            alphas: TRAIN_ALPHAS.to_vec(),
            horizons: vec![TrainHorizon::ToEnd],
            random_mask: RandomMaskSpec::default(),
            mask_types: MaskType::ALL.to_vec(),
            observed_decoder_loss: true,
            sample_rate: 8,
            tau: DEFAULT_TAU,
            sigma: DEFAULT_SIGMA,
            dataset: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        let counts = [
            ("epochs", self.epochs),
            ("batch size", self.batch_size),
            ("diffusion steps", self.diffusion_steps),
            ("sample rate", self.sample_rate),
            ("random mask clip size", self.random_mask.clip_size),
            ("random mask clips", self.random_mask.num_clips),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.inference_steps < 2 {
            return Err(Error::invalid("inference needs at least 2 steps"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if self.mask_types.is_empty() {
            return Err(Error::invalid("at least one mask type must be enabled"));
        }
        if self.mask_types.contains(&MaskType::Anticipative)
            && (self.alphas.is_empty() || self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)))
        {
            return Err(Error::invalid("anticipative masks need ratios in [0, 1]"));
        }
        if self.mask_types.contains(&MaskType::Anticipative) && self.horizons.is_empty() {
            return Err(Error::invalid(
                "anticipative masks need at least one horizon",
            ));
        }
        for h in &self.horizons {
            let ok = match *h {
                TrainHorizon::ToEnd => true,
                TrainHorizon::Ratio(v) | TrainHorizon::ObservedMultiple(v) => {
                    v > 0.0 && v.is_finite()
                }
            };
            if !ok {
                return Err(Error::invalid(format!("bad training horizon {h:?}")));
            }
        }
        if !(self.tau > 0.0 && self.sigma > 0.0) {
            return Err(Error::invalid("tau and sigma must be positive"));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        TrainConfig::desk(16, 6).validate().unwrap();
        let s = TrainConfig::salads();
        s.validate().unwrap();
        assert_eq!(s.learning_rate, 0.0005);
        assert_eq!(s.batch_size, 4);
        assert_eq!(s.diffusion_steps, 1000);
        assert_eq!(s.inference_steps, 25);
    }

    #[test]
    fn zero_counts_are_rejected() {
        let mut c = TrainConfig::desk(16, 6);
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk(16, 6);
        c.mask_types.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn horizons_keep_frames() {
        assert_eq!(TrainHorizon::ToEnd.kept_frames(100, 30), 100);
        assert_eq!(TrainHorizon::Ratio(0.2).kept_frames(100, 30), 50);
        assert_eq!(TrainHorizon::Ratio(0.9).kept_frames(100, 30), 100);
        assert_eq!(TrainHorizon::ObservedMultiple(2.0).kept_frames(100, 30), 90);
        assert_eq!(
            TrainHorizon::ObservedMultiple(4.0).kept_frames(100, 30),
            100
        );
    }

    #[test]
    fn json_round_trip() {
        let c = TrainConfig::desk(16, 6);
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
