//! Training loop, optimizer, checkpoints, inference entry points, ablation
//! runs and reports.

mod checkpoint;
mod config;
mod gradcheck;
mod infer;
mod optim;
mod plot;
mod train;

pub use checkpoint::{BlobEntry, Checkpoint, MAGIC, VERSION};
pub use config::{TrainConfig, TrainHorizon};
pub use gradcheck::{micro_config, model_gradcheck, GRADCHECK_TOLERANCE};
pub use infer::{evaluate_model, infer_lta, infer_tas, video_seed, ModelAnticipator};
pub use optim::{adam_update, AdamConfig, AdamState};
pub use plot::{barcode_svg, class_color, BarcodeRow};
pub use train::{
    prepare_videos, video_gradients, EpochLog, PreparedVideo, RngState, StepSample, Trainer,
};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, VideoRecord};
use crate::error::Result;
use crate::masking::MaskType;
use crate::metrics::{eval_lta_grid, EvalProtocol, LtaCell, LtaVideo, MetricsReport, Persistence};
use crate::numerics::Real;

/// Outcome of one training run. Wall-clock time is kept out so that equal
/// seeds give byte-identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochLog>,
    pub test: MetricsReport,
    /// Last-observed-label baseline on the same grid.
    pub persistence: Vec<LtaCell>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Persistence-baseline grid on `videos`.
pub fn persistence_grid(videos: &[&VideoRecord], protocol: &EvalProtocol) -> Result<Vec<LtaCell>> {
    let lta: Vec<LtaVideo<'_>> = videos
        .iter()
        .map(|v| LtaVideo {
            id: &v.id,
            features: &v.features,
            labels: &v.labels,
        })
        .collect();
    eval_lta_grid(&lta, &mut Persistence, protocol)
}

/// Trains on the train split and evaluates on the test split.
pub fn run_experiment<F: Real>(
    config: &TrainConfig,
    dataset: &Dataset,
    protocol: &EvalProtocol,
) -> Result<(RunReport, Trainer<F>)> {
    let prepared = prepare_videos::<F>(&dataset.train_videos(), config)?;
    let mut trainer = Trainer::<F>::new(config.clone())?;
    trainer.fit(&prepared)?;
    Ok((run_report(&trainer, dataset, protocol)?, trainer))
}

/// Evaluates the trainer's current model on the test split.
pub fn run_report<F: Real>(
    trainer: &Trainer<F>,
    dataset: &Dataset,
    protocol: &EvalProtocol,
) -> Result<RunReport> {
    let config = trainer.config();
    let test = dataset.test_videos();
    let model = trainer.model()?;
    let (metrics, _) = evaluate_model(&model, config, &test, protocol, "test", config.seed)?;
    Ok(RunReport {
        seed: config.seed,
        config: config.clone(),
        epochs: trainer.history().to_vec(),
        test: metrics,
        persistence: persistence_grid(&test, protocol)?,
    })
}

/// Changes applied to a base configuration by one ablation arm.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    pub drop_encoder_loss: bool,
    pub drop_observed_decoder_loss: bool,
    pub drop_masks: Vec<MaskType>,
}

impl AblationToggles {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        if self.drop_encoder_loss {
            cfg.weights = cfg.weights.without_encoder();
        }
        if self.drop_observed_decoder_loss {
            cfg.observed_decoder_loss = false;
        }
        cfg.mask_types.retain(|m| !self.drop_masks.contains(m));
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub toggles: AblationToggles,
}

impl AblationArm {
    pub fn new(name: impl Into<String>, toggles: AblationToggles) -> Self {
        Self {
            name: name.into(),
            toggles,
        }
    }

    /// The unchanged configuration.
    pub fn baseline() -> Self {
        Self::new("baseline", AblationToggles::default())
    }

    pub fn drop_encoder_loss() -> Self {
        Self::new(
            "drop_enc_loss",
            AblationToggles {
                drop_encoder_loss: true,
                ..Default::default()
            },
        )
    }

    pub fn drop_observed_decoder_loss() -> Self {
        Self::new(
            "drop_dec_observed_loss",
            AblationToggles {
                drop_observed_decoder_loss: true,
                ..Default::default()
            },
        )
    }

    pub fn drop_mask(mask: MaskType) -> Self {
        Self::new(
            format!("drop_mask_{}", mask.letter()),
            AblationToggles {
                drop_masks: vec![mask],
                ..Default::default()
            },
        )
    }

    /// Baseline, both loss ablations and one arm per mask type.
    pub fn standard() -> Vec<Self> {
        let mut arms = vec![
            Self::baseline(),
            Self::drop_encoder_loss(),
            Self::drop_observed_decoder_loss(),
        ];
        arms.extend(MaskType::ALL.iter().map(|&m| Self::drop_mask(m)));
        arms
    }
}

/// Metric difference of an arm from the first arm, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    pub toggles: AblationToggles,
    pub mean_accuracy: f64,
    pub mean_edit: f64,
    /// `(alpha, beta, mean MoC)` over seeds.
    pub mean_moc: Vec<(f64, f64, f64)>,
    pub delta_accuracy: f64,
    pub delta_edit: f64,
    pub delta_moc: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    /// `runs[arm][seed]`.
    pub runs: Vec<Vec<RunReport>>,
    pub summary: Vec<ArmSummary>,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.summary.iter().find(|a| a.name == name)
    }
}

fn summarize(arm: &AblationArm, runs: &[RunReport]) -> ArmSummary {
    let n = runs.len().max(1) as f64;
    let tas = |f: fn(&crate::metrics::TasMetrics) -> f64| {
        runs.iter()
            .filter_map(|r| r.test.tas.as_ref())
            .map(f)
            .sum::<f64>()
            / n
    };
    let mut mean_moc: Vec<(f64, f64, f64)> = Vec::new();
    if let Some(first) = runs.first() {
        for (i, cell) in first.test.lta.iter().enumerate() {
            let m = runs.iter().map(|r| r.test.lta[i].moc).sum::<f64>() / n;
            mean_moc.push((cell.alpha, cell.beta, m));
        }
    }
    ArmSummary {
        name: arm.name.clone(),
        toggles: arm.toggles.clone(),
        mean_accuracy: tas(|t| t.accuracy),
        mean_edit: tas(|t| t.edit),
        mean_moc,
        delta_accuracy: 0.0,
        delta_edit: 0.0,
        delta_moc: Vec::new(),
    }
}

/// Trains every arm with every seed and reports per-arm means and their
/// differences from the first arm.
pub fn run_ablation<F: Real>(
    base: &TrainConfig,
    dataset: &Dataset,
    protocol: &EvalProtocol,
    arms: &[AblationArm],
    seeds: &[u64],
) -> Result<AblationReport> {
    let mut runs = Vec::with_capacity(arms.len());
    let mut summary: Vec<ArmSummary> = Vec::with_capacity(arms.len());
    for arm in arms {
        let mut arm_runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = arm.toggles.apply(base);
            cfg.seed = seed;
            log::info!("ablation arm {} seed {seed}", arm.name);
            arm_runs.push(run_experiment::<F>(&cfg, dataset, protocol)?.0);
        }
        summary.push(summarize(arm, &arm_runs));
        runs.push(arm_runs);
    }
    if let Some(reference) = summary.first().cloned() {
        for s in &mut summary {
            s.delta_accuracy = s.mean_accuracy - reference.mean_accuracy;
            s.delta_edit = s.mean_edit - reference.mean_edit;
            s.delta_moc = s
                .mean_moc
                .iter()
                .zip(&reference.mean_moc)
                .map(|(&(a, b, m), &(_, _, r))| (a, b, m - r))
                .collect();
        }
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        runs,
        summary,
    })
}
