//! Visibility masks over frames, the training-time mask draw, and the
//! construction of anticipation inputs.

use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Per-frame visibility: `true` keeps the frame, `false` replaces it with
/// the mask token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskVector(Vec<bool>);

impl MaskVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn visible_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn masked_count(&self) -> usize {
        self.0.len() - self.visible_count()
    }

    pub fn into_bits(self) -> Vec<bool> {
        self.0
    }
}

impl Deref for MaskVector {
    type Target = [bool];

    fn deref(&self) -> &[bool] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MaskType {
    #[serde(rename = "N")]
    None,
    #[serde(rename = "A")]
    Anticipative,
    #[serde(rename = "R")]
    Random,
    #[serde(rename = "S")]
    Relation,
    #[serde(rename = "B")]
    Boundary,
}

impl MaskType {
    pub const ALL: [MaskType; 5] = [
        MaskType::None,
        MaskType::Anticipative,
        MaskType::Random,
        MaskType::Relation,
        MaskType::Boundary,
    ];

    pub fn letter(self) -> char {
        match self {
            MaskType::None => 'N',
            MaskType::Anticipative => 'A',
            MaskType::Random => 'R',
            MaskType::Relation => 'S',
            MaskType::Boundary => 'B',
        }
    }
}

impl fmt::Display for MaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for MaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N" | "none" => Ok(MaskType::None),
            "A" | "anticipative" => Ok(MaskType::Anticipative),
            "R" | "random" => Ok(MaskType::Random),
            "S" | "relation" => Ok(MaskType::Relation),
            "B" | "boundary" => Ok(MaskType::Boundary),
            other => Err(Error::invalid(format!("unknown mask type `{other}`"))),
        }
    }
}

/// Clip layout for random masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomMaskSpec {
    /// Clip size `Q` in frames.
    pub clip_size: usize,
    /// Number of masked clips `N_R`.
    pub num_clips: usize,
}

impl RandomMaskSpec {
    pub fn clip_count(&self, frames: usize) -> usize {
        frames.div_ceil(self.clip_size.max(1))
    }
}

impl Default for RandomMaskSpec {
    fn default() -> Self {
        Self {
            clip_size: 10,
            num_clips: 25,
        }
    }
}

/// `ceil(ratio * n)`, tolerant of the rounding error in products such as
/// `0.3 * 100`.
pub fn ratio_frames(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

pub fn mask_none(frames: usize) -> MaskVector {
    MaskVector(vec![true; frames])
}

/// Keeps the first `observed` frames.
pub fn mask_anticipative(frames: usize, observed: usize) -> Result<MaskVector> {
    if observed > frames {
        return Err(Error::invalid(format!(
            "cannot observe {observed} of {frames} frames"
        )));
    }
    Ok(MaskVector((0..frames).map(|i| i < observed).collect()))
}

/// Masks the frames of the given clip indices.
pub fn mask_clips(frames: usize, clip_size: usize, clips: &[usize]) -> Result<MaskVector> {
    if clip_size == 0 {
        return Err(Error::invalid("clip size must be positive"));
    }
    let count = frames.div_ceil(clip_size);
    let mut bits = vec![true; frames];
    for &c in clips {
        if c >= count {
            return Err(Error::invalid(format!("clip {c} of {count}")));
        }
        let end = ((c + 1) * clip_size).min(frames);
        bits[c * clip_size..end].iter_mut().for_each(|b| *b = false);
    }
    Ok(MaskVector(bits))
}

/// Masks `num_clips` distinct clips drawn uniformly.
pub fn mask_random<R: Rng + ?Sized>(
    frames: usize,
    spec: &RandomMaskSpec,
    rng: &mut R,
) -> Result<MaskVector> {
    if spec.clip_size == 0 {
        return Err(Error::invalid("clip size must be positive"));
    }
    let count = spec.clip_count(frames);
    if spec.num_clips > count {
        return Err(Error::invalid(format!(
            "{} masked clips requested but only {count} exist",
            spec.num_clips
        )));
    }
    let clips = sample(rng, count, spec.num_clips).into_vec();
    mask_clips(frames, spec.clip_size, &clips)
}

/// Masks every frame of `class`.
pub fn mask_class(labels: &[usize], class: usize) -> MaskVector {
    MaskVector(labels.iter().map(|&c| c != class).collect())
}

/// Masks every frame of one present class drawn uniformly. A video with a
/// single class falls back to a random mask.
pub fn mask_relation<R: Rng + ?Sized>(
    labels: &[usize],
    fallback: &RandomMaskSpec,
    rng: &mut R,
) -> Result<MaskVector> {
    let mut present = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        let spec = RandomMaskSpec {
            num_clips: fallback.num_clips.min(fallback.clip_count(labels.len())),
            ..*fallback
        };
        return mask_random(labels.len(), &spec, rng);
    }
    let class = present[rng.random_range(0..present.len())];
    Ok(mask_class(labels, class))
}

/// Masks frames whose soft boundary is at least 0.5.
pub fn mask_boundary(soft: &[f64]) -> MaskVector {
    MaskVector(soft.iter().map(|&b| b < 0.5).collect())
}

/// Everything [`choose_training_mask`] needs about one video.
#[derive(Debug, Clone, Copy)]
pub struct MaskContext<'a> {
    pub labels: &'a [usize],
    pub soft_boundary: &'a [f64],
    pub random: RandomMaskSpec,
    /// Observation ratios for anticipative masks.
    pub alphas: &'a [f64],
    /// Mask types to draw from.
    pub enabled: &'a [MaskType],
}

/// Observation ratios used for training anticipative masks.
pub const TRAIN_ALPHAS: [f64; 7] = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];

/// Draws a mask type uniformly from the enabled set and builds its mask.
///
/// The random-mask clip count is clamped to the clips available.
pub fn choose_training_mask<R: Rng + ?Sized>(
    rng: &mut R,
    ctx: &MaskContext<'_>,
) -> Result<(MaskType, MaskVector)> {
    if ctx.enabled.is_empty() {
        return Err(Error::invalid("no mask type enabled"));
    }
    let frames = ctx.labels.len();
    if ctx.soft_boundary.len() != frames {
        return Err(Error::shape("soft boundary length differs from labels"));
    }
    let kind = ctx.enabled[rng.random_range(0..ctx.enabled.len())];
    let mask = match kind {
        MaskType::None => mask_none(frames),
        MaskType::Anticipative => {
            if ctx.alphas.is_empty() {
                return Err(Error::invalid("no observation ratios configured"));
            }
            let alpha = ctx.alphas[rng.random_range(0..ctx.alphas.len())];
            mask_anticipative(frames, ratio_frames(alpha, frames).min(frames))?
        }
        MaskType::Random => {
            let spec = RandomMaskSpec {
                num_clips: ctx.random.num_clips.min(ctx.random.clip_count(frames)),
                ..ctx.random
            };
            mask_random(frames, &spec, rng)?
        }
        MaskType::Relation => mask_relation(ctx.labels, &ctx.random, rng)?,
        MaskType::Boundary => mask_boundary(ctx.soft_boundary),
    };
    Ok((kind, mask))
}

/// Replaces masked rows of `features` with `token`.
pub fn apply_mask<F: Real>(features: &Tensor<F>, mask: &[bool], token: &[F]) -> Result<Tensor<F>> {
    if features.shape().len() != 2 || features.rows() != mask.len() {
        return Err(Error::shape(format!(
            "features {:?} with mask of length {}",
            features.shape(),
            mask.len()
        )));
    }
    if token.len() != features.cols() {
        return Err(Error::shape(format!(
            "mask token of length {} for {} channels",
            token.len(),
            features.cols()
        )));
    }
    let mut out = features.clone();
    for (i, &visible) in mask.iter().enumerate() {
        if !visible {
            out.row_mut(i).copy_from_slice(token);
        }
    }
    Ok(out)
}

/// Observation and anticipation ratios of one evaluation cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnticipationSpec {
    pub alpha: f64,
    pub beta: f64,
    /// Horizon multiplier when the video length is unknown.
    pub r: f64,
    pub use_gt_length: bool,
}

impl AnticipationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0 && self.beta <= 1.0 - self.alpha + 1e-12) {
            return Err(Error::invalid(format!(
                "beta {} outside [0, 1 - alpha]",
                self.beta
            )));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::invalid(format!(
                "r must be positive, got {}",
                self.r
            )));
        }
        Ok(())
    }

    pub fn observed_frames(&self, frames: usize) -> usize {
        ratio_frames(self.alpha, frames)
    }

    pub fn gt_horizon(&self, frames: usize) -> usize {
        ratio_frames(self.beta, frames)
    }

    /// Prediction length derived from the observed length only.
    pub fn rectified_horizon(&self, observed: usize) -> usize {
        ratio_frames(self.r, observed)
    }
}

/// Appends `horizon` mask-token rows to the observed features.
pub fn build_anticipation_input<F: Real>(
    observed: &Tensor<F>,
    horizon: usize,
    token: &[F],
) -> Result<(Tensor<F>, MaskVector)> {
    if observed.shape().len() != 2 || observed.rows() == 0 {
        return Err(Error::invalid(
            "anticipation needs at least one observed frame",
        ));
    }
    if horizon == 0 {
        return Err(Error::invalid("anticipation horizon must be positive"));
    }
    if token.len() != observed.cols() {
        return Err(Error::shape("mask token width differs from features"));
    }
    let n_o = observed.rows();
    let mut data = observed.data().to_vec();
    for _ in 0..horizon {
        data.extend_from_slice(token);
    }
    let input = Tensor::new(vec![n_o + horizon, observed.cols()], data)?;
    Ok((input, mask_anticipative(n_o + horizon, n_o)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::soft_boundary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixed_masks() {
        assert_eq!(&*mask_none(4), &[true; 4]);
        assert_eq!(
            &*mask_anticipative(5, 2).unwrap(),
            &[true, true, false, false, false]
        );
        assert_eq!(mask_anticipative(5, 5).unwrap().visible_count(), 5);
        assert!(mask_anticipative(3, 4).is_err());
        let m = mask_clips(10, 5, &[1]).unwrap();
        assert_eq!(
            &*m,
            &[true, true, true, true, true, false, false, false, false, false]
        );
        assert_eq!(mask_clips(7, 5, &[1]).unwrap().masked_count(), 2);
    }

    #[test]
    fn random_mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = RandomMaskSpec {
            clip_size: 5,
            num_clips: 0,
        };
        assert_eq!(
            mask_random(10, &spec, &mut rng).unwrap().visible_count(),
            10
        );
        let spec = RandomMaskSpec {
            clip_size: 4,
            num_clips: 2,
        };
        assert_eq!(mask_random(16, &spec, &mut rng).unwrap().masked_count(), 8);
        let spec = RandomMaskSpec {
            clip_size: 4,
            num_clips: 5,
        };
        assert!(mask_random(16, &spec, &mut rng).is_err());
    }

    #[test]
    fn relation_and_boundary() {
        assert_eq!(
            &*mask_class(&[0, 0, 1, 1, 0], 1),
            &[true, true, false, false, true]
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = RandomMaskSpec {
            clip_size: 2,
            num_clips: 1,
        };
        let m = mask_relation(&[3, 3, 3, 3], &spec, &mut rng).unwrap();
        assert_eq!(m.masked_count(), 2);
        assert_eq!(
            &*mask_boundary(&[0.1, 0.6, 0.6, 0.1]),
            &[true, false, false, true]
        );
        let b = soft_boundary(&[0, 0, 1, 1], 1.0);
        assert_eq!(&*mask_boundary(&b), &[true, false, false, true]);
        assert_eq!(
            mask_boundary(&soft_boundary(&[2; 6], 1.0)).visible_count(),
            6
        );
    }

    #[test]
    fn apply_mask_rows() {
        let f = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = apply_mask(&f, &[true, false, true], &[9.0, 8.0]).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 9.0, 8.0, 5.0, 6.0]);
        assert!(apply_mask(&f, &[true, false], &[9.0, 8.0]).is_err());
        assert!(apply_mask(&f, &[true, false, true], &[9.0]).is_err());
    }

    #[test]
    fn anticipation_lengths() {
        let spec = AnticipationSpec {
            alpha: 0.3,
            beta: 0.5,
            r: 4.0,
            use_gt_length: true,
        };
        spec.validate().unwrap();
        assert_eq!(spec.observed_frames(100), 30);
        assert_eq!(spec.gt_horizon(100), 50);
        assert_eq!(spec.gt_horizon(101), 51);
        assert_eq!(spec.rectified_horizon(30), 120);
        let obs = Tensor::<f64>::from_f64(&[2, 1], &[1.0, 2.0]).unwrap();
        let (x, m) = build_anticipation_input(&obs, 3, &[0.5]).unwrap();
        assert_eq!(x.data(), &[1.0, 2.0, 0.5, 0.5, 0.5]);
        assert_eq!(&*m, &[true, true, false, false, false]);
        assert!(build_anticipation_input(&obs, 0, &[0.5]).is_err());
        let bad = AnticipationSpec { beta: 0.8, ..spec };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mask_type_round_trip() {
        for t in MaskType::ALL {
            assert_eq!(t.to_string().parse::<MaskType>().unwrap(), t);
        }
    }
}
