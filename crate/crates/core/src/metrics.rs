//! Segmentation and anticipation metrics.
//!
//! All scores are percentages in `[0, 100]`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::ratio_frames;
use crate::numerics::Tensor;

/// A maximal run of one class, `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn iou(&self, other: &Segment) -> f64 {
        let inter = self
            .end
            .min(other.end)
            .saturating_sub(self.start.max(other.start));
        let union = self.end.max(other.end) - self.start.min(other.start);
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

pub fn extract_segments(labels: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (i, &c) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.class == c => s.end = i + 1,
            _ => out.push(Segment {
                class: c,
                start: i,
                end: i + 1,
            }),
        }
    }
    out
}

fn foreground(labels: &[usize], background: &[usize]) -> Vec<Segment> {
    extract_segments(labels)
        .into_iter()
        .filter(|s| !background.contains(&s.class))
        .collect()
}

fn check_lengths(pred: &[usize], gt: &[usize]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

pub fn frame_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    check_lengths(pred, gt)?;
    if gt.is_empty() {
        return Err(Error::invalid("accuracy of an empty sequence"));
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized Levenshtein similarity of the segment class sequences.
pub fn edit_score(pred: &[usize], gt: &[usize], background: &[usize]) -> f64 {
    let p: Vec<usize> = foreground(pred, background)
        .iter()
        .map(|s| s.class)
        .collect();
    let g: Vec<usize> = foreground(gt, background).iter().map(|s| s.class).collect();
    match (p.is_empty(), g.is_empty()) {
        (true, true) => 100.0,
        (true, false) | (false, true) => 0.0,
        _ => 100.0 * (1.0 - levenshtein(&p, &g) as f64 / p.len().max(g.len()) as f64),
    }
}

/// Segment-level hit counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct F1Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl F1Counts {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            100.0
        } else {
            100.0 * 2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn add(&mut self, other: F1Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Counts at IoU threshold `k / 100`.
///
/// Predicted segments are visited in temporal order; each is a hit when its
/// best same-class IoU reaches the threshold and that ground-truth segment
/// has not been claimed yet.
pub fn f1_counts(pred: &[usize], gt: &[usize], k: f64, background: &[usize]) -> F1Counts {
    let thr = k / 100.0;
    let p = foreground(pred, background);
    let g = foreground(gt, background);
    let mut used = vec![false; g.len()];
    let mut counts = F1Counts::default();
    for ps in &p {
        let mut best: Option<(usize, f64)> = None;
        for (j, gs) in g.iter().enumerate() {
            if gs.class != ps.class {
                continue;
            }
            let iou = ps.iou(gs);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, iou)) if iou >= thr && !used[j] => {
                used[j] = true;
                counts.tp += 1;
            }
            _ => counts.fp += 1,
        }
    }
    counts.fn_ = used.iter().filter(|&&u| !u).count();
    counts
}

pub fn f1_at_k(pred: &[usize], gt: &[usize], k: f64, background: &[usize]) -> (f64, F1Counts) {
    let c = f1_counts(pred, gt, k, background);
    (c.f1(), c)
}

/// Mean over the classes present in `gt[observed..observed + len]` of the
/// per-class accuracy of `future`.
///
/// `future[0]` predicts frame `observed`; it is cropped to `len`, or padded
/// by repeating its last label.
pub fn moc(future: &[usize], gt: &[usize], observed: usize, len: usize) -> Result<f64> {
    if len == 0 {
        return Err(Error::invalid("empty evaluation window"));
    }
    if gt.len() < observed + len {
        return Err(Error::invalid(format!(
            "window {observed}..{} exceeds {} frames",
            observed + len,
            gt.len()
        )));
    }
    let window = &gt[observed..observed + len];
    let pad = *future
        .last()
        .ok_or_else(|| Error::invalid("empty prediction"))?;
    let k = window.iter().max().copied().unwrap_or(0) + 1;
    let mut total = vec![0usize; k];
    let mut hit = vec![0usize; k];
    for (i, &g) in window.iter().enumerate() {
        total[g] += 1;
        if future.get(i).copied().unwrap_or(pad) == g {
            hit[g] += 1;
        }
    }
    let present: Vec<f64> = total
        .iter()
        .zip(&hit)
        .filter(|(&t, _)| t > 0)
        .map(|(&t, &h)| h as f64 / t as f64)
        .collect();
    Ok(100.0 * present.iter().sum::<f64>() / present.len() as f64)
}

pub const F1_THRESHOLDS: [f64; 3] = [10.0, 25.0, 50.0];

/// Segmentation scores over a split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TasMetrics {
    /// Frame accuracy pooled over all frames.
    pub accuracy: f64,
    /// Edit score averaged over videos.
    pub edit: f64,
    /// F1 at 10/25/50 from counts pooled over videos.
    pub f1: [f64; 3],
}

impl TasMetrics {
    pub fn average(&self) -> f64 {
        (self.accuracy + self.edit + self.f1.iter().sum::<f64>()) / 5.0
    }
}

/// Scores `(prediction, ground truth)` pairs.
pub fn evaluate_tas(pairs: &[(&[usize], &[usize])], background: &[usize]) -> Result<TasMetrics> {
    if pairs.is_empty() {
        return Err(Error::invalid("no videos to evaluate"));
    }
    let mut hits = 0;
    let mut frames = 0;
    let mut edit = 0.0;
    let mut counts = [F1Counts::default(); 3];
    for &(p, g) in pairs {
        check_lengths(p, g)?;
        hits += p.iter().zip(g).filter(|(a, b)| a == b).count();
        frames += g.len();
        edit += edit_score(p, g, background);
        for (c, &k) in counts.iter_mut().zip(&F1_THRESHOLDS) {
            c.add(f1_counts(p, g, k, background));
        }
    }
    Ok(TasMetrics {
        accuracy: 100.0 * hits as f64 / frames.max(1) as f64,
        edit: edit / pairs.len() as f64,
        f1: counts.map(|c| c.f1()),
    })
}

/// LTA evaluation grid and horizon rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub r: f64,
    pub use_gt_length: bool,
    pub background: Vec<usize>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            alphas: vec![0.2, 0.3],
            betas: vec![0.1, 0.2, 0.3, 0.5],
            r: 4.0,
            use_gt_length: true,
            background: Vec::new(),
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.betas.is_empty() {
            return Err(Error::invalid("evaluation grids must be non-empty"));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::invalid("r must be positive"));
        }
        let bad = |x: &f64| !(0.0..=1.0).contains(x);
        if self.alphas.iter().any(bad) || self.betas.iter().any(bad) {
            return Err(Error::invalid("ratios must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// How far an anticipator must predict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Horizon {
    /// An explicit number of future frames.
    Frames(usize),
    /// A multiple of the observed length.
    Ratio(f64),
}

impl Horizon {
    /// Number of frames to predict after `observed` frames.
    pub fn frames(&self, observed: usize) -> usize {
        match *self {
            Horizon::Frames(n) => n,
            Horizon::Ratio(r) => ratio_frames(r, observed),
        }
    }
}

/// The observed prefix of a video; the only video data an anticipator sees.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub video_id: String,
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Predicts future labels from an observed prefix.
pub trait Anticipator {
    /// Returns `horizon.frames(obs.len())` labels for the frames after the
    /// prefix.
    fn anticipate(&mut self, obs: &Observation, horizon: Horizon) -> Result<Vec<usize>>;
}

impl<F: FnMut(&Observation, Horizon) -> Result<Vec<usize>>> Anticipator for F {
    fn anticipate(&mut self, obs: &Observation, horizon: Horizon) -> Result<Vec<usize>> {
        self(obs, horizon)
    }
}

/// Repeats the last observed label.
#[derive(Debug, Clone, Copy, Default)]
pub struct Persistence;

impl Anticipator for Persistence {
    fn anticipate(&mut self, obs: &Observation, horizon: Horizon) -> Result<Vec<usize>> {
        let last = *obs
            .labels
            .last()
            .ok_or_else(|| Error::invalid("empty observation"))?;
        Ok(vec![last; horizon.frames(obs.len())])
    }
}

/// One `(alpha, beta)` cell of the anticipation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtaCell {
    pub alpha: f64,
    pub beta: f64,
    /// Per-video MoC averaged over evaluated videos.
    pub moc: f64,
    pub videos: usize,
    pub skipped: usize,
}

/// Input to [`eval_lta_grid`]: one labelled video.
#[derive(Debug, Clone, Copy)]
pub struct LtaVideo<'a> {
    pub id: &'a str,
    pub features: &'a Tensor<f32>,
    pub labels: &'a [usize],
}

/// Evaluates `model` on every cell of the protocol grid.
pub fn eval_lta_grid<A: Anticipator + ?Sized>(
    videos: &[LtaVideo<'_>],
    model: &mut A,
    protocol: &EvalProtocol,
) -> Result<Vec<LtaCell>> {
    protocol.validate()?;
    let mut cells = Vec::new();
    for &alpha in &protocol.alphas {
        for &beta in &protocol.betas {
            let mut total = 0.0;
            let mut count = 0;
            let mut skipped = 0;
            for v in videos {
                let t = v.labels.len();
                let n_o = ratio_frames(alpha, t);
                let eval_len = ratio_frames(beta, t);
                if n_o == 0 || eval_len == 0 || n_o + eval_len > t {
                    skipped += 1;
                    continue;
                }
                let obs = Observation {
                    video_id: v.id.to_string(),
                    features: v.features.slice_rows(0, n_o),
                    labels: v.labels[..n_o].to_vec(),
                };
                let horizon = if protocol.use_gt_length {
                    Horizon::Frames(eval_len)
                } else {
                    Horizon::Ratio(protocol.r)
                };
                let future = model.anticipate(&obs, horizon)?;
                if future.len() != horizon.frames(n_o) {
                    return Err(Error::shape(format!(
                        "anticipator returned {} frames for a horizon of {}",
                        future.len(),
                        horizon.frames(n_o)
                    )));
                }
                total += moc(&future, v.labels, n_o, eval_len)?;
                count += 1;
            }
            if skipped > 0 {
                log::info!("alpha {alpha} beta {beta}: skipped {skipped} videos");
            }
            cells.push(LtaCell {
                alpha,
                beta,
                moc: if count == 0 {
                    0.0
                } else {
                    total / count as f64
                },
                videos: count,
                skipped,
            });
        }
    }
    Ok(cells)
}

/// Metrics of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub tas: Option<TasMetrics>,
    pub lta: Vec<LtaCell>,
}

impl MetricsReport {
    pub fn lta_cell(&self, alpha: f64, beta: f64) -> Option<&LtaCell> {
        self.lta
            .iter()
            .find(|c| (c.alpha - alpha).abs() < 1e-9 && (c.beta - beta).abs() < 1e-9)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Rows of `split,alpha,beta,metric,value`; segmentation rows leave the
    /// ratios empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,alpha,beta,metric,value\n");
        if let Some(t) = &self.tas {
            let mut row = |name: &str, v: f64| {
                let _ = writeln!(out, "{},,,{name},{v:.4}", self.split);
            };
            row("accuracy", t.accuracy);
            row("edit", t.edit);
            for (k, v) in F1_THRESHOLDS.iter().zip(t.f1) {
                row(&format!("f1@{k}"), v);
            }
        }
        for c in &self.lta {
            let _ = writeln!(
                out,
                "{},{},{},moc,{:.4}",
                self.split, c.alpha, c.beta, c.moc
            );
        }
        out
    }
}
