//! Synthetic activity-grammar videos, on-disk formats and temporal
//! subsampling.

mod io;
mod oracle;

pub use io::{
    decode_features, encode_features, load_dataset, load_features, load_labels, save_dataset,
    save_features, save_labels, LabelMap, Manifest, ManifestVideo,
};
pub use oracle::{bayes_anticipation, OracleQuery};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One video: per-frame features and labels of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl VideoRecord {
    pub fn new(id: impl Into<String>, features: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::shape(format!(
                "features {:?} with {} labels",
                features.shape(),
                labels.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Videos plus named splits of their indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub videos: Vec<VideoRecord>,
    pub class_names: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn train_videos(&self) -> Vec<&VideoRecord> {
        self.train.iter().map(|&i| &self.videos[i]).collect()
    }

    pub fn test_videos(&self) -> Vec<&VideoRecord> {
        self.test.iter().map(|&i| &self.videos[i]).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.videos.first().map_or(0, |v| v.features.cols())
    }
}

/// Generative grammar over class orderings, durations and features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub num_classes: usize,
    pub templates: Vec<Vec<usize>>,
    /// Inclusive `(min, max)` duration of each class, in frames.
    pub durations: Vec<(usize, usize)>,
    /// One feature vector per class.
    pub prototypes: Vec<Vec<f64>>,
    pub noise_std: f64,
    /// Width of the moving average applied to the noise.
    pub smoothing: usize,
}

impl Default for GrammarSpec {
    fn default() -> Self {
        let (k, c) = (6, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_616d);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let prototypes = (0..k)
            .map(|_| (0..c).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        Self {
            num_classes: k,
            templates: vec![
                vec![0, 1, 2, 3, 4],
                vec![0, 2, 1, 4, 3, 5],
                vec![1, 3, 0, 2, 5, 4, 1],
                vec![2, 0, 3, 1, 5, 4],
            ],
            durations: vec![(20, 60); k],
            prototypes,
            noise_std: 0.5,
            smoothing: 5,
        }
    }
}

impl GrammarSpec {
    pub fn feature_dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k == 0 || self.templates.is_empty() {
            return Err(Error::invalid("grammar needs classes and templates"));
        }
        if self.durations.len() != k || self.prototypes.len() != k {
            return Err(Error::invalid("one duration range and prototype per class"));
        }
        let c = self.feature_dim();
        if c == 0 || self.prototypes.iter().any(|p| p.len() != c) {
            return Err(Error::invalid("prototypes must share a positive width"));
        }
        for t in &self.templates {
            if t.is_empty() || t.iter().any(|&x| x >= k) {
                return Err(Error::invalid(format!("bad template {t:?}")));
            }
            if t.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::invalid(format!("template {t:?} repeats a class")));
            }
        }
        if self.durations.iter().any(|&(lo, hi)| lo == 0 || lo > hi) {
            return Err(Error::invalid("durations must satisfy 1 <= min <= max"));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(Error::invalid("noise std must be non-negative"));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|i| format!("action_{i}"))
            .collect()
    }

    /// Draws a template index and a label sequence.
    pub fn sample_labels<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Vec<usize>) {
        let t = rng.random_range(0..self.templates.len());
        let mut labels = Vec::new();
        for &c in &self.templates[t] {
            let (lo, hi) = self.durations[c];
            let d = rng.random_range(lo..=hi);
            labels.extend(std::iter::repeat_n(c, d));
        }
        (t, labels)
    }

    /// Prototype plus moving-average smoothed Gaussian noise.
    pub fn render<R: Rng + ?Sized>(&self, labels: &[usize], rng: &mut R) -> Result<Tensor<f32>> {
        let c = self.feature_dim();
        let t = labels.len();
        let normal =
            Normal::new(0.0, self.noise_std.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
        let noise: Vec<f64> = (0..t * c).map(|_| normal.sample(rng)).collect();
        let half = self.smoothing / 2;
        let mut data = Vec::with_capacity(t * c);
        for (i, &label) in labels.iter().enumerate() {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(t - 1);
            let n = (hi - lo + 1) as f64;
            for ch in 0..c {
                let avg: f64 = (lo..=hi).map(|j| noise[j * c + ch]).sum::<f64>() / n;
                data.push((self.prototypes[label][ch] + avg) as f32);
            }
        }
        Tensor::new(vec![t, c], data)
    }
}

/// Generates `n_videos` videos named `vid_000`, `vid_001`, ...
pub fn generate_videos<R: Rng + ?Sized>(
    spec: &GrammarSpec,
    n_videos: usize,
    rng: &mut R,
) -> Result<Vec<VideoRecord>> {
    spec.validate()?;
    (0..n_videos)
        .map(|i| {
            let (_, labels) = spec.sample_labels(rng);
            let features = spec.render(&labels, rng)?;
            VideoRecord::new(format!("vid_{i:03}"), features, labels)
        })
        .collect()
}

/// Generates `n_train + n_test` videos and assigns them to splits in a
/// seeded random order.
pub fn generate_dataset<R: Rng + ?Sized>(
    spec: &GrammarSpec,
    n_train: usize,
    n_test: usize,
    rng: &mut R,
) -> Result<Dataset> {
    let videos = generate_videos(spec, n_train + n_test, rng)?;
    let mut order: Vec<usize> = (0..videos.len()).collect();
    order.shuffle(rng);
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(Dataset {
        videos,
        class_names: spec.class_names(),
        train,
        test,
    })
}

/// Keeps frames `0, rate, 2 rate, ...` of features and labels.
pub fn subsample(video: &VideoRecord, rate: usize) -> Result<VideoRecord> {
    if rate == 0 {
        return Err(Error::invalid("sample rate must be at least 1"));
    }
    let keep: Vec<usize> = (0..video.len()).step_by(rate).collect();
    let c = video.features.cols();
    let mut data = Vec::with_capacity(keep.len() * c);
    for &i in &keep {
        data.extend_from_slice(video.features.row(i));
    }
    let labels = keep.iter().map(|&i| video.labels[i]).collect();
    VideoRecord::new(
        video.id.clone(),
        Tensor::new(vec![keep.len(), c], data)?,
        labels,
    )
}

/// Repeats every label `rate` times and truncates to `len`, undoing
/// [`subsample`] on a label sequence.
pub fn upsample_labels(labels: &[usize], rate: usize, len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = labels
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, rate.max(1)))
        .take(len)
        .collect();
    if let Some(&last) = out.last() {
        out.resize(len, last);
    }
    out
}
