//! Reference implementations used as independent oracles by the
//! integration tests and the acceptance harness.

#![allow(dead_code)]

use actdiff::data::{generate_dataset, Dataset, GrammarSpec};
use actdiff::diffusion::{
    ddim_step, denoise_loop, forward_noise, inference_times, one_hot, scale_labels,
    standard_normal, Schedule,
};
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

use std::cell::RefCell;
use std::path::Path;

use actdiff::data::{decode_features, encode_features};
use actdiff::engine::{
    prepare_videos, run_experiment, Checkpoint, ModelAnticipator, TrainConfig, Trainer,
};
use actdiff::losses::soft_boundary;
use actdiff::masking::{
    apply_mask, choose_training_mask, mask_anticipative, mask_boundary, mask_class, mask_clips,
    mask_random, mask_relation, ratio_frames, MaskContext, MaskType, RandomMaskSpec, TRAIN_ALPHAS,
};
use actdiff::metrics::{eval_lta_grid, EvalProtocol, Horizon, LtaVideo, Observation};
use actdiff::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(class, start, end)` runs of `labels`.
pub fn runs(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=labels.len() {
        if i == labels.len() || labels[i] != labels[start] {
            out.push((labels[start], start, i));
            start = i;
        }
    }
    out
}

/// Levenshtein distance by plain recursion on the last symbols.
pub fn levenshtein_recursive(a: &[usize], b: &[usize]) -> usize {
    match (a.split_last(), b.split_last()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            if x == y {
                levenshtein_recursive(ra, rb)
            } else {
                1 + levenshtein_recursive(ra, b)
                    .min(levenshtein_recursive(a, rb))
                    .min(levenshtein_recursive(ra, rb))
            }
        }
    }
}

/// Segmental edit score from the recursive distance.
pub fn edit_oracle(pred: &[usize], gt: &[usize]) -> f64 {
    let p: Vec<usize> = runs(pred).iter().map(|r| r.0).collect();
    let g: Vec<usize> = runs(gt).iter().map(|r| r.0).collect();
    let n = p.len().max(g.len());
    if n == 0 {
        return 100.0;
    }
    100.0 * (1.0 - levenshtein_recursive(&p, &g) as f64 / n as f64)
}

fn iou(a: (usize, usize, usize), b: (usize, usize, usize)) -> f64 {
    let inter = a.2.min(b.2).saturating_sub(a.1.max(b.1));
    let union = a.2.max(b.2) - a.1.min(b.1);
    inter as f64 / union as f64
}

/// F1 at threshold `k` percent from the matching that maximizes true
/// positives, found by exhaustive search over injective assignments.
pub fn f1_optimal(pred: &[usize], gt: &[usize], k: f64) -> f64 {
    let p = runs(pred);
    let g = runs(gt);
    let thr = k / 100.0;
    fn best(
        i: usize,
        p: &[(usize, usize, usize)],
        g: &[(usize, usize, usize)],
        used: &mut Vec<bool>,
        thr: f64,
    ) -> usize {
        if i == p.len() {
            return 0;
        }
        let mut top = best(i + 1, p, g, used, thr);
        for j in 0..g.len() {
            if !used[j] && p[i].0 == g[j].0 && iou(p[i], g[j]) >= thr {
                used[j] = true;
                top = top.max(1 + best(i + 1, p, g, used, thr));
                used[j] = false;
            }
        }
        top
    }
    let tp = best(0, &p, &g, &mut vec![false; g.len()], thr);
    let (fp, fn_) = (p.len() - tp, g.len() - tp);
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        100.0
    } else {
        100.0 * 2.0 * tp as f64 / denom as f64
    }
}

/// Mean over present classes of per-class accuracy, written out directly.
pub fn moc_oracle(pred: &[usize], gt: &[usize]) -> f64 {
    let mut classes: Vec<usize> = gt.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut sum = 0.0;
    for &c in &classes {
        let idx: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] == c).collect();
        let hit = idx.iter().filter(|&&i| pred[i] == c).count();
        sum += hit as f64 / idx.len() as f64;
    }
    100.0 * sum / classes.len() as f64
}

/// All class sequences without adjacent repeats of length `0..=max_len`
/// over `classes` symbols.
pub fn segment_sequences(max_len: usize, classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..classes {
                if s.last() != Some(&c) {
                    let mut t: Vec<usize> = s.clone();
                    t.push(c);
                    next.push(t);
                }
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Expands segment classes into frames with random run lengths `1..=max_run`.
pub fn expand<R: Rng>(classes: &[usize], max_run: usize, rng: &mut R) -> Vec<usize> {
    classes
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, rng.random_range(1..=max_run)))
        .collect()
}

/// Random frame labels with few segments over `k` classes.
pub fn random_labels<R: Rng>(
    rng: &mut R,
    max_segments: usize,
    k: usize,
    max_run: usize,
) -> Vec<usize> {
    let n = rng.random_range(1..=max_segments);
    let mut classes = Vec::with_capacity(n);
    for _ in 0..n {
        let mut c = rng.random_range(0..k);
        while classes.last() == Some(&c) {
            c = rng.random_range(0..k);
        }
        classes.push(c);
    }
    expand(&classes, max_run, rng)
}

/// Chi-square statistic of observed counts against a uniform expectation.
pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

/// Upper 1% point of the chi-square distribution with 4 degrees of freedom.
pub const CHI2_4DOF_P01: f64 = 13.2767;

/// `alpha_bar(s)` as the direct product of `1 - beta`.
pub fn alpha_bar_product(sched: &Schedule, s: usize) -> f64 {
    (1..=s).map(|i| 1.0 - sched.beta(i)).product()
}

/// The default 60/20 synthetic benchmark.
pub fn benchmark(seed: u64) -> Dataset {
    generate_dataset(
        &GrammarSpec::default(),
        60,
        20,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .expect("default grammar")
}

/// Small dataset and a short configuration for fast end-to-end tests.
pub fn tiny(seed: u64) -> (Dataset, TrainConfig) {
    let spec = GrammarSpec::default();
    let ds = generate_dataset(&spec, 4, 2, &mut ChaCha8Rng::seed_from_u64(seed)).expect("grammar");
    let mut cfg = TrainConfig::desk(spec.feature_dim(), spec.num_classes);
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.sample_rate = 8;
    cfg.inference_steps = 3;
    (ds, cfg)
}

/// Sample mean and variance of `n` draws at each of five steps, within
/// three standard errors of the closed form.
pub fn forward_moments_hold(n: usize, seed: u64) -> bool {
    let sched = Schedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = true;
    for (s, a0) in [(1, 1.0), (10, -1.0), (250, 1.0), (600, -1.0), (1000, 1.0)] {
        let x0 = Tensor::full(&[n, 1], a0);
        let eps = standard_normal::<f64, _>(&mut rng, &[n, 1]);
        let x = forward_noise(&x0, s, &eps, &sched).unwrap();
        let ab = sched.alpha_bar(s);
        let mean = x.data().iter().sum::<f64>() / n as f64;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = ((1.0 - ab) / n as f64).sqrt();
        let se_var = (1.0 - ab) * (2.0 / (n - 1) as f64).sqrt();
        ok &= (mean - ab.sqrt() * a0).abs() <= 3.0 * se_mean;
        ok &= (var - (1.0 - ab)).abs() <= 3.0 * se_var;
    }
    ok
}

/// Training mask type frequencies over `draws` draws and their chi-square
/// statistic against uniform.
pub fn mask_type_frequencies(draws: usize, seed: u64) -> ([usize; 5], f64) {
    let labels = [
        0usize, 0, 1, 1, 1, 2, 2, 0, 0, 3, 3, 3, 3, 1, 1, 1, 1, 1, 2, 2,
    ];
    let soft = soft_boundary(&labels, 2.0);
    let ctx = MaskContext {
        labels: &labels,
        soft_boundary: &soft,
        random: RandomMaskSpec {
            clip_size: 3,
            num_clips: 2,
        },
        alphas: &TRAIN_ALPHAS,
        enabled: &MaskType::ALL,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = [0usize; 5];
    for _ in 0..draws {
        let (kind, _) = choose_training_mask(&mut rng, &ctx).unwrap();
        counts[MaskType::ALL.iter().position(|&m| m == kind).unwrap()] += 1;
    }
    (counts, chi_square_uniform(&counts))
}

/// Scaled one-hot signal with a deterministic label pattern.
pub fn clean_signal(seed: u64, frames: usize, classes: usize) -> Tensor<f64> {
    let labels: Vec<usize> = (0..frames)
        .map(|i| (i * 7 + seed as usize) % classes)
        .collect();
    scale_labels(&one_hot::<f64>(&labels, classes).unwrap(), 1.0, true).unwrap()
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Denoising with a predictor that always returns the clean signal, for
/// each step count: `(steps, max error, output)`.
pub fn perfect_oracle_runs(step_counts: &[usize]) -> Vec<(usize, f64, Tensor<f64>)> {
    let sched = Schedule::linear(1000, 1e-4, 0.02).unwrap();
    let a0 = clean_signal(3, 12, 4);
    step_counts
        .iter()
        .map(|&steps| {
            let out = denoise_loop(
                |_x: &Tensor<f64>, _t| Ok(a0.clone()),
                12,
                4,
                steps,
                &sched,
                1.0,
                &mut ChaCha8Rng::seed_from_u64(steps as u64),
            )
            .unwrap();
            (steps, max_abs_diff(&out, &a0), out)
        })
        .collect()
}

/// Largest deviation along a DDIM chain, driven by the true signal, from
/// the forward-noised signal at every visited time.
pub fn ddim_chain_error(seed: u64, steps: usize, total: usize) -> f64 {
    let sched = Schedule::linear(total, 1e-4, 0.02).unwrap();
    let a0 = clean_signal(seed, 6, 3);
    let eps = standard_normal::<f64, _>(&mut ChaCha8Rng::seed_from_u64(seed), &[6, 3]);
    let grid = inference_times(total, steps).unwrap();
    let mut x = forward_noise(&a0, grid.pairs[0].0, &eps, &sched).unwrap();
    let mut worst: f64 = 0.0;
    for &(t_now, t_next) in &grid.pairs {
        x = ddim_step(&x, &a0, t_now, t_next, &sched).unwrap();
        let expect = if t_next < 0 {
            a0.clone()
        } else {
            forward_noise(&a0, t_next as usize, &eps, &sched).unwrap()
        };
        worst = worst.max(max_abs_diff(&x, &expect));
    }
    worst
}

/// Checks every mask constructor and the masking formula on one random
/// label sequence.
pub fn check_masks(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = random_labels(&mut rng, 7, 5, 12);
    let t = labels.len();
    let soft = soft_boundary(&labels, 2.0);

    let observed = rng.random_range(0..=t);
    let ant = mask_anticipative(t, observed).map_err(|e| e.to_string())?;
    ensure!(ant.len() == t, "anticipative length {}", ant.len());
    ensure!(
        ant.visible_count() == observed,
        "anticipative keeps {} of {observed}",
        ant.visible_count()
    );
    ensure!(
        ant.windows(2).all(|w| w[0] >= w[1]),
        "anticipative mask is not a prefix"
    );

    let q = rng.random_range(1..6);
    let spec = RandomMaskSpec {
        clip_size: q,
        num_clips: rng.random_range(0..=t.div_ceil(q)),
    };
    let rnd = mask_random(t, &spec, &mut rng).map_err(|e| e.to_string())?;
    ensure!(rnd.len() == t, "random length {}", rnd.len());
    let masked_clips: Vec<usize> = (0..t.div_ceil(q)).filter(|&c| !rnd[c * q]).collect();
    ensure!(
        masked_clips.len() == spec.num_clips,
        "{} clips masked, {} asked",
        masked_clips.len(),
        spec.num_clips
    );
    for &c in &masked_clips {
        ensure!(
            rnd[c * q..((c + 1) * q).min(t)].iter().all(|&b| !b),
            "clip {c} partly masked"
        );
    }
    ensure!(
        *rnd == *mask_clips(t, q, &masked_clips).unwrap(),
        "random mask is not made of whole clips"
    );
    let too_many = RandomMaskSpec {
        clip_size: q,
        num_clips: t.div_ceil(q) + 1,
    };
    ensure!(
        mask_random(t, &too_many, &mut rng).is_err(),
        "too many clips accepted"
    );

    let rel = mask_relation(
        &labels,
        &RandomMaskSpec {
            clip_size: 2,
            num_clips: 1,
        },
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    ensure!(rel.len() == t, "relation length {}", rel.len());
    let mut present = labels.clone();
    present.sort_unstable();
    present.dedup();
    if present.len() > 1 {
        let hidden: Vec<usize> = (0..t).filter(|&i| !rel[i]).map(|i| labels[i]).collect();
        ensure!(!hidden.is_empty(), "relation mask hides nothing");
        let c = hidden[0];
        ensure!(
            (0..t).all(|i| rel[i] == (labels[i] != c)),
            "relation mask is not exactly class {c}"
        );
        ensure!(
            *rel == *mask_class(&labels, c),
            "relation mask differs from class mask"
        );
    }

    let bnd = mask_boundary(&soft);
    ensure!(bnd.len() == t, "boundary length {}", bnd.len());
    for i in 1..t {
        if labels[i] != labels[i - 1] {
            ensure!(!bnd[i] && !bnd[i - 1], "change at {i} not masked");
        }
    }

    let c = 3;
    let f = Tensor::<f64>::from_f64(
        &[t, c],
        &(0..t * c).map(|v| v as f64 + 0.5).collect::<Vec<_>>(),
    )
    .unwrap();
    let token = [-1.0, -2.0, -3.0];
    let out = apply_mask(&f, &rnd, &token).map_err(|e| e.to_string())?;
    for i in 0..t {
        let m = if rnd[i] { 1.0 } else { 0.0 };
        let expect: Vec<f64> = (0..c)
            .map(|j| f.at(i, j) * m + (1.0 - m) * token[j])
            .collect();
        ensure!(
            out.row(i) == expect.as_slice(),
            "masked row {i} is {:?}",
            out.row(i)
        );
    }
    Ok(())
}

/// AFT1 byte layout written out field by field.
pub fn aft_reference(t: usize, c: usize, values: &[f32]) -> Vec<u8> {
    let mut out = b"AFT1".to_vec();
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    out
}

/// Encodes and decodes a random finite matrix; true when the bytes match
/// the reference layout and every value comes back with the same bits.
pub fn aft_case_bit_exact(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, c) = (rng.random_range(0..12), rng.random_range(1..6));
    let values: Vec<f32> = (0..t * c)
        .map(|_| loop {
            let v = f32::from_bits(rng.random());
            if v.is_finite() {
                break v;
            }
        })
        .collect();
    let tensor = Tensor::new(vec![t, c], values.clone()).unwrap();
    let bytes = encode_features(&tensor).unwrap();
    let Ok(back) = decode_features(&bytes, Path::new("x")) else {
        return false;
    };
    let bits = |d: &[f32]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    bytes == aft_reference(t, c, &values)
        && back.shape() == [t, c]
        && bits(back.data()) == bits(&values)
}

pub fn small_protocol() -> EvalProtocol {
    EvalProtocol {
        alphas: vec![0.3],
        betas: vec![0.2, 0.5],
        ..EvalProtocol::default()
    }
}

/// JSON of two independent runs with the same seed.
pub fn report_pair(seed: u64) -> (String, String) {
    let (ds, cfg) = tiny(seed);
    let run = || {
        run_experiment::<f64>(&cfg, &ds, &small_protocol())
            .unwrap()
            .0
            .to_json()
            .unwrap()
    };
    (run(), run())
}

/// Trains 2 epochs, saves, reloads and trains 2 more; true when history and
/// parameters equal an uninterrupted 4-epoch run.
pub fn resume_matches(seed: u64, dir: &Path) -> bool {
    let (ds, mut cfg) = tiny(seed);
    cfg.epochs = 4;
    let prepared = prepare_videos::<f64>(&ds.train_videos(), &cfg).unwrap();
    let mut full = Trainer::new(cfg.clone()).unwrap();
    full.fit(&prepared).unwrap();

    let mut first = cfg.clone();
    first.epochs = 2;
    let mut half = Trainer::<f64>::new(first).unwrap();
    half.fit(&prepared).unwrap();
    let path = dir.join(format!("half-{seed}.afck"));
    half.checkpoint().save(&path).unwrap();
    let mut ckpt = Checkpoint::<f64>::load(&path).unwrap();
    ckpt.config.epochs = 4;
    let mut resumed = Trainer::from_checkpoint(ckpt).unwrap();
    resumed.fit(&prepared).unwrap();
    resumed.history() == full.history() && resumed.params() == full.params()
}

/// Saves a trained checkpoint, loads it and saves it again; true when the
/// loaded value and both files are identical.
pub fn checkpoint_bytes_stable(seed: u64, dir: &Path) -> bool {
    let (ds, cfg) = tiny(seed);
    let prepared = prepare_videos::<f64>(&ds.train_videos(), &cfg).unwrap();
    let mut t = Trainer::new(cfg).unwrap();
    t.fit(&prepared).unwrap();
    let (a, b) = (
        dir.join(format!("a-{seed}.afck")),
        dir.join(format!("b-{seed}.afck")),
    );
    t.checkpoint().save(&a).unwrap();
    let loaded = Checkpoint::<f64>::load(&a).unwrap();
    loaded.save(&b).unwrap();
    loaded == t.checkpoint() && std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap()
}

#[derive(Debug, Clone, PartialEq)]
struct Call {
    video: String,
    observed: usize,
    feature_rows: usize,
    horizon: Horizon,
}

/// Predicts from the prefix only, in a way that makes cropping and padding
/// visible: the pattern depends on the position in the future.
fn spy_predict(obs: &Observation, n: usize) -> Vec<usize> {
    let last = *obs.labels.last().unwrap();
    (0..n)
        .map(|i| {
            if (i / 7) % 2 == 0 {
                last
            } else {
                (last + 1) % 6
            }
        })
        .collect()
}

/// Grid computed without the library: per-video MoC over the
/// ground-truth window, with the prediction cropped or padded to it.
fn expected_grid(videos: &[LtaVideo<'_>], p: &EvalProtocol) -> Vec<f64> {
    let mut cells = Vec::new();
    for &alpha in &p.alphas {
        for &beta in &p.betas {
            let mut scores = Vec::new();
            for v in videos {
                let t = v.labels.len();
                let n_o = ratio_frames(alpha, t);
                let len = ratio_frames(beta, t);
                if n_o == 0 || n_o + len > t {
                    continue;
                }
                let obs = Observation {
                    video_id: v.id.to_string(),
                    features: v.features.slice_rows(0, n_o),
                    labels: v.labels[..n_o].to_vec(),
                };
                let n = if p.use_gt_length {
                    len
                } else {
                    ratio_frames(p.r, n_o)
                };
                let mut pred = spy_predict(&obs, n);
                let pad = *pred.last().unwrap();
                pred.resize(len, pad);
                scores.push(moc_oracle(&pred, &v.labels[n_o..n_o + len]));
            }
            cells.push(scores.iter().sum::<f64>() / scores.len() as f64);
        }
    }
    cells
}

/// Runs the LTA grid with an instrumented predictor under both protocols.
///
/// Checks that the predictor only ever sees the observed prefix, that the
/// rectified mode passes `Ratio(r)` and the other mode the window length,
/// that both modes visit the same videos and prefixes, and that every cell
/// equals an independent computation over the ground-truth window.
pub fn protocol_audit(seed: u64) -> Result<(), String> {
    let (ds, _) = tiny(seed);
    let videos: Vec<LtaVideo<'_>> = ds
        .videos
        .iter()
        .map(|v| LtaVideo {
            id: &v.id,
            features: &v.features,
            labels: &v.labels,
        })
        .collect();
    let mut results = Vec::new();
    for use_gt_length in [true, false] {
        let protocol = EvalProtocol {
            use_gt_length,
            r: 4.0,
            ..EvalProtocol::default()
        };
        let calls = RefCell::new(Vec::new());
        let mut spy = |obs: &Observation, h: Horizon| -> actdiff::Result<Vec<usize>> {
            calls.borrow_mut().push(Call {
                video: obs.video_id.clone(),
                observed: obs.len(),
                feature_rows: obs.features.rows(),
                horizon: h,
            });
            Ok(spy_predict(obs, h.frames(obs.len())))
        };
        let cells = eval_lta_grid(&videos, &mut spy, &protocol).map_err(|e| e.to_string())?;
        let expect = expected_grid(&videos, &protocol);
        ensure!(
            cells.len() == expect.len(),
            "{} cells, expected {}",
            cells.len(),
            expect.len()
        );
        for (c, e) in cells.iter().zip(&expect) {
            ensure!(
                c.moc.is_finite() && (c.moc - e).abs() < 1e-9,
                "cell {c:?}, expected {e}"
            );
        }
        let calls = calls.into_inner();
        ensure!(!calls.is_empty(), "predictor never called");
        for call in &calls {
            ensure!(
                call.feature_rows == call.observed,
                "{call:?} saw frames past the prefix"
            );
            match call.horizon {
                Horizon::Ratio(r) => ensure!(!use_gt_length && r == 4.0, "{call:?}"),
                Horizon::Frames(_) => ensure!(use_gt_length, "{call:?} got a frame count"),
            }
        }
        results.push((cells, calls));
    }
    let (gt, rect) = (&results[0], &results[1]);
    let key = |c: &Call| (c.video.clone(), c.observed);
    ensure!(
        gt.1.iter().map(key).eq(rect.1.iter().map(key)),
        "the two modes observed different prefixes"
    );
    for (a, b) in gt.0.iter().zip(&rect.0) {
        ensure!(
            (a.alpha, a.beta, a.videos, a.skipped) == (b.alpha, b.beta, b.videos, b.skipped),
            "windows differ: {a:?} vs {b:?}"
        );
    }
    Ok(())
}

/// Rectified-protocol grid of an untrained model with clean features and
/// with every future frame set to NaN; true when both grids are equal.
pub fn future_frames_unread(seed: u64) -> bool {
    let (ds, cfg) = tiny(seed);
    let model = Trainer::<f64>::new(cfg.clone()).unwrap().model().unwrap();
    let protocol = EvalProtocol {
        use_gt_length: false,
        ..small_protocol()
    };
    let poisoned: Vec<Tensor<f32>> = ds
        .videos
        .iter()
        .map(|v| {
            let mut f = v.features.clone();
            for i in ratio_frames(0.3, v.len())..v.len() {
                f.row_mut(i).iter_mut().for_each(|x| *x = f32::NAN);
            }
            f
        })
        .collect();
    let grid = |features: &[&Tensor<f32>]| {
        let videos: Vec<LtaVideo<'_>> = ds
            .videos
            .iter()
            .zip(features)
            .map(|(v, f)| LtaVideo {
                id: &v.id,
                features: f,
                labels: &v.labels,
            })
            .collect();
        let mut a = ModelAnticipator {
            model: &model,
            config: &cfg,
            sched: cfg.schedule().unwrap(),
            seed: 3,
        };
        eval_lta_grid(&videos, &mut a, &protocol).unwrap()
    };
    let clean = grid(&ds.videos.iter().map(|v| &v.features).collect::<Vec<_>>());
    let dirty = grid(&poisoned.iter().collect::<Vec<_>>());
    clean == dirty && clean.iter().all(|c| c.moc.is_finite() && c.videos > 0)
}
