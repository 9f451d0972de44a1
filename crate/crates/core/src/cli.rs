//! Command-line interface. [`dispatch`] parses arguments, runs one
//! subcommand and returns the process exit code.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    generate_dataset, load_dataset, load_features, save_dataset, Dataset, GrammarSpec, LabelMap,
    VideoRecord,
};
use crate::engine::{
    barcode_svg, infer_lta, infer_tas, model_gradcheck, prepare_videos, run_ablation,
    run_experiment, run_report, video_seed, AblationArm, BarcodeRow, Checkpoint, TrainConfig,
    Trainer, GRADCHECK_TOLERANCE,
};
use crate::masking::ratio_frames;
use crate::metrics::{EvalProtocol, MetricsReport};
use crate::model::{DecoderValues, Model};
use crate::numerics::Real;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "actdiff",
    version,
    about = "Diffusion model for action segmentation and anticipation"
)]
pub struct Cli {
    /// Training configuration (JSON). Defaults to the desk profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic grammar dataset to the output directory.
    GenData(GenDataArgs),
    /// Trains a model and evaluates it on the test split.
    Train(TrainArgs),
    /// Segmentation metrics of a checkpoint.
    EvalTas(EvalArgs),
    /// Anticipation grid of a checkpoint.
    EvalLta(EvalLtaArgs),
    /// Labels for a single feature file.
    Infer(InferArgs),
    /// Finite-difference check of the model gradients.
    Gradcheck(GradcheckArgs),
    /// Trains every ablation arm with every seed.
    Ablate(AblateArgs),
    /// One barcode SVG per video.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 60)]
    pub train: usize,
    #[arg(long, default_value_t = 20)]
    pub test: usize,
    /// Grammar specification (JSON). Defaults to the built-in grammar.
    #[arg(long)]
    pub grammar: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset manifest. Falls back to the `dataset` entry of the config.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continues from a checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::All => "all",
        }
    }

    fn videos(self, ds: &Dataset) -> Vec<&VideoRecord> {
        match self {
            Split::Train => ds.train_videos(),
            Split::Test => ds.test_videos(),
            Split::All => ds.videos.iter().collect(),
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalLtaArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Predict `r` times the observed length instead of using the true
    /// video length.
    #[arg(long)]
    pub no_gt_length: bool,
    #[arg(long = "r", default_value_t = 4.0)]
    pub r: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.3])]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3, 0.5])]
    pub betas: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Feature file (AFT1).
    #[arg(long)]
    pub features: PathBuf,
    /// Anticipate: observe only this fraction of the video.
    #[arg(long)]
    pub observe: Option<f64>,
    /// Frames to anticipate after the observed prefix.
    #[arg(long, requires = "observe")]
    pub horizon: Option<usize>,
    /// Class mapping used to print label names.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    /// Arm names; all standard arms by default.
    #[arg(long, value_delimiter = ',')]
    pub arms: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0.3)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code: 0 on success, 1 on a runtime error, 2 on a usage error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = if cli.verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<i32> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => precision!(cli, train(cli, a)),
        Command::EvalTas(a) => precision!(cli, eval_tas(cli, a)),
        Command::EvalLta(a) => precision!(cli, eval_lta(cli, a)),
        Command::Infer(a) => precision!(cli, infer(cli, a)),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => precision!(cli, ablate(cli, a)),
        Command::Plot(a) => precision!(cli, plot(cli, a)),
    }
}

macro_rules! precision {
    ($cli:expr, $name:ident($($arg:expr),*)) => {
        match $cli.precision {
            Precision::F32 => $name::<f32>($($arg),*),
            Precision::F64 => $name::<f64>($($arg),*),
        }
    };
}
use precision;

fn out_dir(cli: &Cli) -> anyhow::Result<&Path> {
    fs::create_dir_all(&cli.out_dir)
        .with_context(|| format!("creating {}", cli.out_dir.display()))?;
    Ok(&cli.out_dir)
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_metrics(dir: &Path, stem: &str, report: &MetricsReport) -> anyhow::Result<()> {
    write(&dir.join(format!("{stem}.json")), &report.to_json()?)?;
    write(&dir.join(format!("{stem}.csv")), &report.to_csv())
}

fn load_config(cli: &Cli) -> anyhow::Result<Option<TrainConfig>> {
    cli.config
        .as_deref()
        .map(|p| TrainConfig::load(p).with_context(|| format!("loading config {}", p.display())))
        .transpose()
}

fn dataset_path(data: &DataArgs, config: Option<&TrainConfig>) -> anyhow::Result<PathBuf> {
    data.dataset
        .clone()
        .or_else(|| config.and_then(|c| c.dataset.clone()))
        .context("no dataset: pass --dataset or set `dataset` in the config")
}

fn load_data(path: &Path) -> anyhow::Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn check_dims(config: &TrainConfig, ds: &Dataset) -> anyhow::Result<()> {
    let m = &config.model;
    if m.feature_dim != ds.feature_dim() || m.num_classes != ds.num_classes() {
        bail!(
            "model expects {} features and {} classes, dataset has {} and {}",
            m.feature_dim,
            m.num_classes,
            ds.feature_dim(),
            ds.num_classes()
        );
    }
    Ok(())
}

fn load_model<F: Real>(path: &Path) -> anyhow::Result<(Model<F>, TrainConfig)> {
    let ckpt = Checkpoint::<F>::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let config = ckpt.config.clone();
    let model = Trainer::from_checkpoint(ckpt)?.model()?;
    Ok((model, config))
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> anyhow::Result<i32> {
    let spec = match &a.grammar {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .with_context(|| format!("parsing grammar {}", p.display()))?,
        None => GrammarSpec::default(),
    };
    let seed = cli.seed.unwrap_or(0);
    let ds = generate_dataset(&spec, a.train, a.test, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let manifest = save_dataset(out_dir(cli)?, &ds)?;
    println!("{}", manifest.display());
    Ok(EXIT_OK)
}

fn train<F: Real>(cli: &Cli, a: &TrainArgs) -> anyhow::Result<i32> {
    let resumed = a
        .resume
        .as_deref()
        .map(|p| {
            Checkpoint::<F>::load(p).with_context(|| format!("loading checkpoint {}", p.display()))
        })
        .transpose()?;
    let loaded = match &resumed {
        Some(ckpt) => Some(ckpt.config.clone()),
        None => load_config(cli)?,
    };
    let data_path = dataset_path(&a.data, loaded.as_ref())?;
    let ds = load_data(&data_path)?;
    let mut config =
        loaded.unwrap_or_else(|| TrainConfig::desk(ds.feature_dim(), ds.num_classes()));
    config.dataset = Some(fs::canonicalize(&data_path).unwrap_or(data_path));
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    config.validate()?;
    check_dims(&config, &ds)?;
    let dir = out_dir(cli)?;
    let protocol = EvalProtocol::default();
    let start = Instant::now();
    let (report, trainer) = match resumed {
        None => run_experiment::<F>(&config, &ds, &protocol)?,
        Some(mut ckpt) => {
            ckpt.config = config.clone();
            let mut trainer = Trainer::from_checkpoint(ckpt)?;
            trainer.fit(&prepare_videos::<F>(&ds.train_videos(), &config)?)?;
            (run_report(&trainer, &ds, &protocol)?, trainer)
        }
    };
    let secs = start.elapsed().as_secs_f64();
    trainer.checkpoint().save(&dir.join("checkpoint.afck"))?;
    config.save(&dir.join("config.json"))?;
    write(&dir.join("report.json"), &report.to_json()?)?;
    write_metrics(dir, "metrics", &report.test)?;
    write(
        &dir.join("timing.json"),
        &serde_json::to_string_pretty(&serde_json::json!({ "wall_clock_secs": secs }))?,
    )?;
    if let Some(t) = &report.test.tas {
        println!(
            "test accuracy {:.2} edit {:.2} ({secs:.1} s)",
            t.accuracy, t.edit
        );
    }
    Ok(EXIT_OK)
}

fn model_and_videos<F: Real>(
    cli: &Cli,
    a: &ModelArgs,
) -> anyhow::Result<(Model<F>, TrainConfig, Dataset)> {
    let (model, mut config) = load_model::<F>(&a.checkpoint)?;
    let ds = load_data(&dataset_path(&a.data, Some(&config))?)?;
    check_dims(&config, &ds)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok((model, config, ds))
}

fn eval_tas<F: Real>(cli: &Cli, a: &EvalArgs) -> anyhow::Result<i32> {
    let (model, config, ds) = model_and_videos::<F>(cli, &a.model)?;
    let videos = a.model.split.videos(&ds);
    let sched = config.schedule()?;
    let mut pairs = Vec::with_capacity(videos.len());
    for v in &videos {
        let mut rng = ChaCha8Rng::seed_from_u64(video_seed(config.seed, &v.id, v.len()));
        pairs.push((
            infer_tas(&model, &v.features, &sched, &config, &mut rng)?,
            v.labels.as_slice(),
        ));
    }
    let refs: Vec<(&[usize], &[usize])> = pairs.iter().map(|(p, g)| (p.as_slice(), *g)).collect();
    let report = MetricsReport {
        split: a.model.split.name().to_string(),
        tas: Some(crate::metrics::evaluate_tas(&refs, &[])?),
        lta: Vec::new(),
    };
    write_metrics(out_dir(cli)?, "metrics_tas", &report)?;
    print!("{}", report.to_csv());
    Ok(EXIT_OK)
}

fn eval_lta<F: Real>(cli: &Cli, a: &EvalLtaArgs) -> anyhow::Result<i32> {
    let (model, config, ds) = model_and_videos::<F>(cli, &a.model)?;
    let protocol = EvalProtocol {
        alphas: a.alphas.clone(),
        betas: a.betas.clone(),
        r: a.r,
        use_gt_length: !a.no_gt_length,
        background: Vec::new(),
    };
    protocol.validate()?;
    let videos = a.model.split.videos(&ds);
    let lta: Vec<crate::metrics::LtaVideo<'_>> = videos
        .iter()
        .map(|v| crate::metrics::LtaVideo {
            id: &v.id,
            features: &v.features,
            labels: &v.labels,
        })
        .collect();
    let mut anticipator = crate::engine::ModelAnticipator {
        model: &model,
        config: &config,
        sched: config.schedule()?,
        seed: config.seed,
    };
    let report = MetricsReport {
        split: a.model.split.name().to_string(),
        tas: None,
        lta: crate::metrics::eval_lta_grid(&lta, &mut anticipator, &protocol)?,
    };
    write_metrics(out_dir(cli)?, "metrics_lta", &report)?;
    print!("{}", report.to_csv());
    Ok(EXIT_OK)
}

fn infer<F: Real>(cli: &Cli, a: &InferArgs) -> anyhow::Result<i32> {
    let (model, config) = load_model::<F>(&a.checkpoint)?;
    let features = load_features(&a.features)?;
    if features.cols() != config.model.feature_dim {
        bail!(
            "model expects {} features per frame, file has {}",
            config.model.feature_dim,
            features.cols()
        );
    }
    let sched = config.schedule()?;
    let seed = cli.seed.unwrap_or(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = match a.observe {
        None => infer_tas(&model, &features, &sched, &config, &mut rng)?,
        Some(alpha) => {
            if !(alpha > 0.0 && alpha <= 1.0) {
                bail!("--observe must lie in (0, 1]");
            }
            let n_o = ratio_frames(alpha, features.rows()).max(1);
            let horizon = a
                .horizon
                .unwrap_or(features.rows().saturating_sub(n_o))
                .max(1);
            infer_lta(
                &model,
                &features.slice_rows(0, n_o),
                horizon,
                &sched,
                &config,
                &mut rng,
            )?
        }
    };
    let text = match &a.mapping {
        Some(p) => LabelMap::load(p)?.labels_to_text(&labels)?,
        None => labels.iter().map(|l| format!("{l}\n")).collect(),
    };
    let stem = a
        .features
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("video");
    let path = out_dir(cli)?.join(format!("{stem}.txt"));
    write(&path, &text)?;
    println!("{}", path.display());
    Ok(EXIT_OK)
}

fn gradcheck(a: &GradcheckArgs) -> anyhow::Result<i32> {
    let mut worst: f64 = 0.0;
    for seed in 0..a.seeds {
        for values in [DecoderValues::Stream, DecoderValues::StreamAndCondition] {
            let r = model_gradcheck(values, seed)?;
            println!(
                "seed {seed} {values:?}: {} coords, max rel error {:.3e}",
                r.coords_checked, r.max_rel_error
            );
            worst = worst.max(r.max_rel_error);
        }
    }
    let ok = worst <= GRADCHECK_TOLERANCE;
    println!(
        "max rel error {worst:.3e} ({})",
        if ok { "pass" } else { "FAIL" }
    );
    Ok(if ok { EXIT_OK } else { EXIT_RUNTIME })
}

fn ablate<F: Real>(cli: &Cli, a: &AblateArgs) -> anyhow::Result<i32> {
    let loaded = load_config(cli)?;
    let ds = load_data(&dataset_path(&a.data, loaded.as_ref())?)?;
    let mut base = loaded.unwrap_or_else(|| TrainConfig::desk(ds.feature_dim(), ds.num_classes()));
    if let Some(seed) = cli.seed {
        base.seed = seed;
    }
    check_dims(&base, &ds)?;
    let standard = AblationArm::standard();
    let arms: Vec<AblationArm> = if a.arms.is_empty() {
        standard
    } else {
        let mut arms = vec![AblationArm::baseline()];
        for name in &a.arms {
            let arm = standard
                .iter()
                .find(|s| &s.name == name)
                .with_context(|| format!("unknown ablation arm `{name}`"))?;
            if arm.name != "baseline" {
                arms.push(arm.clone());
            }
        }
        arms
    };
    let report = run_ablation::<F>(&base, &ds, &EvalProtocol::default(), &arms, &a.seeds)?;
    let dir = out_dir(cli)?;
    write(
        &dir.join("ablation.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    let mut csv = String::from("arm,alpha,beta,metric,mean,delta\n");
    for s in &report.summary {
        csv.push_str(&format!(
            "{},,,accuracy,{:.4},{:.4}\n",
            s.name, s.mean_accuracy, s.delta_accuracy
        ));
        csv.push_str(&format!(
            "{},,,edit,{:.4},{:.4}\n",
            s.name, s.mean_edit, s.delta_edit
        ));
        for (&(al, be, m), &(_, _, d)) in s.mean_moc.iter().zip(&s.delta_moc) {
            csv.push_str(&format!("{},{al},{be},moc,{m:.4},{d:.4}\n", s.name));
        }
    }
    write(&dir.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(EXIT_OK)
}

fn plot<F: Real>(cli: &Cli, a: &PlotArgs) -> anyhow::Result<i32> {
    if !(a.alpha > 0.0 && a.alpha < 1.0 && a.beta > 0.0) {
        bail!("plot needs 0 < alpha < 1 and beta > 0");
    }
    let (model, config, ds) = model_and_videos::<F>(cli, &a.model)?;
    let sched = config.schedule()?;
    let dir = out_dir(cli)?.join("plots");
    fs::create_dir_all(&dir)?;
    for v in a.model.split.videos(&ds) {
        let t = v.len();
        let mut rng = ChaCha8Rng::seed_from_u64(video_seed(config.seed, &v.id, t));
        let tas = infer_tas(&model, &v.features, &sched, &config, &mut rng)?;
        let n_o = ratio_frames(a.alpha, t).clamp(1, t);
        let horizon = ratio_frames(a.beta, t).min(t - n_o).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(video_seed(config.seed, &v.id, n_o));
        let lta = infer_lta(
            &model,
            &v.features.slice_rows(0, n_o),
            horizon,
            &sched,
            &config,
            &mut rng,
        )?;
        let lta = &lta[..lta.len().min(t)];
        let rows = [
            BarcodeRow {
                title: "ground truth",
                labels: &v.labels,
            },
            BarcodeRow {
                title: "segmentation",
                labels: &tas,
            },
            BarcodeRow {
                title: "anticipation",
                labels: lta,
            },
        ];
        let svg = barcode_svg(&v.id, &rows, t, ds.num_classes(), Some(n_o));
        write(&dir.join(format!("{}.svg", v.id)), &svg)?;
    }
    println!("{}", dir.display());
    Ok(EXIT_OK)
}
