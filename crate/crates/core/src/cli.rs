//! Command-line front end: dataset generation, training, evaluation,
//! ablation sweeps, and forward-noise analysis, each emitting
//! machine-readable artifacts stamped with the fully resolved configuration.
//!
//! Configuration precedence is flags over config file over defaults. Every
//! run is a pure function of its resolved config: rerunning a command with
//! the same config and seeds reproduces each artifact byte for byte.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_classifier, load_denoiser, save_classifier, save_denoiser};
use crate::dataset::{build_dataset, ProcedureDataset, Structure, SyntheticSpec};
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::metrics::evaluate_plans;
use crate::noise::{estimate_noise_stats, mean_std, noised_action_samples, MaskMode, NoiseStats};
use crate::planner::{
    plan_test_split, train_denoiser, train_task_classifier, EpochLog, TrainingConfig,
};
use crate::schedule::CosineSchedule;

/// Environment variable prepended to relative `out` paths.
pub const OUT_ROOT_ENV: &str = "PROCDIFF_OUT_ROOT";

/// Flat resolved configuration covering every subcommand.
///
/// Unknown keys in a config file are rejected. The struct serializes into
/// every artifact so a run can be reproduced from its outputs alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub horizon: usize,
    pub diffusion_steps: usize,
    pub tau: f64,
    pub mask_mode: MaskMode,
    pub attention_enabled: bool,
    pub use_fitted_mean: bool,
    pub channels: Vec<usize>,
    pub time_embed_dim: usize,
    pub preset: Structure,
    pub data_seed: u64,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub decay_rate: f64,
    pub decay_every: usize,
    pub decay_last_k_epochs: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub noise_seed: u64,
    pub bins: usize,
    pub dataset: Option<String>,
    pub models: Option<String>,
    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainingConfig::default();
        RunConfig {
            horizon: 3,
            diffusion_steps: 200,
            tau: 0.008,
            mask_mode: MaskMode::MultiAdd,
            attention_enabled: true,
            use_fitted_mean: true,
            channels: vec![64, 128, 256],
            time_embed_dim: 64,
            preset: Structure::Linear,
            data_seed: 0,
            train_fraction: 0.7,
            split_seed: 0,
            batch_size: train.batch_size,
            epochs: train.epochs,
            steps_per_epoch: train.steps_per_epoch,
            warmup_epochs: train.warmup_epochs,
            peak_lr: train.peak_lr,
            decay_rate: train.decay_rate,
            decay_every: train.decay_every,
            decay_last_k_epochs: train.decay_last_k_epochs,
            train_seed: 0,
            eval_seed: 0,
            noise_seed: 0,
            bins: 40,
            dataset: None,
            models: None,
            out: "out".to_string(),
        }
    }
}

impl RunConfig {
    /// The training-stage subset of the config.
    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            warmup_epochs: self.warmup_epochs,
            peak_lr: self.peak_lr,
            decay_rate: self.decay_rate,
            decay_every: self.decay_every,
            decay_last_k_epochs: self.decay_last_k_epochs,
            seed: self.train_seed,
        }
    }

    /// Generator spec for the selected preset with this config's seed.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let mut spec = match self.preset {
            Structure::Linear => SyntheticSpec::linear_preset(),
            Structure::Scattered => SyntheticSpec::scattered_preset(),
        };
        spec.seed = self.data_seed;
        spec
    }

    /// Output directory with the [`OUT_ROOT_ENV`] root applied to relative
    /// paths.
    pub fn out_dir(&self) -> PathBuf {
        let out = PathBuf::from(&self.out);
        if out.is_relative() {
            if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
                if !root.is_empty() {
                    return PathBuf::from(root).join(out);
                }
            }
        }
        out
    }

    fn dataset_dir(&self) -> Result<PathBuf> {
        self.dataset
            .as_ref()
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config("no dataset given; pass --dataset or set the key".into()))
    }

    fn models_dir(&self) -> PathBuf {
        match &self.models {
            Some(m) => PathBuf::from(m),
            None => self.out_dir(),
        }
    }
}

/// Reads a config file and layers explicit flag overrides on top of it.
fn resolve(file: Option<&Path>, overrides: &[&dyn ApplyOverride]) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {}", path.display(), e))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config {}: {}", path.display(), e)))?
        }
        None => RunConfig::default(),
    };
    for group in overrides {
        group.apply(&mut cfg)?;
    }
    Ok(cfg)
}

trait ApplyOverride {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()>;
}

fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
    if let Some(v) = src {
        *dst = v.clone();
    }
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON config file; explicit flags take precedence over its keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; relative paths are placed under $PROCDIFF_OUT_ROOT
    #[arg(long)]
    out: Option<String>,
}

impl ApplyOverride for CommonArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        set(&mut cfg.out, &self.out);
        Ok(())
    }
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Dataset preset: label placement along the action inventory
    #[arg(long, value_enum)]
    preset: Option<Structure>,
    /// Generator seed
    #[arg(long)]
    data_seed: Option<u64>,
    /// Plan length for window curation
    #[arg(long)]
    horizon: Option<usize>,
    /// Fraction of videos assigned to the train split
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Seed for the video-level split shuffle
    #[arg(long)]
    split_seed: Option<u64>,
}

impl ApplyOverride for GenArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        set(&mut cfg.preset, &self.preset);
        set(&mut cfg.data_seed, &self.data_seed);
        set(&mut cfg.horizon, &self.horizon);
        set(&mut cfg.train_fraction, &self.train_fraction);
        set(&mut cfg.split_seed, &self.split_seed);
        Ok(())
    }
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory holding a generated dataset
    #[arg(long)]
    dataset: Option<String>,
}

impl ApplyOverride for DataArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(d) = &self.dataset {
            cfg.dataset = Some(d.clone());
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Forward-process mask added to the action noise
    #[arg(long, value_enum)]
    mask_mode: Option<MaskMode>,
    /// Whether denoiser stages end in self-attention
    #[arg(long)]
    attention_enabled: Option<bool>,
    /// Stage widths, comma separated (e.g. 64,128,256)
    #[arg(long)]
    channels: Option<String>,
    /// Sinusoidal time embedding width (even)
    #[arg(long)]
    time_embed_dim: Option<usize>,
    /// Number of diffusion steps N
    #[arg(long)]
    diffusion_steps: Option<usize>,
    /// Cosine schedule offset
    #[arg(long)]
    tau: Option<f64>,
}

impl ApplyOverride for ModelArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        set(&mut cfg.mask_mode, &self.mask_mode);
        set(&mut cfg.attention_enabled, &self.attention_enabled);
        set(&mut cfg.time_embed_dim, &self.time_embed_dim);
        set(&mut cfg.diffusion_steps, &self.diffusion_steps);
        set(&mut cfg.tau, &self.tau);
        if let Some(list) = &self.channels {
            let parsed: std::result::Result<Vec<usize>, _> =
                list.split(',').map(|v| v.trim().parse::<usize>()).collect();
            cfg.channels = parsed
                .map_err(|_| Error::Config(format!("cannot parse channels list {:?}", list)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    decay_rate: Option<f64>,
    #[arg(long)]
    decay_every: Option<usize>,
    #[arg(long)]
    decay_last_k_epochs: Option<usize>,
    /// Seed for parameter init and batch sampling
    #[arg(long)]
    train_seed: Option<u64>,
}

impl ApplyOverride for TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        set(&mut cfg.batch_size, &self.batch_size);
        set(&mut cfg.epochs, &self.epochs);
        set(&mut cfg.steps_per_epoch, &self.steps_per_epoch);
        set(&mut cfg.warmup_epochs, &self.warmup_epochs);
        set(&mut cfg.peak_lr, &self.peak_lr);
        set(&mut cfg.decay_rate, &self.decay_rate);
        set(&mut cfg.decay_every, &self.decay_every);
        set(&mut cfg.decay_last_k_epochs, &self.decay_last_k_epochs);
        set(&mut cfg.train_seed, &self.train_seed);
        Ok(())
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory holding denoiser.ckpt, classifier.ckpt, noise_stats.json;
    /// defaults to the output directory
    #[arg(long)]
    models: Option<String>,
    /// Center starting noise on the fitted per-position means
    #[arg(long)]
    use_fitted_mean: Option<bool>,
    /// Seed for the per-query inference streams
    #[arg(long)]
    eval_seed: Option<u64>,
}

impl ApplyOverride for EvalArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(m) = &self.models {
            cfg.models = Some(m.clone());
        }
        set(&mut cfg.use_fitted_mean, &self.use_fitted_mean);
        set(&mut cfg.eval_seed, &self.eval_seed);
        Ok(())
    }
}

#[derive(Debug, Args)]
struct NoiseArgs {
    /// Seed for the forward-process simulation
    #[arg(long)]
    noise_seed: Option<u64>,
    /// Histogram bin count
    #[arg(long)]
    bins: Option<usize>,
}

impl ApplyOverride for NoiseArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        set(&mut cfg.noise_seed, &self.noise_seed);
        set(&mut cfg.bins, &self.bins);
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "procdiff",
    about = "Action-aware diffusion for procedure planning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it to the output directory
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        gen: GenArgs,
    },
    /// Train the task classifier and denoiser, fit noise statistics
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Plan every test window and score the predictions
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Train and evaluate the full mask-mode x attention grid
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Simulate the forward process at n = N and write histograms and stats
    AnalyzeNoise {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        noise: NoiseArgs,
    },
}

/// Runs one CLI invocation. `argv` includes the program name. Argument
/// parse failures, help, and version surface as configuration errors here;
/// [`main_with_args`] gives them the conventional terminal treatment.
pub fn run<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)
        .map_err(|e| Error::Config(e.to_string().lines().next().unwrap_or("bad arguments").into()))?;
    dispatch(cli)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, gen } => {
            let cfg = resolve(common.config.as_deref(), &[&gen, &common])?;
            cmd_gen_data(&cfg)
        }
        Command::Train { common, data, model, train } => {
            let cfg = resolve(common.config.as_deref(), &[&data, &model, &train, &common])?;
            cmd_train(&cfg)
        }
        Command::Eval { common, data, eval } => {
            let cfg = resolve(common.config.as_deref(), &[&data, &eval, &common])?;
            cmd_eval(&cfg)
        }
        Command::Ablate { common, data, model, train, eval } => {
            let cfg =
                resolve(common.config.as_deref(), &[&data, &model, &train, &eval, &common])?;
            cmd_ablate(&cfg)
        }
        Command::AnalyzeNoise { common, data, model, noise } => {
            let cfg = resolve(common.config.as_deref(), &[&data, &model, &noise, &common])?;
            cmd_analyze_noise(&cfg)
        }
    }
}

/// Entry point used by the binary: prints help and version on stdout,
/// usage errors on stderr, and maps library errors to exit codes
/// (0 ok, 2 config or usage, 3 data or io, 4 numeric).
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::error::ErrorKind;
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{}", e);
            return 0;
        }
        Err(e) => {
            eprint!("{}", e);
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("{}", err);
            err.exit_code()
        }
    }
}

fn config_json(cfg: &RunConfig) -> Result<serde_json::Value> {
    serde_json::to_value(cfg).map_err(|e| Error::Config(format!("config echo: {}", e)))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// One-line `# config: {...}` comment carried at the top of CSV artifacts.
fn config_comment(cfg: &RunConfig) -> Result<String> {
    let compact = serde_json::to_string(&config_json(cfg)?)
        .map_err(|e| Error::Config(format!("config echo: {}", e)))?;
    Ok(format!("# config: {}\n", compact))
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.synthetic_spec();
    let dataset = build_dataset(&spec, cfg.horizon, cfg.train_fraction, cfg.split_seed)?;
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)?;
    dataset.save(&dir)?;
    let m = dataset.manifest();
    println!(
        "wrote {} ({} videos, {} train / {} test windows, horizon {})",
        dir.display(),
        m.n_videos,
        m.n_train_windows,
        m.n_test_windows,
        cfg.horizon
    );
    Ok(())
}

/// Echo of what a train run actually used, with dataset-derived fields
/// overwriting whatever the incoming config said.
fn train_echo(cfg: &RunConfig, dataset: &ProcedureDataset) -> RunConfig {
    let mut echo = cfg.clone();
    echo.horizon = dataset.dims().horizon;
    echo
}

fn loss_log_csv(cfg: &RunConfig, classifier: &[EpochLog], denoiser: &[EpochLog]) -> Result<String> {
    let mut out = config_comment(cfg)?;
    out.push_str("phase,epoch,lr,loss,accuracy\n");
    for entry in classifier {
        out.push_str(&format!(
            "classifier,{},{},{},{}\n",
            entry.epoch,
            entry.lr,
            entry.loss,
            entry.accuracy.map(|a| a.to_string()).unwrap_or_default()
        ));
    }
    for entry in denoiser {
        out.push_str(&format!("denoiser,{},{},{},\n", entry.epoch, entry.lr, entry.loss));
    }
    Ok(out)
}

fn train_models(
    cfg: &RunConfig,
    dataset: &ProcedureDataset,
    mask_mode: MaskMode,
    attention_enabled: bool,
) -> Result<(crate::denoiser::Denoiser, Vec<EpochLog>, NoiseStats)> {
    let schedule = CosineSchedule::new(cfg.diffusion_steps, cfg.tau)?;
    let dims = dataset.dims();
    let net_config = DenoiserConfig {
        input_width: dims.width(),
        horizon: dims.horizon,
        channels: cfg.channels.clone(),
        time_embed_dim: cfg.time_embed_dim,
        attention_enabled,
    };
    let training = cfg.training();
    let (denoiser, log) =
        train_denoiser(dataset, &schedule, mask_mode, &net_config, &training)?;
    let mut stats_rng = ChaCha8Rng::seed_from_u64(cfg.train_seed);
    stats_rng.set_stream(2);
    let stats = estimate_noise_stats(dataset, &schedule, mask_mode, &mut stats_rng)?;
    Ok((denoiser, log, stats))
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dataset = ProcedureDataset::load(&cfg.dataset_dir()?)?;
    let echo = train_echo(cfg, &dataset);
    let training = echo.training();
    training.validate()?;
    let dir = echo.out_dir();
    std::fs::create_dir_all(&dir)?;

    println!("training task classifier ({} epochs)", training.epochs);
    let (classifier, classifier_log) = train_task_classifier(&dataset, &training)?;
    let final_cls = classifier_log.last().expect("at least one epoch");
    println!(
        "classifier done: loss {:.4}, train accuracy {:.3}",
        final_cls.loss,
        final_cls.accuracy.unwrap_or(0.0)
    );

    println!(
        "training denoiser ({} epochs, mask {}, attention {})",
        training.epochs,
        echo.mask_mode.as_str(),
        echo.attention_enabled
    );
    let (denoiser, denoiser_log, stats) =
        train_models(&echo, &dataset, echo.mask_mode, echo.attention_enabled)?;
    println!("denoiser done: loss {:.6}", denoiser_log.last().expect("epochs").loss);

    let run = config_json(&echo)?;
    save_denoiser(&denoiser, dir.join("denoiser.ckpt"), Some(&run))?;
    save_classifier(&classifier, dir.join("classifier.ckpt"), Some(&run))?;
    let stats_value = serde_json::json!({
        "config": run,
        "stats": stats,
    });
    write_json(&dir.join("noise_stats.json"), &stats_value)?;
    std::fs::write(
        dir.join("loss_log.csv"),
        loss_log_csv(&echo, &classifier_log, &denoiser_log)?,
    )?;
    println!("wrote {}", dir.display());
    Ok(())
}

/// Loads the stats file written by train, returning the inner NoiseStats.
fn load_noise_stats(path: &Path) -> Result<NoiseStats> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {}", path.display(), e)))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    let stats = value
        .get("stats")
        .ok_or_else(|| Error::Data(format!("{}: missing stats object", path.display())))?;
    let stats: NoiseStats = serde_json::from_value(stats.clone())
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    stats.validate()?;
    Ok(stats)
}

/// Serialized per-query line inside plans.jsonl.
#[derive(Debug, Serialize, Deserialize)]
struct PlanLine {
    predicted_task: usize,
    plan: Vec<usize>,
    gt_plan: Vec<usize>,
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let dataset = ProcedureDataset::load(&cfg.dataset_dir()?)?;
    let models = cfg.models_dir();
    let denoiser = load_denoiser(models.join("denoiser.ckpt"))?;
    let classifier = load_classifier(models.join("classifier.ckpt"))?;
    let stats = load_noise_stats(&models.join("noise_stats.json"))?;
    let schedule = CosineSchedule::new(stats.schedule.n_steps, stats.schedule.tau)?;

    // echo what actually runs, not what the incoming config guessed
    let mut echo = cfg.clone();
    echo.horizon = dataset.dims().horizon;
    echo.mask_mode = stats.mode;
    echo.attention_enabled = denoiser.config().attention_enabled;
    echo.channels = denoiser.config().channels.clone();
    echo.time_embed_dim = denoiser.config().time_embed_dim;
    echo.diffusion_steps = stats.schedule.n_steps;
    echo.tau = stats.schedule.tau;

    let records = plan_test_split(
        &denoiser,
        &classifier,
        &dataset,
        &stats,
        &schedule,
        echo.use_fitted_mean,
        echo.eval_seed,
    )?;
    let preds: Vec<Vec<usize>> = records.iter().map(|r| r.plan.clone()).collect();
    let gts: Vec<Vec<usize>> = records.iter().map(|r| r.gt_plan.clone()).collect();
    let report = evaluate_plans(&preds, &gts)?;

    let dir = echo.out_dir();
    std::fs::create_dir_all(&dir)?;
    let run = config_json(&echo)?;
    let mut jsonl = serde_json::to_string(&serde_json::json!({ "config": run }))
        .map_err(|e| Error::Data(format!("plans header: {}", e)))?;
    jsonl.push('\n');
    for record in &records {
        let line = PlanLine {
            predicted_task: record.predicted_task,
            plan: record.plan.clone(),
            gt_plan: record.gt_plan.clone(),
        };
        jsonl.push_str(
            &serde_json::to_string(&line)
                .map_err(|e| Error::Data(format!("plans line: {}", e)))?,
        );
        jsonl.push('\n');
    }
    std::fs::write(dir.join("plans.jsonl"), jsonl)?;
    let report_value = serde_json::json!({
        "config": run,
        "report": report,
    });
    write_json(&dir.join("eval_report.json"), &report_value)?;
    println!(
        "evaluated {} windows: sr {:.4}, macc {:.4}, msiou {:.4}",
        report.n_samples, report.sr, report.macc, report.msiou
    );
    Ok(())
}

/// Grid order for ablation tables: every mask mode, attention off then on.
const ABLATION_GRID: [(MaskMode, bool); 6] = [
    (MaskMode::NoMask, false),
    (MaskMode::NoMask, true),
    (MaskMode::SingleAdd, false),
    (MaskMode::SingleAdd, true),
    (MaskMode::MultiAdd, false),
    (MaskMode::MultiAdd, true),
];

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let dataset = ProcedureDataset::load(&cfg.dataset_dir()?)?;
    let echo = train_echo(cfg, &dataset);
    let training = echo.training();
    training.validate()?;
    let schedule = CosineSchedule::new(echo.diffusion_steps, echo.tau)?;

    // the classifier never sees masks or attention; share one fit
    println!("training shared task classifier");
    let (classifier, _) = train_task_classifier(&dataset, &training)?;

    let mut rows = Vec::with_capacity(ABLATION_GRID.len());
    for (mask, attention) in ABLATION_GRID {
        println!("ablation: mask {}, attention {}", mask.as_str(), attention);
        let (denoiser, _, stats) = train_models(&echo, &dataset, mask, attention)?;
        let records = plan_test_split(
            &denoiser,
            &classifier,
            &dataset,
            &stats,
            &schedule,
            echo.use_fitted_mean,
            echo.eval_seed,
        )?;
        let preds: Vec<Vec<usize>> = records.iter().map(|r| r.plan.clone()).collect();
        let gts: Vec<Vec<usize>> = records.iter().map(|r| r.gt_plan.clone()).collect();
        let report = evaluate_plans(&preds, &gts)?;
        println!(
            "  sr {:.4}, macc {:.4}, msiou {:.4}",
            report.sr, report.macc, report.msiou
        );
        rows.push((mask, attention, report.sr, report.macc, report.msiou));
    }

    let dir = echo.out_dir();
    std::fs::create_dir_all(&dir)?;
    let comment = config_comment(&echo)?;
    let mut results = comment.clone();
    results.push_str("mask_mode,attention,sr,macc,msiou\n");
    for (mask, attention, sr, macc, msiou) in &rows {
        results.push_str(&format!(
            "{},{},{},{},{}\n",
            mask.as_str(),
            attention,
            sr,
            macc,
            msiou
        ));
    }
    std::fs::write(dir.join("ablate_results.csv"), results)?;

    // deltas against the full method: action-aware mask plus attention
    let full = rows
        .iter()
        .find(|(m, a, ..)| *m == MaskMode::MultiAdd && *a)
        .expect("grid includes the full configuration");
    let (_, _, full_sr, full_macc, full_msiou) = *full;
    let mut deltas = comment;
    deltas.push_str("mask_mode,attention,d_sr,d_macc,d_msiou\n");
    for (mask, attention, sr, macc, msiou) in &rows {
        deltas.push_str(&format!(
            "{},{},{},{},{}\n",
            mask.as_str(),
            attention,
            sr - full_sr,
            macc - full_macc,
            msiou - full_msiou
        ));
    }
    std::fs::write(dir.join("ablate_deltas.csv"), deltas)?;
    println!("wrote {}", dir.display());
    Ok(())
}

/// Equal-width histogram rows as (bin_left, bin_right, count).
fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // constant (or pathological) columns collapse to a single bin
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![(lo, hi, values.len())];
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}

fn write_histogram(path: &Path, comment: &str, values: &[f64], bins: usize) -> Result<()> {
    let mut out = comment.to_string();
    out.push_str("bin_left,bin_right,count\n");
    for (left, right, count) in histogram(values, bins) {
        out.push_str(&format!("{},{},{}\n", left, right, count));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn cmd_analyze_noise(cfg: &RunConfig) -> Result<()> {
    let dataset = ProcedureDataset::load(&cfg.dataset_dir()?)?;
    let echo = train_echo(cfg, &dataset);
    let schedule = CosineSchedule::new(echo.diffusion_steps, echo.tau)?;
    if echo.bins == 0 {
        return Err(Error::Config("bins must be positive".into()));
    }

    // plain Gaussian noise against the configured action-aware variant
    let mut eps_rng = ChaCha8Rng::seed_from_u64(echo.noise_seed);
    eps_rng.set_stream(0);
    let eps = noised_action_samples(&dataset, &schedule, MaskMode::NoMask, &mut eps_rng)?;
    let mut eps_a_rng = ChaCha8Rng::seed_from_u64(echo.noise_seed);
    eps_a_rng.set_stream(1);
    let eps_a = noised_action_samples(&dataset, &schedule, echo.mask_mode, &mut eps_a_rng)?;

    let dir = echo.out_dir();
    std::fs::create_dir_all(&dir)?;
    let comment = config_comment(&echo)?;
    let mut summary = comment.clone();
    summary.push_str("source,position,mean,std\n");
    for (t, column) in eps.iter().enumerate() {
        let (mean, std) = mean_std(column);
        summary.push_str(&format!("eps,{},{},{}\n", t + 1, mean, std));
    }
    for (t, column) in eps_a.iter().enumerate() {
        let (mean, std) = mean_std(column);
        summary.push_str(&format!("eps_a,{},{},{}\n", t + 1, mean, std));
    }
    std::fs::write(dir.join("noise_summary.csv"), summary)?;

    for (t, column) in eps.iter().enumerate() {
        write_histogram(
            &dir.join(format!("hist_eps_p{}.csv", t + 1)),
            &comment,
            column,
            echo.bins,
        )?;
    }
    for (t, column) in eps_a.iter().enumerate() {
        write_histogram(
            &dir.join(format!("hist_eps_a_p{}.csv", t + 1)),
            &comment,
            column,
            echo.bins,
        )?;
    }
    println!(
        "analyzed {} positions over mask {} into {}",
        eps.len(),
        echo.mask_mode.as_str(),
        dir.display()
    );
    Ok(())
}
