//! Synthetic procedure datasets: generation, window curation, video-level
//! splitting, and a documented on-disk format.
//!
//! Generation mimics instructional-video corpora at desk scale. Each task
//! owns an action grammar: in `linear` structure a fixed consecutive chain
//! of labels (videos replay contiguous sub-chains), in `scattered` structure
//! a task-specific random transition map over the shared action pool. A
//! video's observable side is one feature vector per clip boundary
//! (`m+1` boundaries for `m` actions): a seeded projection of the task
//! one-hot plus a seeded projection of the embedding of the action starting
//! at that boundary, plus Gaussian noise. Curation slides a length-T window
//! over every video; the split keeps all windows of a video on one side.

use crate::error::{Error, Result};
use crate::noise::ActionEmbeddingTable;
use crate::plan::ProblemDims;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// Every task is a fixed consecutive label chain; videos are contiguous
    /// sub-chains, so action sequences are runs of consecutive integers.
    Linear,
    /// Tasks share one action pool; sequences follow a task-specific random
    /// transition map, spreading labels across the space.
    Scattered,
}

/// Knobs of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_tasks: usize,
    pub num_actions: usize,
    pub observation_dim: usize,
    /// Embedding dim; equal to `num_actions` by default so embedding
    /// coordinates align with the one-hot action columns.
    pub embedding_dim: usize,
    pub videos_per_task: usize,
    /// Inclusive bounds on actions per video.
    pub actions_per_video: (usize, usize),
    pub structure: Structure,
    pub embedding_mean: f64,
    pub embedding_std: f64,
    pub observation_noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Consecutive-chain preset: 5 tasks over 20 actions.
    pub fn linear_preset() -> Self {
        SyntheticSpec {
            num_tasks: 5,
            num_actions: 20,
            observation_dim: 32,
            embedding_dim: 20,
            videos_per_task: 60,
            actions_per_video: (4, 8),
            structure: Structure::Linear,
            embedding_mean: -0.3,
            embedding_std: 0.5,
            observation_noise_std: 0.1,
            seed: 0,
        }
    }

    /// Shared-pool preset: 8 tasks over 40 actions with scattered sequences.
    pub fn scattered_preset() -> Self {
        SyntheticSpec {
            num_tasks: 8,
            num_actions: 40,
            observation_dim: 32,
            embedding_dim: 40,
            videos_per_task: 60,
            actions_per_video: (4, 8),
            structure: Structure::Scattered,
            embedding_mean: -0.3,
            embedding_std: 0.5,
            observation_noise_std: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_tasks", self.num_tasks),
            ("num_actions", self.num_actions),
            ("observation_dim", self.observation_dim),
            ("embedding_dim", self.embedding_dim),
            ("videos_per_task", self.videos_per_task),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{} must be positive", name)));
            }
        }
        let (lo, hi) = self.actions_per_video;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "actions_per_video range ({}, {}) must satisfy 1 <= lo <= hi",
                lo, hi
            )));
        }
        if self.structure == Structure::Linear && self.num_actions < hi {
            return Err(Error::Config(format!(
                "linear chains of up to {} actions cannot fit in {} action labels",
                hi, self.num_actions
            )));
        }
        if !(self.observation_noise_std >= 0.0 && self.observation_noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "observation_noise_std must be non-negative, got {}",
                self.observation_noise_std
            )));
        }
        Ok(())
    }
}

/// One generated video: its task, action sequence, and boundary features
/// (`actions.len() + 1` vectors of `observation_dim` floats).
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub task: usize,
    pub actions: Vec<usize>,
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// A curated length-T window with its boundary observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub video: usize,
    pub task: usize,
    pub actions: Vec<usize>,
    pub o_start: Vec<f64>,
    pub o_goal: Vec<f64>,
    pub split: Split,
}

/// Generates the video corpus and its action embedding table.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
) -> Result<(Vec<VideoRecord>, ActionEmbeddingTable)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let table = ActionEmbeddingTable::generate(
        spec.num_actions,
        spec.embedding_dim,
        spec.embedding_mean,
        spec.embedding_std,
        &mut rng,
    )?;
    // fixed observation projections, drawn once per dataset:
    // task signal [O, C] at unit scale, action signal [O, D_e] at 1/sqrt(D_e)
    let o = spec.observation_dim;
    let p_task: Vec<f64> =
        (0..o * spec.num_tasks).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let act_scale = 1.0 / (spec.embedding_dim as f64).sqrt();
    let p_act: Vec<f64> = (0..o * spec.embedding_dim)
        .map(|_| act_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let chain_len = spec.actions_per_video.1;
    let grammars: Vec<TaskGrammar> = (0..spec.num_tasks)
        .map(|c| TaskGrammar::build(spec, c, chain_len, &mut rng))
        .collect();

    let mut videos = Vec::with_capacity(spec.num_tasks * spec.videos_per_task);
    for (c, grammar) in grammars.iter().enumerate() {
        for _ in 0..spec.videos_per_task {
            let m = rng.gen_range(spec.actions_per_video.0..=spec.actions_per_video.1);
            let actions = grammar.sample_sequence(m, &mut rng);
            let features = (0..=m)
                .map(|j| {
                    // boundary j observes the action that starts there; the
                    // final boundary reuses the last action
                    let a = actions[j.min(m - 1)];
                    boundary_feature(spec, c, table.row(a), &p_task, &p_act, &mut rng)
                })
                .collect();
            videos.push(VideoRecord { task: c, actions, features });
        }
    }
    Ok((videos, table))
}

enum TaskGrammar {
    /// Half-open label range owned by the task.
    Chain { start: usize, len: usize },
    /// `next[a]` is the fixed successor of label `a` under this task.
    Transitions { next: Vec<usize> },
}

impl TaskGrammar {
    fn build(spec: &SyntheticSpec, task: usize, chain_len: usize, rng: &mut ChaCha8Rng) -> Self {
        match spec.structure {
            Structure::Linear => {
                // chain starts spread evenly over the label space; chains of
                // neighboring tasks may overlap, like shared sub-procedures
                let span = spec.num_actions - chain_len;
                let start = if spec.num_tasks == 1 {
                    0
                } else {
                    (task * span + (spec.num_tasks - 1) / 2) / (spec.num_tasks - 1)
                };
                TaskGrammar::Chain { start, len: chain_len }
            }
            Structure::Scattered => {
                let next = (0..spec.num_actions)
                    .map(|_| rng.gen_range(0..spec.num_actions))
                    .collect();
                TaskGrammar::Transitions { next }
            }
        }
    }

    fn sample_sequence(&self, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        match self {
            TaskGrammar::Chain { start, len } => {
                let offset = rng.gen_range(0..=(len - m));
                (0..m).map(|i| start + offset + i).collect()
            }
            TaskGrammar::Transitions { next } => {
                let mut a = rng.gen_range(0..next.len());
                let mut seq = Vec::with_capacity(m);
                for _ in 0..m {
                    seq.push(a);
                    a = next[a];
                }
                seq
            }
        }
    }
}

fn boundary_feature(
    spec: &SyntheticSpec,
    task: usize,
    embedding: &[f64],
    p_task: &[f64],
    p_act: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let (o, c, d) = (spec.observation_dim, spec.num_tasks, spec.embedding_dim);
    (0..o)
        .map(|i| {
            let task_part = p_task[i * c + task];
            let act_part: f64 =
                p_act[i * d..(i + 1) * d].iter().zip(embedding).map(|(p, e)| p * e).sum();
            task_part + act_part + spec.observation_noise_std * rng.sample::<f64, _>(StandardNormal)
        })
        .collect()
}

/// Slides a length-`horizon` window over each record. Records shorter than
/// the horizon contribute nothing. Windows carry no split tag yet.
pub fn curate_windows(records: &[VideoRecord], horizon: usize) -> Result<Vec<Window>> {
    if horizon < 2 {
        return Err(Error::Config(format!("curation horizon must be at least 2, got {}", horizon)));
    }
    let mut windows = Vec::new();
    for (video, rec) in records.iter().enumerate() {
        let m = rec.actions.len();
        debug_assert_eq!(rec.features.len(), m + 1);
        if m < horizon {
            continue;
        }
        for i in 0..=m - horizon {
            windows.push(Window {
                video,
                task: rec.task,
                actions: rec.actions[i..i + horizon].to_vec(),
                o_start: rec.features[i].clone(),
                o_goal: rec.features[i + horizon].clone(),
                split: Split::Train,
            });
        }
    }
    Ok(windows)
}

/// Tags each window train/test by shuffling whole videos; every window of a
/// video lands on the same side. Returns the number of train videos.
pub fn assign_video_split(
    windows: &mut [Window],
    n_videos: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<usize> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {}",
            train_fraction
        )));
    }
    let mut order: Vec<usize> = (0..n_videos).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates over video ids
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut n_train = (train_fraction * n_videos as f64).round() as usize;
    if n_videos >= 2 {
        n_train = n_train.clamp(1, n_videos - 1);
    } else {
        n_train = n_videos;
    }
    let mut is_train = vec![false; n_videos];
    for &v in &order[..n_train] {
        is_train[v] = true;
    }
    for w in windows.iter_mut() {
        w.split = if is_train[w.video] { Split::Train } else { Split::Test };
    }
    Ok(n_train)
}

/// Everything needed to reload and revalidate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dims: ProblemDims,
    pub n_videos: usize,
    pub n_windows: usize,
    pub n_train_windows: usize,
    pub n_test_windows: usize,
    pub train_fraction: f64,
    pub split_seed: u64,
    /// Generator echo; absent for externally produced features.
    pub spec: Option<SyntheticSpec>,
    /// Seed of the fixed projection applied when embedding dim != action count.
    pub projection_seed: Option<u64>,
}

/// Curated windows plus the embedding table and manifest metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcedureDataset {
    manifest: Manifest,
    windows: Vec<Window>,
    embeddings: ActionEmbeddingTable,
}

/// Generates, curates, and splits a dataset in one step.
pub fn build_dataset(
    spec: &SyntheticSpec,
    horizon: usize,
    train_fraction: f64,
    split_seed: u64,
) -> Result<ProcedureDataset> {
    let (videos, embeddings) = generate_synthetic(spec)?;
    let mut windows = curate_windows(&videos, horizon)?;
    if windows.is_empty() {
        return Err(Error::Data(format!(
            "no video is long enough for horizon {}; nothing to curate",
            horizon
        )));
    }
    assign_video_split(&mut windows, videos.len(), train_fraction, split_seed)?;
    let dims = ProblemDims {
        horizon,
        n_tasks: spec.num_tasks,
        n_actions: spec.num_actions,
        obs_dim: spec.observation_dim,
    };
    let projection_seed =
        (spec.embedding_dim != spec.num_actions).then_some(spec.seed ^ 0x70726f6a);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dims,
        n_videos: videos.len(),
        n_windows: windows.len(),
        n_train_windows: windows.iter().filter(|w| w.split == Split::Train).count(),
        n_test_windows: windows.iter().filter(|w| w.split == Split::Test).count(),
        train_fraction,
        split_seed,
        spec: Some(spec.clone()),
        projection_seed,
    };
    ProcedureDataset::new(manifest, windows, embeddings)
}

impl ProcedureDataset {
    pub fn new(
        manifest: Manifest,
        windows: Vec<Window>,
        embeddings: ActionEmbeddingTable,
    ) -> Result<Self> {
        let ds = ProcedureDataset { manifest, windows, embeddings };
        ds.validate()?;
        Ok(ds)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn dims(&self) -> ProblemDims {
        self.manifest.dims
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn embeddings(&self) -> &ActionEmbeddingTable {
        &self.embeddings
    }

    pub fn train_windows(&self) -> impl Iterator<Item = &Window> {
        self.windows.iter().filter(|w| w.split == Split::Train)
    }

    pub fn test_windows(&self) -> impl Iterator<Item = &Window> {
        self.windows.iter().filter(|w| w.split == Split::Test)
    }

    /// The normalized `[A, A]` table masks are built from, applying the
    /// manifest's fixed projection when the stored dim differs.
    pub fn mask_table(&self) -> Result<ActionEmbeddingTable> {
        let dims = self.dims();
        let table = if self.embeddings.dim() == dims.n_actions {
            self.embeddings.clone()
        } else {
            let seed = self.manifest.projection_seed.ok_or_else(|| {
                Error::Data(format!(
                    "embedding dim {} != action count {} and no projection seed in the manifest",
                    self.embeddings.dim(),
                    dims.n_actions
                ))
            })?;
            self.embeddings.project(dims.n_actions, seed)?
        };
        Ok(table.normalize())
    }

    fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "dataset format version {} unsupported (expected {})",
                m.format_version, FORMAT_VERSION
            )));
        }
        m.dims.validate()?;
        if self.embeddings.n_actions() != m.dims.n_actions {
            return Err(Error::Data(format!(
                "embedding table covers {} actions but dims declare {}",
                self.embeddings.n_actions(),
                m.dims.n_actions
            )));
        }
        if m.n_windows != self.windows.len() {
            return Err(Error::Data(format!(
                "manifest declares {} windows, found {}",
                m.n_windows,
                self.windows.len()
            )));
        }
        let n_train = self.windows.iter().filter(|w| w.split == Split::Train).count();
        if m.n_train_windows != n_train || m.n_test_windows != self.windows.len() - n_train {
            return Err(Error::Data(format!(
                "manifest split counts ({}/{}) disagree with records ({}/{})",
                m.n_train_windows,
                m.n_test_windows,
                n_train,
                self.windows.len() - n_train
            )));
        }
        for (i, w) in self.windows.iter().enumerate() {
            self.validate_window(i, w)?;
        }
        Ok(())
    }

    fn validate_window(&self, index: usize, w: &Window) -> Result<()> {
        let dims = self.manifest.dims;
        let fail = |what: String| Err(Error::Data(format!("record {}: {}", index, what)));
        if w.video >= self.manifest.n_videos {
            return fail(format!("video id {} out of range for {} videos", w.video, self.manifest.n_videos));
        }
        if w.task >= dims.n_tasks {
            return fail(format!("task label {} out of range for {} tasks", w.task, dims.n_tasks));
        }
        if w.actions.len() != dims.horizon {
            return fail(format!("has {} actions, expected horizon {}", w.actions.len(), dims.horizon));
        }
        if let Some(&a) = w.actions.iter().find(|&&a| a >= dims.n_actions) {
            return fail(format!("action label {} out of range for {} actions", a, dims.n_actions));
        }
        if w.o_start.len() != dims.obs_dim || w.o_goal.len() != dims.obs_dim {
            return fail(format!(
                "observation dims {}/{} do not match obs_dim {}",
                w.o_start.len(),
                w.o_goal.len(),
                dims.obs_dim
            ));
        }
        if w.o_start.iter().chain(&w.o_goal).any(|v| !v.is_finite()) {
            return fail("observation contains a non-finite value".into());
        }
        Ok(())
    }

    /// Writes `manifest.json`, `records.jsonl` (one window per line), and
    /// `embeddings.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Data(format!("manifest serialization failed: {}", e)))?;
        std::fs::write(dir.join("manifest.json"), manifest + "\n")?;

        let mut records = std::io::BufWriter::new(std::fs::File::create(dir.join("records.jsonl"))?);
        for w in &self.windows {
            let line = serde_json::to_string(w)
                .map_err(|e| Error::Data(format!("record serialization failed: {}", e)))?;
            writeln!(records, "{}", line)?;
        }
        records.flush()?;

        let embeddings = serde_json::to_string(&self.embeddings)
            .map_err(|e| Error::Data(format!("embedding serialization failed: {}", e)))?;
        std::fs::write(dir.join("embeddings.json"), embeddings + "\n")?;
        Ok(())
    }

    /// Loads and fully revalidates a dataset directory; errors name the file
    /// and the offending record.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            std::fs::read_to_string(dir.join(name))
                .map_err(|e| Error::Data(format!("cannot read {}: {}", dir.join(name).display(), e)))
        };
        let manifest: Manifest = serde_json::from_str(&read("manifest.json")?)
            .map_err(|e| Error::Data(format!("manifest.json: {}", e)))?;
        let embeddings: ActionEmbeddingTable = serde_json::from_str(&read("embeddings.json")?)
            .map_err(|e| Error::Data(format!("embeddings.json: {}", e)))?;

        let file = std::fs::File::open(dir.join("records.jsonl"))
            .map_err(|e| Error::Data(format!("cannot read {}: {}", dir.join("records.jsonl").display(), e)))?;
        let mut windows = Vec::with_capacity(manifest.n_windows);
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let w: Window = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("records.jsonl record {}: {}", i, e)))?;
            windows.push(w);
        }
        ProcedureDataset::new(manifest, windows, embeddings)
    }
}
