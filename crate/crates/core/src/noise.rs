//! Action-aware forward noising.
//!
//! The forward process corrupts only the action block of a plan matrix:
//! `actions_n = sqrt(alpha_bar(n)) * actions_0 + sqrt(1 - alpha_bar(n)) * (eps + M)`
//! where `eps` is standard Gaussian and `M` is a `[T, A]` mask built from
//! normalized action embeddings. `MultiAdd` accumulates the embeddings of
//! every action up to position t, `SingleAdd` uses only position t's own
//! embedding, and `NoMask` leaves the noise untouched. At inference time the
//! reverse chain starts from noise drawn with per-position statistics fitted
//! on the fully noised training set.

use crate::dataset::ProcedureDataset;
use crate::error::{Error, Result};
use crate::plan::PlanMatrix;
use crate::schedule::CosineSchedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Which mask the forward process adds on top of the Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    NoMask,
    SingleAdd,
    MultiAdd,
}

impl MaskMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskMode::NoMask => "no_mask",
            MaskMode::SingleAdd => "single_add",
            MaskMode::MultiAdd => "multi_add",
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One embedding vector per action class, plus the normalization bounds once
/// [`ActionEmbeddingTable::normalize`] has been applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEmbeddingTable {
    n_actions: usize,
    dim: usize,
    /// Row-major `[n_actions, dim]`.
    values: Vec<f64>,
    /// `(g_min, g_max)` of the source table; present only on normalized tables.
    bounds: Option<(f64, f64)>,
}

impl ActionEmbeddingTable {
    pub fn new(n_actions: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if n_actions == 0 || dim == 0 {
            return Err(Error::Config("embedding table must be non-empty".into()));
        }
        if values.len() != n_actions * dim {
            return Err(Error::Config(format!(
                "embedding table needs {}x{} = {} values, got {}",
                n_actions,
                dim,
                n_actions * dim,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "embedding table entry {} (action {}) is not finite",
                bad,
                bad / dim
            )));
        }
        Ok(ActionEmbeddingTable { n_actions, dim, values, bounds: None })
    }

    /// Draws entries from a normal distribution truncated to `[-1, 1]`, so
    /// the table mean keeps the sign of `mean` after min-max normalization
    /// (an unbounded normal would re-center to ~0, erasing the drift the
    /// mask analysis measures).
    pub fn generate<R: Rng>(
        n_actions: usize,
        dim: usize,
        mean: f64,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(-1.0..=1.0).contains(&mean) || !mean.is_finite() {
            return Err(Error::Config(format!(
                "embedding mean must lie in [-1, 1], got {}",
                mean
            )));
        }
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::Config(format!("embedding std must be positive, got {}", std)));
        }
        let mut values = Vec::with_capacity(n_actions * dim);
        for _ in 0..n_actions * dim {
            let mut tries = 0;
            let v = loop {
                let draw: f64 = mean + std * rng.sample::<f64, _>(StandardNormal);
                if (-1.0..=1.0).contains(&draw) {
                    break draw;
                }
                tries += 1;
                if tries > 10_000 {
                    return Err(Error::Numeric(
                        "embedding rejection sampling failed to land in [-1, 1]".into(),
                    ));
                }
            };
            values.push(v);
        }
        ActionEmbeddingTable::new(n_actions, dim, values)
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, action: usize) -> &[f64] {
        &self.values[action * self.dim..(action + 1) * self.dim]
    }

    pub fn is_normalized(&self) -> bool {
        self.bounds.is_some()
    }

    /// Global min-max normalization `v -> 2(v - g_min)/(g_max - g_min) - 1`
    /// over the whole table. A constant table maps to all zeros.
    pub fn normalize(&self) -> ActionEmbeddingTable {
        let g_min = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let g_max = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let values = if g_min == g_max {
            vec![0.0; self.values.len()]
        } else {
            let scale = 2.0 / (g_max - g_min);
            self.values.iter().map(|v| (v - g_min) * scale - 1.0).collect()
        };
        ActionEmbeddingTable {
            n_actions: self.n_actions,
            dim: self.dim,
            values,
            bounds: Some((g_min, g_max)),
        }
    }

    /// Maps a `dim != n_actions` table onto `target_dim` coordinates with a
    /// fixed seeded Gaussian projection (entries `N(0, 1/sqrt(dim))`).
    pub fn project(&self, target_dim: usize, seed: u64) -> Result<ActionEmbeddingTable> {
        if target_dim == 0 {
            return Err(Error::Config("projection target dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (self.dim as f64).sqrt();
        // projection matrix [target_dim, dim], row-major, drawn in row order
        let proj: Vec<f64> =
            (0..target_dim * self.dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut values = Vec::with_capacity(self.n_actions * target_dim);
        for a in 0..self.n_actions {
            let row = self.row(a);
            for j in 0..target_dim {
                let p = &proj[j * self.dim..(j + 1) * self.dim];
                values.push(p.iter().zip(row).map(|(x, y)| x * y).sum());
            }
        }
        ActionEmbeddingTable::new(self.n_actions, target_dim, values)
    }
}

/// `[T, A]` additive mask over the action block; rows indexed by horizon
/// position. Task and observation columns carry no mask by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMask {
    mode: MaskMode,
    horizon: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl NoiseMask {
    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_actions..(t + 1) * self.n_actions]
    }
}

/// Builds the mask for one action sequence. The table must be normalized and
/// its embedding dim must equal the action-class count so that embedding
/// coordinates line up with the one-hot action columns.
pub fn build_mask(
    actions: &[usize],
    table: &ActionEmbeddingTable,
    mode: MaskMode,
) -> Result<NoiseMask> {
    if actions.is_empty() {
        return Err(Error::Config("mask needs at least one action".into()));
    }
    if !table.is_normalized() {
        return Err(Error::Config("mask requires a normalized embedding table".into()));
    }
    if table.dim() != table.n_actions() {
        return Err(Error::Config(format!(
            "mask requires embedding dim == action count ({} != {}); project the table first",
            table.dim(),
            table.n_actions()
        )));
    }
    let a = table.n_actions();
    for (t, &label) in actions.iter().enumerate() {
        if label >= a {
            return Err(Error::Config(format!(
                "action label {} at position {} out of range for {} actions",
                label, t, a
            )));
        }
    }
    let horizon = actions.len();
    let mut values = vec![0.0; horizon * a];
    match mode {
        MaskMode::NoMask => {}
        MaskMode::SingleAdd => {
            for (t, &label) in actions.iter().enumerate() {
                values[t * a..(t + 1) * a].copy_from_slice(table.row(label));
            }
        }
        MaskMode::MultiAdd => {
            let mut acc = vec![0.0; a];
            for (t, &label) in actions.iter().enumerate() {
                for (s, v) in acc.iter_mut().zip(table.row(label)) {
                    *s += v;
                }
                values[t * a..(t + 1) * a].copy_from_slice(&acc);
            }
        }
    }
    Ok(NoiseMask { mode, horizon, n_actions: a, values })
}

fn check_mask_shape(x0: &PlanMatrix, mask: &NoiseMask) -> Result<()> {
    let dims = x0.dims();
    if mask.horizon() != dims.horizon || mask.n_actions() != dims.n_actions {
        return Err(Error::shape(
            "q_sample",
            format!(
                "mask is {}x{} but the action block is {}x{}",
                mask.horizon(),
                mask.n_actions(),
                dims.horizon,
                dims.n_actions
            ),
        ));
    }
    Ok(())
}

/// Forward-noises the action block to step `n` with explicit noise `eps`
/// (row-major `[T, A]`). Task and observation rows pass through untouched.
/// `n = 0` is the identity by construction (`alpha_bar(0) = 1`).
pub fn q_sample_with_eps(
    x0: &PlanMatrix,
    n: usize,
    schedule: &CosineSchedule,
    mask: &NoiseMask,
    eps: &[f64],
) -> Result<PlanMatrix> {
    check_mask_shape(x0, mask)?;
    let dims = *x0.dims();
    if n > schedule.n_steps() {
        return Err(Error::Config(format!(
            "diffusion step {} outside 0..={}",
            n,
            schedule.n_steps()
        )));
    }
    if eps.len() != dims.horizon * dims.n_actions {
        return Err(Error::shape(
            "q_sample",
            format!(
                "noise block has {} entries, expected {}x{}",
                eps.len(),
                dims.horizon,
                dims.n_actions
            ),
        ));
    }
    let signal = schedule.alpha_bar(n).sqrt();
    let noise = (1.0 - schedule.alpha_bar(n)).sqrt();
    let mut out = x0.clone();
    let mut block = x0.action_block();
    for (i, v) in block.iter_mut().enumerate() {
        // kept as two separate products so the mask contribution is exactly
        // noise * (eps + m), preserving the shift identity tested downstream
        *v = signal * *v + noise * (eps[i] + mask.values()[i]);
    }
    out.set_action_block(&block);
    Ok(out)
}

/// Forward-noises the action block to step `n`, drawing standard-normal
/// noise from `rng` in row-major order.
pub fn q_sample<R: Rng>(
    x0: &PlanMatrix,
    n: usize,
    schedule: &CosineSchedule,
    mask: &NoiseMask,
    rng: &mut R,
) -> Result<PlanMatrix> {
    let dims = x0.dims();
    let eps: Vec<f64> = (0..dims.horizon * dims.n_actions)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    q_sample_with_eps(x0, n, schedule, mask, &eps)
}

/// Schedule identity echoed into serialized noise statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInfo {
    #[serde(rename = "N")]
    pub n_steps: usize,
    pub tau: f64,
}

/// Per-position mean/std of fully noised action entries, pooled over the
/// action axis and the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub horizon: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub mode: MaskMode,
    pub schedule: ScheduleInfo,
}

impl NoiseStats {
    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.horizon || self.sigma.len() != self.horizon {
            return Err(Error::Data(format!(
                "noise stats arrays ({}, {}) do not match horizon {}",
                self.mu.len(),
                self.sigma.len(),
                self.horizon
            )));
        }
        for (t, &s) in self.sigma.iter().enumerate() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Data(format!(
                    "noise std at position {} must be positive and finite, got {}",
                    t, s
                )));
            }
        }
        if self.mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::Data("noise mean contains a non-finite value".into()));
        }
        Ok(())
    }
}

/// Noises every training window to `n = N` and pools the action entries per
/// horizon position. Returns one column of samples per position.
pub fn noised_action_samples(
    dataset: &ProcedureDataset,
    schedule: &CosineSchedule,
    mode: MaskMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let dims = dataset.dims();
    let table = dataset.mask_table()?;
    let train: Vec<_> = dataset.train_windows().collect();
    if train.is_empty() {
        return Err(Error::Data("noise statistics need a non-empty training split".into()));
    }
    let mut pooled: Vec<Vec<f64>> = vec![Vec::with_capacity(train.len() * dims.n_actions); dims.horizon];
    for window in train {
        let x0 = PlanMatrix::assemble(&dims, window.task, &window.actions, &window.o_start, &window.o_goal)?;
        let mask = build_mask(&window.actions, &table, mode)?;
        let noised = q_sample(&x0, schedule.n_steps(), schedule, &mask, rng)?;
        let block = noised.action_block();
        for t in 0..dims.horizon {
            pooled[t].extend_from_slice(&block[t * dims.n_actions..(t + 1) * dims.n_actions]);
        }
    }
    Ok(pooled)
}

/// Fits [`NoiseStats`] from the pooled fully-noised training windows.
pub fn estimate_noise_stats(
    dataset: &ProcedureDataset,
    schedule: &CosineSchedule,
    mode: MaskMode,
    rng: &mut ChaCha8Rng,
) -> Result<NoiseStats> {
    let pooled = noised_action_samples(dataset, schedule, mode, rng)?;
    let mut mu = Vec::with_capacity(pooled.len());
    let mut sigma = Vec::with_capacity(pooled.len());
    for column in &pooled {
        let (mean, std) = mean_std(column);
        mu.push(mean);
        sigma.push(std);
    }
    let stats = NoiseStats {
        horizon: pooled.len(),
        mu,
        sigma,
        mode,
        schedule: ScheduleInfo { n_steps: schedule.n_steps(), tau: schedule.tau() },
    };
    stats.validate()?;
    Ok(stats)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Draws the `[T, A]` starting noise for inference: position t is i.i.d.
/// normal with std `sigma[t]`, centered at `mu[t]` only when
/// `use_fitted_mean` is set.
pub fn sample_inference_noise<R: Rng>(
    stats: &NoiseStats,
    n_actions: usize,
    use_fitted_mean: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    stats.validate()?;
    let mut out = Vec::with_capacity(stats.horizon * n_actions);
    for t in 0..stats.horizon {
        let center = if use_fitted_mean { stats.mu[t] } else { 0.0 };
        for _ in 0..n_actions {
            out.push(center + stats.sigma[t] * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(out)
}
