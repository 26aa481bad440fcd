//! Two-stage planner: classify the task from the endpoint observations, then
//! denoise an action plan conditioned on that label and the endpoints.
//!
//! Training fits the classifier on (o_start, o_goal) pairs and the denoiser on
//! noised plan matrices with ground-truth labels; inference runs the reverse
//! diffusion chain from action-aware starting noise and decodes the action
//! row argmaxes into a label sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::ProcedureDataset;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::noise::{build_mask, q_sample, sample_inference_noise, MaskMode, NoiseStats};
use crate::optim::AdamW;
use crate::plan::{argmax, Conditioning, PlanMatrix, ProblemDims};
use crate::schedule::{CosineSchedule, ReverseCoefficients};
use crate::tensor::{OpKind, Tape, Tensor, ValueId};

/// Width of every hidden layer in the task classifier.
pub const CLASSIFIER_HIDDEN: usize = 128;

/// Evaluation runs the reverse chain over this many queries at a time; each
/// query keeps its own RNG stream so results do not depend on the chunking.
pub const EVAL_CHUNK: usize = 64;

/// Optimization hyperparameters shared by both training stages.
///
/// The learning rate ramps linearly from `peak_lr / warmup_epochs` to
/// `peak_lr` over the first `warmup_epochs` epochs, holds at the peak, then
/// steps down by `decay_rate` every `decay_every` epochs inside the final
/// `decay_last_k_epochs` epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub decay_rate: f64,
    pub decay_every: usize,
    pub decay_last_k_epochs: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    /// Desk-scale recipe: small batches and an hour-free wall clock while
    /// keeping the warmup-then-step-decay shape.
    fn default() -> Self {
        TrainingConfig {
            batch_size: 64,
            epochs: 60,
            steps_per_epoch: 50,
            warmup_epochs: 10,
            peak_lr: 5e-4,
            decay_rate: 0.5,
            decay_every: 5,
            decay_last_k_epochs: 15,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config(
                "batch_size, epochs, and steps_per_epoch must be positive".into(),
            ));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup of {} epochs needs more than {} total",
                self.warmup_epochs, self.epochs
            )));
        }
        // peak_lr = 0 is allowed: it freezes the parameters, which is useful
        // as a control run.
        if !self.peak_lr.is_finite() || self.peak_lr < 0.0 {
            return Err(Error::Config(format!("peak_lr {} must be finite and >= 0", self.peak_lr)));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config(format!("decay_rate {} outside (0, 1]", self.decay_rate)));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be positive".into()));
        }
        if self.warmup_epochs + self.decay_last_k_epochs > self.epochs {
            return Err(Error::Config(format!(
                "decay window of {} epochs overlaps the {}-epoch warmup",
                self.decay_last_k_epochs, self.warmup_epochs
            )));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch index. The last warmup epoch lands
    /// exactly on `peak_lr`; the k-th decay block multiplies the peak by
    /// `decay_rate^k`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        assert!(
            epoch >= 1 && epoch <= self.epochs,
            "epoch {} outside 1..={}",
            epoch,
            self.epochs
        );
        if epoch <= self.warmup_epochs {
            return self.peak_lr * epoch as f64 / self.warmup_epochs as f64;
        }
        let decay_start = self.epochs - self.decay_last_k_epochs;
        if epoch > decay_start {
            let k = (epoch - decay_start - 1) / self.decay_every + 1;
            return self.peak_lr * self.decay_rate.powi(k as i32);
        }
        self.peak_lr
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Mean train accuracy over the epoch's batches; absent for the denoiser.
    pub accuracy: Option<f64>,
}

/// 4-layer MLP mapping the concatenated endpoint observations to task logits.
#[derive(Debug, Clone)]
pub struct TaskClassifier {
    obs_dim: usize,
    n_tasks: usize,
    /// (weight `[in, out]`, bias `[out]`) per layer, input to output.
    layers: Vec<(Tensor, Tensor)>,
}

/// Tape handles from one classifier forward pass, aligned with
/// [`TaskClassifier::params`] order.
pub struct ClassifierRun {
    pub logits: ValueId,
    pub param_ids: Vec<ValueId>,
}

impl TaskClassifier {
    pub fn new(obs_dim: usize, n_tasks: usize, seed: u64) -> Result<Self> {
        if obs_dim == 0 || n_tasks == 0 {
            return Err(Error::Config("classifier needs positive obs_dim and n_tasks".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths =
            [2 * obs_dim, CLASSIFIER_HIDDEN, CLASSIFIER_HIDDEN, CLASSIFIER_HIDDEN, n_tasks];
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let mut w = Tensor::randn(&[fan_in, fan_out], &mut rng);
            for v in w.data_mut() {
                *v *= scale;
            }
            layers.push((
                w.requires_grad(true),
                Tensor::zeros(&[fan_out]).requires_grad(true),
            ));
        }
        Ok(TaskClassifier { obs_dim, n_tasks, layers })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, (w, b)) in self.layers.iter().enumerate() {
            out.push((format!("layers.{}.w", i), w));
            out.push((format!("layers.{}.b", i), b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, (w, b)) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{}.w", i), w));
            out.push((format!("layers.{}.b", i), b));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records logits for a `[B, 2 * obs_dim]` feature batch.
    pub fn forward_batch(&self, tape: &mut Tape, x: &Tensor) -> Result<ClassifierRun> {
        if x.rank() != 2 || x.shape()[1] != 2 * self.obs_dim {
            return Err(Error::shape(
                "classifier",
                format!("expected input [B, {}], got {:?}", 2 * self.obs_dim, x.shape()),
            ));
        }
        let mut param_ids = Vec::with_capacity(2 * self.layers.len());
        let mut h = tape.constant(x.clone());
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let wid = tape.leaf(w.clone());
            let bid = tape.leaf(b.clone());
            param_ids.push(wid);
            param_ids.push(bid);
            h = tape.forward_op(OpKind::Matmul, &[h, wid])?;
            h = tape.forward_op(OpKind::Add, &[h, bid])?;
            if i != last {
                h = tape.forward_op(OpKind::Relu, &[h])?;
            }
        }
        Ok(ClassifierRun { logits: h, param_ids })
    }

    /// Raw logits for one (o_start, o_goal) pair.
    pub fn logits(&self, o_start: &[f64], o_goal: &[f64]) -> Result<Vec<f64>> {
        if o_start.len() != self.obs_dim || o_goal.len() != self.obs_dim {
            return Err(Error::shape(
                "classifier",
                format!(
                    "observations of {} and {} entries against obs_dim {}",
                    o_start.len(),
                    o_goal.len(),
                    self.obs_dim
                ),
            ));
        }
        let mut features = Vec::with_capacity(2 * self.obs_dim);
        features.extend_from_slice(o_start);
        features.extend_from_slice(o_goal);
        let x = Tensor::new(&[1, 2 * self.obs_dim], features)?;
        let mut tape = Tape::new();
        let run = self.forward_batch(&mut tape, &x)?;
        Ok(tape.value(run.logits).data().to_vec())
    }

    /// Predicted label plus the softmax distribution over tasks.
    pub fn predict(&self, o_start: &[f64], o_goal: &[f64]) -> Result<(usize, Vec<f64>)> {
        let logits = self.logits(o_start, o_goal)?;
        let probs = softmax(&logits);
        Ok((argmax(&probs), probs))
    }
}

/// Numerically stable softmax.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let peak = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - peak).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

/// Gradient buffers in parameter order; entries with no path to the loss
/// (possible only for unused parameters) fall back to zeros.
fn collect_grads(
    tape: &Tape,
    loss: ValueId,
    param_ids: &[ValueId],
) -> Result<Vec<Vec<f64>>> {
    let grads = tape.backward(loss)?;
    Ok(param_ids
        .iter()
        .map(|&id| {
            grads
                .get(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
        })
        .collect())
}

/// Fits the task classifier on the train split with cross-entropy loss.
///
/// Batches are sampled with replacement from a stream derived from
/// `config.seed`, so the run is a pure function of the dataset and config.
pub fn train_task_classifier(
    dataset: &ProcedureDataset,
    config: &TrainingConfig,
) -> Result<(TaskClassifier, Vec<EpochLog>)> {
    config.validate()?;
    let dims = dataset.dims();
    let windows: Vec<_> = dataset.train_windows().collect();
    if windows.is_empty() {
        return Err(Error::Data("no train windows to fit the classifier on".into()));
    }
    let mut features = Vec::with_capacity(windows.len() * 2 * dims.obs_dim);
    let mut labels = Vec::with_capacity(windows.len());
    for w in &windows {
        features.extend_from_slice(&w.o_start);
        features.extend_from_slice(&w.o_goal);
        labels.push(w.task);
    }

    let mut net = TaskClassifier::new(dims.obs_dim, dims.n_tasks, config.seed)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    batch_rng.set_stream(1);
    let mut opt = AdamW::new(0.0);
    let mut log = Vec::with_capacity(config.epochs);
    let width = 2 * dims.obs_dim;

    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for _ in 0..config.steps_per_epoch {
            let mut x = Vec::with_capacity(config.batch_size * width);
            let mut targets = Vec::with_capacity(config.batch_size);
            for _ in 0..config.batch_size {
                let pick = batch_rng.gen_range(0..windows.len());
                x.extend_from_slice(&features[pick * width..(pick + 1) * width]);
                targets.push(labels[pick]);
            }
            let x = Tensor::new(&[config.batch_size, width], x)?;
            let mut tape = Tape::new();
            let run = net.forward_batch(&mut tape, &x)?;
            let logits = tape.value(run.logits).data();
            for (row, &want) in targets.iter().enumerate() {
                let row = &logits[row * dims.n_tasks..(row + 1) * dims.n_tasks];
                if argmax(row) == want {
                    correct += 1;
                }
            }
            seen += targets.len();
            let loss =
                tape.forward_op(OpKind::CrossEntropy { targets }, &[run.logits])?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "classifier loss became {} at epoch {}",
                    loss_value, epoch
                )));
            }
            loss_sum += loss_value;
            let grads = collect_grads(&tape, loss, &run.param_ids)?;
            opt.step(&mut net.params_mut(), &grads, lr)?;
        }
        log.push(EpochLog {
            epoch,
            lr,
            loss: loss_sum / config.steps_per_epoch as f64,
            accuracy: Some(correct as f64 / seen as f64),
        });
    }
    Ok((net, log))
}

/// Fits the denoiser to predict the clean plan matrix from its noised form.
///
/// Every example draws its own diffusion step uniformly from `1..=N`, builds
/// the plan with the ground-truth task, and noises it under `mode`; the loss
/// is the mean squared error over the full matrix.
pub fn train_denoiser(
    dataset: &ProcedureDataset,
    schedule: &CosineSchedule,
    mode: MaskMode,
    net_config: &DenoiserConfig,
    config: &TrainingConfig,
) -> Result<(Denoiser, Vec<EpochLog>)> {
    config.validate()?;
    let dims = dataset.dims();
    if net_config.input_width != dims.width() || net_config.horizon != dims.horizon {
        return Err(Error::shape(
            "train",
            format!(
                "network is {}x{} but the dataset needs {}x{}",
                net_config.horizon,
                net_config.input_width,
                dims.horizon,
                dims.width()
            ),
        ));
    }
    let table = dataset.mask_table()?;
    let windows: Vec<_> = dataset.train_windows().collect();
    if windows.is_empty() {
        return Err(Error::Data("no train windows to fit the denoiser on".into()));
    }
    // Plans and masks are pure functions of the window; build them once.
    let mut prepared = Vec::with_capacity(windows.len());
    for w in &windows {
        let x0 = PlanMatrix::assemble(&dims, w.task, &w.actions, &w.o_start, &w.o_goal)?;
        let mask = build_mask(&w.actions, &table, mode)?;
        prepared.push((x0, mask));
    }

    let mut net = Denoiser::new(net_config.clone(), config.seed)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    batch_rng.set_stream(1);
    let mut opt = AdamW::new(0.0);
    let mut log = Vec::with_capacity(config.epochs);
    let (t, w) = (dims.horizon, dims.width());

    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        let mut loss_sum = 0.0;
        for _ in 0..config.steps_per_epoch {
            let b = config.batch_size;
            let mut x = vec![0.0; b * w * t];
            let mut target = vec![0.0; b * w * t];
            let mut steps = Vec::with_capacity(b);
            for slot in 0..b {
                let pick = batch_rng.gen_range(0..prepared.len());
                let n = batch_rng.gen_range(1..=schedule.n_steps());
                let (x0, mask) = &prepared[pick];
                let noised = q_sample(x0, n, schedule, mask, &mut batch_rng)?;
                steps.push(n);
                // [T, W] row-major into the batch buffer's [W, T] panel.
                let panel = slot * w * t;
                for row in 0..t {
                    for col in 0..w {
                        x[panel + col * t + row] = noised.data()[row * w + col];
                        target[panel + col * t + row] = x0.data()[row * w + col];
                    }
                }
            }
            let x = Tensor::new(&[b, w, t], x)?;
            let target = Tensor::new(&[b, w, t], target)?;
            let mut tape = Tape::new();
            let run = net.forward_batch(&mut tape, &x, &steps)?;
            let target = tape.constant(target);
            let loss = tape.forward_op(OpKind::Mse, &[run.output, target])?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "denoiser loss became {} at epoch {}",
                    loss_value, epoch
                )));
            }
            loss_sum += loss_value;
            let grads = collect_grads(&tape, loss, &run.param_ids)?;
            opt.step(&mut net.params_mut(), &grads, lr)?;
        }
        log.push(EpochLog {
            epoch,
            lr,
            loss: loss_sum / config.steps_per_epoch as f64,
            accuracy: None,
        });
    }
    Ok((net, log))
}

/// Reverse-posterior coefficients for every step, precomputed once per chain.
#[derive(Debug, Clone)]
pub struct ReverseStepParams {
    coef: Vec<ReverseCoefficients>,
}

impl ReverseStepParams {
    pub fn new(schedule: &CosineSchedule) -> Self {
        let coef = (1..=schedule.n_steps()).map(|n| schedule.reverse_coefficients(n)).collect();
        ReverseStepParams { coef }
    }

    pub fn n_steps(&self) -> usize {
        self.coef.len()
    }

    pub fn at(&self, n: usize) -> ReverseCoefficients {
        assert!(n >= 1 && n <= self.coef.len(), "step {} outside 1..={}", n, self.coef.len());
        self.coef[n - 1]
    }
}

/// One reverse diffusion step `x_n -> x_{n-1}`.
///
/// The predicted clean action block is clamped to `[-1, 1]`, combined with
/// the current state by the posterior coefficients, and perturbed by fresh
/// noise except at `n = 1`, where the step is deterministic. Conditioning is
/// re-imposed so the task and endpoint rows stay exact. Only the action block
/// changes; interior observation rows pass through.
pub fn reverse_step<R: Rng>(
    x_n: &PlanMatrix,
    x0_hat: &PlanMatrix,
    n: usize,
    params: &ReverseStepParams,
    cond: &Conditioning,
    rng: &mut R,
) -> Result<PlanMatrix> {
    let dims = *x_n.dims();
    if x0_hat.dims() != &dims {
        return Err(Error::shape("reverse_step", "state and prediction dims differ"));
    }
    if n == 0 || n > params.n_steps() {
        return Err(Error::Config(format!(
            "reverse step {} outside 1..={}",
            n,
            params.n_steps()
        )));
    }
    if let Some(bad) = x0_hat.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "denoiser produced {} at step {}",
            bad, n
        )));
    }
    let c = params.at(n);
    let mut out = x_n.clone();
    let width = dims.width();
    for row in 0..dims.horizon {
        for col in dims.action_cols() {
            let idx = row * width + col;
            let clean = x0_hat.data()[idx].clamp(-1.0, 1.0);
            let z: f64 = if n > 1 { rng.sample(StandardNormal) } else { 0.0 };
            out.data_mut()[idx] = c.coef_x0 * clean + c.coef_xn * x_n.data()[idx] + c.std * z;
        }
    }
    cond.impose(&dims, out.data_mut());
    Ok(out)
}

/// One planned query: the predicted label and plan next to the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub predicted_task: usize,
    pub plan: Vec<usize>,
    pub gt_task: usize,
    pub gt_plan: Vec<usize>,
}

/// Checks that the model trio agrees with the problem dimensions.
fn check_inference_setup(
    denoiser: &Denoiser,
    classifier: &TaskClassifier,
    stats: &NoiseStats,
    schedule: &CosineSchedule,
    dims: &ProblemDims,
) -> Result<()> {
    dims.validate()?;
    let cfg = denoiser.config();
    if cfg.input_width != dims.width() || cfg.horizon != dims.horizon {
        return Err(Error::shape(
            "infer",
            format!(
                "denoiser is {}x{} but the problem needs {}x{}",
                cfg.horizon,
                cfg.input_width,
                dims.horizon,
                dims.width()
            ),
        ));
    }
    if classifier.obs_dim() != dims.obs_dim || classifier.n_tasks() != dims.n_tasks {
        return Err(Error::shape(
            "infer",
            format!(
                "classifier maps {} features to {} tasks but the problem has {} and {}",
                classifier.obs_dim(),
                classifier.n_tasks(),
                dims.obs_dim,
                dims.n_tasks
            ),
        ));
    }
    stats.validate()?;
    if stats.horizon != dims.horizon {
        return Err(Error::shape(
            "infer",
            format!("noise stats cover horizon {}, problem has {}", stats.horizon, dims.horizon),
        ));
    }
    if stats.schedule.n_steps != schedule.n_steps() || stats.schedule.tau != schedule.tau() {
        return Err(Error::Config(format!(
            "noise stats were fitted on schedule (N={}, tau={}) but inference uses (N={}, tau={})",
            stats.schedule.n_steps,
            stats.schedule.tau,
            schedule.n_steps(),
            schedule.tau()
        )));
    }
    Ok(())
}

/// The starting state of the reverse chain: zeros everywhere, conditioning
/// imposed, and the action block drawn from the fitted noise statistics.
fn initial_state<R: Rng>(
    dims: &ProblemDims,
    cond: &Conditioning,
    stats: &NoiseStats,
    use_fitted_mean: bool,
    rng: &mut R,
) -> Result<PlanMatrix> {
    let mut data = vec![0.0; dims.horizon * dims.width()];
    cond.impose(dims, &mut data);
    let tensor = Tensor::new(&[dims.horizon, dims.width()], data)?;
    let mut x = PlanMatrix::from_tensor(dims, tensor)?;
    let noise = sample_inference_noise(stats, dims.n_actions, use_fitted_mean, rng)?;
    x.set_action_block(&noise);
    Ok(x)
}

/// Plans the action sequence between one pair of observations.
///
/// The classifier supplies the task label, the chain starts from noise shaped
/// by `stats`, and each of the `N` reverse steps re-imposes the conditioning.
/// The same models, inputs, and RNG state always produce the same plan.
#[allow(clippy::too_many_arguments)]
pub fn infer_plan<R: Rng>(
    denoiser: &Denoiser,
    classifier: &TaskClassifier,
    o_start: &[f64],
    o_goal: &[f64],
    stats: &NoiseStats,
    schedule: &CosineSchedule,
    dims: &ProblemDims,
    use_fitted_mean: bool,
    rng: &mut R,
) -> Result<(usize, Vec<usize>)> {
    check_inference_setup(denoiser, classifier, stats, schedule, dims)?;
    let (task, _probs) = classifier.predict(o_start, o_goal)?;
    let cond =
        Conditioning { task, o_start: o_start.to_vec(), o_goal: o_goal.to_vec() };
    cond.validate(dims)?;
    let params = ReverseStepParams::new(schedule);
    let mut x = initial_state(dims, &cond, stats, use_fitted_mean, rng)?;
    for n in (1..=schedule.n_steps()).rev() {
        let x0_hat = denoiser.predict_x0(&x, n)?;
        x = reverse_step(&x, &x0_hat, n, &params, &cond, rng)?;
    }
    Ok((task, x.decode_actions()))
}

/// Plans every test-split window and pairs predictions with ground truth.
///
/// Queries run through the denoiser in chunks of [`EVAL_CHUNK`], but each
/// query draws from its own RNG stream (`eval_seed`, stream = query index),
/// so the output is a pure function of models, dataset, and seed.
pub fn plan_test_split(
    denoiser: &Denoiser,
    classifier: &TaskClassifier,
    dataset: &ProcedureDataset,
    stats: &NoiseStats,
    schedule: &CosineSchedule,
    use_fitted_mean: bool,
    eval_seed: u64,
) -> Result<Vec<PlanRecord>> {
    let dims = dataset.dims();
    check_inference_setup(denoiser, classifier, stats, schedule, &dims)?;
    let windows: Vec<_> = dataset.test_windows().collect();
    if windows.is_empty() {
        return Err(Error::Data("no test windows to evaluate".into()));
    }
    let params = ReverseStepParams::new(schedule);
    let (t, w) = (dims.horizon, dims.width());
    let mut records = Vec::with_capacity(windows.len());

    for (chunk_index, chunk) in windows.chunks(EVAL_CHUNK).enumerate() {
        let b = chunk.len();
        let mut rngs = Vec::with_capacity(b);
        let mut conds = Vec::with_capacity(b);
        let mut x = vec![0.0; b * w * t];
        for (slot, window) in chunk.iter().enumerate() {
            let query = chunk_index * EVAL_CHUNK + slot;
            let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
            rng.set_stream(query as u64);
            let (task, _probs) = classifier.predict(&window.o_start, &window.o_goal)?;
            let cond = Conditioning {
                task,
                o_start: window.o_start.clone(),
                o_goal: window.o_goal.clone(),
            };
            let state = initial_state(&dims, &cond, stats, use_fitted_mean, &mut rng)?;
            let panel = slot * w * t;
            for row in 0..t {
                for col in 0..w {
                    x[panel + col * t + row] = state.data()[row * w + col];
                }
            }
            rngs.push(rng);
            conds.push(cond);
        }

        for n in (1..=schedule.n_steps()).rev() {
            let input = Tensor::new(&[b, w, t], x.clone())?;
            let mut tape = Tape::new();
            let run = denoiser.forward_batch(&mut tape, &input, &vec![n; b])?;
            let x0_hat = tape.value(run.output).data().to_vec();
            let c = params.at(n);
            for slot in 0..b {
                let panel = slot * w * t;
                for row in 0..t {
                    // Same entry visit order and draw count as reverse_step.
                    for col in dims.action_cols() {
                        let idx = panel + col * t + row;
                        let pred = x0_hat[idx];
                        if !pred.is_finite() {
                            return Err(Error::Numeric(format!(
                                "denoiser produced {} at step {}",
                                pred, n
                            )));
                        }
                        let clean = pred.clamp(-1.0, 1.0);
                        let z: f64 =
                            if n > 1 { rngs[slot].sample(StandardNormal) } else { 0.0 };
                        x[idx] = c.coef_x0 * clean + c.coef_xn * x[idx] + c.std * z;
                    }
                }
                impose_transposed(&dims, &conds[slot], &mut x[panel..panel + w * t]);
            }
        }

        for (slot, window) in chunk.iter().enumerate() {
            let panel = slot * w * t;
            let mut plan = Vec::with_capacity(t);
            for row in 0..t {
                let scores: Vec<f64> =
                    dims.action_cols().map(|col| x[panel + col * t + row]).collect();
                plan.push(argmax(&scores));
            }
            records.push(PlanRecord {
                predicted_task: conds[slot].task,
                plan,
                gt_task: window.task,
                gt_plan: window.actions.clone(),
            });
        }
    }
    Ok(records)
}

/// [`Conditioning::impose`] for one `[W, T]` column-major panel.
fn impose_transposed(dims: &ProblemDims, cond: &Conditioning, panel: &mut [f64]) {
    let t = dims.horizon;
    for col in dims.task_cols() {
        let hot = if col == cond.task { 1.0 } else { 0.0 };
        for row in 0..t {
            panel[col * t + row] = hot;
        }
    }
    for (i, col) in dims.obs_cols().enumerate() {
        for row in 0..t {
            panel[col * t + row] = if row == 0 {
                cond.o_start[i]
            } else if row == t - 1 {
                cond.o_goal[i]
            } else {
                0.0
            };
        }
    }
}
