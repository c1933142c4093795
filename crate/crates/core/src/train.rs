//! Soft-Dice training with Adam, the epoch loop, run directories and the
//! hyperparameter grid that selects ensemble members.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stack_25d, DatasetSplit, Exam, InputStack};
use crate::error::{Error, Result};
use crate::fuse::{binarize, Mask, DEFAULT_THRESHOLD};
use crate::metrics::dice;
use crate::net::{self, build_network_with_encoder, checkpoint, ModelParams, NetworkConfig, ProbabilityMap};

/// Members taken from the top of the grid.
pub const ENSEMBLE_SIZE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DicePooling {
    /// One Dice ratio over every pixel of the batch.
    #[default]
    Batch,
    /// Mean of per-sample Dice losses.
    PerSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub smoothing_epsilon: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub dice_pooling: DicePooling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            batch_size: 12,
            epochs: 50,
            seed: 0,
            smoothing_epsilon: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            dice_pooling: DicePooling::Batch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.smoothing_epsilon > 0.0) {
            return Err(Error::Config("smoothing_epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rates {1e-4, 2e-4, 5e-4} crossed with seeds {0, 1}, batch size 12.
pub fn default_grid(epochs: usize) -> Vec<TrainConfig> {
    [1e-4, 2e-4, 5e-4]
        .iter()
        .flat_map(|&lr| {
            (0..2).map(move |seed| TrainConfig {
                learning_rate: lr,
                seed,
                epochs,
                ..TrainConfig::default()
            })
        })
        .collect()
}

/// `1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)` over one pool of pixels.
pub fn soft_dice(pred: &[f64], target: &[f64], epsilon: f64) -> f64 {
    let (i, s) = pred
        .iter()
        .zip(target)
        .fold((0.0, 0.0), |(i, s), (&p, &t)| (i + p * t, s + p + t));
    1.0 - (2.0 * i + epsilon) / (s + epsilon)
}

/// Batch-pooled soft-Dice loss of probability maps against binary masks.
pub fn soft_dice_loss(probs: &[ProbabilityMap], targets: &[Mask], epsilon: f64) -> Result<f64> {
    let p: Vec<&[f64]> = probs.iter().map(|p| p.values.as_slice()).collect();
    let t: Vec<&[u8]> = targets.iter().map(|t| t.values.as_slice()).collect();
    Ok(soft_dice_loss_grad(&p, &t, epsilon, DicePooling::Batch)?.0)
}

/// Soft-Dice loss and its gradient with respect to every probability.
pub fn soft_dice_loss_grad(
    probs: &[&[f64]],
    targets: &[&[u8]],
    epsilon: f64,
    pooling: DicePooling,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::Shape(format!(
            "{} probability maps for {} targets",
            probs.len(),
            targets.len()
        )));
    }
    for (i, (p, t)) in probs.iter().zip(targets).enumerate() {
        if p.len() != t.len() {
            return Err(Error::Shape(format!("sample {i}: {} probabilities for {} target pixels", p.len(), t.len())));
        }
    }
    let terms = |p: &[f64], t: &[u8]| -> (f64, f64) {
        p.iter().zip(t).fold((0.0, 0.0), |(i, s), (&p, &t)| {
            let t = t as f64;
            (i + p * t, s + p + t)
        })
    };
    // dL/dp_j = -(2 t_j (S + eps) - (2 I + eps)) / (S + eps)^2
    let grad_of = |p: &[f64], t: &[u8], i: f64, s: f64, scale: f64| -> Vec<f64> {
        let den = s + epsilon;
        let num = 2.0 * i + epsilon;
        let inv = scale / (den * den);
        p.iter()
            .zip(t)
            .map(|(_, &t)| -(2.0 * t as f64 * den - num) * inv)
            .collect()
    };
    match pooling {
        DicePooling::Batch => {
            let (i, s) = probs
                .iter()
                .zip(targets)
                .map(|(p, t)| terms(p, t))
                .fold((0.0, 0.0), |(a, b), (i, s)| (a + i, b + s));
            let loss = 1.0 - (2.0 * i + epsilon) / (s + epsilon);
            let grads = probs.iter().zip(targets).map(|(p, t)| grad_of(p, t, i, s, 1.0)).collect();
            Ok((loss, grads))
        }
        DicePooling::PerSample => {
            let n = probs.len() as f64;
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(probs.len());
            for (p, t) in probs.iter().zip(targets) {
                let (i, s) = terms(p, t);
                loss += (1.0 - (2.0 * i + epsilon) / (s + epsilon)) / n;
                grads.push(grad_of(p, t, i, s, 1.0 / n));
            }
            Ok((loss, grads))
        }
    }
}

/// Adam first/second moments per parameter array, in `named_params` order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = model.named_params().iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        OptimizerState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `model` from `grads`; updated weights
/// stay on the `f32` grid so checkpoints store them exactly.
pub fn adam_update(model: &mut ModelParams, grads: &ModelParams, opt: &mut OptimizerState, cfg: &TrainConfig) {
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    let lr = cfg.learning_rate;
    let grads = grads.named_params();
    for (((_, p), (_, g)), (m, v)) in model
        .params_mut()
        .into_iter()
        .zip(grads)
        .zip(opt.first_moment.iter_mut().zip(opt.second_moment.iter_mut()))
    {
        for (((w, &g), m), v) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.adam_beta1 * *m + (1.0 - cfg.adam_beta1) * g;
            *v = cfg.adam_beta2 * *v + (1.0 - cfg.adam_beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w = (*w - lr * mhat / (vhat.sqrt() + cfg.adam_eps)) as f32 as f64;
        }
    }
}

/// Loss and parameter gradient of the configured soft-Dice loss over one batch.
pub fn loss_and_gradient(
    model: &ModelParams,
    batch: &[(&InputStack, &Mask)],
    cfg: &TrainConfig,
) -> Result<(f64, ModelParams)> {
    let mut traces = Vec::with_capacity(batch.len());
    for (stack, mask) in batch {
        if (mask.height, mask.width) != (stack.height, stack.width) {
            return Err(Error::Shape(format!(
                "mask {}x{} does not match input {}x{}",
                mask.height, mask.width, stack.height, stack.width
            )));
        }
        traces.push(net::forward_traced(model, stack)?.1);
    }
    let probs: Vec<&[f64]> = traces.iter().map(|t| t.probabilities()).collect();
    let targets: Vec<&[u8]> = batch.iter().map(|(_, m)| m.values.as_slice()).collect();
    let (loss, dprobs) = soft_dice_loss_grad(&probs, &targets, cfg.smoothing_epsilon, cfg.dice_pooling)?;
    let mut grads = model.zeros_like();
    for (trace, d) in traces.iter().zip(&dprobs) {
        net::backward(model, trace, d, &mut grads)?;
    }
    Ok((loss, grads))
}

/// One forward/backward pass and Adam update; returns the batch loss.
pub fn train_step(
    model: &mut ModelParams,
    opt: &mut OptimizerState,
    batch: &[(InputStack, Mask)],
    cfg: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty training batch".into()));
    }
    let refs: Vec<(&InputStack, &Mask)> = batch.iter().map(|(s, m)| (s, m)).collect();
    train_step_refs(model, opt, &refs, cfg, 0)
}

fn train_step_refs(
    model: &mut ModelParams,
    opt: &mut OptimizerState,
    batch: &[(&InputStack, &Mask)],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let (loss, grads) = loss_and_gradient(model, batch, cfg)?;
    let divergence = |reason: String| Error::Divergence {
        epoch,
        step: opt.step as usize + 1,
        reason,
    };
    if !loss.is_finite() {
        return Err(divergence(format!("loss is {loss}")));
    }
    if let Some((name, _)) = grads
        .named_params()
        .into_iter()
        .find(|(_, g)| g.data.iter().any(|v| !v.is_finite()))
    {
        return Err(divergence(format!("non-finite gradient in {name}")));
    }
    adam_update(model, &grads, opt, cfg);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub wall_seconds: f64,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_dice,seconds\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{},{},{:.3}", r.epoch, r.train_loss, r.val_dice, r.seconds);
        }
        s
    }
}

/// Outcome of [`fit`]: the best-validation and final models.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: ModelParams,
    pub final_model: ModelParams,
    pub best_val_dice: f64,
    /// Epoch that produced `best`; 0 means the initialization.
    pub best_epoch: usize,
    pub history: TrainHistory,
}

/// A labelled training example: 2.5D stack and the centre slice's mask.
pub type Sample = (InputStack, Mask);

/// Stacks and masks for the listed `(exam_id, slice)` pairs.
pub fn build_samples(exams: &[Exam], refs: &[(String, usize)]) -> Result<Vec<Sample>> {
    let by_id: HashMap<&str, &Exam> = exams.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut normalized: HashMap<&str, Exam> = HashMap::new();
    let mut out = Vec::with_capacity(refs.len());
    for (id, idx) in refs {
        let exam = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Consistency(format!("split references unknown exam {id}")))?;
        let masks = exam
            .masks
            .as_ref()
            .ok_or_else(|| Error::Consistency(format!("exam {id} has no reference masks")))?;
        let norm = normalized.entry(exam.id.as_str()).or_insert_with(|| exam.normalized());
        let stack = stack_25d(norm, *idx)?;
        let mask = masks[*idx].clone().with_origin(id, *idx);
        out.push((stack, mask));
    }
    Ok(out)
}

/// Mean per-slice Dice of thresholded predictions.
pub fn mean_dice(model: &ModelParams, samples: &[Sample], threshold: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Precondition("no samples to score".into()));
    }
    let mut total = 0.0;
    for (stack, mask) in samples {
        let pred = binarize(&net::forward(model, stack)?, threshold);
        total += dice(&pred, mask)?;
    }
    Ok(total / samples.len() as f64)
}

/// Epoch loop over prepared samples with seeded shuffling and best-validation retention.
pub fn fit_samples(
    model: ModelParams,
    train: &[Sample],
    validation: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Config("fit needs non-empty training and validation sets".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(&model);
    let mut best_val_dice = mean_dice(&model, validation, DEFAULT_THRESHOLD)?;
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut current = model;
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&InputStack, &Mask)> = chunk.iter().map(|&i| (&train[i].0, &train[i].1)).collect();
            loss_sum += train_step_refs(&mut current, &mut opt, &batch, cfg, epoch)?;
            batches += 1;
        }
        let val_dice = mean_dice(&current, validation, DEFAULT_THRESHOLD)?;
        if val_dice > best_val_dice {
            best_val_dice = val_dice;
            best = current.clone();
            best_epoch = epoch;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_dice,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    history.wall_seconds = start.elapsed().as_secs_f64();
    Ok(FitOutcome {
        best,
        final_model: current,
        best_val_dice,
        best_epoch,
        history,
    })
}

/// Trains on `split.train`, selecting the checkpoint with the best Dice on `split.validation`.
pub fn fit(model: ModelParams, split: &DatasetSplit, exams: &[Exam], cfg: &TrainConfig) -> Result<FitOutcome> {
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::Config("split has an empty training or validation partition".into()));
    }
    let train = build_samples(exams, &split.train)?;
    let validation = build_samples(exams, &split.validation)?;
    fit_samples(model, &train, &validation, cfg, |_| {})
}

/// Writes `config.json`, `history.csv`, `best.ckpt` and `final.ckpt` into `dir`.
pub fn write_run_dir(dir: &Path, cfg: &TrainConfig, outcome: &FitOutcome) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join("config.json");
    let text = serde_json::to_string_pretty(cfg).expect("train config serializes");
    fs::write(&cfg_path, text + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    let hist_path = dir.join("history.csv");
    fs::write(&hist_path, outcome.history.to_csv()).map_err(|e| Error::io(&hist_path, e))?;
    let best = dir.join("best.ckpt");
    checkpoint::save(&outcome.best, &best)?;
    checkpoint::save(&outcome.final_model, &dir.join("final.ckpt"))?;
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRun {
    pub run_id: String,
    pub config: TrainConfig,
    pub checkpoint_path: PathBuf,
    pub best_val_dice: f64,
}

/// Grid runs sorted by best validation Dice, highest first.
#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub runs: Vec<GridRun>,
}

impl GridResult {
    pub fn ensemble_members(&self) -> &[GridRun] {
        &self.runs[..ENSEMBLE_SIZE.min(self.runs.len())]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("run_id,learning_rate,batch_size,seed,best_val_dice,checkpoint_path\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.run_id,
                r.config.learning_rate,
                r.config.batch_size,
                r.config.seed,
                r.best_val_dice,
                r.checkpoint_path.display()
            );
        }
        s
    }
}

/// Fits one model per grid entry (initialized from the entry's seed) and
/// ranks the runs. Run directories go to `out_dir/runs/run_NNN`, the summary
/// to `out_dir/grid.csv`.
pub fn run_grid(
    grid: &[TrainConfig],
    network: &NetworkConfig,
    split: &DatasetSplit,
    exams: &[Exam],
    out_dir: &Path,
    on_epoch: impl FnMut(&str, &EpochRecord),
) -> Result<GridResult> {
    run_grid_with_encoder(grid, network, None, split, exams, out_dir, on_epoch)
}

/// [`run_grid`] with every member's encoder loaded from `encoder` when given.
pub fn run_grid_with_encoder(
    grid: &[TrainConfig],
    network: &NetworkConfig,
    encoder: Option<&Path>,
    split: &DatasetSplit,
    exams: &[Exam],
    out_dir: &Path,
    mut on_epoch: impl FnMut(&str, &EpochRecord),
) -> Result<GridResult> {
    if grid.len() < ENSEMBLE_SIZE {
        return Err(Error::Config(format!(
            "grid has {} configurations; the ensemble needs at least {ENSEMBLE_SIZE}",
            grid.len()
        )));
    }
    for cfg in grid {
        cfg.validate()?;
    }
    network.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::Config("split has an empty training or validation partition".into()));
    }
    let train = build_samples(exams, &split.train)?;
    let validation = build_samples(exams, &split.validation)?;

    let mut runs = Vec::with_capacity(grid.len());
    for (i, cfg) in grid.iter().enumerate() {
        let run_id = format!("run_{i:03}");
        let model = build_network_with_encoder(network, cfg.seed, encoder)?;
        let outcome = fit_samples(model, &train, &validation, cfg, |r| on_epoch(&run_id, r))?;
        let checkpoint_path = write_run_dir(&out_dir.join("runs").join(&run_id), cfg, &outcome)?;
        runs.push(GridRun {
            run_id,
            config: cfg.clone(),
            checkpoint_path,
            best_val_dice: outcome.best_val_dice,
        });
    }
    runs.sort_by(|a, b| b.best_val_dice.total_cmp(&a.best_val_dice).then_with(|| a.run_id.cmp(&b.run_id)));
    let result = GridResult { runs };
    let csv = out_dir.join("grid.csv");
    fs::write(&csv, result.to_csv()).map_err(|e| Error::io(&csv, e))?;
    Ok(result)
}
