//! Mixed-batch Adam training with early stopping, and the nine-way ablation.
//!
//! A step takes `K` labelled samples in epoch order plus, when ranking is
//! enabled, `K` ranked pairs. Every per-sample forward/backward is
//! independent once the batch loss sensitivities are known, so they run in
//! parallel and are reduced in index order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment;
use crate::error::{Error, Result};
use crate::evaluation;
use crate::imagedata::LabeledSample;
use crate::losses::{total_loss, AblationRow, BatchLoss, CountPrediction, LossComponents, LossConfig};
use crate::network::checkpoint::{Checkpoint, OptimizerState};
use crate::network::{backward, channel_means, forward, init, predict, ImageTensor, ModelConfig, ModelParams, OutputGrad, Params, Scalar};
use crate::par;
use crate::rankpairs::PairSource;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Labelled samples (and pairs) per step.
    pub batch_size: usize,
    pub epochs: u32,
    pub lr: f64,
    /// Epoch from which `lr_after_drop` applies.
    pub lr_drop_epoch: u32,
    pub lr_after_drop: f64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    /// Epochs without a new best validation MAE before stopping.
    pub patience: u32,
    pub seed: u64,
    pub init_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            epochs: 60,
            lr: 1e-4,
            lr_drop_epoch: 200,
            lr_after_drop: 1e-5,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            patience: 20,
            seed: 0,
            init_from: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr_after_drop > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        self.loss.validate()
    }

    /// Learning rate used after `completed_epochs` epochs.
    pub fn lr_at(&self, completed_epochs: u32) -> f64 {
        if completed_epochs >= self.lr_drop_epoch {
            self.lr_after_drop
        } else {
            self.lr
        }
    }
}

/// One Adam update with bias correction, in place.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(w: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f32], step: u64, lr: f64, cfg: &AdamConfig) {
    let b1c = 1.0 - cfg.beta1.powf(step as f64);
    let b2c = 1.0 - cfg.beta2.powf(step as f64);
    for i in 0..w.len() {
        let gi = g[i] as f64;
        let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
        let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let update = lr * (mi / b1c) / ((vi / b2c).sqrt() + cfg.eps);
        w[i] = (w[i] as f64 - update) as f32;
    }
}

/// Applies one Adam step to every trainable tensor. Nothing is modified
/// when any gradient is non-finite.
pub fn adam_step(params: &mut ModelParams, state: &mut OptimizerState, grads: &ModelParams, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    state.step += 1;
    state.lr = lr;
    for (i, t) in params.tensors.iter_mut().enumerate() {
        if t.trainable {
            adam_update(&mut t.data, &mut state.m[i], &mut state.v[i], &grads.tensors[i].data, state.step, lr, cfg);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub epoch: u32,
    /// Indices into the labelled pool.
    pub labelled: Vec<usize>,
    /// Indices into the pair pool.
    pub pairs: Vec<usize>,
}

pub fn steps_per_epoch(n_labelled: usize, k: usize) -> usize {
    n_labelled.div_ceil(k)
}

/// Seeded permutation of the labelled pool for one epoch.
pub fn epoch_order(n_labelled: usize, seed: u64, epoch: u32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_labelled).collect();
    order.shuffle(&mut seed::rng(seed, "epoch", epoch as u64));
    order
}

/// Batch for global step `step`. Labelled samples walk the epoch's
/// permutation; pairs are drawn without replacement when the pool holds at
/// least `k` pairs and with replacement otherwise.
pub fn compose_batch(n_labelled: usize, n_pairs: Option<usize>, k: usize, step: u64, seed: u64) -> Result<Batch> {
    if n_labelled == 0 {
        return Err(Error::Config("labelled pool is empty".into()));
    }
    if k == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let spe = steps_per_epoch(n_labelled, k) as u64;
    let epoch = (step / spe) as u32;
    let within = (step % spe) as usize;
    let order = epoch_order(n_labelled, seed, epoch);
    let labelled = order[within * k..((within + 1) * k).min(n_labelled)].to_vec();
    let pairs = match n_pairs {
        None => Vec::new(),
        Some(0) => return Err(Error::Config("ranking enabled but the pair pool is empty".into())),
        Some(n) => {
            let mut rng = seed::rng(seed, "batch-pairs", step);
            if n >= k {
                rand::seq::index::sample(&mut rng, n, k).into_vec()
            } else {
                (0..k).map(|_| rng.random_range(0..n)).collect()
            }
        }
    };
    Ok(Batch { epoch, labelled, pairs })
}

/// Network inputs of one step.
#[derive(Debug, Clone, Default)]
pub struct BatchInput<T> {
    /// Image and true count.
    pub labelled: Vec<(ImageTensor<T>, f64)>,
    /// `(first, second)`; the first should not score below the second.
    pub pairs: Vec<(ImageTensor<T>, ImageTensor<T>)>,
}

/// Batch loss and its gradient with respect to every tensor.
pub fn loss_and_gradient<T: Scalar>(params: &Params<T>, loss: &LossConfig, batch: &BatchInput<T>) -> Result<(BatchLoss, Params<T>)> {
    let n_l = batch.labelled.len();
    let n_p = if loss.use_rank { batch.pairs.len() } else { 0 };
    let image = |i: usize| -> &ImageTensor<T> {
        if i < n_l {
            &batch.labelled[i].0
        } else {
            let j = i - n_l;
            if j % 2 == 0 {
                &batch.pairs[j / 2].0
            } else {
                &batch.pairs[j / 2].1
            }
        }
    };
    let n_items = n_l + 2 * n_p;
    let forwards: Vec<_> = par::map_indices(n_items, |i| forward(params, image(i))).into_iter().collect::<Result<_>>()?;

    let labelled: Vec<CountPrediction> = (0..n_l)
        .map(|i| CountPrediction { c: batch.labelled[i].1, c_hat: forwards[i].0.count(), logvar: forwards[i].0.logvar() })
        .collect();
    let pairs: Vec<(f64, f64)> = (0..n_p).map(|k| (forwards[n_l + 2 * k].0.gap_count(), forwards[n_l + 2 * k + 1].0.gap_count())).collect();
    let out = total_loss(loss, &labelled, &pairs)?;

    let item_grads = par::map_indices(n_items, |i| {
        let d = if i < n_l {
            OutputGrad { d_count: out.d_c_hat[i], d_logvar: out.d_logvar[i], d_gap: 0.0 }
        } else {
            let j = i - n_l;
            let d_gap = if j % 2 == 0 { out.d_p_first[j / 2] } else { out.d_p_second[j / 2] };
            OutputGrad { d_gap, ..Default::default() }
        };
        let mut g = params.zeros_like();
        if d != OutputGrad::default() {
            backward(params, &forwards[i].1, &d, &mut g);
        }
        g
    });
    let mut grads = params.zeros_like();
    for g in &item_grads {
        grads.add_scaled(g, T::one());
    }
    Ok((out, grads))
}

/// Datasets for one training run.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [LabeledSample],
    pub val: &'a [LabeledSample],
    pub pairs: Option<&'a dyn PairSource>,
}

/// Where a run starts from.
#[derive(Debug, Clone)]
pub enum TrainStart {
    /// Fresh initialization, or `init_from` when the config sets it.
    Fresh,
    /// Given weights with a fresh optimizer.
    Params(ModelParams),
    /// Continue a saved run, optimizer and early-stopping state included.
    Resume(Checkpoint),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    /// Mean per batch.
    pub components: LossComponents,
    pub total: f64,
    pub val_mae: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunMeta {
    best_val_mae: f64,
    best_epoch: u32,
    bad_epochs: u32,
    history: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation MAE seen.
    pub best: ModelParams,
    pub best_val_mae: f64,
    pub best_epoch: u32,
    pub history: Vec<EpochRecord>,
    /// State after the last completed epoch, suitable for resuming.
    pub last: Checkpoint,
    pub stopped_early: bool,
}

impl TrainOutcome {
    /// Checkpoint holding the best parameters.
    pub fn best_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.best.clone(), OptimizerState::new(&self.best, self.last.optimizer.lr), self.best_epoch);
        ck.meta = serde_json::json!({ "best_val_mae": self.best_val_mae, "best_epoch": self.best_epoch });
        ck
    }
}

pub fn validation_mae(params: &ModelParams, val: &[LabeledSample]) -> Result<f64> {
    let errs = par::map_indices(val.len(), |i| -> Result<f64> {
        let out = predict(params, &ImageTensor::from_rgb(&val[i].image.pixels))?;
        Ok((out.count() - val[i].count() as f64).abs())
    });
    let errs: Vec<f64> = errs.into_iter().collect::<Result<_>>()?;
    if errs.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

pub fn train(config: &TrainConfig, model: &ModelConfig, data: TrainData<'_>, start: TrainStart) -> Result<TrainOutcome> {
    train_with(config, model, data, start, &mut |_| Ok(()))
}

/// As [`train`], calling `on_epoch` with the resumable state after every
/// epoch. On divergence the error is returned and the last state passed to
/// `on_epoch` is the last good one.
pub fn train_with(
    config: &TrainConfig,
    model: &ModelConfig,
    data: TrainData<'_>,
    start: TrainStart,
    on_epoch: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let pair_count = if config.loss.use_rank {
        match data.pairs {
            Some(p) if !p.is_empty() => Some(p.len()),
            _ => return Err(Error::Config("ranking loss enabled but no pairs were supplied".into())),
        }
    } else {
        None
    };

    let start = match (start, &config.init_from) {
        (TrainStart::Fresh, Some(path)) => TrainStart::Params(Checkpoint::load(path, Some(model))?.params),
        (s, _) => s,
    };
    let (mut params, mut opt, mut epoch, mut meta, mut best) = match start {
        TrainStart::Resume(ck) => {
            if ck.params.config != *model {
                return Err(Error::Config("resume checkpoint was trained with a different model config".into()));
            }
            let meta: RunMeta = serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Config(format!("resume metadata: {e}")))?;
            let best = ck.best.clone().unwrap_or_else(|| ck.params.clone());
            (ck.params, ck.optimizer, ck.epoch, meta, best)
        }
        other => {
            let params = match other {
                TrainStart::Params(p) => {
                    if p.config != *model {
                        return Err(Error::Config("initial weights use a different model config".into()));
                    }
                    p
                }
                _ => {
                    let mut p = init(model, seed::derive(config.seed, "init", 0))?;
                    p.set_input_mean(channel_means(data.train.iter().map(|s| &s.image.pixels)));
                    p
                }
            };
            let val = validation_mae(&params, data.val)?;
            let meta = RunMeta { best_val_mae: val, best_epoch: 0, bad_epochs: 0, history: Vec::new() };
            let opt = OptimizerState::new(&params, config.lr_at(0));
            (params.clone(), opt, 0, meta, params)
        }
    };

    let k = config.batch_size;
    let spe = steps_per_epoch(data.train.len(), k) as u64;
    let mut stopped_early = false;
    while epoch < config.epochs {
        if meta.bad_epochs >= config.patience {
            stopped_early = true;
            break;
        }
        let lr = config.lr_at(epoch);
        let mut sums = LossComponents::default();
        let mut total = 0.0;
        for s in 0..spe {
            let step = epoch as u64 * spe + s;
            let batch = compose_batch(data.train.len(), pair_count, k, step, config.seed)?;
            let input = BatchInput {
                labelled: batch.labelled.iter().map(|&i| (ImageTensor::from_rgb(&data.train[i].image.pixels), data.train[i].count() as f64)).collect(),
                pairs: match data.pairs {
                    Some(src) if config.loss.use_rank => batch
                        .pairs
                        .iter()
                        .map(|&i| {
                            let (a, b) = src.pair(i);
                            (ImageTensor::from_rgb(&a), ImageTensor::from_rgb(&b))
                        })
                        .collect(),
                    _ => Vec::new(),
                },
            };
            let diverged = Error::Diverged { epoch, step };
            let (loss, grads) = match loss_and_gradient(&params, &config.loss, &input) {
                Ok(v) => v,
                Err(Error::Loss(_)) => return Err(diverged),
                Err(e) => return Err(e),
            };
            if !loss.total.is_finite() {
                return Err(diverged);
            }
            if adam_step(&mut params, &mut opt, &grads, lr, &config.adam).is_err() || params.first_non_finite().is_some() {
                return Err(diverged);
            }
            sums.l_c += loss.components.l_c;
            sums.l_cau += loss.components.l_cau;
            sums.l_r += loss.components.l_r;
            sums.l_ieb += loss.components.l_ieb;
            total += loss.total;
        }
        epoch += 1;
        let n = spe as f64;
        let val_mae = validation_mae(&params, data.val)?;
        meta.history.push(EpochRecord {
            epoch,
            components: LossComponents { l_c: sums.l_c / n, l_cau: sums.l_cau / n, l_r: sums.l_r / n, l_ieb: sums.l_ieb / n },
            total: total / n,
            val_mae,
            lr,
        });
        if val_mae < meta.best_val_mae {
            meta.best_val_mae = val_mae;
            meta.best_epoch = epoch;
            meta.bad_epochs = 0;
            best = params.clone();
        } else {
            meta.bad_epochs += 1;
        }
        opt.lr = config.lr_at(epoch);
        on_epoch(&snapshot(&params, &opt, epoch, &meta, &best))?;
    }
    let last = snapshot(&params, &opt, epoch, &meta, &best);
    Ok(TrainOutcome { best, best_val_mae: meta.best_val_mae, best_epoch: meta.best_epoch, history: meta.history, last, stopped_early })
}

fn snapshot(params: &ModelParams, opt: &OptimizerState, epoch: u32, meta: &RunMeta, best: &ModelParams) -> Checkpoint {
    let mut ck = Checkpoint::new(params.clone(), opt.clone(), epoch);
    ck.meta = serde_json::to_value(meta).expect("metadata serializes");
    ck.best = Some(best.clone());
    ck
}

pub const HISTORY_HEADER: [&str; 8] = ["epoch", "L_c", "L_cau", "L_r", "L_ieb", "total", "val_MAE", "lr"];

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HISTORY_HEADER).expect("in-memory write");
    for r in history {
        let c = &r.components;
        w.write_record([
            r.epoch.to_string(),
            c.l_c.to_string(),
            c.l_cau.to_string(),
            c.l_r.to_string(),
            c.l_ieb.to_string(),
            r.total.to_string(),
            r.val_mae.to_string(),
            r.lr.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// Settings of the nine-way ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub rows: Vec<AblationRow>,
    pub trials: usize,
    pub seed: u64,
    pub model: ModelConfig,
    /// Training settings of rows (i)-(iv); the loss flags come from the row.
    pub uni_task: TrainConfig,
    /// Training settings of rows (v)-(ix).
    pub multi_task: TrainConfig,
    /// Size of the augmented labelled set.
    pub augment_target: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            rows: AblationRow::ALL.to_vec(),
            trials: 3,
            seed: 0,
            model: ModelConfig::default(),
            uni_task: TrainConfig { epochs: 60, ..TrainConfig::default() },
            multi_task: TrainConfig { epochs: 40, ..TrainConfig::default() },
            augment_target: 1050,
        }
    }
}

impl AblationConfig {
    pub fn trial_seed(&self, trial: usize) -> u64 {
        seed::derive(self.seed, "trial", trial as u64)
    }

    /// Training settings for one row and trial.
    pub fn train_config(&self, row: AblationRow, trial: usize) -> TrainConfig {
        let base = if row.augmented() { &self.multi_task } else { &self.uni_task };
        let flags = row.loss_config();
        TrainConfig {
            loss: LossConfig { use_au: flags.use_au, use_rank: flags.use_rank, use_ieb: flags.use_ieb, ..base.loss },
            seed: self.trial_seed(trial),
            init_from: None,
            ..base.clone()
        }
    }
}

/// Labelled splits and the unlabelled pair pool used by every trial.
#[derive(Clone, Copy)]
pub struct AblationData<'a> {
    pub train: &'a [LabeledSample],
    pub val: &'a [LabeledSample],
    pub test: &'a [LabeledSample],
    pub pairs: &'a dyn PairSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRowResult {
    pub row: AblationRow,
    pub trials: Vec<std::result::Result<TrialResult, String>>,
}

impl AblationRowResult {
    fn average(&self, f: impl Fn(&TrialResult) -> f64) -> Option<f64> {
        let ok: Vec<f64> = self.trials.iter().filter_map(|t| t.as_ref().ok()).map(f).collect();
        (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
    }

    pub fn mean_mae(&self) -> Option<f64> {
        self.average(|t| t.mae)
    }

    pub fn mean_rmse(&self) -> Option<f64> {
        self.average(|t| t.rmse)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub trials: usize,
    pub rows: Vec<AblationRowResult>,
}

impl AblationTable {
    pub fn row(&self, row: AblationRow) -> Option<&AblationRowResult> {
        self.rows.iter().find(|r| r.row == row)
    }

    /// One line per method: averages and per-trial MAE, then RMSE.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["row".to_string(), "method".to_string(), "init_from".to_string(), "MAE_avg".to_string()];
        header.extend((1..=self.trials).map(|t| format!("MAE_trial{t}")));
        header.push("RMSE_avg".into());
        header.extend((1..=self.trials).map(|t| format!("RMSE_trial{t}")));
        header.push("failures".into());
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&header).expect("in-memory write");
        let cell = |v: Option<f64>| v.map_or_else(|| "failed".to_string(), |x| x.to_string());
        for r in &self.rows {
            let mut rec = vec![r.row.numeral().to_string(), r.row.method().to_string(), r.row.init_from().map_or("fresh", |i| i.numeral()).to_string()];
            rec.push(cell(r.mean_mae()));
            rec.extend(r.trials.iter().map(|t| cell(t.as_ref().ok().map(|t| t.mae))));
            rec.push(cell(r.mean_rmse()));
            rec.extend(r.trials.iter().map(|t| cell(t.as_ref().ok().map(|t| t.rmse))));
            let errors: Vec<String> = r.trials.iter().enumerate().filter_map(|(i, t)| t.as_ref().err().map(|e| format!("trial{}: {e}", i + 1))).collect();
            rec.push(errors.join("; "));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub table: AblationTable,
    /// Best parameters per `(row, trial)` that trained successfully.
    pub models: BTreeMap<(AblationRow, usize), ModelParams>,
}

/// Trains the requested rows, plus the rows they are initialized from, for
/// every trial. A failed trial is recorded and the suite continues; rows
/// that depend on it fail with a note.
pub fn run_ablation_suite(config: &AblationConfig, data: AblationData<'_>, progress: &mut dyn FnMut(&str)) -> Result<AblationOutcome> {
    config.model.validate()?;
    if config.trials == 0 {
        return Err(Error::Config("at least one trial is required".into()));
    }
    let mut needed: BTreeSet<AblationRow> = BTreeSet::new();
    for &r in &config.rows {
        let mut cur = Some(r);
        while let Some(x) = cur {
            needed.insert(x);
            cur = x.init_from();
        }
    }
    let mut results: BTreeMap<AblationRow, Vec<std::result::Result<TrialResult, String>>> = BTreeMap::new();
    let mut models = BTreeMap::new();
    for trial in 0..config.trials {
        let trial_seed = config.trial_seed(trial);
        let augmented = if needed.iter().any(|r| r.augmented()) {
            Some(augment::augment_dataset(data.train, config.augment_target.max(data.train.len()), trial_seed)?)
        } else {
            None
        };
        for &row in &needed {
            let cfg = config.train_config(row, trial);
            let start = match row.init_from() {
                None => Ok(TrainStart::Fresh),
                Some(parent) => models
                    .get(&(parent, trial))
                    .cloned()
                    .map(TrainStart::Params)
                    .ok_or_else(|| format!("initializing row ({}) is unavailable", parent.numeral())),
            };
            let train_set = if row.augmented() { augmented.as_deref().unwrap_or(data.train) } else { data.train };
            let td = TrainData { train: train_set, val: data.val, pairs: cfg.loss.use_rank.then_some(data.pairs) };
            let result = start.and_then(|s| {
                let out = train(&cfg, &config.model, td, s).map_err(|e| e.to_string())?;
                let report = evaluation::evaluate(&out.best, data.test).map_err(|e| e.to_string())?;
                Ok((out.best, TrialResult { mae: report.mae, rmse: report.rmse }))
            });
            let entry = match result {
                Ok((best, tr)) => {
                    progress(&format!("trial {} row ({}) {}: test MAE {:.3} RMSE {:.3}", trial + 1, row.numeral(), row.method(), tr.mae, tr.rmse));
                    models.insert((row, trial), best);
                    Ok(tr)
                }
                Err(e) => {
                    progress(&format!("trial {} row ({}) {} failed: {e}", trial + 1, row.numeral(), row.method()));
                    Err(e)
                }
            };
            results.entry(row).or_default().push(entry);
        }
    }
    let rows = config
        .rows
        .iter()
        .map(|&row| AblationRowResult { row, trials: results.get(&row).cloned().unwrap_or_default() })
        .collect();
    Ok(AblationOutcome { table: AblationTable { trials: config.trials, rows }, models })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (mut w, mut m, mut v) = ([0.0f32], [0.0f32], [0.0f32]);
        adam_update(&mut w, &mut m, &mut v, &[1.0], 1, 1e-4, &AdamConfig::default());
        assert!((w[0] as f64 + 1e-4).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_only_decays_moments() {
        let (mut w, mut m, mut v) = ([0.5f32], [0.2f32], [0.04f32]);
        adam_update(&mut w, &mut m, &mut v, &[0.0], 3, 0.0, &AdamConfig::default());
        assert_eq!(w[0], 0.5);
        assert!((m[0] - 0.18).abs() < 1e-7);
        assert!((v[0] - 0.04 * 0.999).abs() < 1e-7);
    }

    #[test]
    fn lr_schedule_drops_at_epoch_200() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(199), 1e-4);
        assert_eq!(c.lr_at(200), 1e-5);
    }

    #[test]
    fn batch_sizes() {
        let b = compose_batch(35, Some(100), 10, 0, 1).unwrap();
        assert_eq!((b.labelled.len(), b.pairs.len()), (10, 10));
        let b = compose_batch(35, None, 10, 0, 1).unwrap();
        assert_eq!((b.labelled.len(), b.pairs.len()), (10, 0));
        assert_eq!(compose_batch(35, Some(100), 10, 3, 1).unwrap().labelled.len(), 5);
        assert_eq!(compose_batch(35, Some(3), 10, 0, 1).unwrap().pairs.len(), 10);
        assert_eq!(compose_batch(35, Some(100), 10, 7, 9).unwrap(), compose_batch(35, Some(100), 10, 7, 9).unwrap());
        assert!(compose_batch(35, Some(0), 10, 0, 1).is_err());
        assert!(compose_batch(0, None, 10, 0, 1).is_err());
    }

    #[test]
    fn epoch_visits_each_sample_once() {
        for epoch in 0..3u64 {
            let mut seen: Vec<usize> = (0..4).flat_map(|s| compose_batch(37, None, 10, epoch * 4 + s, 5).unwrap().labelled).collect();
            seen.sort();
            assert_eq!(seen, (0..37).collect::<Vec<_>>());
        }
    }

    #[test]
    fn ablation_csv_layout() {
        let rows = AblationRow::ALL
            .iter()
            .map(|&row| AblationRowResult { row, trials: vec![Ok(TrialResult { mae: 1.0, rmse: 2.0 }), Err("boom".into()), Ok(TrialResult { mae: 3.0, rmse: 4.0 })] })
            .collect();
        let csv = AblationTable { trials: 3, rows }.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[0], "row,method,init_from,MAE_avg,MAE_trial1,MAE_trial2,MAE_trial3,RMSE_avg,RMSE_trial1,RMSE_trial2,RMSE_trial3,failures");
        assert_eq!(lines[1], "i,UT,fresh,2,1,failed,3,3,2,failed,4,trial2: boom");
    }
}
