//! AdamW, the alternating segmentation/classification epoch, evaluation and
//! checkpoints.

mod checkpoint;


use std::fmt;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_load, checkpoint_save, decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use crate::data::{apply_augment, collate, sample_seed, AugmentConfig, AugmentParams, Batch, Sample};
use crate::error::{Error, Result};
use crate::losses::{accuracy, cls_loss, dice_score, final_loss, seg_loss, LossWeights, Way};
use crate::model::{argmax_classes, build_model, forward, infer, ModelConfig, ModelParams, Output, Task};
use crate::tensor::{Tape, Tensor};

/// Learning-rate schedule over epochs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to `min_lr` over the configured epochs.
    Cosine { min_lr: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, epoch: u64, epochs: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { min_lr } => {
                let t = epoch as f64 / epochs.max(1) as f64;
                min_lr + 0.5 * (base - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size_seg: usize,
    pub batch_size_cls: usize,
    pub loss: LossWeights,
    /// Seeds parameter init, batch order and augmentation.
    pub seed: u64,
    /// Evaluate on the validation split every this many epochs; 0 disables.
    pub eval_every: u64,
    pub checkpoint_dir: Option<String>,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size_seg: 8,
            batch_size_cls: 8,
            loss: LossWeights::default(),
            seed: 0,
            eval_every: 10,
            checkpoint_dir: None,
            augment: true,
            augmentation: AugmentConfig::default(),
            grad_clip: None,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if self.batch_size_seg == 0 || self.batch_size_cls == 0 {
            problems.push("batch sizes must be >= 1".to_string());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            problems.push("betas must lie in [0, 1)".to_string());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            problems.push("eps must be > 0 and weight_decay >= 0".to_string());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            problems.push("grad_clip must be > 0".to_string());
        }
        for check in [self.loss.validate(), self.augmentation.validate()] {
            if let Err(e) = check {
                problems.push(e.to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Model and training settings stored together in one JSON file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// AdamW moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Updates applied so far; drives bias correction.
    pub step: u64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: ModelConfig,
    pub params: ModelParams,
    pub moments: IndexMap<String, Moments>,
    pub global_step: u64,
    pub seg_steps: u64,
    pub cls_steps: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Root of every random stream; per-epoch and per-sample generators are
    /// derived from it, so it is the whole RNG state.
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self::from_params(model.clone(), build_model(model, seed)?, seed))
    }

    pub fn from_params(model: ModelConfig, params: ModelParams, seed: u64) -> Self {
        let moments = params
            .iter()
            .map(|(k, t)| {
                let z = Tensor::zeros(t.shape());
                (k.to_string(), Moments { m: z.clone(), v: z, step: 0 })
            })
            .collect();
        TrainState {
            model,
            params,
            moments,
            global_step: 0,
            seg_steps: 0,
            cls_steps: 0,
            epoch: 0,
            seed,
        }
    }
}

/// One decoupled-weight-decay Adam update. Parameters whose gradient is
/// `None` are left untouched, moments included.
pub fn adamw_step(
    state: &mut TrainState,
    grads: &IndexMap<String, Option<Tensor>>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    for (name, grad) in grads {
        let Some(g) = grad else { continue };
        let p = state
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter {name}")))?;
        let mo = state
            .moments
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("no optimizer state for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("{name}: gradient {:?} for parameter {:?}", g.shape(), p.shape()),
            ));
        }
        mo.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(mo.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(mo.step as i32);
        let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
        for (i, pi) in p.data_mut().iter_mut().enumerate() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *pi = *pi - lr * (m_hat / (v_hat.sqrt() + cfg.eps)) - lr * cfg.weight_decay * *pi;
        }
    }
    Ok(())
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut IndexMap<String, Option<Tensor>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Task loss and backward pass for one batch. Returns the unweighted task
/// loss and the gradient of `λ_task · loss` for every parameter.
pub fn batch_gradients(
    params: &ModelParams,
    model: &ModelConfig,
    batch: &Batch,
    task: Task,
    weights: &LossWeights,
) -> Result<(f64, IndexMap<String, Option<Tensor>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let image = tape.constant(batch.images.clone());
    let task_loss = match forward(&mut tape, &bound, model, image, &batch.prompts, task)? {
        Output::Seg(logits) => seg_loss(&mut tape, logits, &batch.masks, weights)?.total,
        Output::Cls { two_way, four_way } => {
            cls_loss(&mut tape, two_way, four_way, &batch.labels, &batch.ways)?
        }
    };
    let loss = final_loss(&mut tape, task, task_loss, weights);
    let value = tape.value(task_loss).item();
    tape.backward(loss)?;
    Ok((value, bound.grads(&mut tape)))
}

/// Per-epoch summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    /// 1-based index of the finished epoch.
    pub epoch: u64,
    /// Mean unweighted task loss over the epoch's batches.
    pub seg_loss: Option<f64>,
    pub cls_loss: Option<f64>,
    pub seg_batches: usize,
    pub cls_batches: usize,
}

fn batches_for(
    samples: &[Sample],
    task: Task,
    batch_size: usize,
    state: &TrainState,
    cfg: &TrainConfig,
) -> Result<Vec<Batch>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let stream = format!("order/{task}");
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(state.seed, state.epoch, &stream)));
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        let picked: Vec<Sample> = chunk
            .iter()
            .map(|&i| {
                let s = &samples[i];
                if !cfg.augment {
                    return Ok(s.clone());
                }
                let mut rng =
                    ChaCha8Rng::seed_from_u64(sample_seed(state.seed, state.epoch, &s.id));
                let p = AugmentParams::sample(&cfg.augmentation, &mut rng);
                let (image, mask) = apply_augment(&s.image, s.mask.as_deref(), &p)?;
                Ok(Sample { image, mask, ..s.clone() })
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Sample> = picked.iter().collect();
        out.push(collate(&refs, task)?);
    }
    Ok(out)
}

/// One epoch: every segmentation batch, then every classification batch,
/// each followed by its own optimizer step.
pub fn train_epoch(
    state: &mut TrainState,
    seg: &[Sample],
    cls: &[Sample],
    cfg: &TrainConfig,
) -> Result<EpochReport> {
    if seg.is_empty() && cls.is_empty() {
        return Err(Error::Invalid("both segmentation and classification sets are empty".into()));
    }
    let lr = cfg.schedule.lr_at(cfg.learning_rate, state.epoch, cfg.epochs);
    let mut report = EpochReport {
        epoch: state.epoch + 1,
        seg_loss: None,
        cls_loss: None,
        seg_batches: 0,
        cls_batches: 0,
    };
    for (task, samples, bs) in [(Task::Seg, seg, cfg.batch_size_seg), (Task::Cls, cls, cfg.batch_size_cls)] {
        if samples.is_empty() {
            continue;
        }
        let mut total = 0.0;
        let batches = batches_for(samples, task, bs, state, cfg)?;
        for batch in &batches {
            let (loss, mut grads) = batch_gradients(&state.params, &state.model, batch, task, &cfg.loss)?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adamw_step(state, &grads, cfg, lr)?;
            total += loss;
            state.global_step += 1;
            match task {
                Task::Seg => state.seg_steps += 1,
                Task::Cls => state.cls_steps += 1,
            }
        }
        let mean = Some(total / batches.len() as f64);
        match task {
            Task::Seg => (report.seg_loss, report.seg_batches) = (mean, batches.len()),
            Task::Cls => (report.cls_loss, report.cls_batches) = (mean, batches.len()),
        }
    }
    state.epoch += 1;
    Ok(report)
}

/// One `dataset  task  metric  value` output line.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub dataset: String,
    pub task: Task,
    pub metric: String,
    pub value: f64,
}

impl fmt::Display for MetricRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{:.6}", self.dataset, self.task, self.metric, self.value)
    }
}

/// Mean foreground Dice over classes `1..K`, averaged per sample.
fn foreground_dice(pred: &[usize], target: &[usize], classes: usize) -> f64 {
    (1..classes).map(|c| dice_score(pred, target, c)).sum::<f64>() / (classes - 1) as f64
}

/// Scores `samples` without touching the parameters: mean per-sample
/// foreground Dice for segmentation, accuracy per head for classification.
pub fn evaluate(
    params: &ModelParams,
    model: &ModelConfig,
    samples: &[Sample],
    task: Task,
    batch_size: usize,
    dataset: &str,
) -> Result<Vec<MetricRow>> {
    if samples.is_empty() {
        return Err(Error::Invalid(format!("nothing to evaluate for {task}")));
    }
    let row = |metric: &str, value: f64| MetricRow {
        dataset: dataset.to_string(),
        task,
        metric: metric.to_string(),
        value,
    };
    let mut rows = Vec::new();
    let refs: Vec<&Sample> = samples.iter().collect();
    match task {
        Task::Seg => {
            let mut dices = Vec::new();
            for chunk in refs.chunks(batch_size.max(1)) {
                let b = collate(chunk, task)?;
                let out = infer(params, model, &b.images, &b.prompts, task)?;
                let pred = argmax_classes(&out[0]);
                let hw = pred.len() / b.len();
                for i in 0..b.len() {
                    let r = i * hw..(i + 1) * hw;
                    dices.push(foreground_dice(&pred[r.clone()], &b.masks[r], model.seg_classes));
                }
            }
            rows.push(row("dice", dices.iter().sum::<f64>() / dices.len() as f64));
        }
        Task::Cls => {
            let mut per_way: IndexMap<Way, (Vec<usize>, Vec<usize>)> = IndexMap::new();
            for chunk in refs.chunks(batch_size.max(1)) {
                let b = collate(chunk, task)?;
                let out = infer(params, model, &b.images, &b.prompts, task)?;
                let (p2, p4) = (argmax_classes(&out[0]), argmax_classes(&out[1]));
                for i in 0..b.len() {
                    let pred = match b.ways[i] {
                        Way::Two => p2[i],
                        Way::Four => p4[i],
                    };
                    let e = per_way.entry(b.ways[i]).or_default();
                    e.0.push(pred);
                    e.1.push(b.labels[i]);
                }
            }
            per_way.sort_keys();
            for (way, (pred, target)) in &per_way {
                rows.push(row(&format!("acc_{}way", way.classes()), accuracy(pred, target)));
            }
        }
    }
    Ok(rows)
}

/// Splits loaded samples into the segmentation and classification pools;
/// samples with both annotations land in both.
pub fn task_pools(samples: &[Sample]) -> (Vec<Sample>, Vec<Sample>) {
    let seg = samples.iter().filter(|s| s.mask.is_some()).cloned().collect();
    let cls = samples.iter().filter(|s| s.label.is_some()).cloned().collect();
    (seg, cls)
}

/// Appends `epoch  task  metric  value` rows for a report.
pub fn log_epoch(out: &mut dyn Write, r: &EpochReport) -> std::io::Result<()> {
    for (task, loss, n) in [(Task::Seg, r.seg_loss, r.seg_batches), (Task::Cls, r.cls_loss, r.cls_batches)] {
        if let Some(l) = loss {
            writeln!(out, "{}\t{task}\tloss\t{l:.8}", r.epoch)?;
            writeln!(out, "{}\t{task}\tbatches\t{n}", r.epoch)?;
        }
    }
    Ok(())
}

/// Trains until `cfg.epochs` epochs are complete, resuming from
/// `state.epoch`. Validation rows and per-epoch losses go to `log`; a
/// checkpoint is written after every epoch when a directory is configured.
pub fn fit(
    state: &mut TrainState,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    let (seg, cls) = task_pools(train);
    let (vseg, vcls) = task_pools(val);
    let io = |e: std::io::Error| Error::io("metrics log", e);
    let mut reports = Vec::new();
    while state.epoch < cfg.epochs {
        let r = train_epoch(state, &seg, &cls, cfg)?;
        log_epoch(log, &r).map_err(io)?;
        if cfg.eval_every > 0 && r.epoch % cfg.eval_every == 0 {
            for (pool, task, bs) in [(&vseg, Task::Seg, cfg.batch_size_seg), (&vcls, Task::Cls, cfg.batch_size_cls)] {
                if pool.is_empty() {
                    continue;
                }
                for row in evaluate(&state.params, &state.model, pool, task, bs, "val")? {
                    writeln!(log, "{}\t{}\t{}\t{:.8}", r.epoch, task, row.metric, row.value).map_err(io)?;
                }
            }
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            let dir = Path::new(dir);
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            checkpoint_save(state, &dir.join("last.ckpt"))?;
        }
        reports.push(r);
    }
    Ok(reports)
}
