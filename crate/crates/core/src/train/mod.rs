//! Two-stage training, evaluation and checkpointing.

mod checkpoint;
mod config;
mod eval;

pub use checkpoint::{Checkpoint, Progress, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Mode, StageConfig, TrainConfig};
pub use eval::{eval_noise, evaluate, predicted_labels, score_prediction, EvalReport, SampleRecord};

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_remove_parts, removal_units, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossOptions, LossTarget, LossWeights};
use crate::model::SlotModel;
use crate::tensor::{Adam, Graph, Tensor};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const CONFIG_FILE: &str = "train.toml";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
const CHECKPOINT_DIR: &str = "checkpoints";

/// Loss terms averaged over samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossMeans {
    pub recon: f64,
    pub pred: f64,
    pub cuboid: f64,
    pub scale: f64,
    pub total: f64,
}

impl LossMeans {
    fn add(&mut self, b: &LossBreakdown, w: f64) {
        self.recon += w * b.recon;
        self.pred += w * b.pred;
        self.cuboid += w * b.cuboid;
        self.scale += w * b.scale;
        self.total += w * b.total;
    }

    fn scaled(self, c: f64) -> Self {
        Self {
            recon: self.recon * c,
            pred: self.pred * c,
            cuboid: self.cuboid * c,
            scale: self.scale * c,
            total: self.total * c,
        }
    }
}

/// One line of the metric history: a split's numbers after an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub stage: u8,
    pub split: String,
    /// Optimizer steps completed so far.
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossMeans>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clipped_steps: Option<usize>,
    /// Samples that lost parts to augmentation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmented: Option<usize>,
    /// Samples that had at least one removable part.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eligible: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
}

/// Progress notifications.
#[derive(Clone, Debug)]
pub enum TrainEvent {
    /// The gradient norm of `step` exceeded the clip ceiling.
    Clipped { step: usize, norm: f64 },
    Record(MetricRecord),
    Saved(PathBuf),
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Per-sample breakdowns in batch order.
    pub samples: Vec<LossBreakdown>,
    pub mean: LossMeans,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One input of a training step.
#[derive(Clone, Debug)]
pub struct StepInput {
    pub target: LossTarget,
    pub noise: Option<Tensor>,
}

/// Forward and backward over the batch in order, gradient averaging,
/// clipping and one Adam update.
pub fn train_step(
    model: &mut SlotModel,
    batch: &[StepInput],
    weights: &LossWeights,
    opts: &LossOptions,
    lr: f64,
    clip_norm: f64,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    model.params.zero_grads();
    let mut samples = Vec::with_capacity(batch.len());
    let mut mean = LossMeans::default();
    let w = 1.0 / batch.len() as f64;
    for input in batch {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &input.target.occupancy, input.noise.as_ref())?;
        let terms = total_loss(&mut g, &out, &input.target, weights, opts, None)?;
        let b = terms.breakdown(&g);
        g.backward(terms.total)?;
        g.accumulate_param_grads(&mut model.params);
        mean.add(&b, w);
        samples.push(b);
    }
    model.params.scale_grads(w);
    let grad_norm = model.params.clip_grad_norm(clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "gradient",
            sample: batch.iter().map(|b| b.target.id.as_str()).collect::<Vec<_>>().join(","),
        });
    }
    model.params.fill_missing_grads();
    Adam::new(lr).step(&mut model.params)?;
    Ok(StepReport {
        samples,
        mean,
        grad_norm,
        clipped: grad_norm > clip_norm,
    })
}

/// What a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// State after the last step.
    pub last: Checkpoint,
    /// Highest validation mean IoU, when validation ran.
    pub best: Option<Checkpoint>,
    pub history: Vec<MetricRecord>,
}

impl TrainOutcome {
    /// The model selected for evaluation: best on validation, else last.
    pub fn selected(&self) -> &SlotModel {
        &self.best.as_ref().unwrap_or(&self.last).model
    }
}

struct Sink<'a> {
    out: Option<&'a Path>,
    history: Option<File>,
    events: &'a mut dyn FnMut(&TrainEvent),
}

impl Sink<'_> {
    fn record(&mut self, r: MetricRecord, all: &mut Vec<MetricRecord>) -> Result<()> {
        if let Some(f) = &mut self.history {
            writeln!(f, "{}", serde_json::to_string(&r)?)?;
        }
        (self.events)(&TrainEvent::Record(r.clone()));
        all.push(r);
        Ok(())
    }

    fn save(&mut self, ckpt: &Checkpoint, name: &str) -> Result<()> {
        if let Some(dir) = self.out {
            let path = dir.join(name);
            ckpt.save(&path)?;
            (self.events)(&TrainEvent::Saved(path));
        }
        Ok(())
    }
}

/// Trains a fresh model on the train split of `data`. With `out`, writes the
/// resolved config, the metric history and checkpoints there.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    out: Option<&Path>,
    events: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = SlotModel::new(cfg.model_config(data.res()))?;
    let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
        File::create(dir.join(HISTORY_FILE))?;
    }
    run(cfg, data, model, Progress::default(), rng, None, out, events)
}

/// Continues the run saved in `ckpt`. Records are appended to the history.
pub fn resume(
    ckpt: Checkpoint,
    data: &Dataset,
    out: Option<&Path>,
    events: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainOutcome> {
    let cfg = ckpt
        .train
        .clone()
        .ok_or_else(|| Error::Invalid("checkpoint carries no training config".into()))?;
    cfg.validate()?;
    let rng = ckpt
        .progress
        .rng
        .as_ref()
        .ok_or_else(|| Error::Invalid("checkpoint carries no rng state".into()))?
        .restore()?;
    let best = match (out, ckpt.progress.best_epoch) {
        (Some(dir), Some(_)) if dir.join(BEST_CHECKPOINT).exists() => Some(Checkpoint::load(&dir.join(BEST_CHECKPOINT))?),
        _ => None,
    };
    run(&cfg, data, ckpt.model, ckpt.progress, rng, best, out, events)
}

#[allow(clippy::too_many_arguments)]
fn run(
    cfg: &TrainConfig,
    data: &Dataset,
    mut model: SlotModel,
    mut progress: Progress,
    mut rng: ChaCha8Rng,
    mut best: Option<Checkpoint>,
    out: Option<&Path>,
    events: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainOutcome> {
    if data.category() != cfg.category {
        return Err(Error::Invalid(format!(
            "dataset holds {} objects, config trains {}",
            data.category(),
            cfg.category
        )));
    }
    let slots = model.config.slots;
    if let Some(s) = data.samples.iter().find(|s| s.affordance_set().len() > slots) {
        return Err(Error::Invalid(format!(
            "{} has {} affordance labels but the model has {slots} slots",
            s.id,
            s.affordance_set().len()
        )));
    }
    let train_idx: Vec<usize> = (0..data.samples.len())
        .filter(|&i| data.records[i].split == SplitTag::Train)
        .collect();
    if train_idx.is_empty() {
        return Err(Error::Invalid("dataset has no training samples".into()));
    }
    let val = data.split(SplitTag::Val);
    let history = match out {
        Some(dir) => Some(OpenOptions::new().append(true).create(true).open(dir.join(HISTORY_FILE))?),
        None => None,
    };
    let mut sink = Sink { out, history, events };
    let mut records = Vec::new();
    let snapshot = |model: &SlotModel, progress: &Progress| Checkpoint {
        model: model.clone(),
        train: Some(cfg.clone()),
        progress: progress.clone(),
    };

    let total = cfg.total_epochs();
    let mut stopped = false;
    for epoch in progress.epoch + 1..=total {
        let stage = cfg.stage_of(epoch);
        let lr = cfg.stage_lr(stage);
        let weights = cfg.stage_weights(stage);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);

        let (mut sum, mut seen, mut clipped, mut augmented, mut eligible) = (LossMeans::default(), 0, 0, 0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| progress.step >= m) {
                stopped = true;
                break;
            }
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let original = &data.samples[i];
                let sample = if cfg.augment {
                    eligible += usize::from(!removal_units(original).is_empty());
                    let (s, removed) = augment_remove_parts(original, &mut rng, cfg.augment_prob);
                    augmented += usize::from(removed);
                    s
                } else {
                    original.clone()
                };
                batch.push(StepInput {
                    target: LossTarget::new(&sample, cfg.category)?,
                    noise: model.sample_noise(&mut rng),
                });
            }
            let report = train_step(&mut model, &batch, &weights, &cfg.loss, lr, cfg.clip_norm)?;
            progress.step += 1;
            if report.clipped {
                clipped += 1;
                (sink.events)(&TrainEvent::Clipped {
                    step: progress.step,
                    norm: report.grad_norm,
                });
            }
            sum.add(
                &LossBreakdown {
                    recon: report.mean.recon,
                    pred: report.mean.pred,
                    cuboid: report.mean.cuboid,
                    scale: report.mean.scale,
                    total: report.mean.total,
                    matching: Vec::new(),
                },
                batch.len() as f64,
            );
            seen += batch.len();
        }
        if seen == 0 {
            break;
        }
        progress.epoch = epoch;
        progress.rng = Some(RngState::capture(&rng));
        sink.record(
            MetricRecord {
                epoch,
                stage,
                split: SplitTag::Train.to_string(),
                step: progress.step,
                lr: Some(lr),
                loss: Some(sum.scaled(1.0 / seen as f64)),
                clipped_steps: Some(clipped),
                augmented: cfg.augment.then_some(augmented),
                eligible: cfg.augment.then_some(eligible),
                mean_iou: None,
                mse: None,
                ap: None,
            },
            &mut records,
        )?;

        let validate = !val.is_empty() && cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == total || stopped);
        if validate {
            let r = evaluate(&model, &val, cfg.category, cfg.mode.predicts_affordances(), cfg.seed)?;
            sink.record(
                MetricRecord {
                    epoch,
                    stage,
                    split: SplitTag::Val.to_string(),
                    step: progress.step,
                    lr: None,
                    loss: None,
                    clipped_steps: None,
                    augmented: None,
                    eligible: None,
                    mean_iou: Some(r.mean_iou),
                    mse: Some(r.mse),
                    ap: r.ap,
                },
                &mut records,
            )?;
            if progress.best_iou.is_none_or(|b| r.mean_iou > b) {
                progress.best_iou = Some(r.mean_iou);
                progress.best_epoch = Some(epoch);
                let ckpt = snapshot(&model, &progress);
                sink.save(&ckpt, BEST_CHECKPOINT)?;
                best = Some(ckpt);
            }
        }
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            sink.save(&snapshot(&model, &progress), &format!("{CHECKPOINT_DIR}/epoch-{epoch:04}.ckpt"))?;
        }
        if stopped {
            break;
        }
    }
    let last = snapshot(&model, &progress);
    sink.save(&last, LAST_CHECKPOINT)?;
    Ok(TrainOutcome {
        last,
        best,
        history: records,
    })
}

/// Reads a metric history file.
pub fn read_history(path: &Path) -> Result<Vec<MetricRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
