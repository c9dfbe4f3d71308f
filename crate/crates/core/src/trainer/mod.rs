//! Mini-batch training: one forward and one backward pass per sample per
//! step, gates recomputed from the step's own (detached) predictions.

pub mod checkpoint;
pub mod config;
pub mod optim;

use std::borrow::Borrow;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use checkpoint::Checkpoint;
pub use config::{OptimizerKind, TrainConfig};
pub use optim::{cosine_lr, Optimizer};

use crate::backbone::batch_from_records;
use crate::datamodel::{ensure_dir, Record, NUM_CLASSES};
use crate::error::{bail, Error, Result};
use crate::eval::score_records;
use crate::loss::{batch_gates, loss_and_logit_grad, GateMask, LevelPredictions, LossKind};
use crate::model::Model;

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

pub fn metrics_file(seed: u64) -> String {
    format!("metrics_seed{seed}.jsonl")
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricLine {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
    /// Active (level, class) gate entries over the batch.
    pub active_gates: usize,
}

/// Model plus optimizer state and position in the schedule.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Optimizer,
    pub epoch: usize,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Model::new(config.model_config(), config.seed)?;
        if let Some(path) = &config.init_from {
            let ck = checkpoint::load(path)?;
            model
                .backbone
                .copy_weights_from(&ck.model.backbone)
                .map_err(|e| Error::Config(format!("init_from {}: {e}", path.display())))?;
        }
        let optimizer = Optimizer::new(
            config.optimizer,
            config.momentum,
            config.weight_decay,
            &model.params(),
        );
        Ok(Self {
            config,
            model,
            optimizer,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Self {
            config: ck.config,
            model: ck.model,
            optimizer: ck.optimizer,
            epoch: ck.epoch,
            step: ck.step,
        }
    }

    /// Batches per epoch for a training set of `n`.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        if self.config.steps_per_epoch > 0 {
            self.config.steps_per_epoch
        } else {
            (n / self.config.batch_size).max(1)
        }
    }

    pub fn lr_at(&self, step: usize, n: usize) -> f64 {
        cosine_lr(self.config.lr, step, self.config.epochs * self.steps_per_epoch(n))
    }

    /// Sample order of `epoch`: successive seeded shuffles, long enough for
    /// the epoch's batches.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream((1u64 << 32) + epoch as u64);
        let need = if self.config.steps_per_epoch > 0 {
            self.config.steps_per_epoch * self.config.batch_size
        } else {
            n
        };
        let mut order = Vec::with_capacity(need + n);
        while order.len() < need {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            order.extend(perm);
        }
        order
    }

    /// One optimization step at learning rate `lr`.
    pub fn train_step(&mut self, batch: &[&Record], lr: f64) -> Result<StepStats> {
        if batch.is_empty() {
            bail!(Data, "empty batch");
        }
        let images = batch_from_records(batch)?;
        self.model.zero_grad();
        let (out, cache) = self.model.forward(&images, true, true)?;
        let cache = cache.expect("cache requested");
        let labels: Vec<Vec<u8>> = batch.iter().map(|r| r.labels.ground_truth().to_vec()).collect();
        let label_refs: Vec<&[u8]> = labels.iter().map(|v| v.as_slice()).collect();
        let logits = LevelPredictions::from_levels(&out.level_logits, NUM_CLASSES)?;
        let gates = match self.config.loss_kind() {
            LossKind::Balanced => {
                let probs = LevelPredictions::from_levels(&out.level_scores, NUM_CLASSES)?;
                batch_gates(&label_refs, &probs, self.config.epsilon)
            }
            LossKind::Plain => vec![GateMask::all_on(self.model.levels(), NUM_CLASSES); batch.len()],
        };
        let (loss, grad) = loss_and_logit_grad(&label_refs, &logits, &gates)?;
        if !loss.is_finite() {
            return Err(self.diagnose(batch, &out.level_scores, loss));
        }
        let n = batch.len();
        let dlogits: Vec<Vec<f32>> = (0..self.model.levels())
            .map(|l| {
                (0..n)
                    .flat_map(|i| grad.row(l, i).iter().map(|g| *g as f32))
                    .collect()
            })
            .collect();
        self.model.backward(&cache, &dlogits);
        self.model.update_running(&cache);
        let mut params = self.model.params_mut();
        self.optimizer.step(&mut params, lr)?;
        self.step += 1;
        Ok(StepStats {
            loss,
            lr,
            active_gates: gates.iter().map(GateMask::active).sum(),
        })
    }

    fn diagnose(&self, batch: &[&Record], scores: &[Vec<f32>], loss: f64) -> Error {
        let ids: Vec<&str> = batch.iter().map(|r| r.sample_id.as_str()).collect();
        let mut msg = format!(
            "loss {} at step {} (epoch {}); batch {:?}",
            loss, self.step, self.epoch, ids
        );
        for (l, s) in scores.iter().enumerate() {
            let finite: Vec<f32> = s.iter().copied().filter(|v| v.is_finite()).collect();
            let min = finite.iter().copied().fold(f32::INFINITY, f32::min);
            let max = finite.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mean = finite.iter().map(|v| *v as f64).sum::<f64>() / finite.len().max(1) as f64;
            msg.push_str(&format!(
                "; level {} scores min {} mean {:.4} max {} non-finite {}",
                l + 1,
                min,
                mean,
                max,
                s.len() - finite.len()
            ));
        }
        Error::Numerical(msg)
    }

    /// Runs one epoch and returns the mean step loss.
    pub fn run_epoch<R: Borrow<Record>>(&mut self, records: &[R]) -> Result<f64> {
        let order = self.epoch_order(self.epoch, records.len());
        let steps = self.steps_per_epoch(records.len());
        let b = self.config.batch_size.min(records.len());
        let mut total = 0.0;
        for s in 0..steps {
            let batch: Vec<&Record> = order[s * b..(s + 1) * b].iter().map(|i| records[*i].borrow()).collect();
            let lr = self.lr_at(self.step, records.len());
            total += self.train_step(&batch, lr)?.loss;
        }
        self.epoch += 1;
        Ok(total / steps as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub epoch: usize,
    pub step: usize,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub log: Vec<MetricLine>,
}

/// Trains into `out_dir`, writing the checkpoint after every epoch. With
/// `resume`, continues from the checkpoint found there.
pub fn train<R: Borrow<Record>>(
    config: &TrainConfig,
    train_set: &[R],
    val_set: Option<&[R]>,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        bail!(Data, "training set is empty");
    }
    if !train_set.iter().any(|r| (*r).borrow().labels.is_positive()) {
        bail!(
            Data,
            "training set has no positive sample; refusing to train on negatives only"
        );
    }
    if val_set.is_some_and(|v| v.is_empty()) {
        bail!(Data, "validation set is empty");
    }
    ensure_dir(out_dir)?;
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    let metrics_path = out_dir.join(metrics_file(config.seed));

    let mut trainer = if resume {
        let ck = checkpoint::load(&ck_path)?;
        if ck.config_hash != config.hash() {
            bail!(
                Config,
                "config differs from the one that wrote {}",
                ck_path.display()
            );
        }
        Trainer::from_checkpoint(ck)
    } else {
        Trainer::new(config.clone())?
    };
    trainer.config.stop_after = config.stop_after;
    trainer.config.eval_interval = config.eval_interval;

    let mut log_file = if resume {
        OpenOptions::new().append(true).create(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .map_err(|e| Error::io(&metrics_path, e))?;

    let last = config
        .stop_after
        .map_or(config.epochs, |s| s.min(config.epochs));
    let mut log = Vec::new();
    if trainer.epoch == 0 && last == 0 {
        checkpoint::save(&ck_path, config, &trainer.model, &trainer.optimizer, 0, 0)?;
    }
    while trainer.epoch < last {
        let loss = trainer.run_epoch(train_set)?;
        let epoch = trainer.epoch;
        log::info!("epoch {epoch}: train loss {loss:.5}");
        let mut lines = vec![MetricLine {
            epoch,
            split: "train".into(),
            metric: "loss".into(),
            value: loss,
        }];
        if let Some(val) = val_set {
            let due = config.eval_interval > 0 && (epoch % config.eval_interval == 0 || epoch == config.epochs);
            if due {
                let scores = score_records(&trainer.model, val, 64)?;
                if let Some(map) = scores.map(val) {
                    log::info!("epoch {epoch}: val mAP {map:.4}");
                    lines.push(MetricLine {
                        epoch,
                        split: "val".into(),
                        metric: "mAP".into(),
                        value: map,
                    });
                }
            }
        }
        for line in &lines {
            let text = serde_json::to_string(line)?;
            writeln!(log_file, "{text}").map_err(|e| Error::io(&metrics_path, e))?;
        }
        log.extend(lines);
        checkpoint::save(
            &ck_path,
            config,
            &trainer.model,
            &trainer.optimizer,
            trainer.epoch,
            trainer.step,
        )?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        epoch: trainer.epoch,
        step: trainer.step,
        checkpoint: ck_path,
        metrics: metrics_path,
        log,
    })
}
