//! Training: Adam over BPTT gradients of `α·L_s/N² + β·L_cls`, with the
//! soft similarity matrix refreshed on a round schedule.
//!
//! Everything that influences an epoch lives in the checkpoint: weights,
//! batchnorm statistics, Adam moments, the soft-similarity accumulators and
//! the log so far. Batch order is a pure function of the seed and the epoch,
//! so resuming reproduces an uninterrupted run exactly.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, Dataset};
use crate::error::{Error, Result};
use crate::loss::{
    blend, classification_loss, expand_to_batch, hard_similarity, pairwise_similarity_loss, total_loss, RoundSchedule,
    SoftSimilarity,
};
use crate::model::{batch_samples, Checkpoint, Model, ModelConfig};
use crate::nn::{ParamId, Session};
use crate::optim::{optimizer_step, AdamConfig, LrSchedule, OptimizerState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub min_lr: f32,
    pub adam: AdamConfig,
    pub alpha: f32,
    pub beta: f32,
    pub tau: f32,
    /// Supervise with the blended soft matrix after the initial round.
    pub soft_similarity: bool,
    pub rounds: RoundSchedule,
    pub bn_momentum: f32,
    /// Stop after the first epoch whose training accuracy reaches this.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 5e-3,
            min_lr: 1e-4,
            adam: AdamConfig::default(),
            alpha: 0.2,
            beta: 0.8,
            tau: 0.3,
            soft_similarity: true,
            rounds: RoundSchedule::default(),
            bn_momentum: 0.1,
            stop_at_accuracy: None,
        }
    }
}

/// Model, training and data settings of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        let model = ModelConfig {
            time_steps: data.time_steps,
            height: data.height,
            width: data.width,
            classes: data.task.classes(),
            ..ModelConfig::nano()
        };
        Self { seed: 0, model, training: TrainConfig::default(), data }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        let (m, d, t) = (&self.model, &self.data, &self.training);
        if m.in_channels != 1 || m.time_steps != d.time_steps || m.height != d.height || m.width != d.width {
            return Err(Error::Config(format!(
                "model input [{}, {}, {}, {}] does not match data frames [{}, 1, {}, {}]",
                m.time_steps, m.in_channels, m.height, m.width, d.time_steps, d.height, d.width
            )));
        }
        if m.classes != d.task.classes() {
            return Err(Error::Config(format!("model has {} classes, task {:?} has {}", m.classes, d.task, d.task.classes())));
        }
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(t.alpha >= 0.0 && t.beta >= 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative, got α={}, β={}", t.alpha, t.beta)));
        }
        if !(t.lr.is_finite() && t.lr > 0.0 && t.min_lr >= 0.0 && t.min_lr <= t.lr) {
            return Err(Error::Config(format!("learning rates {} → {} are invalid", t.lr, t.min_lr)));
        }
        if !(0.0..=1.0).contains(&t.bn_momentum) {
            return Err(Error::Config(format!("batchnorm momentum {} outside [0, 1]", t.bn_momentum)));
        }
        if t.rounds.total_epochs != t.epochs {
            return Err(Error::Config(format!("round schedule spans {} epochs, training {}", t.rounds.total_epochs, t.epochs)));
        }
        t.rounds.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub similarity_loss: f64,
    pub classification_loss: f64,
    pub accuracy: f64,
    pub lambda: f32,
    pub soft_supervision: bool,
    pub round_finalized: bool,
    pub lr: f32,
    pub clamped_rows: usize,
}

#[derive(Serialize, Deserialize)]
struct TrainState {
    run: RunConfig,
    next_epoch: usize,
    optimizer_step: u64,
    soft: SoftSimilarity,
    log: Vec<EpochLog>,
}

pub struct Trainer {
    pub run: RunConfig,
    pub model: Model,
    opt: OptimizerState,
    weights: Vec<ParamId>,
    pub soft: SoftSimilarity,
    pub next_epoch: usize,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let model = Model::build(run.model.clone(), run.seed)?;
        let weights = model.store.weight_ids();
        let params: Vec<Tensor> = weights.iter().map(|&id| model.store.get(id).clone()).collect();
        let opt = OptimizerState::new(&params, lr_schedule(&run));
        let soft = SoftSimilarity::new(run.model.classes, run.training.tau);
        Ok(Self { run, model, opt, weights, soft, next_epoch: 0, log: Vec::new() })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let state: TrainState = serde_json::from_value(ckpt.state.clone())
            .map_err(|e| Error::Format(format!("checkpoint has no training state: {e}")))?;
        if state.run.model != ckpt.config || state.run.seed != ckpt.seed {
            return Err(Error::Format("training state disagrees with the checkpointed model".into()));
        }
        let mut t = Self::new(state.run)?;
        t.model = ckpt.to_model()?;
        for (k, &id) in t.weights.iter().enumerate() {
            let name = &t.model.store.entries()[id].name;
            for (prefix, slot) in [("adam.m/", &mut t.opt.m[k]), ("adam.v/", &mut t.opt.v[k])] {
                let key = format!("{prefix}{name}");
                let (_, tensor) = ckpt
                    .extra
                    .iter()
                    .find(|(n, _)| *n == key)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?;
                if tensor.numel() != slot.len() {
                    return Err(Error::Format(format!("{key} has {} entries, expected {}", tensor.numel(), slot.len())));
                }
                slot.copy_from_slice(tensor.data());
            }
        }
        t.opt.step = state.optimizer_step;
        t.soft = state.soft;
        t.next_epoch = state.next_epoch;
        t.log = state.log;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::from_model(&self.model);
        for (k, &id) in self.weights.iter().enumerate() {
            let e = &self.model.store.entries()[id];
            let shape = e.value.shape().to_vec();
            ckpt.extra.push((format!("adam.m/{}", e.name), Tensor::new(shape.clone(), self.opt.m[k].clone())?));
            ckpt.extra.push((format!("adam.v/{}", e.name), Tensor::new(shape, self.opt.v[k].clone())?));
        }
        let state = TrainState {
            run: self.run.clone(),
            next_epoch: self.next_epoch,
            optimizer_step: self.opt.step,
            soft: self.soft.clone(),
            log: self.log.clone(),
        };
        ckpt.state = serde_json::to_value(state)?;
        Ok(ckpt)
    }

    pub fn finished(&self) -> bool {
        if self.next_epoch >= self.run.training.epochs {
            return true;
        }
        match (self.run.training.stop_at_accuracy, self.log.last()) {
            (Some(target), Some(last)) => last.accuracy >= target,
            _ => false,
        }
    }

    /// Runs one epoch over `train` and appends its log entry.
    pub fn run_epoch(&mut self, train: &Dataset) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let cfg = self.run.training.clone();
        let epoch = self.next_epoch;
        let round = cfg.rounds.step(epoch)?;
        let classes = self.run.model.classes;
        let hard = hard_similarity(classes);
        let target = if cfg.soft_similarity && round.use_soft { blend(&hard, &self.soft.matrix(), round.lambda)? } else { hard };
        let lr = self.opt.next_lr();

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.run.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch as u64));
        let (mut loss_sum, mut ls_sum, mut lc_sum) = (0.0f64, 0.0f64, 0.0f64);
        let (mut correct, mut clamped_rows) = (0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<Tensor> = batch.iter().map(|&i| train.samples[i].clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let n = labels.len();
            let x = batch_samples(&samples)?;

            let mut s = Session::new(&self.model.store, true);
            let xv = s.tape.constant(x);
            let out = self.model.forward(&mut s, xv)?;
            let pairs = expand_to_batch(&target, &labels)?;
            let ls = pairwise_similarity_loss(&mut s.tape, out.signed_code, &pairs)?;
            let ls = s.tape.scale(ls, 1.0 / (n * n) as f32)?;
            let (lc, clamped) = classification_loss(&mut s.tape, out.log_probs, &labels)?;
            let loss = total_loss(&mut s.tape, ls, lc, cfg.alpha, cfg.beta)?;
            let value = s.tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss {value} at epoch {epoch}")));
            }
            s.tape.backward(loss)?;

            let predictions = argmax_rows(s.tape.value(out.log_probs));
            correct += predictions.iter().zip(&labels).filter(|(p, y)| p == y).count();
            self.soft.accumulate(s.tape.value(out.mean_potential), &labels, &predictions)?;

            let grads = s.gradients();
            let grads: Vec<Option<&[f32]>> = self.weights.iter().map(|&id| grads[id]).collect();
            let mut params: Vec<Tensor> = self.weights.iter().map(|&id| self.model.store.get(id).clone()).collect();
            optimizer_step(&mut params, &grads, &mut self.opt, &cfg.adam)?;
            let stats = s.running_stat_updates(cfg.bn_momentum);
            ls_sum += f64::from(s.tape.value(ls).item()?) * n as f64;
            lc_sum += f64::from(s.tape.value(lc).item()?) * n as f64;
            loss_sum += f64::from(value) * n as f64;
            clamped_rows += clamped;
            drop(s);

            for (&id, p) in self.weights.iter().zip(params) {
                *self.model.store.get_mut(id) = p;
            }
            for (id, t) in stats {
                *self.model.store.get_mut(id) = t;
            }
        }
        if round.finalize_now {
            self.soft.finalize();
        }
        let count = train.len() as f64;
        let entry = EpochLog {
            epoch,
            loss: loss_sum / count,
            similarity_loss: ls_sum / count,
            classification_loss: lc_sum / count,
            accuracy: correct as f64 / count,
            lambda: round.lambda,
            soft_supervision: cfg.soft_similarity && round.use_soft,
            round_finalized: round.finalize_now,
            lr,
            clamped_rows,
        };
        self.next_epoch += 1;
        self.log.push(entry.clone());
        Ok(entry)
    }

    /// Trains until the epoch budget or the accuracy target is reached. With
    /// `out`, a checkpoint is written after every epoch, so an aborted run
    /// leaves the last good one in place; the log and `S_soft` are written
    /// at the end.
    pub fn fit(&mut self, train: &Dataset, out: Option<&Path>, mut on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
            write_json(&dir.join(RUN_FILE), &serde_json::to_value(&self.run)?)?;
        }
        while !self.finished() {
            let entry = self.run_epoch(train)?;
            on_epoch(&entry);
            if let Some(dir) = out {
                self.checkpoint()?.save(&dir.join(CHECKPOINT_DIR))?;
            }
        }
        if let Some(dir) = out {
            let mut log = Vec::new();
            for e in &self.log {
                serde_json::to_writer(&mut log, e)?;
                log.push(b'\n');
            }
            fs::write(dir.join(LOG_FILE), log)?;
            write_json(&dir.join(SOFT_FILE), &self.soft.to_json())?;
        }
        Ok(())
    }
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const SOFT_FILE: &str = "s_soft.json";
pub const RUN_FILE: &str = "run.json";

fn lr_schedule(run: &RunConfig) -> LrSchedule {
    let t = &run.training;
    let batches = run.data.train.div_ceil(t.batch_size) as u64;
    LrSchedule::Cosine { lr: t.lr, min_lr: t.min_lr, total_steps: batches * t.epochs as u64 }
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Index of the largest entry of each row of `[B, K]`; the first on ties.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.shape().last().copied().unwrap_or(1).max(1);
    t.data()
        .chunks(k)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}

/// Eval-mode classification accuracy and codes of a dataset.
pub fn encode_dataset(model: &Model, data: &Dataset, batch: usize) -> Result<(Vec<crate::model::HashCode>, f64)> {
    let mut codes = Vec::with_capacity(data.len());
    let mut correct = 0;
    for (samples, labels) in data.samples.chunks(batch.max(1)).zip(data.labels.chunks(batch.max(1))) {
        let x = batch_samples(samples)?;
        let mut s = Session::new(&model.store, false);
        let xv = s.tape.constant(x);
        let out = model.forward(&mut s, xv)?;
        let pred = argmax_rows(s.tape.value(out.log_probs));
        correct += pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        codes.extend(model.codes(&s, &out)?);
    }
    Ok((codes, correct as f64 / data.len().max(1) as f64))
}
