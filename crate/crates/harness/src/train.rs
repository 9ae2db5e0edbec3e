use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use viconex_core::autodiff::Tensor;
use viconex_core::metrics::{macro_auc, multilabel_stats};
use viconex_core::{
    forward, init_params, total_loss, ForwardOptions, LossReport, Mode, ModelConfig, ParamStore, TextConceptBank,
};

use crate::checkpoint::{Checkpoint, CheckpointMeta, RngState};
use crate::config::RunConfig;
use crate::dataset::{Dataset, TrainSet};
use crate::error::{create_dir, io_err, write, HarnessError, Result};
use crate::optim::AdamW;

pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: u64,
        loss: LossReport,
    },
    Epoch {
        epoch: usize,
        mean_loss: f64,
        val: Option<ClassMetrics>,
        best: bool,
    },
}

impl LogRecord {
    pub fn epoch(&self) -> usize {
        match self {
            LogRecord::Step { epoch, .. } | LogRecord::Epoch { epoch, .. } => *epoch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub acc: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

/// Text bank for the configured variant; `None` for the baseline.
pub fn build_bank(cfg: &RunConfig) -> Result<Option<TextConceptBank>> {
    if !cfg.model.variant.uses_text_bank() {
        return Ok(None);
    }
    let descs = cfg.text.descriptions.clone();
    let bank = match &cfg.text.embeddings {
        Some(p) => TextConceptBank::load(descs, p, cfg.model.text_dim).map_err(|e| match e {
            viconex_core::Error::Io { .. } => HarnessError::Data(e.to_string()),
            other => HarnessError::Model(other),
        })?,
        None => TextConceptBank::synthetic(descs, cfg.model.text_dim, cfg.text.seed)?,
    };
    Ok(Some(bank))
}

pub fn check_compatible(model: &ModelConfig, data: &Dataset) -> Result<()> {
    if data.concept_count() != model.concepts {
        return Err(HarnessError::Data(format!(
            "{} has {} concepts, the model expects {}",
            data.dir.display(),
            data.concept_count(),
            model.concepts
        )));
    }
    if data.image_size != model.image_size {
        return Err(HarnessError::Data(format!(
            "{} has {}px images, the model expects {}px",
            data.dir.display(),
            data.image_size,
            model.image_size
        )));
    }
    Ok(())
}

/// Concept probabilities `[n, C]` for every row of `data`.
pub fn predict_all(cfg: &ModelConfig, params: &ParamStore<f32>, data: &Dataset, batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len() * cfg.concepts);
    let rows: Vec<usize> = (0..data.len()).collect();
    let opts = ForwardOptions {
        mode: Mode::Infer,
        record_trace: false,
    };
    for chunk in rows.chunks(batch.max(1)) {
        let f = forward(cfg, params, &data.batch(chunk, &[]), opts)?;
        out.extend(f.probabilities().data().iter().map(|&p| p as f64));
    }
    Ok(out)
}

pub fn class_metrics(probs: &[f64], data: &Dataset) -> Result<ClassMetrics> {
    let stats = multilabel_stats(probs, &data.labels, data.concept_count(), 0.5)?;
    Ok(ClassMetrics {
        acc: stats.acc,
        f1: stats.f1,
        auc: macro_auc(probs, &data.labels, data.concept_count()).0,
    })
}

/// Model, optimizer and sampling state of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub concepts: Vec<String>,
    pub params: ParamStore<f32>,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    /// Epochs completed.
    pub epoch: usize,
    pub best_val_f1: Option<f64>,
}

impl Trainer {
    /// Fresh parameters drawn from the run seed; the same stream then drives
    /// shuffling and flips.
    pub fn new(cfg: &RunConfig, concepts: Vec<String>) -> Result<Self> {
        let bank = build_bank(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let params = init_params(&cfg.model, bank.as_ref(), &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            concepts,
            params,
            opt: AdamW::new(&cfg.train),
            rng,
            epoch: 0,
            best_val_f1: None,
        })
    }

    pub fn from_checkpoint(cfg: &RunConfig, ckpt: Checkpoint) -> Result<Self> {
        if ckpt.meta.model != cfg.model {
            return Err(HarnessError::Config("checkpoint model config differs from the run config".into()));
        }
        let rng = ckpt.rng();
        Ok(Self {
            cfg: cfg.clone(),
            concepts: ckpt.meta.concepts,
            params: ckpt.params,
            opt: ckpt.optimizer.unwrap_or_else(|| AdamW::new(&cfg.train)),
            rng,
            epoch: ckpt.meta.epoch,
            best_val_f1: ckpt.meta.best_val_f1,
        })
    }

    pub fn checkpoint(&self, with_optimizer: bool) -> Checkpoint {
        Checkpoint::new(
            CheckpointMeta {
                model: self.cfg.model.clone(),
                train: self.cfg.train.clone(),
                concepts: self.concepts.clone(),
                epoch: self.epoch,
                step: self.opt.step,
                rng: RngState::capture(&self.rng),
                best_val_f1: self.best_val_f1,
                optimizer: None,
                tensors: Vec::new(),
            },
            self.params.clone(),
            with_optimizer.then(|| self.opt.clone()),
        )
    }

    /// Forward, loss and backward for one batch; returns the loss terms and
    /// the parameter gradients.
    pub fn loss_and_grads(
        &self,
        images: &Tensor<f32>,
        targets: &Tensor<f32>,
    ) -> Result<(LossReport, BTreeMap<String, Tensor<f32>>)> {
        let t = &self.cfg.train;
        let mut f = forward(&self.cfg.model, &self.params, images, ForwardOptions::train())?;
        let (loss, report) = total_loss(&mut f.graph, &f.logits, &f.visual_layers, targets, &t.weights, t.loss_mode)?;
        if !report.total.is_finite() {
            return Ok((report, BTreeMap::new()));
        }
        let mut grads = f.graph.backward(loss).map_err(viconex_core::Error::from)?;
        let named = f
            .params
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect();
        Ok((report, named))
    }

    /// One pass over `data`. Step records go to `log`; returns the mean
    /// total loss.
    pub fn train_epoch(&mut self, data: &TrainSet, log: &mut dyn FnMut(LogRecord) -> Result<()>) -> Result<f64> {
        let order = data.epoch_order(&mut self.rng);
        let flip_prob = self.cfg.train.flip_prob;
        let flips: Vec<bool> = order.iter().map(|_| self.rng.gen::<f64>() < flip_prob).collect();
        let bs = self.cfg.train.batch_size;
        let mut sum = 0.0;
        let mut count = 0usize;
        for (rows, flip) in order.chunks(bs).zip(flips.chunks(bs)) {
            let (images, targets) = data.batch(rows, flip);
            let (report, grads) = self.loss_and_grads(&images, &targets)?;
            if !report.total.is_finite() {
                return Err(HarnessError::Divergence {
                    epoch: self.epoch,
                    step: self.opt.step as usize,
                    what: format!("loss is {}", report.total),
                });
            }
            self.opt.step(&mut self.params, &grads);
            sum += report.total;
            count += 1;
            if self.opt.step % self.cfg.train.log_every as u64 == 0 || count == 1 {
                log(LogRecord::Step {
                    epoch: self.epoch,
                    step: self.opt.step,
                    loss: report,
                })?;
            }
        }
        self.epoch += 1;
        Ok(sum / count.max(1) as f64)
    }
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: u64,
    pub final_loss: f64,
    pub best_val_f1: Option<f64>,
    pub log: Vec<LogRecord>,
}

pub fn load_train_set(cfg: &RunConfig) -> Result<TrainSet> {
    let main = Dataset::load(&cfg.data.train, false)?;
    check_compatible(&cfg.model, &main)?;
    let mut set = TrainSet {
        sources: vec![main],
        weights: vec![cfg.data.train_weight],
    };
    for m in &cfg.data.mix {
        let d = Dataset::load(&m.path, false)?;
        check_compatible(&cfg.model, &d)?;
        if d.concepts != set.sources[0].concepts {
            return Err(HarnessError::Data(format!("{} lists different concepts", m.path.display())));
        }
        set.sources.push(d);
        set.weights.push(m.weight);
    }
    if set.weights.iter().sum::<f64>() <= 0.0 {
        return Err(HarnessError::Config("sampling weights sum to zero".into()));
    }
    Ok(set)
}

fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display()))))
        .collect()
}

fn log_line(r: &LogRecord) -> String {
    let mut s = serde_json::to_string(r).expect("log record serializes");
    s.push('\n');
    s
}

/// Trains for `cfg.train.epochs` epochs, writing `train_log.jsonl`,
/// `last.ckpt` after every epoch and `best.ckpt` whenever validation F1
/// improves. With `resume`, continues from `out/last.ckpt` when present.
pub fn train(cfg: &RunConfig, out: &Path, resume: bool) -> Result<TrainSummary> {
    cfg.check_train_paths()?;
    let data = load_train_set(cfg)?;
    let val = match &cfg.data.val {
        Some(p) => {
            let d = Dataset::load(p, false)?;
            check_compatible(&cfg.model, &d)?;
            Some(d)
        }
        None => None,
    };
    create_dir(out)?;
    let log_path = out.join(TRAIN_LOG);
    let last_path = out.join(LAST_CKPT);
    let (mut trainer, mut log) = if resume && last_path.exists() {
        let ckpt = Checkpoint::load(&last_path)?;
        let t = Trainer::from_checkpoint(cfg, ckpt)?;
        let kept: Vec<LogRecord> = read_log(&log_path)?
            .into_iter()
            .filter(|r| r.epoch() < t.epoch)
            .collect();
        (t, kept)
    } else {
        (Trainer::new(cfg, data.sources[0].concepts.clone())?, Vec::new())
    };
    if trainer.concepts != data.sources[0].concepts {
        return Err(HarnessError::Data("training data concepts differ from the checkpoint".into()));
    }
    let mut file = std::fs::File::create(&log_path).map_err(io_err(&log_path))?;
    for r in &log {
        file.write_all(log_line(r).as_bytes()).map_err(io_err(&log_path))?;
    }
    let mut final_loss = f64::NAN;
    while trainer.epoch < cfg.train.epochs {
        let started = Instant::now();
        let mut sink = |r: LogRecord| -> Result<()> {
            file.write_all(log_line(&r).as_bytes()).map_err(io_err(&log_path))?;
            log.push(r);
            Ok(())
        };
        let epoch = trainer.epoch;
        let mean_loss = trainer.train_epoch(&data, &mut sink)?;
        final_loss = mean_loss;
        let metrics = match &val {
            Some(v) => Some(class_metrics(
                &predict_all(&cfg.model, &trainer.params, v, cfg.eval.batch_size)?,
                v,
            )?),
            None => None,
        };
        let score = metrics.map(|m| m.f1).unwrap_or(-mean_loss);
        let best = trainer.best_val_f1.map_or(true, |b| score > b);
        if best {
            trainer.best_val_f1 = Some(score);
            trainer.checkpoint(false).save(&out.join(BEST_CKPT))?;
        }
        sink(LogRecord::Epoch {
            epoch,
            mean_loss,
            val: metrics,
            best,
        })?;
        trainer.checkpoint(true).save(&last_path)?;
        eprintln!(
            "epoch {:>3}/{} loss {mean_loss:.4}{} ({:.1}s)",
            epoch + 1,
            cfg.train.epochs,
            metrics.map(|m| format!(" val f1 {:.4} acc {:.4}", m.f1, m.acc)).unwrap_or_default(),
            started.elapsed().as_secs_f64()
        );
    }
    if !final_loss.is_finite() {
        final_loss = log
            .iter()
            .rev()
            .find_map(|r| match r {
                LogRecord::Epoch { mean_loss, .. } => Some(*mean_loss),
                _ => None,
            })
            .unwrap_or(f64::NAN);
    }
    Ok(TrainSummary {
        epochs: trainer.epoch,
        steps: trainer.opt.step,
        final_loss,
        best_val_f1: trainer.best_val_f1,
        log,
    })
}

/// Writes `out/config.toml` with the resolved configuration.
pub fn write_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    write(&out.join("config.toml"), cfg.to_toml())
}
