use std::time::Instant;

use rand::seq::SliceRandom;

use super::batch::{compose_batch, BatchKey};
use super::eval::{argmax, evaluate, FeatureCache};
use super::loss::{total_loss, BatchTargets, LossSettings};
use super::optim::{adam_step, lr_at_epoch, AdamState};
use super::{EpochMetrics, Mode, TrainConfig};
use crate::autodiff::{ParameterSet, Tape};
use crate::config::RunConfig;
use crate::dataset::{Corpus, Split};
use crate::model::{init_params, Checkpoint, CheckpointMeta, KeywordModel};
use crate::{rng, Error, Result};

/// Losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLoss {
    pub epoch: u32,
    pub batch: u32,
    pub loss_mix: f32,
    pub loss_cos: f32,
    pub loss_total: f32,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub batch_losses: Vec<BatchLoss>,
    /// State at the epoch with the highest validation accuracy.
    pub best: Checkpoint,
    pub last: Checkpoint,
}

fn encode_rng_state(seed: u64, next_epoch: u32) -> Vec<u8> {
    let mut out = seed.to_le_bytes().to_vec();
    out.extend_from_slice(&next_epoch.to_le_bytes());
    out
}

fn decode_rng_state(bytes: &[u8]) -> Result<(u64, u32)> {
    if bytes.len() != 12 {
        return Err(Error::Checkpoint(format!("rng state has {} bytes, expected 12", bytes.len())));
    }
    let seed = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let epoch = u32::from_le_bytes(bytes[8..].try_into().expect("4 bytes"));
    Ok((seed, epoch))
}

fn at_step(epoch: u32, batch: u32) -> impl Fn(Error) -> Error {
    move |err| match err {
        Error::Numeric { op, detail } => Error::Numeric {
            op,
            detail: format!("{detail} (epoch {epoch}, batch {batch})"),
        },
        other => other,
    }
}

/// The epoch loop. All randomness is keyed by `(seed, epoch, batch, row)`,
/// so a trainer rebuilt from a checkpoint continues exactly where the
/// original would have.
pub struct Trainer<'a> {
    corpus: &'a Corpus,
    run: RunConfig,
    cfg: TrainConfig,
    mode: Mode,
    model: KeywordModel,
    params: ParameterSet<f32>,
    adam: AdamState<f32>,
    epoch: u32,
    best_val_acc: Option<f64>,
    best_epoch: u32,
    last_metrics: Option<EpochMetrics>,
    train_pool: Vec<usize>,
    val: FeatureCache,
    batch_losses: Vec<BatchLoss>,
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &'a Corpus, run: RunConfig, mode: Mode) -> Result<Self> {
        run.validate()?;
        let params = init_params(&run.model)?;
        let adam = AdamState::for_config(&params, &run.train);
        Self::assemble(corpus, run, mode, params, adam)
    }

    fn assemble(
        corpus: &'a Corpus,
        run: RunConfig,
        mode: Mode,
        params: ParameterSet<f32>,
        adam: AdamState<f32>,
    ) -> Result<Self> {
        let train_pool = corpus.indices(Split::Train);
        if train_pool.len() < 2 {
            return Err(Error::Dataset(format!(
                "need at least 2 training entries, have {}",
                train_pool.len()
            )));
        }
        let val = FeatureCache::build(corpus, Split::Validation)?;
        if val.is_empty() {
            return Err(Error::Dataset("validation split is empty".into()));
        }
        Ok(Trainer {
            corpus,
            cfg: run.train.for_mode(mode),
            model: KeywordModel::new(run.model.clone())?,
            run,
            mode,
            params,
            adam,
            epoch: 0,
            best_val_acc: None,
            best_epoch: 0,
            last_metrics: None,
            train_pool,
            val,
            batch_losses: Vec::new(),
        })
    }

    pub fn from_checkpoint(corpus: &'a Corpus, ckpt: &Checkpoint) -> Result<Self> {
        let (seed, next_epoch) = decode_rng_state(&ckpt.rng_state)?;
        if seed != ckpt.config.train.seed || next_epoch != ckpt.meta.epoch + 1 {
            return Err(Error::Checkpoint("rng state disagrees with config and epoch".into()));
        }
        let (m, v) = ckpt
            .adam_moments
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
        let mut adam = AdamState::for_config(&ckpt.params, &ckpt.config.train);
        adam.m = m;
        adam.v = v;
        adam.t = ckpt.meta.adam_step;
        let mut t = Self::assemble(corpus, ckpt.config.clone(), ckpt.meta.mode, ckpt.params.clone(), adam)?;
        t.epoch = ckpt.meta.epoch;
        t.best_val_acc = ckpt.meta.best_val_acc;
        t.best_epoch = ckpt.meta.best_epoch;
        t.last_metrics = ckpt.meta.metrics_tail.clone();
        Ok(t)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// The configuration as given, before mode adjustments.
    pub fn run_config(&self) -> &RunConfig {
        &self.run
    }

    /// The training configuration after mode adjustments.
    pub fn effective_config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &KeywordModel {
        &self.model
    }

    pub fn params(&self) -> &ParameterSet<f32> {
        &self.params
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// True when the latest epoch matched or beat the best validation accuracy so far;
    /// ties go to the later epoch.
    pub fn is_best(&self) -> bool {
        self.epoch > 0 && self.best_epoch == self.epoch
    }

    pub fn batch_losses(&self) -> &[BatchLoss] {
        &self.batch_losses
    }

    pub fn validation_cache(&self) -> &FeatureCache {
        &self.val
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.run.clone(),
            meta: CheckpointMeta {
                mode: self.mode,
                epoch: self.epoch,
                adam_step: self.adam.t,
                best_val_acc: self.best_val_acc,
                best_epoch: self.best_epoch,
                metrics_tail: self.last_metrics.clone(),
            },
            rng_state: encode_rng_state(self.cfg.seed, self.epoch + 1),
            params: self.params.clone(),
            adam_moments: Some((self.adam.m.clone(), self.adam.v.clone())),
        }
    }

    /// Visits every training entry once in a seeded order, then evaluates on
    /// the validation split.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let start = Instant::now();
        let epoch = self.epoch + 1;
        let seed = self.cfg.seed;
        let mut order = self.train_pool.clone();
        order.shuffle(&mut rng::keyed(&[seed, u64::from(epoch)], 7));
        let lr = lr_at_epoch(epoch, &self.cfg);
        let contrastive = self.mode == Mode::Cosmix;
        let settings = LossSettings {
            beta: self.cfg.beta_penalty,
            cls_loss: self.cfg.cls_loss,
            contrastive,
        };
        let aug = self.run.augment.clone();

        let (mut sum_mix, mut sum_cos, mut sum_total, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for (b, sources) in order.chunks(self.cfg.batch_size).enumerate() {
            let b = b as u32;
            let key = BatchKey { seed, epoch, batch: b };
            let batch = compose_batch(self.corpus, sources, &self.train_pool, &self.cfg, &aug, key, contrastive)
                .map_err(at_step(epoch, b))?;

            let tape = Tape::new();
            let step = || -> Result<_> {
                let bound = tape.bind(&self.params)?;
                let x = tape.constant(batch.feats_mix.clone())?;
                let views = match (&batch.feats_i, &batch.feats_j) {
                    (Some(i), Some(j)) if contrastive => Some((tape.constant(i.clone())?, tape.constant(j.clone())?)),
                    _ => None,
                };
                let targets = BatchTargets::from_batch(&batch);
                let parts = total_loss(&tape, &self.model, &bound, x, views, &targets, &settings)?;
                let grads = tape.backward(parts.total)?.for_params(&bound, &self.params);
                Ok((parts, grads))
            };
            let (parts, grads) = step().map_err(at_step(epoch, b))?;
            adam_step(&mut self.params, &grads, &mut self.adam, lr)?;

            let record = BatchLoss {
                epoch,
                batch: b,
                loss_mix: tape.item(parts.loss_mix),
                loss_cos: parts.loss_cos.map_or(0.0, |v| tape.item(v)),
                loss_total: tape.item(parts.total),
            };
            let n = sources.len() as f64;
            sum_mix += f64::from(record.loss_mix) * n;
            sum_cos += f64::from(record.loss_cos) * n;
            sum_total += f64::from(record.loss_total) * n;
            let logits = tape.value(parts.logits);
            correct += logits
                .data()
                .chunks(crate::dataset::NUM_CLASSES)
                .zip(batch.dominant_labels())
                .filter(|(row, label)| argmax(row) == *label)
                .count();
            self.batch_losses.push(record);
        }

        let val = evaluate(&self.model, &self.params, &self.val, self.cfg.eval_batch_size)?;
        self.epoch = epoch;
        if self.best_val_acc.is_none_or(|best| val.accuracy >= best) {
            self.best_val_acc = Some(val.accuracy);
            self.best_epoch = epoch;
        }
        let n = order.len() as f64;
        let metrics = EpochMetrics {
            epoch,
            loss_mix: sum_mix / n,
            loss_cos: sum_cos / n,
            loss_total: sum_total / n,
            train_acc: correct as f64 / n,
            val_acc: val.accuracy,
            lr,
            seconds: if self.cfg.record_wall_clock {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        log::info!(
            "epoch {epoch} loss {:.4} (mix {:.4}, cos {:.4}) train {:.4} val {:.4}",
            metrics.loss_total,
            metrics.loss_mix,
            metrics.loss_cos,
            metrics.train_acc,
            metrics.val_acc
        );
        self.last_metrics = Some(metrics.clone());
        Ok(metrics)
    }
}

/// Trains for `run.train.epochs` epochs from a fresh initialization.
pub fn train(corpus: &Corpus, run: &RunConfig, mode: Mode) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(corpus, run.clone(), mode)?;
    let mut history = Vec::new();
    let mut best = None;
    while !trainer.is_finished() {
        history.push(trainer.run_epoch()?);
        if trainer.is_best() {
            best = Some(trainer.checkpoint());
        }
    }
    Ok(TrainOutcome {
        history,
        batch_losses: trainer.batch_losses.clone(),
        best: best.expect("at least one epoch ran"),
        last: trainer.checkpoint(),
    })
}
