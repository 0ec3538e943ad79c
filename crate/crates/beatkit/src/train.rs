//! Training: single-sequence batches, adaptive-moment optimization, and a
//! plateau learning-rate schedule.
//!
//! Clips longer than the frame cap are split into chunks; partial-demix
//! augmentation runs per clip per epoch on the training split. All
//! randomness derives from the run seed, epoch-indexed, so interrupted and
//! resumed runs reproduce a continuous one bit-for-bit.

use crate::error::{Error, Result};
use crate::model::{DemixedClip, Encoder, Mode};
use crate::rng::Rng;
use crate::targets::{build_target_track, multitask_loss_on_tape, partial_demix_augment, Annotation};
use crate::tensor::{checkpoint, ParamStore, Tape, Tensor};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    /// LR divides by this on each plateau trigger.
    pub lr_factor: f64,
    /// Epochs without validation improvement before reducing.
    pub lr_patience: usize,
    pub min_lr: f64,
    /// Clips longer than this split into chunks.
    pub max_clip_frames: usize,
    pub val_fraction: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            initial_lr: 1e-3,
            lr_factor: 5.0,
            lr_patience: 2,
            min_lr: 1e-7,
            max_clip_frames: 8192,
            val_fraction: 0.2,
            augment: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            m: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update over every parameter's populated `grad`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, (name, tensor)) in store.iter_mut().enumerate() {
            let grad = tensor
                .grad
                .take()
                .ok_or_else(|| Error::Contract(format!("parameter {name} has no gradient")))?;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = tensor.data_mut();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau schedule: after `patience` consecutive epochs without
/// improvement, divide the rate by `factor`, never below `floor`.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    factor: f64,
    patience: usize,
    floor: f64,
    best: f64,
    stalled: usize,
}

impl PlateauSchedule {
    pub fn new(initial_lr: f64, factor: f64, patience: usize, floor: f64) -> Self {
        PlateauSchedule {
            lr: initial_lr,
            factor,
            patience,
            floor,
            best: f64::INFINITY,
            stalled: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Record an epoch's validation loss; returns the rate for the next epoch.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.stalled = 0;
        } else {
            self.stalled += 1;
            if self.stalled >= self.patience {
                self.lr = (self.lr / self.factor).max(self.floor);
                self.stalled = 0;
            }
        }
        self.lr
    }
}

/// Split a clip (and its annotation) into chunks of at most `max_frames`.
pub fn split_clip(
    clip: &DemixedClip,
    ann: &Annotation,
    max_frames: usize,
) -> Result<Vec<(DemixedClip, Annotation)>> {
    let t = clip.frames();
    if t <= max_frames {
        return Ok(vec![(clip.clone(), ann.clone())]);
    }
    let (c, f) = (clip.channels(), clip.mel_bins());
    let mut out = Vec::new();
    let mut start = 0usize;
    while start < t {
        let len = max_frames.min(t - start);
        let src = clip.values.data();
        let chunk: Vec<f64> = src[start * c * f..(start + len) * c * f].to_vec();
        let chunk_clip = DemixedClip::new(
            Tensor::new(vec![len, c, f], chunk)?,
            clip.fps,
            clip.channel_names.clone(),
        )?;
        let start_s = start as f64 / clip.fps;
        let end_s = (start + len) as f64 / clip.fps;
        out.push((chunk_clip, ann.window(start_s, end_s)));
        start += len;
    }
    Ok(out)
}

/// Full training state, checkpointable mid-run.
pub struct Trainer {
    pub model: Encoder,
    pub optimizer: Adam,
    pub schedule: PlateauSchedule,
    pub next_epoch: usize,
    pub history: TrainHistory,
    cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model: Encoder, cfg: TrainConfig) -> Self {
        let optimizer = Adam::new(&model.params);
        let schedule =
            PlateauSchedule::new(cfg.initial_lr, cfg.lr_factor, cfg.lr_patience, cfg.min_lr);
        Trainer {
            model,
            optimizer,
            schedule,
            next_epoch: 0,
            history: TrainHistory::default(),
            cfg,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Deterministic train/validation split of dataset indices.
    fn split_indices(&self, n: usize) -> (Vec<usize>, Vec<usize>) {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = Rng::new(self.cfg.seed).derive(0x5350_4c49); // "SPLI"
        rng.shuffle(&mut order);
        let n_val = ((n as f64 * self.cfg.val_fraction).round() as usize).min(n.saturating_sub(1));
        let val = order[..n_val].to_vec();
        let train = order[n_val..].to_vec();
        (train, val)
    }

    /// Run `epochs` epochs (continuing from `next_epoch`).
    pub fn run(
        &mut self,
        dataset: &[(DemixedClip, Annotation)],
        epochs: usize,
    ) -> Result<&TrainHistory> {
        if dataset.is_empty() {
            return Err(Error::Contract("training dataset is empty".into()));
        }
        // pre-split long clips once
        let mut chunks: Vec<(usize, DemixedClip, Annotation)> = Vec::new();
        for (i, (clip, ann)) in dataset.iter().enumerate() {
            for (c, a) in split_clip(clip, ann, self.cfg.max_clip_frames)? {
                chunks.push((i, c, a));
            }
        }
        let (train_src, val_src) = self.split_indices(dataset.len());
        let train_chunks: Vec<usize> = (0..chunks.len())
            .filter(|&k| train_src.contains(&chunks[k].0))
            .collect();
        let val_chunks: Vec<usize> = (0..chunks.len())
            .filter(|&k| val_src.contains(&chunks[k].0))
            .collect();

        let end_epoch = self.next_epoch + epochs;
        while self.next_epoch < end_epoch {
            let epoch = self.next_epoch;
            let lr = self.schedule.lr();
            let mut epoch_rng = Rng::new(self.cfg.seed).derive(0x4550 ^ (epoch as u64) << 8);
            let mut order = train_chunks.clone();
            epoch_rng.shuffle(&mut order);
            let mut aug_rng = epoch_rng.derive(1);
            let mut drop_rng = epoch_rng.derive(2);

            let mut train_loss = 0.0;
            for &k in &order {
                let (_, clip, ann) = &chunks[k];
                let clip = if self.cfg.augment && clip.channels() == 5 {
                    partial_demix_augment(clip, &mut aug_rng)?
                } else {
                    clip.clone()
                };
                let tgt = build_target_track(ann, clip.frames(), clip.fps)?;
                let mut tape = Tape::new();
                let bound = self.model.params.bind(&mut tape);
                let pass = self.model.forward(
                    &mut tape,
                    &bound,
                    &clip,
                    Mode::Train(&mut drop_rng),
                    None,
                )?;
                let loss =
                    multitask_loss_on_tape(&mut tape, pass.beat, pass.downbeat, pass.tempo, &tgt)?;
                let loss_value = tape.data(loss)[0];
                if !loss_value.is_finite() {
                    return Err(Error::Divergence(format!(
                        "loss {loss_value} at epoch {epoch}, clip {k}"
                    )));
                }
                train_loss += loss_value;
                tape.backward(loss)?;
                self.model.params.absorb_grads(&tape, &bound);
                self.optimizer.step(&mut self.model.params, lr)?;
            }
            train_loss /= order.len().max(1) as f64;

            // validation: eval mode, no augmentation
            let val_ids = if val_chunks.is_empty() { &train_chunks } else { &val_chunks };
            let mut val_loss = 0.0;
            for &k in val_ids {
                let (_, clip, ann) = &chunks[k];
                let tgt = build_target_track(ann, clip.frames(), clip.fps)?;
                let mut tape = Tape::new();
                let bound = self.model.params.bind(&mut tape);
                let pass = self.model.forward(&mut tape, &bound, clip, Mode::Eval, None)?;
                let loss =
                    multitask_loss_on_tape(&mut tape, pass.beat, pass.downbeat, pass.tempo, &tgt)?;
                val_loss += tape.data(loss)[0];
            }
            val_loss /= val_ids.len().max(1) as f64;
            if !val_loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "validation loss {val_loss} at epoch {epoch}"
                )));
            }

            self.schedule.observe(val_loss);
            self.history.epochs.push(EpochStats {
                epoch,
                train_loss,
                val_loss,
                lr,
            });
            self.next_epoch += 1;
        }
        Ok(&self.history)
    }

    /// Persist model parameters plus optimizer/schedule state.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut store = self.model.params.clone();
        for (idx, (name, _)) in self.model.params.iter().enumerate() {
            store.insert(
                &format!("opt.m.{name}"),
                Tensor::new(
                    self.model.params.get(name).unwrap().shape().to_vec(),
                    self.optimizer.m[idx].clone(),
                )?,
            );
            store.insert(
                &format!("opt.v.{name}"),
                Tensor::new(
                    self.model.params.get(name).unwrap().shape().to_vec(),
                    self.optimizer.v[idx].clone(),
                )?,
            );
        }
        store.insert("meta.step", Tensor::scalar(self.optimizer.step as f64));
        store.insert("meta.next_epoch", Tensor::scalar(self.next_epoch as f64));
        store.insert("meta.lr", Tensor::scalar(self.schedule.lr));
        store.insert("meta.best_val", Tensor::scalar(if self.schedule.best.is_finite() {
            self.schedule.best
        } else {
            -1.0
        }));
        store.insert("meta.stalled", Tensor::scalar(self.schedule.stalled as f64));
        checkpoint::save(&store, path)
    }

    /// Resume a trainer from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn load_checkpoint(
        path: &Path,
        cfg_model: crate::model::EncoderConfig,
        cfg_train: TrainConfig,
    ) -> Result<Trainer> {
        let full = checkpoint::load(path)?;
        let model_params = strip_training_state(&full);
        let model = Encoder::from_parts(cfg_model, model_params)?;
        let mut trainer = Trainer::new(model, cfg_train);
        let scalar = |name: &str| -> Result<f64> {
            full.get(name)
                .map(|t| t.data()[0])
                .ok_or_else(|| Error::Format(format!("checkpoint missing {name}")))
        };
        if full.get("meta.step").is_some() {
            for (idx, (name, _)) in trainer.model.params.iter().enumerate() {
                if let (Some(m), Some(v)) = (
                    full.get(&format!("opt.m.{name}")),
                    full.get(&format!("opt.v.{name}")),
                ) {
                    trainer.optimizer.m[idx] = m.data().to_vec();
                    trainer.optimizer.v[idx] = v.data().to_vec();
                }
            }
            trainer.optimizer.step = scalar("meta.step")? as u64;
            trainer.next_epoch = scalar("meta.next_epoch")? as usize;
            trainer.schedule.lr = scalar("meta.lr")?;
            let best = scalar("meta.best_val")?;
            trainer.schedule.best = if best < 0.0 { f64::INFINITY } else { best };
            trainer.schedule.stalled = scalar("meta.stalled")? as usize;
        }
        Ok(trainer)
    }
}

/// Model parameters only, with optimizer/meta entries removed.
pub fn strip_training_state(full: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in full.iter() {
        if !name.starts_with("opt.") && !name.starts_with("meta.") {
            out.insert(name, t.clone());
        }
    }
    out
}

/// One-call training entry point.
pub fn train_loop(
    model: Encoder,
    dataset: &[(DemixedClip, Annotation)],
    cfg: TrainConfig,
) -> Result<(Encoder, TrainHistory)> {
    let epochs = cfg.epochs;
    let mut trainer = Trainer::new(model, cfg);
    trainer.run(dataset, epochs)?;
    let Trainer { model, history, .. } = trainer;
    Ok((model, history))
}
