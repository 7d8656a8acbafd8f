//! The training loop and cross-validation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};

use super::checkpoint::{save_checkpoint, Checkpoint, Progress};
use super::config::{AugmentConfig, TrainConfig};
use super::predict::predict_image;
use crate::architecture::{ForwardOptions, FusionNet};
use crate::augment::{add_gaussian_noise, elastic_warp, enrich, mirror_pad, sample_elastic_field, sample_rng};
use crate::error::{Error, Result};
use crate::grid::SamplePair;
use crate::metrics::{evaluate, labeling_from_boundary, ScoreReport};
use crate::tensor::{adam_step, backward, AdamState, Tape, Tensor};

/// Index reserved for the shuffle stream of an epoch.
const SHUFFLE_STREAM: u64 = 0xFFFF_FFFF;

/// The per-epoch view of one training sample: warp, noise, then mirror
/// padding, all driven by the `(seed, epoch, index)` stream.
pub fn augment_sample(
    config: &AugmentConfig,
    seed: u64,
    epoch: u64,
    index: u64,
    pair: &SamplePair,
) -> Result<SamplePair> {
    let mut rng = sample_rng(seed, epoch, index);
    let mut out = if config.elastic_amplitude > 0.0 {
        let field = sample_elastic_field(&mut rng, config.elastic_amplitude)?;
        elastic_warp(pair, &field)
    } else {
        pair.clone()
    };
    if config.noise_sigma > 0.0 {
        out.image = add_gaussian_noise(&out.image, config.noise_sigma, &mut rng)?;
    }
    Ok(SamplePair {
        image: mirror_pad(&out.image, config.pad_radius)?,
        label: mirror_pad(&out.label, config.pad_radius)?,
    })
}

/// Loss of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
}

/// Owns the network, optimizer and schedule of one training run.
pub struct Trainer {
    config: TrainConfig,
    net: FusionNet<f32>,
    adam: AdamState<f32>,
    samples: Vec<SamplePair>,
    dataset_len: usize,
    progress: Progress,
    history: Vec<f64>,
    order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &[SamplePair]) -> Result<Self> {
        config.validate()?;
        let net = FusionNet::build(config.network.clone(), config.seed)?;
        let adam = AdamState::new(config.optimizer, net.params());
        Trainer::assemble(config, net, adam, Progress::default(), Vec::new(), dataset)
    }

    /// Continues from a checkpoint. `dataset` must be the one the checkpoint
    /// was trained on.
    pub fn resume(ckpt: Checkpoint, dataset: &[SamplePair]) -> Result<Self> {
        if ckpt.dataset_len != dataset.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint was trained on {} samples, got {}",
                ckpt.dataset_len,
                dataset.len()
            )));
        }
        Trainer::assemble(ckpt.config, ckpt.net, ckpt.adam, ckpt.progress, ckpt.history, dataset)
    }

    fn assemble(
        config: TrainConfig,
        net: FusionNet<f32>,
        adam: AdamState<f32>,
        progress: Progress,
        history: Vec<f64>,
        dataset: &[SamplePair],
    ) -> Result<Self> {
        let first = dataset
            .first()
            .ok_or_else(|| Error::InvalidArgument("training needs at least one sample".into()))?;
        let (h, w) = first.dims();
        if let Some((i, p)) = dataset.iter().enumerate().find(|(_, p)| p.dims() != (h, w)) {
            return Err(Error::InvalidArgument(format!(
                "sample {i} is {}×{}, sample 0 is {h}×{w}; all samples must share one size",
                p.dims().0,
                p.dims().1
            )));
        }
        let aug = &config.augmentation;
        if aug.enrich && h != w {
            return Err(Error::InvalidArgument(format!(
                "enrichment rotates samples and needs square images, got {h}×{w}"
            )));
        }
        if aug.pad_radius > 0 && aug.pad_radius >= h.min(w) {
            return Err(Error::InvalidArgument(format!(
                "pad radius {} must be smaller than the image side {}",
                aug.pad_radius,
                h.min(w)
            )));
        }
        let (ph, pw) = (h + 2 * aug.pad_radius, w + 2 * aug.pad_radius);
        net.spec().check_spatial(ph, pw)?;
        let samples = if aug.enrich { enrich(dataset)? } else { dataset.to_vec() };
        Ok(Trainer {
            config,
            net,
            adam,
            samples,
            dataset_len: dataset.len(),
            progress,
            history,
            order: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn net(&self) -> &FusionNet<f32> {
        &self.net
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// Samples seen per epoch, after enrichment.
    pub fn epoch_len(&self) -> usize {
        self.samples.len()
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.samples.len().div_ceil(self.config.training.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let full = self.config.training.epochs * self.steps_per_epoch();
        self.config.training.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn is_done(&self) -> bool {
        self.progress.step >= self.total_steps()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            net: self.net.clone(),
            adam: self.adam.clone(),
            progress: self.progress,
            history: self.history.clone(),
            dataset_len: self.dataset_len,
        }
    }

    /// Sample order of `epoch`: a seeded permutation, or identity when
    /// shuffling is off.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        if self.config.augmentation.shuffle {
            let mut rng: ChaCha8Rng = sample_rng(self.config.seed, epoch, SHUFFLE_STREAM);
            order.shuffle(&mut rng);
        }
        order
    }

    fn batch_indices(&mut self) -> Vec<usize> {
        let epoch = self.progress.epoch;
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.order = Some((epoch, self.epoch_order(epoch)));
        }
        let order = &self.order.as_ref().expect("set above").1;
        let bs = self.config.training.batch_size;
        let start = self.progress.step_in_epoch as usize * bs;
        order[start..(start + bs).min(order.len())].to_vec()
    }

    /// Augmented input and target tensors for the next step.
    fn next_batch(&mut self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let epoch = self.progress.epoch;
        let idx = self.batch_indices();
        let aug = &self.config.augmentation;
        let seed = self.config.seed;
        let samples = &self.samples;
        let prepared: Vec<Result<SamplePair>> = std::thread::scope(|s| {
            let handles: Vec<_> = idx
                .iter()
                .map(|&i| s.spawn(move || augment_sample(aug, seed, epoch, i as u64, &samples[i])))
                .collect();
            handles.into_iter().map(|h| h.join().expect("augmentation thread")).collect()
        });
        let mut xs = Vec::with_capacity(idx.len());
        let mut ys = Vec::with_capacity(idx.len());
        for p in prepared {
            let p = p?;
            xs.push(p.image.to_tensor::<f32>());
            ys.push(p.label.map(|v| v as f32).to_tensor::<f32>());
        }
        Ok((Tensor::concat_batch(&xs)?, Tensor::concat_batch(&ys)?))
    }

    /// Runs one optimizer step. Returns `None` once the schedule is
    /// complete. A non-finite loss leaves the network at its last good state
    /// and returns [`Error::Diverged`].
    pub fn step(&mut self) -> Result<Option<StepRecord>> {
        if self.is_done() {
            return Ok(None);
        }
        let (x, y) = self.next_batch()?;
        let saved_stats = self.net.running_stats().to_vec();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let pred = self.net.forward(&mut tape, xv, ForwardOptions::train())?;
        let yv = tape.leaf(y);
        let loss_var = tape.mse_loss(pred, yv)?;
        let loss = tape.value(loss_var).item()? as f64;
        if !loss.is_finite() {
            self.net.running_stats_mut().clone_from_slice(&saved_stats);
            warn!(step = self.progress.step, loss, "non-finite loss, aborting");
            return Err(Error::Diverged {
                step: self.progress.step,
                loss,
            });
        }
        backward(&tape, loss_var, self.net.params_mut())?;
        adam_step(self.net.params_mut(), &mut self.adam)?;

        let record = StepRecord {
            step: self.progress.step,
            epoch: self.progress.epoch,
            loss,
        };
        self.history.push(loss);
        self.progress.step += 1;
        self.progress.step_in_epoch += 1;
        if self.progress.step_in_epoch == self.steps_per_epoch() {
            self.progress.epoch += 1;
            self.progress.step_in_epoch = 0;
        }
        debug!(step = record.step, epoch = record.epoch, loss, "step");
        Ok(Some(record))
    }

    /// Steps until done, calling `on_step` after each one.
    pub fn run(&mut self, mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>) -> Result<()> {
        while let Some(rec) = self.step()? {
            on_step(self, &rec)?;
        }
        Ok(())
    }
}

/// Trains to completion in memory.
pub fn train(config: TrainConfig, dataset: &[SamplePair]) -> Result<(Checkpoint, Vec<f64>)> {
    let mut t = Trainer::new(config, dataset)?;
    t.run(|_, _| Ok(()))?;
    let ckpt = t.checkpoint();
    let history = ckpt.history.clone();
    Ok((ckpt, history))
}

/// Trains while writing `out` at the configured cadence and at the end. On
/// divergence the last good state is written before the error is returned.
pub fn train_to_file(
    trainer: &mut Trainer,
    out: &Path,
    mut on_step: impl FnMut(&Trainer, &StepRecord),
) -> Result<Checkpoint> {
    let every = trainer.config.training.checkpoint_every;
    let result = trainer.run(|t, rec| {
        on_step(t, rec);
        if every > 0 && (rec.step + 1) % every == 0 {
            save_checkpoint(&t.checkpoint(), out)?;
            info!(step = rec.step + 1, path = %out.display(), "checkpoint written");
        }
        Ok(())
    });
    let ckpt = trainer.checkpoint();
    if let Err(e) = result {
        if matches!(e, Error::Diverged { .. }) {
            save_checkpoint(&ckpt, out)?;
        }
        return Err(e);
    }
    save_checkpoint(&ckpt, out)?;
    Ok(ckpt)
}

/// Seeded shuffle, then contiguous blocks whose sizes differ by at most one.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds == 0 || folds > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} samples into {folds} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng: ChaCha8Rng = sample_rng(seed, u64::from(u32::MAX), SHUFFLE_STREAM);
    order.shuffle(&mut rng);
    let (base, extra) = (n / folds, n % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    /// Dataset indices held out for this fold.
    pub validation: Vec<usize>,
    pub per_image: Vec<ScoreReport>,
    pub mean: ScoreReport,
    pub final_loss: Option<f64>,
}

/// K-fold cross-validation. Each fold trains a fresh network on the other
/// folds, enriching only those, and scores the held-out samples. With one
/// fold the whole dataset is trained on and no report is produced.
pub fn cross_validate(config: &TrainConfig, dataset: &[SamplePair]) -> Result<Vec<FoldReport>> {
    config.validate()?;
    let k = config.training.folds;
    let folds = fold_assignment(dataset.len(), k, config.seed)?;
    if k == 1 {
        train(config.clone(), dataset)?;
        return Ok(Vec::new());
    }
    let mut reports = Vec::with_capacity(k);
    for (f, held_out) in folds.iter().enumerate() {
        let train_set: Vec<SamplePair> = (0..dataset.len())
            .filter(|i| !held_out.contains(i))
            .map(|i| dataset[i].clone())
            .collect();
        info!(fold = f, train = train_set.len(), validation = held_out.len(), "fold");
        let (ckpt, history) = train(config.clone(), &train_set)?;
        let per_image = held_out
            .iter()
            .map(|&i| {
                let pair = &dataset[i];
                let prob = predict_image(
                    &ckpt.net,
                    &pair.image,
                    config.augmentation.pad_radius,
                    config.prediction.tta,
                )?;
                evaluate(&prob, &labeling_from_boundary(&pair.label), &config.evaluation)
            })
            .collect::<Result<Vec<_>>>()?;
        reports.push(FoldReport {
            fold: f,
            validation: held_out.clone(),
            mean: ScoreReport::mean(&per_image).expect("folds are non-empty"),
            per_image,
            final_loss: history.last().copied(),
        });
    }
    Ok(reports)
}
