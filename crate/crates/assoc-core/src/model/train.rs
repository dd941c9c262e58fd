//! Two-phase contrastive training over the pair space.
//!
//! Phase 1 trains the MLP with the mixing scalar frozen at its init; phase 2
//! warm-starts from there and trains everything. Each phase runs its own
//! cosine schedule. Batch order is derived statelessly from (seed, epoch),
//! so a checkpoint plus the base seed reproduces the exact batch stream.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairs::{sample_epoch, PairSpace};
use crate::util::derive_seed;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::optim::{cosine_lr, AdamW};
use super::{backward, AssociationModel, ModelShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub temperature: f64,
    pub epochs_phase1: u32,
    pub epochs_phase2: u32,
    pub learning_rate: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Checkpoint every this many epochs (0 disables periodic checkpoints).
    pub checkpoint_interval: u32,
    pub n_blocks: usize,
    pub hidden_multiplier: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 512,
            temperature: 0.05,
            epochs_phase1: 100,
            epochs_phase2: 50,
            learning_rate: 1e-4,
            lr_floor: 1e-6,
            weight_decay: 0.01,
            seed: 42,
            checkpoint_interval: 10,
            n_blocks: 4,
            hidden_multiplier: 1,
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> u32 {
        self.epochs_phase1 + self.epochs_phase2
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.total_epochs() == 0 {
            return Err(Error::Config("at least one epoch required".into()));
        }
        Ok(())
    }
}

/// Per-epoch training log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: u8,
    pub epoch: u32,
    pub mean_loss: f64,
    pub mean_accuracy: f64,
    pub last_lr: f32,
    pub alpha: f32,
}

/// Maps a chunk's global position index to the embedding row that sits at
/// that position. Identity for the natural order; a per-book permutation for
/// the temporal-shuffle control.
#[derive(Debug, Clone)]
pub enum RowGather<'a> {
    Identity,
    Mapped(&'a [u32]),
}

impl<'a> RowGather<'a> {
    #[inline]
    fn row(&self, position_index: u64) -> usize {
        match self {
            RowGather::Identity => position_index as usize,
            RowGather::Mapped(map) => map[position_index as usize] as usize,
        }
    }
}

/// Trained model plus its full metric log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AssociationModel<f32>,
    pub metrics: Vec<EpochMetrics>,
}

fn gather_batch(
    rows: &ArrayView2<'_, f32>,
    batch: &[(u64, u64)],
    gather: &RowGather<'_>,
) -> (Array2<f32>, Array2<f32>) {
    let dim = rows.ncols();
    let n = batch.len();
    let mut xa = Array2::zeros((n, dim));
    let mut xb = Array2::zeros((n, dim));
    for (r, &(i, j)) in batch.iter().enumerate() {
        xa.row_mut(r).assign(&rows.row(gather.row(i)));
        xb.row_mut(r).assign(&rows.row(gather.row(j)));
    }
    (xa, xb)
}

/// Train from scratch. See [`train_resumable`] for checkpointed runs.
pub fn train(
    space: &PairSpace,
    rows: &ArrayView2<'_, f32>,
    gather: &RowGather<'_>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_resumable(space, rows, gather, config, None, None, [0u8; 32])
}

/// Train with optional periodic checkpoints and optional resume state.
///
/// When `resume` is given, completed epochs are skipped and training
/// continues bit-identically from the stored optimizer state. The metric log
/// covers only the epochs run by this call.
pub fn train_resumable(
    space: &PairSpace,
    rows: &ArrayView2<'_, f32>,
    gather: &RowGather<'_>,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    resume: Option<Checkpoint>,
    config_hash: [u8; 32],
) -> Result<TrainOutcome> {
    config.validate()?;
    if space.total_rows() as usize != rows.nrows() {
        return Err(Error::Data(format!(
            "pair space covers {} rows, store has {}",
            space.total_rows(),
            rows.nrows()
        )));
    }
    let steps_per_epoch = space.total_pairs() / config.batch_size as u64;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch_size {} exceeds total pairs {}",
            config.batch_size,
            space.total_pairs()
        )));
    }

    let shape = ModelShape {
        dim: rows.ncols(),
        n_blocks: config.n_blocks,
        hidden_multiplier: config.hidden_multiplier,
    };

    let (mut model, mut opt, mut global_step, start_epoch) = match resume {
        Some(ckpt) => {
            if ckpt.shape != shape {
                return Err(Error::Config(format!(
                    "checkpoint shape {:?} does not match config shape {shape:?}",
                    ckpt.shape
                )));
            }
            if ckpt.seed != config.seed {
                return Err(Error::Config(
                    "checkpoint seed does not match config seed".into(),
                ));
            }
            (ckpt.model(), ckpt.opt.clone(), ckpt.global_step, ckpt.next_epoch)
        }
        None => {
            let model = AssociationModel::init(shape, config.seed);
            let opt = AdamW::new(model.n_params(), config.weight_decay);
            (model, opt, 0u64, 0u32)
        }
    };

    let decay_mask = model.decay_mask();
    let alpha_idx = model.alpha_index();
    let mut params = model.flatten();
    let mut metrics = Vec::new();
    let mut last_good: Option<PathBuf> = None;

    for epoch in start_epoch..config.total_epochs() {
        let phase = if epoch < config.epochs_phase1 { 1u8 } else { 2u8 };
        let (phase_epoch, phase_epochs) = if phase == 1 {
            (epoch, config.epochs_phase1)
        } else {
            (epoch - config.epochs_phase1, config.epochs_phase2)
        };
        let phase_total_steps = phase_epochs as u64 * steps_per_epoch;
        let frozen: &[usize] = if phase == 1 { &[alpha_idx] } else { &[] };

        let epoch_seed = derive_seed(config.seed, epoch as u64 + 1);
        let sampler = sample_epoch(space, config.batch_size, epoch_seed)?;

        let mut loss_sum = 0.0f64;
        let mut acc_sum = 0.0f64;
        let mut last_lr = 0.0f32;
        for (step, batch) in sampler.enumerate() {
            let (xa, xb) = gather_batch(rows, &batch, gather);
            let (loss, acc, grads) = match backward(&model, &xa.view(), &xb.view(), config.temperature as f32)
            {
                Ok(out) => out,
                Err(e) => {
                    return Err(Error::Numeric(format!(
                        "training aborted at epoch {epoch} step {step}: {e}; last good checkpoint: {}",
                        last_good
                            .as_deref()
                            .map(|p| p.display().to_string())
                            .unwrap_or_else(|| "none".into())
                    )));
                }
            };
            let phase_step = phase_epoch as u64 * steps_per_epoch + step as u64;
            last_lr = cosine_lr(
                config.learning_rate,
                config.lr_floor,
                phase_step,
                phase_total_steps,
            );
            opt.step(&mut params, &grads.flatten(), last_lr, &decay_mask, frozen);
            model.load_flat(&params);
            loss_sum += loss as f64;
            acc_sum += acc;
            global_step += 1;
        }

        metrics.push(EpochMetrics {
            phase,
            epoch,
            mean_loss: loss_sum / steps_per_epoch as f64,
            mean_accuracy: acc_sum / steps_per_epoch as f64,
            last_lr,
            alpha: model.alpha(),
        });

        if let Some(dir) = checkpoint_dir {
            let due = config.checkpoint_interval > 0
                && (epoch + 1) % config.checkpoint_interval == 0;
            let is_last = epoch + 1 == config.total_epochs();
            if due || is_last {
                let path = dir.join(format!("epoch{:05}.pamm", epoch + 1));
                save_checkpoint(
                    &path,
                    &Checkpoint {
                        config_hash,
                        shape,
                        model_flat: params.clone(),
                        opt: opt.clone(),
                        next_epoch: epoch + 1,
                        global_step,
                        seed: config.seed,
                    },
                )?;
                last_good = Some(path);
            }
        }
    }

    Ok(TrainOutcome { model, metrics })
}
