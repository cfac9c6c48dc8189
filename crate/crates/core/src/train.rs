//! Training loop, history bookkeeping, and the loss/activation/
//! optimizer sweep harness.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{init_model, Activation, DropoutMask, LossKind, MlpNet, Scalar};
use crate::optim::{decayed_lr, OptimizerKind, OptimizerState};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl TrainConfig {
    /// Single-voxel recipe: MSE + ADAM at 1e-4 with 1e-6 decay.
    pub fn voxel_defaults() -> Self {
        TrainConfig {
            loss: LossKind::Mse,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            lr_decay: 1e-6,
            batch_size: 256,
            epochs: 100,
            seed: 0,
            validation_fraction: 0.1,
        }
    }

    /// Neighborhood recipe: same, with the learning rate lowered to 1e-5.
    pub fn neighborhood_defaults() -> Self {
        TrainConfig { learning_rate: 1e-5, ..Self::voxel_defaults() }
    }

    /// learning_rate == 0 is allowed: it is the standard frozen-control
    /// run for plateau detection.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.lr_decay < 0.0 {
            return Err(Error::Config(format!("lr decay {} must be >= 0", self.lr_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epoch count must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    /// Any 10-epoch window where validation loss moves less than 1e-6.
    pub fn plateaued(&self) -> bool {
        let vals: Vec<f64> = self.epochs.iter().map(|e| e.val_loss).collect();
        vals.windows(10).any(|w| {
            let lo = w.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            hi - lo < 1e-6
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
        for e in &self.epochs {
            writeln!(out, "{},{:.9e},{:.9e},{:.3}", e.epoch, e.train_loss, e.val_loss, e.seconds)
                .unwrap();
        }
        out
    }
}

/// Rows gathered into a contiguous batch buffer.
fn gather_rows<S: Scalar>(data: &[f32], width: usize, rows: &[usize], out: &mut Vec<S>) {
    out.clear();
    for &r in rows {
        out.extend(data[r * width..(r + 1) * width].iter().map(|&v| S::from_f64(v as f64)));
    }
}

fn batched_eval_loss<S: Scalar>(
    net: &MlpNet<S>,
    signals: &[f32],
    labels: &[f32],
    rows: &[usize],
    loss: LossKind,
    batch_size: usize,
) -> Result<f64> {
    let in_dim = net.input_dim();
    let out_dim = net.output_dim();
    let mut acc = 0.0f64;
    let mut input: Vec<S> = Vec::new();
    let mut targets: Vec<S> = Vec::new();
    for chunk in rows.chunks(batch_size) {
        gather_rows(signals, in_dim, chunk, &mut input);
        gather_rows(labels, out_dim, chunk, &mut targets);
        acc += net.evaluate_loss(&input, &targets, loss)? * chunk.len() as f64;
    }
    Ok(acc / rows.len() as f64)
}

/// Trains in place. `signals` is rows x input_dim, `labels` rows x
/// output_dim, both row-major. Deterministic for a fixed seed: the
/// split, the per-epoch shuffles, and the dropout masks all derive
/// from cfg.seed, and every reduction runs in a fixed order.
pub fn train<S: Scalar>(
    net: &mut MlpNet<S>,
    signals: &[f32],
    labels: &[f32],
    rows: usize,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let in_dim = net.input_dim();
    let out_dim = net.output_dim();
    if signals.len() != rows * in_dim {
        return Err(Error::Train(format!(
            "signal block holds {} values, expected {rows} x {in_dim}",
            signals.len()
        )));
    }
    if labels.len() != rows * out_dim {
        return Err(Error::Train(format!(
            "label block holds {} values, expected {rows} x {out_dim}",
            labels.len()
        )));
    }
    if rows == 0 {
        return Err(Error::Train("empty dataset".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..rows).collect();
    indices.shuffle(&mut rng);
    let val_count = ((rows as f64) * cfg.validation_fraction).round() as usize;
    let val_count = val_count.min(rows.saturating_sub(1));
    let (val_rows, train_rows) = indices.split_at(val_count);
    let val_rows = val_rows.to_vec();
    let mut train_order = train_rows.to_vec();

    let mut opt = OptimizerState::new(cfg.optimizer, net);
    let penult = net.layers.last().unwrap().in_dim;
    let mut history = TrainHistory::default();
    let mut input: Vec<S> = Vec::new();
    let mut targets: Vec<S> = Vec::new();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        train_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;

        for (batch_idx, chunk) in train_order.chunks(cfg.batch_size).enumerate() {
            gather_rows(signals, in_dim, chunk, &mut input);
            gather_rows(labels, out_dim, chunk, &mut targets);
            let mask = if net.dropout_rate > 0.0 {
                DropoutMask::sample(&mut rng, chunk.len() * penult, net.dropout_rate)
            } else {
                DropoutMask::keep_all(chunk.len() * penult)
            };
            let (_, cache) = net.forward_train(&input, &mask)?;
            let (loss, grads) = net.loss_and_grad(&cache, &targets, cfg.loss, &mask)?;
            if !loss.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            let lr_t = decayed_lr(cfg.learning_rate, cfg.lr_decay, opt.steps());
            opt.step(net, &grads, lr_t);
            epoch_loss += loss * chunk.len() as f64;
            seen += chunk.len();
        }

        let train_loss = epoch_loss / seen as f64;
        let val_loss = if val_rows.is_empty() {
            train_loss
        } else {
            batched_eval_loss(net, signals, labels, &val_rows, cfg.loss, cfg.batch_size)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Train(format!("non-finite validation loss at epoch {epoch}")));
        }
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(history)
}

/// One sweep axis combination.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepVariant {
    pub name: String,
    pub output_activation: Activation,
    pub config: TrainConfig,
}

/// The full loss x activation x optimizer grid over a base recipe.
pub fn full_grid(base: &TrainConfig) -> Vec<SweepVariant> {
    let mut out = Vec::with_capacity(8);
    for loss in [LossKind::Mse, LossKind::Mae] {
        for act in [Activation::Sigmoid, Activation::Tanh] {
            for opt in [OptimizerKind::Adam, OptimizerKind::Rmsprop] {
                let loss_tag = match loss {
                    LossKind::Mse => "mse",
                    LossKind::Mae => "mae",
                };
                let opt_tag = match opt {
                    OptimizerKind::Adam => "adam",
                    OptimizerKind::Rmsprop => "rmsprop",
                };
                out.push(SweepVariant {
                    name: format!("{loss_tag}-{}-{opt_tag}", act.tag()),
                    output_activation: act,
                    config: TrainConfig { loss, optimizer: opt, ..base.clone() },
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRun {
    pub variant: String,
    pub repeat: usize,
    pub seed: u64,
    pub plateaued: bool,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SweepReport {
    pub runs: Vec<SweepRun>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,repeat,seed,epoch,train_loss,val_loss,plateau\n");
        for run in &self.runs {
            for e in &run.history.epochs {
                writeln!(
                    out,
                    "{},{},{},{},{:.9e},{:.9e},{}",
                    run.variant, run.repeat, run.seed, e.epoch, e.train_loss, e.val_loss,
                    run.plateaued as u8
                )
                .unwrap();
            }
        }
        out
    }
}

/// Trains every variant `repeats` times on fresh models with distinct
/// seeds; plateau runs are flagged, never dropped.
pub fn sweep(
    signals: &[f32],
    labels: &[f32],
    rows: usize,
    layer_dims: &[usize],
    dropout_rate: f64,
    variants: &[SweepVariant],
    repeats: usize,
    master_seed: u64,
) -> Result<SweepReport> {
    if variants.is_empty() {
        return Err(Error::Config("sweep needs at least one variant".into()));
    }
    if repeats == 0 {
        return Err(Error::Config("sweep needs at least one repeat".into()));
    }
    let mut report = SweepReport::default();
    for (vi, variant) in variants.iter().enumerate() {
        for repeat in 0..repeats {
            let seed = master_seed
                .wrapping_add((vi as u64) << 32)
                .wrapping_add(repeat as u64);
            let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net: MlpNet<f32> = init_model(
                layer_dims,
                Activation::Relu,
                variant.output_activation,
                dropout_rate,
                &mut init_rng,
            )?;
            let cfg = TrainConfig { seed, ..variant.config.clone() };
            let history = train(&mut net, signals, labels, rows, &cfg)?;
            report.runs.push(SweepRun {
                variant: variant.name.clone(),
                repeat,
                seed,
                plateaued: history.plateaued(),
                history,
            });
        }
    }
    Ok(report)
}
