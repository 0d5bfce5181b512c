//! SGD training of single- and multi-profile models, evaluation and
//! batch-norm calibration.

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_crop_flip, Dataset};
use crate::error::{IdpError, Result};
use crate::layers::{Pass, Sgd};
use crate::networks::Model;
use crate::tensor::{softmax_cross_entropy, BnMode, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of the epoch budget at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Random crop and horizontal flip on training batches.
    pub augment: bool,
    /// Batches run in train mode after each stage to refresh its running statistics.
    pub calibration_batches: usize,
    /// Stop each stage after this many optimizer steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestones: vec![0.5, 0.75],
            lr_decay: 0.1,
            seed: 0,
            precision: Precision::F32,
            augment: false,
            calibration_batches: 50,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(IdpError::config(format!("train.{field}"), msg));
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must be in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("lr_milestones", "fractions must be in [0, 1]");
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return bad("lr_decay", "must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).floor() as usize)
            .count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub profile: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits.data().chunks_exact(c).zip(labels).filter(|(row, &l)| argmax(row) == l).count()
}

/// Trains the stage of `profile`: forward at the profile's upper end,
/// updates limited to its stage masks. The data order comes from `seed + profile`.
/// `log` runs after every epoch.
pub fn train_stage<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    profile: usize,
    log: &mut dyn FnMut(&EpochLog, &Model<T>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(IdpError::argument("empty training set"));
    }
    let masks = model.stage_masks(profile)?;
    let p = model.ranges[profile].hi;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(profile as u64));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let sgd = Sgd { lr: cfg.lr_at(epoch), momentum: cfg.momentum, weight_decay: cfg.weight_decay };
        let mut order: Vec<usize> = (0..data.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (mut x, y) = data.batch(chunk);
            if cfg.augment {
                augment_crop_flip(&mut x, &mut rng);
            }
            let x = x.cast::<T>();
            let mut pass = Pass::train(profile);
            let logits = model.forward(&x, p, profile, &mut pass)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                model.clear_caches();
                return Err(IdpError::Divergence { step, loss });
            }
            model.zero_grad(profile);
            model.backward(&grad, profile, &masks)?;
            model.sgd_step(&sgd, profile, &masks);
            loss_sum += loss * chunk.len() as f64;
            hits += correct(&logits, &y);
            seen += chunk.len();
            step += 1;
            if cfg.max_steps.is_some_and(|m| step >= m) {
                let row = EpochLog { profile, epoch, lr: sgd.lr, loss: loss_sum / seen as f64, train_accuracy: hits as f64 / seen as f64 };
                log(&row, model)?;
                history.push(row);
                break 'epochs;
            }
        }
        let row = EpochLog { profile, epoch, lr: sgd.lr, loss: loss_sum / seen as f64, train_accuracy: hits as f64 / seen as f64 };
        info!("profile {} epoch {} lr {:.4} loss {:.4} acc {:.4}", profile + 1, epoch + 1, row.lr, row.loss, row.train_accuracy);
        log(&row, model)?;
        history.push(row);
    }
    calibrate(model, data, profile, cfg.calibration_batches, cfg.batch_size, cfg.seed.wrapping_add(profile as u64))?;
    Ok(history)
}

/// Trains a single-profile model on all channels.
pub fn train_single<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog, &Model<T>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if model.profiles() != 1 {
        return Err(IdpError::argument(format!("train_single on a model with {} profiles", model.profiles())));
    }
    train_stage(model, data, cfg, 0, log)
}

/// Trains every profile in range order; `cfgs` holds one config per stage
/// (or a single config for all of them).
pub fn train_multi<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    cfgs: &[TrainConfig],
    log: &mut dyn FnMut(&EpochLog, &Model<T>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if cfgs.len() != 1 && cfgs.len() != model.profiles() {
        return Err(IdpError::config("train", format!("{} stage configs for {} profiles", cfgs.len(), model.profiles())));
    }
    let mut history = Vec::new();
    for s in 0..model.profiles() {
        let cfg = &cfgs[s.min(cfgs.len() - 1)];
        history.extend(train_stage(model, data, cfg, s, log)?);
    }
    Ok(history)
}

/// Re-estimates the running statistics `profile` uses, at its upper end,
/// as the plain average over `batches` training batches. Nothing else changes.
pub fn calibrate<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    profile: usize,
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    if batches == 0 || !model.has_batch_norm() {
        return Ok(());
    }
    let order = data.shuffled_order(seed ^ 0x5eed);
    let p = model.ranges[profile].hi;
    let n = batches.min(order.len().div_ceil(batch_size));
    for (i, chunk) in order.chunks(batch_size).take(n).enumerate() {
        let (x, _) = data.batch(chunk);
        let mut pass = Pass::train(profile);
        pass.keep_cache = false;
        // 1/(i+1) turns the running update into a cumulative mean
        pass.bn_momentum = 1.0 / (i + 1) as f64;
        model.forward(&x.cast::<T>(), p, profile, &mut pass)?;
    }
    Ok(())
}

/// Top-1 accuracy at IDP fraction `p`. Without `profile`, the profile whose
/// range contains `p` is used.
pub fn evaluate<T: Scalar>(model: &mut Model<T>, data: &Dataset, p: f64, profile: Option<usize>) -> Result<f64> {
    let profile = match profile {
        Some(s) => s,
        None => model.select_profile(p)?,
    };
    if data.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut hits = 0;
    for chunk in idx.chunks(500) {
        let (x, y) = data.batch(chunk);
        let mut pass = Pass::eval(profile);
        debug_assert_eq!(pass.mode, BnMode::Eval);
        let logits = model.forward(&x.cast::<T>(), p, profile, &mut pass)?;
        hits += correct(&logits, &y);
    }
    Ok(hits as f64 / data.len() as f64)
}
