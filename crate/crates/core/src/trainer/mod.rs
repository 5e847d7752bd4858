//! Training loop, validation, early stopping and hard example mining.
//!
//! Runs are deterministic for a given seed: the epoch shuffle, every tile's
//! augmentation draw and every batch's dropout masks come from independent
//! ChaCha streams keyed by position, and the optimizer consumes batches in a
//! fixed order. Worker threads only parallelize augmentation and validation,
//! both of which collect results in input order.

pub mod optim;
pub mod schedule;

pub use optim::{Optimizer, OptimizerConfig};
pub use schedule::{lr_at, PlateauAction, PlateauTracker, Schedule, BOOST_FACTOR};

use crate::error::{Error, Result};
use crate::metrics::{best_threshold, per_sample_total_loss, total_loss, Confusion};
use crate::networks::{Arch, NetworkSpec};
use crate::preprocess::ScalerParams;
use crate::raster::{augment, AugmentConfig, TileRecord};
use crate::tensor::{Mode, ParamStore, Shape, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub arch: Arch,
    pub epochs: u32,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub base_lr: f64,
    pub warmup: u32,
    pub constant_lr: bool,
    pub boost: f64,
    pub reduce_factor: f64,
    pub reduce_patience: usize,
    pub min_lr: f64,
    pub early_stop_patience: usize,
    pub hem_rounds: usize,
    pub hem_fraction: f64,
    /// Fine-tuning epochs after each mining round.
    pub hem_epochs: u32,
    /// `None` trains on the tiles as stored.
    pub augment: Option<AugmentConfig>,
    /// Batch size for validation and mining passes.
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_arch(Arch::ModelB)
    }
}

impl TrainConfig {
    pub fn for_arch(arch: Arch) -> Self {
        let a = TrainConfig {
            arch,
            epochs: 250,
            batch_size: 32,
            optimizer: OptimizerConfig::ADAM,
            base_lr: 1e-3,
            warmup: 5,
            constant_lr: false,
            boost: BOOST_FACTOR,
            reduce_factor: 0.5,
            reduce_patience: 75,
            min_lr: 1e-5,
            early_stop_patience: 125,
            hem_rounds: 2,
            hem_fraction: 0.2,
            hem_epochs: 25,
            augment: Some(AugmentConfig::default()),
            eval_batch: 32,
            seed: 0,
        };
        match arch {
            Arch::ModelA => a,
            Arch::ModelB => TrainConfig {
                optimizer: OptimizerConfig::RMSPROP,
                batch_size: 64,
                ..a
            },
            Arch::Baseline => TrainConfig {
                epochs: 125,
                base_lr: 1e-4,
                constant_lr: true,
                reduce_patience: 40,
                early_stop_patience: 80,
                ..a
            },
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            warmup: self.warmup,
            epochs: self.epochs,
            boost: self.boost,
            min_lr: self.min_lr,
            constant: self.constant_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("train config", d));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !self.constant_lr && self.warmup == 0 {
            return bad("warmup must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || self.min_lr < 0.0 {
            return bad(format!("learning rates must be positive, got base {} min {}", self.base_lr, self.min_lr));
        }
        if !(0.0..=1.0).contains(&self.hem_fraction) {
            return bad(format!("hem_fraction {} outside [0, 1]", self.hem_fraction));
        }
        if !(self.reduce_factor > 0.0 && self.reduce_factor <= 1.0) {
            return bad(format!("reduce_factor {} outside (0, 1]", self.reduce_factor));
        }
        Ok(())
    }
}

/// Independent RNG stream for `(tag, a, b)` under a run seed.
pub fn stream_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut z = seed;
    for v in [tag, a, b] {
        z = z.wrapping_add(v.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const TAG_SHUFFLE: u64 = 1;
const TAG_AUGMENT: u64 = 2;
const TAG_DROPOUT: u64 = 3;

/// Network input plus loss targets for a group of tiles.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub mask: Tensor,
    pub weight: Tensor,
}

/// Stacks tiles into NCHW tensors, standardizing channels when a scaler is
/// given.
pub fn make_batch(tiles: &[&TileRecord], scaler: Option<&ScalerParams>) -> Result<Batch> {
    let first = tiles.first().ok_or_else(|| Error::contract("make_batch", "empty batch"))?;
    let (s, c) = (first.size, first.channels);
    if let Some(sc) = scaler {
        if sc.len() != c {
            return Err(Error::Shape {
                op: "make_batch",
                operand: "scaler",
                axis: "C",
                expected: c,
                found: sc.len(),
            });
        }
    }
    let plane = s * s;
    let mut x = Vec::with_capacity(tiles.len() * c * plane);
    let mut mask = Vec::with_capacity(tiles.len() * plane);
    let mut weight = Vec::with_capacity(tiles.len() * plane);
    for t in tiles {
        if t.size != s || t.channels != c {
            return Err(Error::contract(
                "make_batch",
                format!("tile {}x{}x{} differs from {c}x{s}x{s}", t.channels, t.size, t.size),
            ));
        }
        let start = x.len();
        x.extend_from_slice(&t.data);
        if let Some(sc) = scaler {
            sc.apply(&mut x[start..], plane)?;
        }
        mask.extend(t.mask.data.iter().map(|&m| m as f32));
        if t.weights.len() == plane {
            weight.extend_from_slice(&t.weights);
        } else {
            weight.extend(std::iter::repeat_n(1.0, plane));
        }
    }
    let n = tiles.len();
    Ok(Batch {
        x: Tensor::from_vec(Shape::new(n, c, s, s), x)?,
        mask: Tensor::from_vec(Shape::new(n, 1, s, s), mask)?,
        weight: Tensor::from_vec(Shape::new(n, 1, s, s), weight)?,
    })
}

/// Inference-mode outputs over a tile set, in tile order.
#[derive(Debug, Clone, Default)]
pub struct TileEval {
    pub prob: Vec<f32>,
    pub mask: Vec<u8>,
    pub losses: Vec<f64>,
}

impl TileEval {
    pub fn mean_loss(&self) -> f64 {
        if self.losses.is_empty() {
            0.0
        } else {
            self.losses.iter().sum::<f64>() / self.losses.len() as f64
        }
    }

    /// `(threshold, F1)` of the best grid threshold.
    pub fn best_threshold(&self) -> (f32, f64) {
        best_threshold(&self.prob, &self.mask)
    }
}

pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-tile loss and pixel probabilities without augmentation.
pub fn evaluate_tiles(
    spec: &NetworkSpec,
    params: &ParamStore,
    tiles: &[TileRecord],
    scaler: Option<&ScalerParams>,
    batch: usize,
) -> Result<TileEval> {
    let parts: Vec<TileEval> = tiles
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let refs: Vec<&TileRecord> = chunk.iter().collect();
            let b = make_batch(&refs, scaler)?;
            let logits = spec.predict_logits(params, b.x)?;
            let losses = per_sample_total_loss(logits.data(), b.mask.data(), b.weight.data(), refs.len());
            Ok(TileEval {
                prob: logits.data().iter().map(|&z| sigmoid(z)).collect(),
                mask: chunk.iter().flat_map(|t| t.mask.data.iter().copied()).collect(),
                losses,
            })
        })
        .collect::<Result<_>>()?;
    let mut out = TileEval::default();
    for p in parts {
        out.prob.extend(p.prob);
        out.mask.extend(p.mask);
        out.losses.extend(p.losses);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_f1: f64,
    pub val_f1: f64,
    pub threshold: f32,
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,train_f1,val_f1,lr";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.train_f1, r.val_f1, r.lr
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: u32,
    pub val_f1: f64,
    pub threshold: f32,
}

/// Everything that evolves across epochs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore,
    pub optimizer: Optimizer,
    pub tracker: PlateauTracker,
    /// Last completed epoch, 0 before training.
    pub epoch: u32,
    pub best: Option<BestRecord>,
    pub best_params: ParamStore,
}

impl TrainState {
    pub fn new(params: ParamStore, cfg: &TrainConfig) -> Self {
        TrainState {
            optimizer: Optimizer::new(cfg.optimizer, &params),
            tracker: PlateauTracker::new(
                cfg.base_lr,
                cfg.reduce_factor,
                cfg.reduce_patience,
                cfg.early_stop_patience,
                cfg.min_lr,
            ),
            epoch: 0,
            best: None,
            best_params: params.clone(),
            params,
        }
    }

    /// Restarts best tracking and patience counters from the best weights,
    /// keeping the optimizer moments, the epoch counter and the base rate.
    pub fn restart_from_best(&mut self) {
        self.params = self.best_params.clone();
        self.tracker.best = None;
        self.tracker.best_epoch = None;
        self.tracker.since_best = 0;
        self.tracker.since_reduce = 0;
        self.best = None;
    }
}

/// Passed to the per-epoch callback.
pub struct EpochUpdate<'a> {
    pub record: &'a EpochRecord,
    pub action: PlateauAction,
    pub state: &'a TrainState,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Runs up to `epochs` further epochs on `state`.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs(
    spec: &NetworkSpec,
    state: &mut TrainState,
    train: &[TileRecord],
    val: &[TileRecord],
    scaler: Option<&ScalerParams>,
    cfg: &TrainConfig,
    epochs: u32,
    on_epoch: &mut dyn FnMut(&EpochUpdate<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training data", "train and validation sets must be non-empty"));
    }
    let schedule = cfg.schedule();
    let mut history = Vec::new();
    for _ in 0..epochs {
        let epoch = state.epoch + 1;
        let lr = lr_at(epoch, &schedule, state.tracker.base_lr)?;
        let (train_loss, train_f1) = run_epoch(spec, state, train, scaler, cfg, epoch, lr)?;
        let ev = evaluate_tiles(spec, &state.params, val, scaler, cfg.eval_batch)?;
        let (threshold, val_f1) = ev.best_threshold();
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss: ev.mean_loss(),
            train_f1,
            val_f1,
            threshold,
            lr,
        };
        state.epoch = epoch;
        let action = state.tracker.observe(epoch, val_f1);
        if action == PlateauAction::Improved {
            state.best = Some(BestRecord {
                epoch,
                val_f1,
                threshold,
            });
            state.best_params = state.params.clone();
        }
        log::info!(
            "epoch {epoch}: loss {train_loss:.4} val_loss {:.4} train_f1 {train_f1:.4} val_f1 {val_f1:.4} lr {lr:.3e}",
            record.val_loss
        );
        history.push(record);
        on_epoch(&EpochUpdate {
            record: &record,
            action,
            state,
        })?;
        if action == PlateauAction::Stop {
            return Ok(TrainOutcome {
                history,
                stopped_early: true,
            });
        }
    }
    Ok(TrainOutcome {
        history,
        stopped_early: false,
    })
}

/// One pass over the shuffled, augmented training set. Returns the mean
/// batch loss and the pixel F1 at probability 0.5.
fn run_epoch(
    spec: &NetworkSpec,
    state: &mut TrainState,
    train: &[TileRecord],
    scaler: Option<&ScalerParams>,
    cfg: &TrainConfig,
    epoch: u32,
    lr: f64,
) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, TAG_SHUFFLE, epoch as u64, 0)));
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    let mut confusion = Confusion::default();
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let tiles: Vec<TileRecord> = match &cfg.augment {
            Some(acfg) => chunk
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let pos = (b * cfg.batch_size + k) as u64;
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, TAG_AUGMENT, epoch as u64, pos));
                    augment(&train[i], acfg, &mut rng)
                })
                .collect(),
            None => chunk.iter().map(|&i| train[i].clone()).collect(),
        };
        let refs: Vec<&TileRecord> = tiles.iter().collect();
        let batch = make_batch(&refs, scaler)?;
        let dropout_seed = stream_seed(cfg.seed, TAG_DROPOUT, epoch as u64, b as u64);
        let mut tape = Tape::new(&state.params, Mode::Train, dropout_seed);
        let x = tape.constant(batch.x);
        let mask = tape.constant(batch.mask.clone());
        let weight = tape.constant(batch.weight);
        let logits = spec.forward(&mut tape, x)?;
        let loss = total_loss(&mut tape, logits, mask, weight)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            let origins: Vec<String> = tiles
                .iter()
                .map(|t| format!("{}@({},{})", t.origin.raster, t.origin.x0, t.origin.y0))
                .collect();
            return Err(Error::NonFinite {
                what: format!("training loss at epoch {epoch}, batch {b}"),
                detail: format!("loss {value}; tiles {}", origins.join(" ")),
            });
        }
        for (&z, &m) in tape.value(logits).data().iter().zip(batch.mask.data()) {
            confusion.add(z >= 0.0, m >= 0.5);
        }
        let grads = tape.backward(loss)?;
        state.params.apply_running_stats(&grads);
        state.optimizer.apply(&mut state.params, &grads, lr)?;
        loss_sum += value;
        batches += 1;
    }
    Ok((loss_sum / batches.max(1) as f64, confusion.f1()))
}

/// Indices of the `round(fraction · n)` highest losses, ties broken by the
/// lower index.
pub fn select_hard(losses: &[f64], fraction: f64) -> Vec<usize> {
    let k = ((fraction.clamp(0.0, 1.0) * losses.len() as f64).round() as usize).min(losses.len());
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Scores every tile with the current model and returns the hardest ones,
/// unaugmented, hardest first.
pub fn hem_round(
    spec: &NetworkSpec,
    params: &ParamStore,
    tiles: &[TileRecord],
    scaler: Option<&ScalerParams>,
    fraction: f64,
    batch: usize,
) -> Result<Vec<TileRecord>> {
    if tiles.is_empty() || fraction <= 0.0 {
        return Ok(Vec::new());
    }
    let ev = evaluate_tiles(spec, params, tiles, scaler, batch)?;
    Ok(select_hard(&ev.losses, fraction).into_iter().map(|i| tiles[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HemRoundReport {
    pub round: usize,
    pub selected: Vec<crate::raster::TileOrigin>,
    /// Best validation F1 before this round's fine-tuning.
    pub before: Option<BestRecord>,
    /// Best validation F1 reached while fine-tuning.
    pub after: Option<BestRecord>,
    pub train_tiles: usize,
}

/// Up to `cfg.hem_rounds` rounds of: mine the hardest unfiltered tiles with
/// the best weights so far, append them to `train`, restart best tracking
/// from the best weights and fine-tune for `cfg.hem_epochs`.
#[allow(clippy::too_many_arguments)]
pub fn hard_example_mining(
    spec: &NetworkSpec,
    state: &mut TrainState,
    train: &mut Vec<TileRecord>,
    unfiltered: &[TileRecord],
    val: &[TileRecord],
    scaler: Option<&ScalerParams>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochUpdate<'_>) -> Result<()>,
) -> Result<(Vec<HemRoundReport>, Vec<EpochRecord>)> {
    let mut reports = Vec::new();
    let mut history = Vec::new();
    for round in 1..=cfg.hem_rounds {
        let hard = hem_round(spec, &state.best_params, unfiltered, scaler, cfg.hem_fraction, cfg.eval_batch)?;
        if hard.is_empty() {
            break;
        }
        let selected = hard.iter().map(|t| t.origin).collect();
        train.extend(hard);
        let before = state.best;
        state.restart_from_best();
        log::info!("hard example mining round {round}: {} training tiles", train.len());
        let out = train_epochs(spec, state, train, val, scaler, cfg, cfg.hem_epochs, on_epoch)?;
        history.extend(out.history);
        reports.push(HemRoundReport {
            round,
            selected,
            before,
            after: state.best,
            train_tiles: train.len(),
        });
    }
    Ok((reports, history))
}
