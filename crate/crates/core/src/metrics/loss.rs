//! Segmentation objective: pixel-weighted binary cross-entropy plus smoothed
//! Dice, both on logits.
//!
//! The tape versions ([`weighted_bce`], [`dice_loss`], [`total_loss`]) are
//! differentiable; the `*_value` functions compute the same numbers on
//! plain slices for evaluation and hard example mining.

use crate::error::Result;
use crate::tensor::{Scalar, Tape, Var};

#[inline]
fn softplus_bce(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean over all pixels of `w · BCE(sigmoid(z), y)`.
pub fn weighted_bce_value<T: Scalar>(logits: &[T], target: &[T], weight: &[T]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let s: f64 = logits
        .iter()
        .zip(target)
        .zip(weight)
        .map(|((&z, &y), &w)| w.f64() * softplus_bce(z.f64(), y.f64()))
        .sum();
    s / logits.len() as f64
}

/// `1 − (2Σyŷ + 1)/(Σy + Σŷ + 1)` per sample, averaged over `batch` samples.
pub fn dice_value<T: Scalar>(logits: &[T], target: &[T], batch: usize) -> f64 {
    if logits.is_empty() || batch == 0 {
        return 0.0;
    }
    let per = logits.len() / batch;
    logits
        .chunks_exact(per)
        .zip(target.chunks_exact(per))
        .map(|(zs, ys)| {
            let mut inter = 0.0;
            let mut total = 0.0;
            for (&z, &y) in zs.iter().zip(ys) {
                let p = sigmoid(z.f64());
                inter += y.f64() * p;
                total += y.f64() + p;
            }
            1.0 - (2.0 * inter + 1.0) / (total + 1.0)
        })
        .sum::<f64>()
        / batch as f64
}

/// Weighted BCE plus Dice for every sample of a batch separately.
pub fn per_sample_total_loss(logits: &[f32], target: &[f32], weight: &[f32], batch: usize) -> Vec<f64> {
    if batch == 0 {
        return Vec::new();
    }
    let per = logits.len() / batch;
    (0..batch)
        .map(|b| {
            let r = b * per..(b + 1) * per;
            weighted_bce_value(&logits[r.clone()], &target[r.clone()], &weight[r.clone()])
                + dice_value(&logits[r.clone()], &target[r], 1)
        })
        .collect()
}

pub fn weighted_bce<T: Scalar>(tape: &mut Tape<'_, T>, logits: Var, mask: Var, weight: Var) -> Result<Var> {
    tape.weighted_bce(logits, mask, weight)
}

pub fn dice_loss<T: Scalar>(tape: &mut Tape<'_, T>, logits: Var, mask: Var) -> Result<Var> {
    tape.dice(logits, mask)
}

/// Unweighted sum of the two terms.
pub fn total_loss<T: Scalar>(tape: &mut Tape<'_, T>, logits: Var, mask: Var, weight: Var) -> Result<Var> {
    let bce = tape.weighted_bce(logits, mask, weight)?;
    let dice = tape.dice(logits, mask)?;
    tape.add(bce, dice)
}
